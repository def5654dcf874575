"""Operator surface: dataset generation, training, evaluation, ablation
grids and reasoning-trace export.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
abort. Every command is deterministic under a fixed --seed. Set
IPRM_NUM_THREADS to pin the BLAS thread count (exported before numpy spins
up its thread pools, best effort).
"""

from __future__ import annotations

import os

if os.environ.get("IPRM_NUM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["IPRM_NUM_THREADS"])

import argparse
import configparser
import json
import sys
from collections import Counter
from dataclasses import replace

import numpy as np

from .baselines import BaselineConfig
from .core import IprmConfig
from .encoders import Vocab, VocabError, VqaModel, make_batch
from .harness import (
    Adam,
    CheckpointError,
    TrainAbort,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .numerics import NumericsError
from .synth import (
    ANSWERS,
    ATTRIBUTE_VALUES,
    DatasetError,
    FAMILIES,
    GenerationError,
    QUESTION_TOKENS,
    generate_split,
    read_dataset,
    write_dataset,
)
from .traces import build_trace_record, read_trace, write_heatmaps, write_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_vocab() -> Vocab:
    return Vocab(QUESTION_TOKENS, ANSWERS)


# ---------------------------------------------------------------------------
# Config files: flat key=value with [model] / [train] / [baseline] sections
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "d_m": int, "n_op": int, "t_steps": int, "r": int, "w": int,
    "d_l": int, "d_v": int, "phi": str, "use_composition": bool,
    "result_values": str, "init_capacity": int,
}
_TRAIN_KEYS = {
    "lr": float, "clip": float, "plateau_factor": float,
    "plateau_threshold": float, "patience": int, "batch_size": int,
    "max_epochs": int, "seed": int, "lr_floor": float,
}
_BASELINE_KEYS = {"n_layers": int, "d_model": int, "n_heads": int}


def _parse_section(parser, section, known, target):
    if not parser.has_section(section):
        return target
    values = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise UsageError(f"config [{section}]: unknown key {key!r}")
        kind = known[key]
        try:
            if kind is bool:
                values[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                values[key] = kind(raw)
        except ValueError:
            raise UsageError(
                f"config [{section}] {key}={raw!r}: expected {kind.__name__}"
            ) from None
    return replace(target, **values)


def load_run_config(path):
    """-> (IprmConfig, TrainConfig, BaselineConfig overrides dict)."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as err:
        raise DatasetError(f"cannot read config {path}: {err}") from None
    except configparser.Error as err:
        raise UsageError(f"config parse error in {path}: {err}") from None
    model = _parse_section(parser, "model", _MODEL_KEYS, IprmConfig())
    train_cfg = _parse_section(parser, "train", _TRAIN_KEYS, TrainConfig())
    baseline = {}
    if parser.has_section("baseline"):
        for key, raw in parser.items("baseline"):
            if key not in _BASELINE_KEYS:
                raise UsageError(f"config [baseline]: unknown key {key!r}")
            try:
                baseline[key] = _BASELINE_KEYS[key](raw)
            except ValueError:
                raise UsageError(
                    f"config [baseline] {key}={raw!r}: expected "
                    f"{_BASELINE_KEYS[key].__name__}") from None
    return model, train_cfg, baseline


def _build_model(kind: str, config: IprmConfig, baseline_overrides,
                 seed: int, dtype) -> VqaModel:
    vocab = default_vocab()
    baseline = None
    if kind in ("cross", "concat"):
        baseline = BaselineConfig(variant=kind,
                                  d_model=baseline_overrides.get("d_model", config.d_m),
                                  n_layers=baseline_overrides.get("n_layers", 4),
                                  n_heads=baseline_overrides.get("n_heads", 8))
    return VqaModel(vocab, ATTRIBUTE_VALUES, config=config, baseline=baseline,
                    reasoner_kind=kind, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    families = FAMILIES
    if args.families:
        families = tuple(f.strip() for f in args.families.split(",") if f.strip())
        for fam in families:
            if fam not in FAMILIES:
                raise UsageError(
                    f"invalid family {fam!r}; choose from {', '.join(FAMILIES)}")
    os.makedirs(args.out, exist_ok=True)
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    for split, n in counts.items():
        samples = generate_split(args.seed, split, n, families)
        path = os.path.join(args.out, f"{split}.jsonl")
        write_dataset(samples, path)
        fam_hist = Counter(s.family for s in samples)
        len_hist = Counter(s.program_length for s in samples)
        print(json.dumps({
            "split": split, "n": len(samples), "path": path,
            "families": dict(sorted(fam_hist.items())),
            "program_lengths": {str(k): v for k, v in sorted(len_hist.items())},
        }, sort_keys=True))
    return EXIT_OK


def _load_split_files(data_dir):
    samples = []
    for split in ("train", "val", "test"):
        path = os.path.join(data_dir, f"{split}.jsonl")
        if os.path.exists(path):
            samples.extend(read_dataset(path))
    if not samples:
        raise DatasetError(f"no dataset files under {data_dir}")
    return samples


def cmd_train(args) -> int:
    if not os.path.isdir(args.data):
        raise DatasetError(f"dataset directory not found: {args.data}")
    config, train_cfg, baseline_overrides = (
        load_run_config(args.config) if args.config
        else (IprmConfig(), TrainConfig(), {}))
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.max_epochs is not None:
        train_cfg = replace(train_cfg, max_epochs=args.max_epochs)
    dtype = np.float32 if args.float32 else np.float64
    samples = _load_split_files(args.data)

    start_epoch, optimizer, rng_state, lr = 0, None, None, None
    records, val_history = [], []
    if args.resume:
        model, state = load_checkpoint(args.resume)
        optimizer = Adam(model.registry.parameters(), lr=train_cfg.lr)
        if state["optimizer"] is not None:
            optimizer.load_moments(state["optimizer"]["t"],
                                   state["optimizer"]["m"],
                                   state["optimizer"]["v"])
        start_epoch = (state["epoch"] + 1) if state["epoch"] is not None else 0
        rng_state = state["rng_state"]
        lr = state["lr"]
        val_history = state["val_history"]
        records = list(state["history"])
    else:
        model = _build_model(args.model, config, baseline_overrides,
                             seed=train_cfg.seed, dtype=dtype)

    metrics_path = args.metrics or (args.out_ckpt + ".metrics.jsonl")
    best = {"acc": -1.0}
    mode = "a" if args.resume else "w"
    with open(metrics_path, mode, encoding="utf-8") as metrics_fh:
        def on_epoch(record, mdl, opt, rng, next_lr, val_hist):
            records.append(record)
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()
            print(json.dumps(record, sort_keys=True))
            if record["val_accuracy"] >= best["acc"]:
                best["acc"] = record["val_accuracy"]
                save_checkpoint(args.out_ckpt, mdl, optimizer=opt,
                                history=list(records),
                                epoch=record["epoch"],
                                rng_state=rng.bit_generator.state,
                                lr=next_lr, val_history=val_hist)

        history = train(model, samples, train_cfg, on_epoch=on_epoch,
                        optimizer=optimizer, start_epoch=start_epoch,
                        initial_lr=lr, rng_state=rng_state,
                        val_history=val_history)
    print(json.dumps({"done": True, "epochs": len(history),
                      "best_val_accuracy": best["acc"],
                      "checkpoint": args.out_ckpt}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    if not samples:
        raise DatasetError(f"no samples in {args.data}")
    metrics = evaluate(model, samples, batch_size=args.batch_size)
    if args.json_lines:
        print(json.dumps(metrics, sort_keys=True))
    else:
        print(f"n = {metrics['n']}")
        print(f"accuracy = {metrics['accuracy']:.4f}")
        for fam, acc in sorted(metrics["per_family"].items()):
            print(f"family {fam:10s} acc = {acc:.4f} "
                  f"(n={metrics['family_counts'][fam]})")
        for length, acc in sorted(metrics["per_program_length"].items()):
            print(f"length {length:2d} acc = {acc:.4f} "
                  f"(n={metrics['length_counts'][length]})")
        print(f"padding_attention_mass = {metrics['padding_attention_mass']:.6f}")
    return EXIT_OK


def _parse_grid(spec: str) -> list:
    """'nop=1,6;t=1,9;opc=on,off;r=2;w=2' -> list of cell override dicts."""
    keys = {"nop": "n_op", "t": "t_steps", "opc": "use_composition",
            "r": "r", "w": "w", "dm": "d_m"}
    axes = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"grid axis {part!r} is not name=v1,v2,...")
        name, values = part.split("=", 1)
        name = name.strip().lower()
        if name not in keys:
            raise UsageError(
                f"unknown grid axis {name!r}; choose from {', '.join(keys)}")
        parsed = []
        for v in values.split(","):
            v = v.strip()
            if name == "opc":
                if v not in ("on", "off"):
                    raise UsageError("opc axis values must be on/off")
                parsed.append(v == "on")
            else:
                try:
                    parsed.append(int(v))
                except ValueError:
                    raise UsageError(f"grid axis {name}: bad value {v!r}") from None
        if not parsed:
            raise UsageError(f"grid axis {name} has no values")
        axes.append((keys[name], parsed))
    if not axes:
        raise UsageError("empty ablation grid")
    cells = [{}]
    for key, values in axes:
        cells = [dict(c, **{key: v}) for c in cells for v in values]
    return cells


def _run_cell(cell, base_config, train_cfg, samples, dtype):
    # A cell may be degenerate (n_op=1 with w=0 leaves the composition
    # attention nothing to attend to); report it instead of killing the grid.
    try:
        config = replace(base_config, **cell)
        model = _build_model("iprm", config, {}, seed=train_cfg.seed, dtype=dtype)
        history = train(model, samples, train_cfg)
    except (NumericsError, TrainAbort) as err:
        return {"cell": cell, "error": str(err)}
    best = max((h["val_accuracy"] for h in history), default=0.0)
    return {"cell": cell, "val_accuracy": best,
            "parameters": model.parameter_count()}


def _run_cell_entry(packed):
    return _run_cell(*packed)


def cmd_ablate(args) -> int:
    cells = _parse_grid(args.grid)
    if not os.path.isdir(args.data):
        raise DatasetError(f"dataset directory not found: {args.data}")
    config, train_cfg, _ = (load_run_config(args.config) if args.config
                            else (IprmConfig(), TrainConfig(), {}))
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.max_epochs is not None:
        train_cfg = replace(train_cfg, max_epochs=args.max_epochs)
    dtype = np.float32 if args.float32 else np.float64
    samples = _load_split_files(args.data)
    jobs = [(cell, config, train_cfg, samples, dtype) for cell in cells]
    if args.parallel > 1:
        import multiprocessing

        with multiprocessing.get_context("spawn").Pool(args.parallel) as pool:
            results = pool.map(_run_cell_entry, jobs)
    else:
        results = [_run_cell_entry(job) for job in jobs]
    for row in results:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_trace(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise DatasetError(
            f"sample index {args.index} out of range (dataset has {len(samples)})")
    if model.reasoner_kind != "iprm":
        raise UsageError("traces are only defined for the iprm reasoner")
    sample = samples[args.index]
    batch = make_batch([sample], model.vocab, ATTRIBUTE_VALUES)
    logits, out = model.forward(batch)
    pred_id = int(np.argmax(logits.data, axis=-1)[0])
    predicted = model.vocab.id_to_answer[pred_id]
    record = build_trace_record(sample, out.trace.sample(0), predicted)
    os.makedirs(args.out_dir, exist_ok=True)
    trace_path = os.path.join(args.out_dir, f"trace_{args.index:05d}.json")
    write_trace(record, trace_path)
    reloaded = read_trace(trace_path)
    paths = write_heatmaps(reloaded, args.out_dir)
    print(json.dumps({"trace": trace_path, "heatmaps": paths,
                      "predicted": predicted, "gold": sample.answer},
                     sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="iprm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate dataset splits")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=20000)
    p.add_argument("--n-val", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--families", default="")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--model", choices=("iprm", "cross", "concat"),
                   default="iprm")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--metrics", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--float32", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--json-lines", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train a grid of configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--float32", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("trace", help="export a reasoning trace with heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, VocabError, GenerationError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainAbort, NumericsError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
