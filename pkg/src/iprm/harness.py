"""Training loop, optimizer, schedule, metrics and checkpointing.

Everything is deterministic under a fixed seed: shuffling comes from one
generator, the numerics path is single-threaded, and metric records contain
no wall-clock fields. Checkpoints are a versioned binary container (JSON
header + raw little-endian parameter blocks) whose load(save(model))
round-trip reproduces forward outputs bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .baselines import BaselineConfig
from .core import IprmConfig
from .encoders import Batch, Vocab, VqaModel, make_batch
from .numerics import NumericsError, cross_entropy
from .synth import ATTRIBUTE_VALUES, DatasetError

CHECKPOINT_MAGIC = b"IPRMCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, corrupt or version-mismatched checkpoint files."""


class TrainAbort(Exception):
    """Numerical failure during training; carries step diagnostics."""

    def __init__(self, message, epoch=None, step=None, lr=None, grad_norm=None):
        super().__init__(message)
        self.diagnostics = {"epoch": epoch, "step": step, "lr": lr,
                            "grad_norm": grad_norm}

    def __str__(self):
        base = super().__str__()
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items()
                            if v is not None)
        return f"{base} ({details})" if details else base


@dataclass
class TrainConfig:
    lr: float = 1e-4
    clip: float = 8.0
    plateau_factor: float = 0.5
    plateau_threshold: float = 0.001
    patience: int = 0
    batch_size: int = 64
    max_epochs: int = 30
    seed: int = 0
    lr_floor: float = 1e-6


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class Adam:
    """First/second-moment optimizer with bias correction."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.value.grad
            if g is None:
                raise NumericsError(f"missing gradient for parameter {p.name}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value.data -= lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.value.grad = None

    def state(self) -> dict:
        return {"t": self.t, "names": [p.name for p in self.params]}

    def load_moments(self, t, moments_m, moments_v):
        self.t = t
        for p in self.params:
            self.m[p.name] = moments_m[p.name]
            self.v[p.name] = moments_v[p.name]


def adam_step(params, state: Adam, lr=None):
    """Functional spelling of ``Adam.step`` (gradients live on the params)."""
    state.step(lr=lr)


def clip_gradients(params, threshold: float) -> float:
    """Global-norm clipping; returns the scale that was applied."""
    total = 0.0
    grads = []
    for p in params:
        g = p.value.grad
        if g is not None:
            grads.append(g)
            total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm <= threshold or norm == 0.0:
        return 1.0
    scale = threshold / norm
    for g in grads:
        g *= scale
    return scale


def gradient_norm(params) -> float:
    total = sum(float((p.value.grad * p.value.grad).sum())
                for p in params if p.value.grad is not None)
    return float(np.sqrt(total))


def lr_plateau_step(history, current_lr: float, config: TrainConfig) -> float:
    """Reduce the rate when validation accuracy stops improving.

    Improvement means beating the running best by more than the threshold;
    the first entry only establishes the baseline. With patience 0 a single
    flat epoch already triggers the reduction.
    """
    if not history:
        raise ValueError("plateau schedule needs at least one accuracy")
    best = history[0]
    since_improvement = 0
    for acc in history[1:]:
        if acc > best + config.plateau_threshold:
            best = acc
            since_improvement = 0
        else:
            since_improvement += 1
    if len(history) > 1 and since_improvement > config.patience:
        return current_lr * config.plateau_factor
    return current_lr


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _bucketize(correct_flags, keys):
    hits, totals = {}, {}
    for ok, key in zip(correct_flags, keys):
        totals[key] = totals.get(key, 0) + 1
        hits[key] = hits.get(key, 0) + int(ok)
    return {k: hits[k] / totals[k] for k in totals}, totals


def evaluate(model: VqaModel, samples, batch_size: int = 256) -> dict:
    """Exact-match accuracy plus per-family and per-program-length buckets.

    Also reports the mean visual attention mass landing on padded object
    slots (a monitored quantity, not an assertion).
    """
    if not samples:
        return {"accuracy": 0.0, "per_family": {}, "per_program_length": {},
                "n": 0, "family_counts": {}, "length_counts": {},
                "padding_attention_mass": 0.0}
    flags, families, lengths = [], [], []
    pad_mass_total, pad_mass_batches = 0.0, 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_batch(chunk, model.vocab, ATTRIBUTE_VALUES)
        logits, out = model.forward(batch)
        pred = np.argmax(logits.data, axis=-1)
        flags.extend((pred == batch.answer_ids).tolist())
        families.extend(batch.families)
        lengths.extend(batch.program_lengths.tolist())
        if out is not None and batch.obj_mask.shape[1]:
            pad = 1.0 - batch.obj_mask  # [b, n_v]
            mass = (out.trace.vis_atts * pad[:, None, None, :]).sum(axis=-1)
            pad_mass_total += float(mass.mean())
            pad_mass_batches += 1
    per_family, family_counts = _bucketize(flags, families)
    per_length, length_counts = _bucketize(flags, lengths)
    return {
        "accuracy": sum(flags) / len(flags),
        "per_family": per_family,
        "per_program_length": {int(k): v for k, v in per_length.items()},
        "family_counts": family_counts,
        "length_counts": {int(k): v for k, v in length_counts.items()},
        "n": len(flags),
        "padding_attention_mass": (pad_mass_total / pad_mass_batches
                                   if pad_mass_batches else 0.0),
    }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(model: VqaModel, samples, config: TrainConfig, on_epoch=None,
          optimizer: Adam | None = None, start_epoch: int = 0,
          initial_lr: float | None = None, rng_state=None,
          val_history=None) -> list:
    """Epoch loop over the "train" split with validation on the "val" split.

    Returns the list of per-epoch metric records. ``on_epoch(record, model,
    optimizer, rng)`` runs after each epoch (checkpointing hook). The resume
    arguments restore a previous run's optimizer, schedule and shuffle
    state so epoch numbering continues.
    """
    train_samples = [s for s in samples if s.split == "train"]
    val_samples = [s for s in samples if s.split == "val"]
    if not train_samples:
        raise DatasetError("training split is empty")

    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    opt = optimizer or Adam(model.registry.parameters(), lr=config.lr)
    lr = config.lr if initial_lr is None else initial_lr
    val_history = list(val_history or [])
    history = []

    for epoch in range(start_epoch, config.max_epochs):
        order = rng.permutation(len(train_samples))
        losses = []
        grad_norm = 0.0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_samples[i] for i in order[start:start + config.batch_size]]
            batch = make_batch(chunk, model.vocab, ATTRIBUTE_VALUES)
            logits, _ = model.forward(batch)
            loss = cross_entropy(logits, batch.answer_ids)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainAbort("non-finite training loss", epoch=epoch,
                                 step=step, lr=lr, grad_norm=grad_norm)
            model.zero_grad()
            loss.backward()
            grad_norm = gradient_norm(model.registry.parameters())
            clip_gradients(model.registry.parameters(), config.clip)
            opt.step(lr=lr)
            losses.append(loss_value)
        metrics = evaluate(model, val_samples) if val_samples else {
            "accuracy": 0.0, "per_family": {}, "per_program_length": {}}
        val_history.append(metrics["accuracy"])
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "val_accuracy": metrics["accuracy"],
            "per_family": metrics["per_family"],
            "per_program_length": metrics["per_program_length"],
            "lr": lr,
        }
        history.append(record)
        lr = lr_plateau_step(val_history, lr, config)
        if on_epoch is not None:
            on_epoch(record, model, opt, rng, lr, val_history)
        if lr < config.lr_floor:
            break
    return history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _model_header(model: VqaModel) -> dict:
    header = {
        "kind": model.reasoner_kind,
        "vocab": model.vocab.to_dict(),
        # List of pairs: attribute order defines encoder table order and must
        # survive key-sorted JSON.
        "attribute_sizes": [[k, v] for k, v in model.attribute_sizes.items()],
        "config": asdict(model.config),
        "seed": model.seed,
        "dtype": np.dtype(model.dtype).str,
    }
    if model.baseline_config is not None:
        header["baseline"] = asdict(model.baseline_config)
    return header


def build_model(header: dict) -> VqaModel:
    config = IprmConfig(**header["config"])
    baseline = (BaselineConfig(**header["baseline"])
                if header.get("baseline") else None)
    sizes = header["attribute_sizes"]
    if isinstance(sizes, list):
        sizes = {name: size for name, size in sizes}
    return VqaModel(
        vocab=Vocab.from_dict(header["vocab"]),
        attribute_sizes=sizes,
        config=config,
        baseline=baseline,
        reasoner_kind=header["kind"],
        seed=header.get("seed", 0),
        dtype=np.dtype(header["dtype"]).type,
    )


def save_checkpoint(path, model: VqaModel, optimizer: Adam | None = None,
                    history=None, epoch: int | None = None, rng_state=None,
                    lr: float | None = None, val_history=None):
    """Versioned container: magic, JSON header, raw little-endian blocks in
    header order (parameters, then optimizer moments)."""
    params = model.registry.parameters()
    dtype_code = "<f4" if np.dtype(model.dtype) == np.float32 else "<f8"
    header = {
        "version": CHECKPOINT_VERSION,
        "payload_dtype": dtype_code,
        "model": _model_header(model),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
        "optimizer": (None if optimizer is None
                      else {"t": optimizer.t, "lr": optimizer.lr}),
        "history": history or [],
        "val_history": list(val_history or []),
        "epoch": epoch,
        "lr": lr,
        "rng_state": _encode_rng_state(rng_state),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value.data).astype(dtype_code).tobytes())
        if optimizer is not None:
            for p in params:
                fh.write(optimizer.m[p.name].astype(dtype_code).tobytes())
            for p in params:
                fh.write(optimizer.v[p.name].astype(dtype_code).tobytes())


def load_checkpoint(path):
    """-> (model, state) with state carrying optimizer moments, history,
    epoch, lr and rng state for resuming."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            (blob_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(blob_len).decode("utf-8"))
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint version "
                    f"{header.get('version')!r}")
            dtype_code = header["payload_dtype"]
            model = build_model(header["model"])
            params = model.registry.parameters()
            manifest = header["params"]
            if [p.name for p in params] != [m["name"] for m in manifest]:
                raise CheckpointError(f"{path}: parameter manifest mismatch")

            def read_block(shape):
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * np.dtype(dtype_code).itemsize)
                arr = np.frombuffer(raw, dtype=dtype_code).reshape(shape)
                return arr.astype(model.dtype)  # astype always copies here

            for p, meta in zip(params, manifest):
                if list(p.value.shape) != meta["shape"]:
                    raise CheckpointError(
                        f"{path}: shape mismatch for {p.name}")
                p.value.data = read_block(meta["shape"])
            moments = None
            if header.get("optimizer") is not None:
                m = {p.name: read_block(list(p.value.shape)) for p in params}
                v = {p.name: read_block(list(p.value.shape)) for p in params}
                moments = {"t": header["optimizer"]["t"],
                           "lr": header["optimizer"].get("lr"), "m": m, "v": v}
    except (OSError, struct.error, json.JSONDecodeError, ValueError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint: {err}") from None
    state = {
        "optimizer": moments,
        "history": header.get("history", []),
        "val_history": header.get("val_history", []),
        "epoch": header.get("epoch"),
        "lr": header.get("lr"),
        "rng_state": _decode_rng_state(header.get("rng_state")),
    }
    return model, state


def _encode_rng_state(state):
    if state is None:
        return None
    return json.loads(json.dumps(state, default=int))


def _decode_rng_state(state):
    return state
