"""Reasoning trace export: a versioned structured-text file plus standalone
SVG heatmaps, rendered with no plotting dependency so outputs are diffable.

Language heatmaps are an operation x token grid per step; visual heatmaps
draw attention mass as per-object color intensity on a 2D scatter of the
object positions, one panel per parallel operation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .synth import DatasetError, QASample

TRACE_FORMAT = "iprm-trace"
TRACE_VERSION = 1

_CELL = 26           # heatmap cell size, px
_LABEL_W = 64        # row label gutter
_PANEL = 150         # visual scatter panel size
_FLOAT_FMT = "{:.6f}"


@dataclass
class TraceRecord:
    """Everything a trace file stores for one evaluated sample."""

    question: list
    objects: list                 # descriptor dicts with x, y
    lang_atts: list               # [t_steps][n_op][n_tokens]
    vis_atts: list                # [t_steps][n_op][n_objects]
    pool_att: list                # [n_op]
    predicted_answer: str
    gold_answer: str
    version: int = TRACE_VERSION
    extras: dict = field(default_factory=dict)


def build_trace_record(sample: QASample, trace, predicted_answer: str) -> TraceRecord:
    """``trace`` is a per-sample ReasoningTrace (see core.ReasoningTrace.sample)."""
    return TraceRecord(
        question=list(sample.question),
        objects=[vars(o) for o in sample.scene.objects],
        lang_atts=np.asarray(trace.lang_atts).tolist(),
        vis_atts=np.asarray(trace.vis_atts).tolist(),
        pool_att=np.asarray(trace.pool_att).tolist(),
        predicted_answer=predicted_answer,
        gold_answer=sample.answer,
    )


def write_trace(record: TraceRecord, path):
    payload = {
        "format": TRACE_FORMAT,
        "version": record.version,
        "question": record.question,
        "objects": record.objects,
        "lang_atts": record.lang_atts,
        "vis_atts": record.vis_atts,
        "pool_att": record.pool_att,
        "predicted_answer": record.predicted_answer,
        "gold_answer": record.gold_answer,
        "extras": record.extras,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_trace(path) -> TraceRecord:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise DatasetError(f"{path}: unreadable trace file: {err}") from None
    if payload.get("format") != TRACE_FORMAT:
        raise DatasetError(f"{path}: not a {TRACE_FORMAT} file")
    if payload.get("version") != TRACE_VERSION:
        raise DatasetError(
            f"{path}: unsupported trace version {payload.get('version')!r}")
    return TraceRecord(
        question=payload["question"],
        objects=payload["objects"],
        lang_atts=payload["lang_atts"],
        vis_atts=payload["vis_atts"],
        pool_att=payload["pool_att"],
        predicted_answer=payload["predicted_answer"],
        gold_answer=payload["gold_answer"],
        version=payload["version"],
        extras=payload.get("extras", {}),
    )


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------


def _heat_color(value: float) -> str:
    """White -> deep blue ramp; value is an attention weight in [0, 1]."""
    a = min(max(float(value), 0.0), 1.0)
    r = round(255 * (1 - a) + 23 * a)
    g = round(255 * (1 - a) + 64 * a)
    b = round(255 * (1 - a) + 154 * a)
    return f"rgb({r},{g},{b})"


def _svg(width, height, body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" font-family="monospace" font-size="10">')
    return head + "\n" + "\n".join(body) + "\n</svg>\n"


def render_language_heatmap(record: TraceRecord, step: int) -> str:
    """Operation rows x question-token columns for one step."""
    rows = record.lang_atts[step]
    n_op, n_tok = len(rows), len(rows[0])
    width = _LABEL_W + n_tok * _CELL + 8
    height = 30 + n_op * _CELL + 8
    body = [f'<text x="4" y="14">step {step} language attention</text>']
    for j, tok in enumerate(record.question):
        body.append(f'<text x="{_LABEL_W + j * _CELL + 3}" y="26">{tok[:4]}</text>')
    for i in range(n_op):
        y = 30 + i * _CELL
        body.append(f'<text x="4" y="{y + 16}">op{i}</text>')
        for j in range(n_tok):
            w = rows[i][j]
            body.append(
                f'<rect x="{_LABEL_W + j * _CELL}" y="{y}" width="{_CELL - 2}" '
                f'height="{_CELL - 2}" fill="{_heat_color(w)}">'
                f'<title>{_FLOAT_FMT.format(w)}</title></rect>')
    return _svg(width, height, body)


def render_visual_heatmap(record: TraceRecord, step: int) -> str:
    """One scatter panel per parallel operation; object fill intensity is
    that operation's attention weight on the object."""
    rows = record.vis_atts[step]
    n_op = len(rows)
    width = 8 + n_op * (_PANEL + 10)
    height = 30 + _PANEL + 18
    body = [f'<text x="4" y="14">step {step} visual attention</text>']
    for i in range(n_op):
        x0 = 8 + i * (_PANEL + 10)
        y0 = 24
        body.append(f'<rect x="{x0}" y="{y0}" width="{_PANEL}" height="{_PANEL}" '
                    f'fill="none" stroke="black"/>')
        body.append(f'<text x="{x0}" y="{y0 + _PANEL + 12}">op{i}</text>')
        for j, obj in enumerate(record.objects):
            w = rows[i][j] if j < len(rows[i]) else 0.0
            cx = x0 + obj["x"] * (_PANEL - 12) + 6
            cy = y0 + obj["y"] * (_PANEL - 12) + 6
            r = 7 if obj.get("size") == "large" else 5
            body.append(
                f'<circle cx="{_FLOAT_FMT.format(cx)}" cy="{_FLOAT_FMT.format(cy)}" '
                f'r="{r}" fill="{_heat_color(w)}" stroke="gray">'
                f'<title>{obj.get("color", "?")} {obj.get("shape", "?")} '
                f'{_FLOAT_FMT.format(w)}</title></circle>')
    return _svg(width, height, body)


def render_pool_heatmap(record: TraceRecord) -> str:
    """Final pooling weights over the parallel operation slots."""
    weights = record.pool_att
    n_op = len(weights)
    width = _LABEL_W + n_op * _CELL + 8
    height = 30 + _CELL + 22
    body = ['<text x="4" y="14">final pooling over operations</text>',
            f'<text x="4" y="{30 + 16}">pool</text>']
    for i, w in enumerate(weights):
        body.append(
            f'<rect x="{_LABEL_W + i * _CELL}" y="30" width="{_CELL - 2}" '
            f'height="{_CELL - 2}" fill="{_heat_color(w)}">'
            f'<title>{_FLOAT_FMT.format(w)}</title></rect>')
        body.append(
            f'<text x="{_LABEL_W + i * _CELL + 3}" y="{30 + _CELL + 14}">op{i}</text>')
    return _svg(width, height, body)


def write_heatmaps(record: TraceRecord, out_dir) -> list:
    """One SVG per (step, attention kind) plus the pooling strip; returns
    the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for step in range(len(record.lang_atts)):
        for kind, renderer in (("lang", render_language_heatmap),
                               ("vis", render_visual_heatmap)):
            path = os.path.join(out_dir, f"step{step:02d}_{kind}.svg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(renderer(record, step))
            written.append(path)
    path = os.path.join(out_dir, "pooling.svg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_pool_heatmap(record))
    written.append(path)
    return written
