"""Linear-modulated attention.

Scores are a learned one-dimensional projection of the elementwise
query-key product (no dot product, no 1/sqrt(d) scaling), softmaxed over
the key axis. This single primitive drives every stage of the reasoning
module and the final pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Linear,
    NumericsError,
    Tensor,
    add,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    transpose,
)


@dataclass
class AttentionOutput:
    output: Tensor   # [..., n_q, d_v]
    weights: Tensor  # [..., n_q, n_k], rows sum to 1


def _pair_scores(q: Tensor, k: Tensor, score_proj: Linear) -> Tensor:
    """score[i, j] = score_proj(q_i * k_j); q [..., n_q, d], k [..., n_k, d]
    -> [..., n_q, n_k].

    Computed as q @ (k * w)^T + b, which is the same bilinear form without
    materializing the [..., n_q, n_k, d] pair product.
    """
    if q.shape[-1] != k.shape[-1]:
        raise NumericsError(
            f"attention feature dims disagree: query {tuple(q.shape)} vs "
            f"key {tuple(k.shape)}"
        )
    w = score_proj.w.value  # [d, 1]
    b = score_proj.b.value  # [1]
    weighted_keys = mul(k, reshape(w, (w.shape[0],)))
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(weighted_keys, axes))
    return add(scores, b)


def _as_mask(mask):
    if mask is None:
        return None
    return mask.data if isinstance(mask, Tensor) else np.asarray(mask)


def modulated_attention(q, k, v, score_proj: Linear, mask=None) -> AttentionOutput:
    """Attend q over (k, v); the weighted sum runs over the key axis.

    q [..., n_q, d_k], k [..., n_k, d_k], v [..., n_k, d_v]. ``mask`` entries
    of 1 block a (query, key) pair; it must broadcast to the score shape
    [..., n_q, n_k]. A fully blocked query row is an error.
    """
    if k.shape[-2] != v.shape[-2]:
        raise NumericsError(
            f"attention key/value counts disagree: {tuple(k.shape)} vs {tuple(v.shape)}"
        )
    scores = _pair_scores(q, k, score_proj)
    weights = softmax_lastdim(scores, _as_mask(mask))
    return AttentionOutput(output=matmul(weights, v), weights=weights)


def attention_with_secondary_values(q, k, v_primary, v_secondary,
                                    score_proj: Linear, mask=None):
    """One softmax over the keys applied to two value sets.

    Used where a second bank of states must be mixed with exactly the
    attention pattern computed for the first. Returns
    (out_primary, out_secondary, weights).
    """
    if v_primary.shape[-2] != v_secondary.shape[-2]:
        raise NumericsError(
            "secondary values must share the key axis: "
            f"{tuple(v_primary.shape)} vs {tuple(v_secondary.shape)}"
        )
    att = modulated_attention(q, k, v_primary, score_proj, mask=mask)
    out_secondary = matmul(att.weights, v_secondary)
    return att.output, out_secondary, att.weights
