"""Transformer comparison stacks: concat-attention and cross-attention.

These use conventional multi-head scaled dot-product attention (1/sqrt(d)
scaling), unlike the reasoning module's unscaled modulated primitive. The
concat variant self-attends over a learned summary token plus all language
and visual tokens and pools at the summary position; the cross variant has
language tokens query visual keys/values and pools by a masked mean over
language positions. Both project their output to d_m for the shared
answer head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DEFAULT_DTYPE,
    Linear,
    NumericsError,
    ParameterRegistry,
    Tensor,
    add,
    broadcast_to,
    concat,
    matmul,
    mul,
    relu,
    reshape,
    rsqrt,
    slice_axis,
    softmax_lastdim,
    transpose,
)

FFN_WIDTH = 4  # hidden width multiplier of the position-wise feed-forward


@dataclass(frozen=True)
class BaselineConfig:
    variant: str  # "cross" | "concat"
    n_layers: int = 4
    d_model: int = 512
    n_heads: int = 8

    def __post_init__(self):
        if self.variant not in ("cross", "concat"):
            raise NumericsError(f"unknown baseline variant {self.variant!r}")
        if self.n_layers < 1 or self.n_heads < 1:
            raise NumericsError("baseline needs n_layers >= 1 and n_heads >= 1")
        if self.d_model % self.n_heads:
            raise NumericsError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         out_proj: Linear, mask=None):
    """Scaled dot-product attention. q [b, n_q, d], k/v [b, n_k, d] ->
    (output [b, n_q, d], weights [b, h, n_q, n_k])."""
    b, n_q, d = q.shape
    n_k = k.shape[1]
    d_h = d // n_heads

    def split(x, n):
        return transpose(reshape(x, (b, n, n_heads, d_h)), (0, 2, 1, 3))

    qh = split(q, n_q)
    kh = split(k, n_k)
    vh = split(v, n_k)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d_h))
    weights = softmax_lastdim(scores, mask)
    mixed = matmul(weights, vh)  # [b, h, n_q, d_h]
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (b, n_q, d))
    return out_proj(merged), weights


class LayerNorm:
    """Last-axis normalization with learned gain and bias."""

    EPS = 1e-5

    def __init__(self, registry, name, d, dtype=DEFAULT_DTYPE):
        self.gain = registry.create(f"{name}.gain", np.ones(d, dtype=dtype))
        self.bias = registry.create(f"{name}.bias", np.zeros(d, dtype=dtype))
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = add(x, mul(-1.0, mu))
        var = mul(centered, centered).mean(axis=-1, keepdims=True)
        normed = mul(centered, rsqrt(add(var, self.EPS)))
        return add(mul(normed, self.gain.value), self.bias.value)


class AttentionBlock:
    """Attention + feed-forward, both residual, post-norm."""

    def __init__(self, registry, name, d, n_heads, rng, dtype=DEFAULT_DTYPE):
        self.n_heads = n_heads
        self.q = Linear(registry, f"{name}.q", d, d, rng, dtype)
        self.k = Linear(registry, f"{name}.k", d, d, rng, dtype)
        self.v = Linear(registry, f"{name}.v", d, d, rng, dtype)
        self.o = Linear(registry, f"{name}.o", d, d, rng, dtype)
        self.ff1 = Linear(registry, f"{name}.ff1", d, FFN_WIDTH * d, rng, dtype)
        self.ff2 = Linear(registry, f"{name}.ff2", FFN_WIDTH * d, d, rng, dtype)
        self.norm1 = LayerNorm(registry, f"{name}.norm1", d, dtype)
        self.norm2 = LayerNorm(registry, f"{name}.norm2", d, dtype)

    def __call__(self, x: Tensor, memory: Tensor | None = None, mask=None):
        """Self-attention when memory is None, cross-attention otherwise."""
        source = x if memory is None else memory
        attended, weights = multi_head_attention(
            self.q(x), self.k(source), self.v(source), self.n_heads, self.o,
            mask=mask)
        x = self.norm1(add(x, attended))
        x = self.norm2(add(x, self.ff2(relu(self.ff1(x)))))
        return x, weights


class TransformerBaseline:
    """The two comparison stacks behind one forward() contract."""

    def __init__(self, config: BaselineConfig, registry: ParameterRegistry,
                 rng: np.random.Generator, d_l: int, d_v: int, d_m: int,
                 dtype=DEFAULT_DTYPE, prefix="baseline"):
        self.config = config
        self.dtype = dtype
        d = config.d_model
        self.lang_proj = Linear(registry, f"{prefix}.lang_proj", d_l, d, rng, dtype)
        self.vis_proj = Linear(registry, f"{prefix}.vis_proj", d_v, d, rng, dtype)
        self.out_proj = Linear(registry, f"{prefix}.out_proj", d, d_m, rng, dtype)
        self.blocks = [
            AttentionBlock(registry, f"{prefix}.block{i}", d, config.n_heads,
                           rng, dtype)
            for i in range(config.n_layers)
        ]
        if config.variant == "concat":
            self.summary_token = registry.create(
                f"{prefix}.summary_token",
                (rng.standard_normal(d) / np.sqrt(d)).astype(dtype))

    def forward(self, x_v: Tensor, x_l: Tensor, l_s: Tensor,
                lang_mask=None) -> Tensor:
        """-> y_s [b, d_m]. ``l_s`` is accepted for interface parity; the
        concat variant pools at its summary token, the cross variant by a
        masked mean over language positions."""
        b, n_l = x_l.shape[0], x_l.shape[1]
        lang = self.lang_proj(x_l)
        vis = self.vis_proj(x_v)
        pad = None
        if lang_mask is not None:
            pad = lang_mask.data if isinstance(lang_mask, Tensor) else np.asarray(lang_mask)
            pad = pad.reshape(b, n_l)

        if self.config.variant == "concat":
            d = self.config.d_model
            summary = broadcast_to(
                reshape(self.summary_token.value, (1, 1, d)), (b, 1, d))
            x = concat([summary, lang, vis], axis=1)
            key_block = np.zeros((b, x.shape[1]), dtype=self.dtype)
            if pad is not None:
                key_block[:, 1:1 + n_l] = pad
            mask = key_block[:, None, None, :]  # [b, 1, 1, n_keys]
            for block in self.blocks:
                x, _ = block(x, mask=mask)
            pooled = reshape(slice_axis(x, 1, 0, 1), (b, d))
            return self.out_proj(pooled)

        x = lang
        for block in self.blocks:
            x, _ = block(x, memory=vis)
        if pad is None:
            keep = np.ones((b, n_l, 1), dtype=self.dtype)
        else:
            keep = (1.0 - pad)[..., None].astype(self.dtype)
        counts = keep.sum(axis=1)  # [b, 1]
        pooled = mul(mul(x, Tensor(keep)).sum(axis=1), Tensor(1.0 / counts))
        return self.out_proj(pooled)


def baseline_forward(x_v, x_l, l_s, config: BaselineConfig,
                     module: TransformerBaseline, lang_mask=None) -> Tensor:
    """Functional entry point mirroring the reasoner's."""
    if module.config != config:
        raise NumericsError("baseline module was built for a different config")
    return module.forward(x_v, x_l, l_s, lang_mask=lang_mask)
