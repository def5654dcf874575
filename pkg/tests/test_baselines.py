"""Transformer comparison stacks: oracle checks and parameter accounting."""

import numpy as np
import pytest

from iprm.baselines import (
    AttentionBlock,
    BaselineConfig,
    LayerNorm,
    TransformerBaseline,
    multi_head_attention,
)
from iprm.core import IprmConfig, IprmModule
from iprm.numerics import (
    Linear,
    NumericsError,
    ParameterRegistry,
    Tensor,
    finite_difference_check,
    mul,
    reduce_sum,
    reshape,
)


def identity_proj(d):
    reg = ParameterRegistry()
    proj = Linear(reg, "o", d, d, np.random.default_rng(0))
    proj.w.value.data = np.eye(d)
    proj.b.value.data = np.zeros(d)
    return proj


def test_config_validation():
    with pytest.raises(NumericsError, match="divisible"):
        BaselineConfig(variant="cross", d_model=10, n_heads=4)
    with pytest.raises(NumericsError, match="variant"):
        BaselineConfig(variant="self")


def test_single_visual_token_cross_attention():
    rng = np.random.default_rng(1)
    d = 6
    q = Tensor(rng.standard_normal((1, 4, d)))
    kv = Tensor(rng.standard_normal((1, 1, d)))
    out, weights = multi_head_attention(q, kv, kv, 1, identity_proj(d))
    for t in range(4):
        np.testing.assert_allclose(out.data[0, t], kv.data[0, 0], atol=1e-12)
    np.testing.assert_allclose(weights.data, 1.0, atol=0)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    d = 8
    x = Tensor(rng.standard_normal((2, 5, d)))
    _, weights = multi_head_attention(x, x, x, 2, identity_proj(d))
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_single_head_matches_loop_oracle():
    rng = np.random.default_rng(3)
    d = 4
    q = rng.standard_normal((1, 3, d))
    k = rng.standard_normal((1, 5, d))
    v = rng.standard_normal((1, 5, d))
    out, weights = multi_head_attention(
        Tensor(q), Tensor(k), Tensor(v), 1, identity_proj(d))

    scale = 1.0 / np.sqrt(d)
    want = np.zeros((3, d))
    want_w = np.zeros((3, 5))
    for i in range(3):
        scores = np.array([
            sum(q[0, i, f] * k[0, j, f] for f in range(d)) * scale
            for j in range(5)
        ])
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        want_w[i] = w
        for j in range(5):
            want[i] += w[j] * v[0, j]
    np.testing.assert_allclose(out.data[0], want, atol=1e-9)
    np.testing.assert_allclose(weights.data[0, 0], want_w, atol=1e-9)


def test_multi_head_shapes():
    rng = np.random.default_rng(4)
    d = 8
    x = Tensor(rng.standard_normal((2, 3, d)))
    out, weights = multi_head_attention(x, x, x, 4, identity_proj(d))
    assert out.shape == (2, 3, d)
    assert weights.shape == (2, 4, 3, 3)


def test_layer_norm_normalizes_and_backprops():
    reg = ParameterRegistry()
    norm = LayerNorm(reg, "ln", 6)
    rng = np.random.default_rng(5)
    p = reg.create("x", rng.standard_normal((2, 6)) * 3 + 1)
    out = norm(p.value)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-4)
    coeff = Tensor(rng.standard_normal(12))

    def objective():
        return reduce_sum(mul(reshape(norm(p.value), (12,)), coeff))

    for param in (p, reg.get("ln.gain"), reg.get("ln.bias")):
        assert finite_difference_check(objective, param) < 1e-6


def _baseline(variant, n_layers=1, d_model=16, n_heads=2, seed=0):
    reg = ParameterRegistry()
    config = BaselineConfig(variant=variant, n_layers=n_layers,
                            d_model=d_model, n_heads=n_heads)
    module = TransformerBaseline(config, reg, np.random.default_rng(seed),
                                 d_l=12, d_v=10, d_m=16)
    return module, reg


def test_baseline_forward_shapes_and_determinism():
    rng = np.random.default_rng(6)
    x_v = Tensor(rng.standard_normal((2, 4, 10)))
    x_l = Tensor(rng.standard_normal((2, 5, 12)))
    l_s = Tensor(rng.standard_normal((2, 12)))
    for variant in ("cross", "concat"):
        module, _ = _baseline(variant)
        a = module.forward(x_v, x_l, l_s)
        b = module.forward(x_v, x_l, l_s)
        assert a.shape == (2, 16)
        np.testing.assert_array_equal(a.data, b.data)


def test_baseline_respects_language_mask():
    rng = np.random.default_rng(7)
    x_v = Tensor(rng.standard_normal((1, 3, 10)))
    base_tokens = rng.standard_normal((1, 2, 12))
    l_s = Tensor(rng.standard_normal((1, 12)))
    for variant in ("cross", "concat"):
        module, _ = _baseline(variant, seed=8)
        # Same valid tokens under different padding must agree.
        x_short = Tensor(base_tokens)
        out_short = module.forward(x_v, x_short, l_s,
                                   lang_mask=np.zeros((1, 1, 2)))
        padded = np.concatenate(
            [base_tokens, rng.standard_normal((1, 2, 12))], axis=1)
        mask = np.array([[[0.0, 0.0, 1.0, 1.0]]])
        out_padded = module.forward(x_v, Tensor(padded), l_s, lang_mask=mask)
        np.testing.assert_allclose(out_padded.data, out_short.data, atol=1e-9)


def test_iprm_default_is_lighter_than_concat_4l():
    iprm_reg = ParameterRegistry()
    IprmModule(IprmConfig(), iprm_reg, np.random.default_rng(0))
    base_reg = ParameterRegistry()
    TransformerBaseline(BaselineConfig(variant="concat", n_layers=4,
                                       d_model=512, n_heads=8),
                        base_reg, np.random.default_rng(0),
                        d_l=512, d_v=512, d_m=512)
    assert iprm_reg.count_values() < base_reg.count_values()


def test_block_gradient_spotcheck():
    reg = ParameterRegistry()
    block = AttentionBlock(reg, "blk", 8, 2, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    x = reg.create("x", rng.standard_normal((1, 3, 8)))
    coeff = Tensor(rng.standard_normal(24))

    def objective():
        out, _ = block(x.value)
        return reduce_sum(mul(reshape(out, (24,)), coeff))

    for name in ("x", "blk.q.w", "blk.ff1.w", "blk.norm1.gain"):
        err = finite_difference_check(objective, reg.get(name))
        assert err < 1e-5, f"{name}: {err}"
