"""The reasoning module: stage contracts, window semantics, weight tying."""

import numpy as np
import pytest

from iprm.core import (
    IprmConfig,
    IprmModule,
    MemoryState,
    MemoryWindow,
    composition_mask,
    iprm_forward,
    replace_config,
)
from iprm.harness import Adam
from iprm.numerics import (
    NumericsError,
    ParameterRegistry,
    Tensor,
    finite_difference_check,
    mul,
    reduce_sum,
    reshape,
)


def make_module(seed=0, **overrides):
    defaults = dict(d_m=16, n_op=2, t_steps=2, r=2, w=1, d_l=12, d_v=10)
    defaults.update(overrides)
    config = IprmConfig(**defaults)
    registry = ParameterRegistry()
    module = IprmModule(config, registry, np.random.default_rng(seed))
    return module, registry


def random_inputs(config, batch=1, n_l=3, n_v=4, seed=1):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.standard_normal((batch, n_v, config.d_v))),
            Tensor(rng.standard_normal((batch, n_l, config.d_l))),
            Tensor(rng.standard_normal((batch, config.d_l))))


def lin_oracle(x, registry, name):
    w = registry.get(f"{name}.w").value.data
    b = registry.get(f"{name}.b").value.data
    out = np.zeros((x.shape[0], w.shape[1]))
    for n in range(x.shape[0]):
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += x[n, i] * w[i, j]
            out[n, j] = s
    return out


# ---------------------------------------------------------------------------
# config and memory init
# ---------------------------------------------------------------------------


def test_config_rejects_zero_steps():
    with pytest.raises(NumericsError):
        IprmConfig(d_m=16, t_steps=0)


def test_config_rejects_indivisible_reduction():
    with pytest.raises(NumericsError, match="divisible"):
        IprmConfig(d_m=16, r=3)


def test_config_rejects_overdrawn_capacity():
    with pytest.raises(NumericsError, match="capacity"):
        IprmConfig(d_m=16, n_op=20, init_capacity=16)


def test_init_memory_broadcasts_batch():
    module, _ = make_module()
    state = module.init_memory(2)
    np.testing.assert_array_equal(state.op.data[0], state.op.data[1])
    np.testing.assert_array_equal(state.res.data[0], state.res.data[1])


def test_init_memory_single_op_is_first_row():
    module, registry = make_module(n_op=1)
    state = module.init_memory(1)
    np.testing.assert_array_equal(
        state.op.data[0, 0], registry.get("iprm.mem.op_init").value.data[0])


def test_init_params_move_under_optimizer():
    module, registry = make_module()
    x_v, x_l, l_s = random_inputs(module.config)
    before = registry.get("iprm.mem.op_init").value.data[:2].copy()
    out = module.forward(x_v, x_l, l_s)
    reduce_sum(out.y_s).backward()
    Adam(registry.parameters(), lr=1e-2).step()
    after = registry.get("iprm.mem.op_init").value.data[:2]
    assert np.abs(after - before).max() > 0


# ---------------------------------------------------------------------------
# formation
# ---------------------------------------------------------------------------


def test_formation_single_token_returns_its_value():
    module, _ = make_module()
    rng = np.random.default_rng(2)
    x_l = Tensor(rng.standard_normal((1, 1, module.config.d_l)))
    m_op = Tensor(rng.standard_normal((1, module.config.n_op, module.config.d_m)))
    z_op, att = module.operation_formation(x_l, m_op)
    value = module.form_v(x_l).data[0, 0]
    for i in range(module.config.n_op):
        np.testing.assert_allclose(z_op.data[0, i], value, atol=1e-12)
    np.testing.assert_allclose(att.data, 1.0, atol=0)


def test_formation_duplicate_tokens_share_attention():
    module, _ = make_module()
    rng = np.random.default_rng(3)
    token = rng.standard_normal(module.config.d_l)
    x_l = Tensor(np.stack([token, rng.standard_normal(module.config.d_l), token])[None])
    m_op = Tensor(rng.standard_normal((1, module.config.n_op, module.config.d_m)))
    _, att = module.operation_formation(x_l, m_op)
    np.testing.assert_allclose(att.data[..., 0], att.data[..., 2], atol=1e-9)


def test_cached_language_kv_matches_recompute_rollout():
    module, _ = make_module(t_steps=3)
    config = module.config
    x_v, x_l, l_s = random_inputs(config, seed=5)
    out = module.forward(x_v, x_l, l_s)

    # Manual rollout recomputing the projections at every step.
    state = module.init_memory(1)
    window = MemoryWindow(ops=[state.op], results=[state.res])
    for _ in range(config.t_steps):
        z_op, _ = module.operation_formation(x_l, state.op)
        z_res, _ = module.operation_execution(x_v, z_op, state.res)
        m_op, m_res, _ = module.operation_composition(z_op, z_res, window)
        state = MemoryState(op=m_op, res=m_res)
        window = window.push(state, config.w)
    y_s, _ = module.pool_result(state.op, state.res, l_s)
    np.testing.assert_array_equal(out.y_s.data, y_s.data)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def test_execution_single_visual_token():
    module, _ = make_module()
    rng = np.random.default_rng(6)
    x_v = Tensor(rng.standard_normal((1, 1, module.config.d_v)))
    z_op = Tensor(rng.standard_normal((1, module.config.n_op, module.config.d_m)))
    m_res = Tensor(rng.standard_normal((1, module.config.n_op, module.config.d_m)))
    z_res, att = module.operation_execution(x_v, z_op, m_res)
    value = module.exec_v(x_v).data[0, 0]
    for i in range(module.config.n_op):
        np.testing.assert_allclose(z_res.data[0, i], value, atol=1e-12)
    np.testing.assert_allclose(att.data, 1.0, atol=0)


def test_execution_shapes_for_all_reductions():
    for r in (1, 2):
        module, _ = make_module(r=r)
        rng = np.random.default_rng(7)
        x_v = Tensor(rng.standard_normal((2, 4, module.config.d_v)))
        z_op = Tensor(rng.standard_normal((2, module.config.n_op, module.config.d_m)))
        m_res = Tensor(rng.standard_normal((2, module.config.n_op, module.config.d_m)))
        z_res, att = module.operation_execution(x_v, z_op, m_res)
        assert z_res.shape == (2, module.config.n_op, module.config.d_m)
        assert att.shape == (2, module.config.n_op, 4)


def test_execution_equivariant_to_op_permutation():
    module, _ = make_module(n_op=3)
    rng = np.random.default_rng(8)
    x_v = Tensor(rng.standard_normal((1, 5, module.config.d_v)))
    z_op = rng.standard_normal((1, 3, module.config.d_m))
    m_res = rng.standard_normal((1, 3, module.config.d_m))
    base, base_att = module.operation_execution(x_v, Tensor(z_op), Tensor(m_res))
    perm = np.array([2, 0, 1])
    permuted, perm_att = module.operation_execution(
        x_v, Tensor(z_op[:, perm]), Tensor(m_res[:, perm]))
    np.testing.assert_allclose(permuted.data, base.data[:, perm], atol=1e-9)
    np.testing.assert_allclose(perm_att.data, base_att.data[:, perm], atol=1e-9)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def test_composition_self_mask_is_exact_zero():
    module, _ = make_module(n_op=3, w=1)
    rng = np.random.default_rng(9)
    shape = (1, 3, module.config.d_m)
    window = MemoryWindow(ops=[Tensor(rng.standard_normal(shape))],
                          results=[Tensor(rng.standard_normal(shape))])
    _, _, a_op = module.operation_composition(
        Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape)),
        window)
    for i in range(3):
        assert a_op.data[0, i, i] == 0.0


def test_composition_without_window_forces_the_other_candidate():
    module, _ = make_module(n_op=2, w=0)
    rng = np.random.default_rng(10)
    shape = (1, 2, module.config.d_m)
    window = MemoryWindow(ops=[Tensor(rng.standard_normal(shape))],
                          results=[Tensor(rng.standard_normal(shape))])
    _, _, a_op = module.operation_composition(
        Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape)),
        window)
    np.testing.assert_array_equal(a_op.data[0], [[0.0, 1.0], [1.0, 0.0]])


def test_composition_rejects_oversized_window():
    module, _ = make_module(w=1)
    rng = np.random.default_rng(11)
    shape = (1, module.config.n_op, module.config.d_m)
    states = [Tensor(rng.standard_normal(shape)) for _ in range(2)]
    window = MemoryWindow(ops=states, results=states)
    with pytest.raises(NumericsError, match="window length"):
        module.operation_composition(Tensor(rng.standard_normal(shape)),
                                     Tensor(rng.standard_normal(shape)), window)


def test_composition_matches_scalar_equation_oracle():
    module, registry = make_module(d_m=8, n_op=2, w=1, r=2)
    rng = np.random.default_rng(12)
    d = 8
    z_op = rng.standard_normal((1, 2, d))
    z_res = rng.standard_normal((1, 2, d))
    prev_op = rng.standard_normal((1, 2, d))
    prev_res = rng.standard_normal((1, 2, d))
    window = MemoryWindow(ops=[Tensor(prev_op)], results=[Tensor(prev_res)])
    m_op_next, m_res_next, a_op = module.operation_composition(
        Tensor(z_op), Tensor(z_res), window)

    # Loop-level recomputation of the update equations.
    m_op_c = lin_oracle(z_op[0], registry, "iprm.comp.op_u") \
        + lin_oracle(prev_op[0], registry, "iprm.comp.op_h")
    m_res_c = lin_oracle(z_res[0], registry, "iprm.comp.res_u") \
        + lin_oracle(prev_res[0], registry, "iprm.comp.res_h")
    op_states = np.concatenate([m_op_c, prev_op[0]], axis=0)
    res_states = np.concatenate([m_res_c, prev_res[0]], axis=0)
    q = lin_oracle(m_op_c, registry, "iprm.comp.op_q")
    k = lin_oracle(op_states, registry, "iprm.comp.op_k")
    v_op = lin_oracle(op_states, registry, "iprm.comp.op_v")
    v_res = lin_oracle(res_states, registry, "iprm.comp.res_v")
    w_s = registry.get("iprm.comp.score.w").value.data
    b_s = registry.get("iprm.comp.score.b").value.data
    scores = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            s = b_s[0]
            for f in range(d):
                s += q[i, f] * k[j, f] * w_s[f, 0]
            if i == j:
                s += -1e30
            scores[i, j] = s
    weights = np.zeros_like(scores)
    for i in range(2):
        e = np.exp(scores[i] - scores[i].max())
        weights[i] = e / e.sum()
    m2 = weights @ v_op
    res_mix = weights @ v_res
    want_op = m2 + lin_oracle(m_op_c, registry, "iprm.comp.op_u2")
    want_res = res_mix + lin_oracle(m_res_c, registry, "iprm.comp.res_v2")

    np.testing.assert_allclose(a_op.data[0], weights, atol=1e-8)
    np.testing.assert_allclose(m_op_next.data[0], want_op, atol=1e-8)
    np.testing.assert_allclose(m_res_next.data[0], want_res, atol=1e-8)


def test_composition_candidates_route_differs_but_matches_shapes():
    base, _ = make_module(seed=3)
    alt, _ = make_module(seed=3, result_values="candidates")
    x_v, x_l, l_s = random_inputs(base.config, seed=13)
    out_a = base.forward(x_v, x_l, l_s)
    out_b = alt.forward(x_v, x_l, l_s)
    assert out_a.y_s.shape == out_b.y_s.shape
    assert np.abs(out_a.y_s.data - out_b.y_s.data).max() > 0


def test_composition_disabled_removes_the_whole_unit():
    # With the block ablated the new memory is the raw (z_op, z_res) pair
    # and none of the unit's parameters exist.
    module, registry = make_module(use_composition=False)
    assert not any(name.startswith("iprm.comp.") for name in registry.names())
    rng = np.random.default_rng(14)
    shape = (1, module.config.n_op, module.config.d_m)
    prev = Tensor(rng.standard_normal(shape))
    z_op = Tensor(rng.standard_normal(shape))
    z_res = Tensor(rng.standard_normal(shape))
    window = MemoryWindow(ops=[prev], results=[prev])
    m_op, m_res, a_op = module.operation_composition(z_op, z_res, window)
    assert a_op is None
    assert m_op is z_op and m_res is z_res
    # the rollout still works end to end and every parameter gets a gradient
    x_v, x_l, l_s = random_inputs(module.config, seed=27)
    out = module.forward(x_v, x_l, l_s)
    reduce_sum(out.y_s).backward()
    assert all(p.value.grad is not None for p in registry)


def test_composition_mask_shape():
    mask = composition_mask(3, 9)
    assert mask.shape == (3, 9)
    np.testing.assert_array_equal(mask[:, :3], np.eye(3))
    assert mask[:, 3:].sum() == 0


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def test_pool_single_op_returns_result_row():
    module, _ = make_module(n_op=1)
    rng = np.random.default_rng(15)
    m_op = Tensor(rng.standard_normal((1, 1, module.config.d_m)))
    m_res = Tensor(rng.standard_normal((1, 1, module.config.d_m)))
    l_s = Tensor(rng.standard_normal((1, module.config.d_l)))
    y_s, pool_att = module.pool_result(m_op, m_res, l_s)
    np.testing.assert_array_equal(y_s.data[0], m_res.data[0, 0])
    np.testing.assert_allclose(pool_att.data, 1.0, atol=0)


def test_pool_weights_normalized_and_convex():
    module, _ = make_module(n_op=4)
    rng = np.random.default_rng(16)
    m_op = Tensor(rng.standard_normal((3, 4, module.config.d_m)))
    m_res = Tensor(rng.standard_normal((3, 4, module.config.d_m)))
    l_s = Tensor(rng.standard_normal((3, module.config.d_l)))
    y_s, pool_att = module.pool_result(m_op, m_res, l_s)
    np.testing.assert_allclose(pool_att.data.sum(axis=-1), 1.0, atol=1e-9)
    lo = m_res.data.min(axis=1) - 1e-12
    hi = m_res.data.max(axis=1) + 1e-12
    assert (y_s.data >= lo).all() and (y_s.data <= hi).all()


# ---------------------------------------------------------------------------
# full rollout
# ---------------------------------------------------------------------------


def test_forward_deterministic():
    module, _ = make_module(t_steps=3)
    x_v, x_l, l_s = random_inputs(module.config, seed=17)
    a = module.forward(x_v, x_l, l_s)
    b = module.forward(x_v, x_l, l_s)
    np.testing.assert_array_equal(a.y_s.data, b.y_s.data)
    np.testing.assert_array_equal(a.trace.lang_atts, b.trace.lang_atts)


def test_forward_rejects_non_finite_inputs():
    module, _ = make_module()
    x_v, x_l, l_s = random_inputs(module.config)
    x_v.data[0, 0, 0] = np.nan
    with pytest.raises(NumericsError, match="non-finite"):
        module.forward(x_v, x_l, l_s)


def test_y_r_is_the_final_result_state():
    module, _ = make_module(t_steps=2)
    config = module.config
    x_v, x_l, l_s = random_inputs(config, seed=18)
    out = module.forward(x_v, x_l, l_s)
    assert out.y_r.shape == (1, config.n_op, config.d_m)
    # Re-run the rollout by hand; y_r must be the final result state with
    # zero tolerance.
    state = module.init_memory(1)
    window = MemoryWindow(ops=[state.op], results=[state.res])
    for _ in range(config.t_steps):
        z_op, _ = module.operation_formation(x_l, state.op)
        z_res, _ = module.operation_execution(x_v, z_op, state.res)
        m_op, m_res, _ = module.operation_composition(z_op, z_res, window)
        state = MemoryState(op=m_op, res=m_res)
        window = window.push(state, config.w)
    assert np.array_equal(out.y_r.data, state.res.data)


def test_parameter_count_constant_across_slots_and_steps():
    counts = []
    for n_op, t in ((1, 1), (6, 9)):
        registry = ParameterRegistry()
        IprmModule(IprmConfig(d_m=32, n_op=n_op, t_steps=t, r=2, w=2),
                   registry, np.random.default_rng(0))
        counts.append((len(registry), registry.count_values()))
    assert counts[0] == counts[1]


def test_window_semantics_across_lookbacks():
    for w in (0, 1, 2):
        module, _ = make_module(t_steps=5, w=w, n_op=3)
        x_v, x_l, l_s = random_inputs(module.config, seed=19)
        out = module.forward(x_v, x_l, l_s)
        for t in range(5):
            retained = min(max(1, w), t + 1)
            assert out.trace.window_lengths[t] == retained
            assert out.trace.comp_key_counts[t] == 3 * (1 + min(w, t + 1))


def test_batch_independence():
    module, _ = make_module(t_steps=2)
    rng = np.random.default_rng(20)
    x_v = rng.standard_normal((2, 4, module.config.d_v))
    x_l = rng.standard_normal((2, 3, module.config.d_l))
    l_s = rng.standard_normal((2, module.config.d_l))
    batched = module.forward(Tensor(x_v), Tensor(x_l), Tensor(l_s))
    for i in range(2):
        single = module.forward(Tensor(x_v[i:i + 1]), Tensor(x_l[i:i + 1]),
                                Tensor(l_s[i:i + 1]))
        np.testing.assert_allclose(batched.y_s.data[i], single.y_s.data[0],
                                   atol=1e-9)


def test_attention_rows_normalized_in_rollout():
    module, _ = make_module(t_steps=3, n_op=3, w=2)
    x_v, x_l, l_s = random_inputs(module.config, batch=2, seed=21)
    out = module.forward(x_v, x_l, l_s)
    np.testing.assert_allclose(out.trace.lang_atts.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.trace.vis_atts.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.trace.pool_att.sum(axis=-1), 1.0, atol=1e-6)
    for a in out.trace.comp_atts:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_trace_sample_views():
    module, _ = make_module(t_steps=2, n_op=2)
    x_v, x_l, l_s = random_inputs(module.config, batch=3, n_l=4, n_v=5, seed=22)
    out = module.forward(x_v, x_l, l_s)
    one = out.trace.sample(1)
    assert one.lang_atts.shape == (2, 2, 4)
    assert one.vis_atts.shape == (2, 2, 5)
    assert one.pool_att.shape == (2,)


def test_step_errors_carry_step_index():
    module, _ = make_module()
    x_v, x_l, l_s = random_inputs(module.config)
    bad_mask = np.ones((1, 1, 3))  # blocks every language token
    with pytest.raises(NumericsError, match="reasoning step 0"):
        module.forward(x_v, x_l, l_s, lang_mask=bad_mask)


def test_functional_forward_matches_method():
    module, _ = make_module(t_steps=2)
    x_v, x_l, l_s = random_inputs(module.config, seed=25)
    a = module.forward(x_v, x_l, l_s)
    b = iprm_forward(x_v, x_l, l_s, module.config, module)
    np.testing.assert_array_equal(a.y_s.data, b.y_s.data)


def test_replace_config_shares_weights_across_slots_and_steps():
    module, registry = make_module(n_op=2, t_steps=2)
    n_params = len(registry)
    grown = replace_config(module, IprmConfig(
        d_m=16, n_op=3, t_steps=4, r=2, w=2, d_l=12, d_v=10))
    x_v, x_l, l_s = random_inputs(grown.config, seed=26)
    out = grown.forward(x_v, x_l, l_s)
    assert out.y_r.shape == (1, 3, 16)
    assert len(registry) == n_params  # no new parameters were created
    with pytest.raises(NumericsError, match="feature widths"):
        replace_config(module, IprmConfig(d_m=32, n_op=2, t_steps=2, r=2, w=1))


def test_quick_gradient_spotcheck():
    module, registry = make_module(d_m=8, n_op=2, t_steps=2, r=2, w=1,
                                   d_l=8, d_v=8)
    x_v, x_l, l_s = random_inputs(module.config, seed=23)
    rng = np.random.default_rng(24)
    coeff = Tensor(rng.standard_normal(8))

    def objective():
        out = module.forward(x_v, x_l, l_s)
        return reduce_sum(mul(reshape(out.y_s, (8,)), coeff))

    for name in ("iprm.form.q1.w", "iprm.exec.s.w", "iprm.comp.res_v.b",
                 "iprm.mem.op_init", "iprm.pool.score.w"):
        err = finite_difference_check(objective, registry.get(name), h=1e-5)
        assert err < 1e-3, f"{name}: {err}"
