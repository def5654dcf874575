"""The reasoning module: parallel operation/result memory updated over
iterative steps.

Each step runs three stages. Formation attends over language tokens to
produce a fresh set of latent operations from the current operation states.
Execution attends over visual tokens with per-operation modulated keys to
produce matching latent results. Composition folds both into memory through
a recurrent update plus masked inter-operation attention over a lookback
window of past states. After the last step, a single language-summary query
pools the result states into the answer representation.

Weights are shared across steps and across parallel operation slots, so the
parameter count does not depend on either knob.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import attention_with_secondary_values, modulated_attention
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
    nonlin_phi,
    reshape,
    slice_axis,
    tanh,
)

RESULT_VALUE_ROUTES = ("windowed", "candidates")


@dataclass(frozen=True)
class IprmConfig:
    """Hyperparameters governing every module shape.

    d_m: internal feature width; n_op: parallel operation slots; t_steps:
    iterative steps; r: execution-stage feature reduction ratio; w: memory
    lookback window length; d_l / d_v: language / visual input widths
    (default d_m).
    """

    d_m: int = 512
    n_op: int = 6
    t_steps: int = 9
    r: int = 2
    w: int = 2
    d_l: int | None = None
    d_v: int | None = None
    phi: str = "tanh"
    # Ablation switch for the whole composition unit; off means the new
    # memory state is just (z_op, z_res), with no recurrent integration and
    # no inter-operation attention.
    use_composition: bool = True
    result_values: str = "windowed"
    init_capacity: int = 16

    def __post_init__(self):
        object.__setattr__(self, "d_l", self.d_l or self.d_m)
        object.__setattr__(self, "d_v", self.d_v or self.d_m)
        for name in ("d_m", "n_op", "t_steps", "r", "d_l", "d_v", "init_capacity"):
            if getattr(self, name) < 1:
                raise NumericsError(f"IprmConfig.{name} must be >= 1")
        if self.w < 0:
            raise NumericsError("IprmConfig.w must be >= 0")
        if self.d_m % self.r:
            raise NumericsError(f"d_m={self.d_m} is not divisible by r={self.r}")
        if self.n_op > self.init_capacity:
            raise NumericsError(
                f"n_op={self.n_op} exceeds init-parameter capacity {self.init_capacity}"
            )
        if self.result_values not in RESULT_VALUE_ROUTES:
            raise NumericsError(f"result_values must be one of {RESULT_VALUE_ROUTES}")


@dataclass
class MemoryState:
    """Paired operation and result states, each [batch, n_op, d_m]; row i of
    one is keyed to row i of the other."""

    op: Tensor
    res: Tensor


@dataclass
class MemoryWindow:
    """Past memory snapshots, newest first, at most max(1, w) of them.

    The newest entry always exists so the recurrent update has a previous
    state; the composition attention additionally sees the first
    min(w, len) entries as extra keys (none at all when w == 0).
    """

    ops: list
    results: list

    def __len__(self):
        return len(self.ops)

    def push(self, state: MemoryState, w: int) -> "MemoryWindow":
        keep = max(1, w)
        return MemoryWindow(
            ops=([state.op] + self.ops)[:keep],
            results=([state.res] + self.results)[:keep],
        )


@dataclass
class ReasoningTrace:
    """Attention maps recorded step by step, with a leading batch axis.

    lang_atts [b, t, n_op, n_l]; vis_atts [b, t, n_op, n_v]; pool_att
    [b, n_op]; predicted_answer [b] (filled by the classifier wrapper).
    comp_atts / window_lengths / comp_key_counts are rollout diagnostics:
    the composition attention per step and the instrumented window sizes.
    """

    lang_atts: np.ndarray
    vis_atts: np.ndarray
    pool_att: np.ndarray
    predicted_answer: np.ndarray | None = None
    comp_atts: list = field(default_factory=list)
    window_lengths: list = field(default_factory=list)
    comp_key_counts: list = field(default_factory=list)

    def sample(self, i: int) -> "ReasoningTrace":
        return ReasoningTrace(
            lang_atts=self.lang_atts[i],
            vis_atts=self.vis_atts[i],
            pool_att=self.pool_att[i],
            predicted_answer=(None if self.predicted_answer is None
                              else self.predicted_answer[i]),
            comp_atts=[a[i] for a in self.comp_atts],
            window_lengths=list(self.window_lengths),
            comp_key_counts=list(self.comp_key_counts),
        )


@dataclass
class IprmOutput:
    y_s: Tensor    # [b, d_m] pooled reasoning result
    y_r: Tensor    # [b, n_op, d_m]; the final memory result states themselves
    trace: ReasoningTrace


def composition_mask(n_op: int, n_keys: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Identity over the candidate block so no operation attends to its own
    new state; window positions stay open."""
    mask = np.zeros((n_op, n_keys), dtype=dtype)
    idx = np.arange(min(n_op, n_keys))
    mask[idx, idx] = 1.0
    return mask


class IprmModule:
    """The mechanism; owns its parameters via the shared registry."""

    def __init__(self, config: IprmConfig, registry: ParameterRegistry,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE, prefix="iprm"):
        self.config = config
        self.dtype = dtype
        c = config
        d, dr = c.d_m, c.d_m // c.r

        def lin(name, d_in, d_out):
            return Linear(registry, f"{prefix}.{name}", d_in, d_out, rng, dtype)

        # Formation: language attention conditioned on prior operation states.
        self.form_q1 = lin("form.q1", d, d)
        self.form_q2 = lin("form.q2", d, d)
        self.form_k = lin("form.k", c.d_l, d)
        self.form_v = lin("form.v", c.d_l, d)
        self.form_score = lin("form.score", d, 1)

        # Execution: modulated visual attention at reduced width d_m / r.
        self.exec_op = lin("exec.op", d, dr)
        self.exec_res = lin("exec.res", d, dr)
        self.exec_s = lin("exec.s", 2 * dr, dr)
        self.exec_k1 = lin("exec.k1", c.d_v, dr)
        self.exec_k2 = lin("exec.k2", 2 * dr, dr)
        self.exec_k3 = lin("exec.k3", dr, dr)
        self.exec_q = lin("exec.q", d, dr)
        self.exec_v = lin("exec.v", c.d_v, d)
        self.exec_score = lin("exec.score", dr, 1)

        # Composition: recurrent integrate, then masked inter-op attention.
        # The whole unit disappears under the ablation switch.
        if c.use_composition:
            self.comp_op_u = lin("comp.op_u", d, d)
            self.comp_op_h = lin("comp.op_h", d, d)
            self.comp_res_u = lin("comp.res_u", d, d)
            self.comp_res_h = lin("comp.res_h", d, d)
            self.comp_op_q = lin("comp.op_q", d, d)
            self.comp_op_k = lin("comp.op_k", d, d)
            self.comp_op_v = lin("comp.op_v", d, d)
            self.comp_res_v = lin("comp.res_v", d, d)
            self.comp_score = lin("comp.score", d, 1)
            self.comp_op_u2 = lin("comp.op_u2", d, d)
            self.comp_res_v2 = lin("comp.res_v2", d, d)

        # Pooling query comes from the language summary.
        self.pool_q = lin("pool.q", c.d_l, d)
        self.pool_k = lin("pool.k", d, d)
        self.pool_score = lin("pool.score", d, 1)

        self.mem_op_init = registry.create(
            f"{prefix}.mem.op_init",
            rng.standard_normal((c.init_capacity, d)).astype(dtype))
        self.mem_res_init = registry.create(
            f"{prefix}.mem.res_init",
            rng.standard_normal((c.init_capacity, d)).astype(dtype))

    # -- stages -------------------------------------------------------------

    def init_memory(self, batch: int) -> MemoryState:
        """Slice the first n_op rows of the learned init and broadcast over
        the batch. The init rows are trainable like any other parameter."""
        c = self.config
        if c.n_op > self.mem_op_init.value.shape[0]:
            raise NumericsError(
                f"n_op={c.n_op} exceeds init-parameter capacity "
                f"{self.mem_op_init.value.shape[0]}"
            )

        def expand(param):
            rows = slice_axis(param.value, 0, 0, c.n_op)
            return broadcast_to(reshape(rows, (1, c.n_op, c.d_m)),
                                (batch, c.n_op, c.d_m))

        return MemoryState(op=expand(self.mem_op_init),
                           res=expand(self.mem_res_init))

    def language_kv(self, x_l: Tensor):
        """Key/value projections of the language tokens; step-independent,
        so the rollout computes them once."""
        return self.form_k(x_l), self.form_v(x_l)

    def operation_formation(self, x_l: Tensor, m_op: Tensor, cached_kv=None,
                            mask=None):
        """New latent operations from language, queried by prior op states.

        x_l [b, n_l, d_l], m_op [b, n_op, d_m] -> (z_op [b, n_op, d_m],
        lang_att [b, n_op, n_l]).
        """
        q = self.form_q2(tanh(self.form_q1(m_op)))
        k, v = cached_kv if cached_kv is not None else self.language_kv(x_l)
        att = modulated_attention(q, k, v, self.form_score, mask=mask)
        return att.output, att.weights

    def visual_projections(self, x_v: Tensor):
        """Reduced key basis and value projection of the visual tokens; also
        step-independent."""
        return self.exec_k1(x_v), self.exec_v(x_v)

    def operation_execution(self, x_v: Tensor, z_op: Tensor, m_res: Tensor,
                            cached_vis=None):
        """Execute the new operations against the visual tokens.

        A modulation vector per operation (from z_op and the prior results)
        scales a reduced projection of every visual token, so each of the
        n_op slots attends over its own key set. x_v [b, n_v, d_v] ->
        (z_res [b, n_op, d_m], vis_att [b, n_op, n_v]).
        """
        c = self.config
        dr = c.d_m // c.r
        k1, vv = cached_vis if cached_vis is not None else self.visual_projections(x_v)
        b, n_v = k1.shape[0], k1.shape[1]
        n_op = z_op.shape[1]

        s = self.exec_s(concat([self.exec_op(z_op), self.exec_res(m_res)], axis=-1))
        k1e = reshape(k1, (b, 1, n_v, dr))
        k_mod = mul(reshape(s, (b, n_op, 1, dr)), k1e)  # [b, n_op, n_v, dr]
        k_base = broadcast_to(k1e, (b, n_op, n_v, dr))
        keys = self.exec_k3(
            nonlin_phi(self.exec_k2(concat([k_base, k_mod], axis=-1)), c.phi))

        q = reshape(self.exec_q(z_op), (b, n_op, 1, dr))
        values = reshape(vv, (b, 1, n_v, c.d_m))
        att = modulated_attention(q, keys, values, self.exec_score)
        z_res = reshape(att.output, (b, n_op, c.d_m))
        vis_att = reshape(att.weights, (b, n_op, n_v))
        return z_res, vis_att

    def operation_composition(self, z_op: Tensor, z_res: Tensor,
                              window: MemoryWindow):
        """Fold the new operations and results into memory.

        Recurrent update against the newest window entry, then masked
        attention of each candidate over the other candidates plus up to w
        past snapshots. With the unit ablated away the new memory is simply
        (z_op, z_res). Returns (m_op_next, m_res_next, a_op); a_op is None
        under the ablation.
        """
        c = self.config
        if len(window) == 0:
            raise NumericsError("composition needs a non-empty memory window")
        if len(window) > max(1, c.w):
            raise NumericsError(
                f"window length {len(window)} exceeds max(1, w)={max(1, c.w)}"
            )
        if not c.use_composition:
            return z_op, z_res, None
        m_op_c = add(self.comp_op_u(z_op), self.comp_op_h(window.ops[0]))
        m_res_c = add(self.comp_res_u(z_res), self.comp_res_h(window.results[0]))

        past_ops = window.ops[:c.w]
        past_res = window.results[:c.w]
        op_states = concat([m_op_c, *past_ops], axis=1)
        res_states = concat([m_res_c, *past_res], axis=1)
        n_op, n_keys = z_op.shape[1], op_states.shape[1]

        q = self.comp_op_q(m_op_c)
        k = self.comp_op_k(op_states)
        v_op = self.comp_op_v(op_states)
        v_res = self.comp_res_v(res_states)
        mask = composition_mask(n_op, n_keys, dtype=self.dtype)
        m_op_att, res_mix, a_op = attention_with_secondary_values(
            q, k, v_op, v_res, self.comp_score, mask=mask)

        m_op_next = add(m_op_att, self.comp_op_u2(m_op_c))
        if c.result_values == "windowed":
            m_res_next = add(res_mix, self.comp_res_v2(m_res_c))
        else:
            # Alternate route: candidate-block attention applied to the
            # updated candidate result states only.
            a_cand = slice_axis(a_op, -1, 0, n_op)
            m_res_next = add(matmul(a_cand, m_res_c), self.comp_res_v2(m_res_c))
        return m_op_next, m_res_next, a_op

    def pool_result(self, m_op_final: Tensor, m_res_final: Tensor, l_s: Tensor):
        """Weight the final result states by how much each final operation
        state matches the language summary. Values are the raw result
        states, unprojected."""
        c = self.config
        b = l_s.shape[0]
        q = reshape(self.pool_q(l_s), (b, 1, c.d_m))
        k = self.pool_k(m_op_final)
        att = modulated_attention(q, k, m_res_final, self.pool_score)
        y_s = reshape(att.output, (b, c.d_m))
        pool_att = reshape(att.weights, (b, m_op_final.shape[1]))
        return y_s, pool_att

    # -- rollout ------------------------------------------------------------

    def forward(self, x_v: Tensor, x_l: Tensor, l_s: Tensor,
                lang_mask=None) -> IprmOutput:
        """Run the full rollout: init, t_steps of formation -> execution ->
        composition with window maintenance, then pooling.

        lang_mask, if given, must broadcast to [b, n_op, n_l] with 1 marking
        padded language positions.
        """
        c = self.config
        for name, t in (("x_v", x_v), ("x_l", x_l), ("l_s", l_s)):
            if not np.all(np.isfinite(t.data)):
                raise NumericsError(f"non-finite values in {name}")
        if x_l.shape[-1] != c.d_l:
            raise NumericsError(
                f"x_l feature dim {x_l.shape[-1]} does not match d_l={c.d_l}")
        if x_v.shape[-1] != c.d_v:
            raise NumericsError(
                f"x_v feature dim {x_v.shape[-1]} does not match d_v={c.d_v}")
        b = x_v.shape[0]

        state = self.init_memory(b)
        window = MemoryWindow(ops=[state.op], results=[state.res])
        lang_kv = self.language_kv(x_l)
        vis_cache = self.visual_projections(x_v)

        lang_atts, vis_atts, comp_atts = [], [], []
        window_lengths, comp_key_counts = [], []
        for t in range(c.t_steps):
            try:
                z_op, lang_att = self.operation_formation(
                    x_l, state.op, cached_kv=lang_kv, mask=lang_mask)
                z_res, vis_att = self.operation_execution(
                    x_v, z_op, state.res, cached_vis=vis_cache)
                window_lengths.append(len(window))
                attended = min(c.w, len(window))
                comp_key_counts.append(c.n_op * (1 + attended)
                                       if c.use_composition else 0)
                m_op, m_res, a_op = self.operation_composition(z_op, z_res, window)
            except NumericsError as err:
                raise NumericsError(f"reasoning step {t}: {err}") from err
            state = MemoryState(op=m_op, res=m_res)
            window = window.push(state, c.w)
            lang_atts.append(lang_att.data)
            vis_atts.append(vis_att.data)
            if a_op is not None:
                comp_atts.append(a_op.data)

        y_s, pool_att = self.pool_result(state.op, state.res, l_s)
        trace = ReasoningTrace(
            lang_atts=np.stack(lang_atts, axis=1),
            vis_atts=np.stack(vis_atts, axis=1),
            pool_att=pool_att.data,
            comp_atts=comp_atts,
            window_lengths=window_lengths,
            comp_key_counts=comp_key_counts,
        )
        return IprmOutput(y_s=y_s, y_r=state.res, trace=trace)


def iprm_forward(x_v, x_l, l_s, config: IprmConfig, module: IprmModule,
                 lang_mask=None) -> IprmOutput:
    """Functional entry point; ``module`` holds the parameters."""
    if module.config != config:
        module = replace_config(module, config)
    return module.forward(x_v, x_l, l_s, lang_mask=lang_mask)


def replace_config(module: IprmModule, config: IprmConfig) -> IprmModule:
    """Reuse a module's parameters under a different step/slot count.

    Only knobs that do not change parameter shapes may differ (n_op,
    t_steps, w); this is what weight tying across those knobs means.
    """
    old, new = module.config, config
    if (old.d_m, old.r, old.d_l, old.d_v) != (new.d_m, new.r, new.d_l, new.d_v):
        raise NumericsError("cannot retarget a module across feature widths")
    if new.n_op > old.init_capacity:
        raise NumericsError(
            f"n_op={new.n_op} exceeds init-parameter capacity {old.init_capacity}")
    clone = object.__new__(IprmModule)
    clone.__dict__.update(module.__dict__)
    clone.config = replace(config, init_capacity=old.init_capacity)
    return clone
