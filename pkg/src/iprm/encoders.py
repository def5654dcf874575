"""Language and scene encoders plus the answer head that sandwich the
reasoning module.

Questions go through learned embeddings and a bidirectional gated recurrent
encoder: per-token states are the forward/backward concatenation, the
summary state l_s concatenates the two final direction states. Scenes become
one token per object from four attribute embeddings plus a nonlinear
projection of the (x, y) position; padded object slots are all-zero tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import BaselineConfig, TransformerBaseline
from .core import IprmConfig, IprmModule, IprmOutput
from .numerics import (
    DEFAULT_DTYPE,
    Linear,
    NumericsError,
    ParameterRegistry,
    Tensor,
    add,
    concat,
    embedding,
    matmul,
    mul,
    reshape,
    sigmoid,
    slice_axis,
    tanh,
)

PAD_TOKEN = "<pad>"
PAD_ID = 0


class VocabError(Exception):
    """Out-of-vocabulary token, answer or attribute value."""


class Vocab:
    """Dense token and answer id maps; id 0 of the token map is padding."""

    def __init__(self, tokens, answers):
        self.token_to_id = {PAD_TOKEN: PAD_ID}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.answer_to_id = {}
        for ans in answers:
            if ans not in self.answer_to_id:
                self.answer_to_id[ans] = len(self.answer_to_id)
        self.id_to_answer = [None] * len(self.answer_to_id)
        for ans, i in self.answer_to_id.items():
            self.id_to_answer[i] = ans

    @property
    def n_tokens(self):
        return len(self.token_to_id)

    @property
    def n_answers(self):
        return len(self.answer_to_id)

    def encode(self, tokens) -> np.ndarray:
        try:
            return np.array([self.token_to_id[t] for t in tokens], dtype=np.int64)
        except KeyError as err:
            raise VocabError(f"out-of-vocab token: {err.args[0]!r}") from None

    def encode_answer(self, answer: str) -> int:
        try:
            return self.answer_to_id[answer]
        except KeyError:
            raise VocabError(f"out-of-vocab answer: {answer!r}") from None

    def to_dict(self):
        tokens = [None] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            tokens[i] = tok
        return {"tokens": tokens[1:], "answers": list(self.id_to_answer)}

    @classmethod
    def from_dict(cls, d) -> "Vocab":
        return cls(d["tokens"], d["answers"])


@dataclass
class EncodedInputs:
    """Model-ready features for one batch."""

    x_l: Tensor            # [b, n_l, d_l]
    l_s: Tensor            # [b, d_l]
    x_v: Tensor            # [b, n_v, d_v]
    lang_mask: np.ndarray  # [b, 1, n_l]; 1 marks padded token positions
    lengths: np.ndarray    # [b] valid token counts


@dataclass
class Batch:
    """Numpy-side batch, padded; built by ``make_batch``."""

    token_ids: np.ndarray   # [b, n_l] int, 0-padded
    lengths: np.ndarray     # [b]
    attr_ids: np.ndarray    # [b, n_v, 4] int (shape, color, size, material)
    positions: np.ndarray   # [b, n_v, 2] float in [0, 1]
    obj_mask: np.ndarray    # [b, n_v]; 1 marks a real object
    answer_ids: np.ndarray  # [b]
    families: list
    program_lengths: np.ndarray

    def __len__(self):
        return self.token_ids.shape[0]


class GruCell:
    """Gated recurrent cell, reset gate applied to the projected state."""

    def __init__(self, registry, name, d_in, d_h, rng, dtype=DEFAULT_DTYPE):
        self.d_h = d_h
        self.wx = Linear(registry, f"{name}.wx", d_in, 3 * d_h, rng, dtype)
        self.wh = Linear(registry, f"{name}.wh", d_h, 3 * d_h, rng, dtype)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        d = self.d_h
        gx = self.wx(x)
        gh = self.wh(h)
        z = sigmoid(add(slice_axis(gx, -1, 0, d), slice_axis(gh, -1, 0, d)))
        r = sigmoid(add(slice_axis(gx, -1, d, 2 * d), slice_axis(gh, -1, d, 2 * d)))
        n = tanh(add(slice_axis(gx, -1, 2 * d, 3 * d),
                     mul(r, slice_axis(gh, -1, 2 * d, 3 * d))))
        one_minus_z = add(1.0, mul(-1.0, z))
        return add(mul(one_minus_z, n), mul(z, h))


class QuestionEncoder:
    """Embedding + bidirectional GRU; d_l = 2 * hidden width."""

    def __init__(self, registry, vocab_size, d_l, rng, dtype=DEFAULT_DTYPE,
                 prefix="enc.q"):
        if d_l % 2:
            raise NumericsError("question encoder needs an even d_l")
        self.d_l = d_l
        self.d_h = d_l // 2
        self.dtype = dtype
        scale = 1.0 / np.sqrt(d_l)
        self.emb = registry.create(
            f"{prefix}.emb",
            (rng.standard_normal((vocab_size, d_l)) * scale).astype(dtype))
        self.fwd = GruCell(registry, f"{prefix}.gru_f", d_l, self.d_h, rng, dtype)
        self.bwd = GruCell(registry, f"{prefix}.gru_b", d_l, self.d_h, rng, dtype)

    def __call__(self, token_ids: np.ndarray, lengths: np.ndarray):
        """token_ids [b, n_l] (0-padded), lengths [b] -> (x_l [b, n_l, d_l],
        l_s [b, d_l]).

        Padded steps carry the state through unchanged, so the final forward
        state is the state at each sample's last valid token and backward
        per-token states at padded positions stay zero.
        """
        b, n_l = token_ids.shape
        if n_l == 0:
            raise NumericsError("cannot encode an empty question")
        emb = embedding(self.emb.value, token_ids)  # [b, n_l, d_l]
        valid = (np.arange(n_l)[None, :] < lengths[:, None]).astype(self.dtype)

        def scan(cell, order):
            h = Tensor(np.zeros((b, self.d_h), dtype=self.dtype))
            states = [None] * n_l
            for t in order:
                x_t = reshape(slice_axis(emb, 1, t, t + 1), (b, self.d_l))
                m = Tensor(valid[:, t:t + 1])
                h_new = cell(x_t, h)
                h = add(mul(m, h_new), mul(add(1.0, mul(-1.0, m)), h))
                states[t] = h
            return states, h

        f_states, f_last = scan(self.fwd, range(n_l))
        b_states, b_last = scan(self.bwd, range(n_l - 1, -1, -1))
        per_token = [
            reshape(concat([f_states[t], b_states[t]], axis=-1), (b, 1, self.d_l))
            for t in range(n_l)
        ]
        x_l = concat(per_token, axis=1)
        l_s = concat([f_last, b_last], axis=-1)
        return x_l, l_s


class SceneEncoder:
    """One token per object: four attribute embeddings + position features."""

    def __init__(self, registry, attribute_sizes, d_v, rng,
                 dtype=DEFAULT_DTYPE, prefix="enc.v"):
        if d_v < 8:
            raise NumericsError("scene encoder needs d_v >= 8")
        self.d_v = d_v
        self.dtype = dtype
        self.emb_dim = d_v // 8
        self.pos_dim = d_v - 4 * self.emb_dim
        self.attr_names = tuple(attribute_sizes)
        self.tables = []
        scale = 1.0 / np.sqrt(max(self.emb_dim, 1))
        for name, size in attribute_sizes.items():
            table = registry.create(
                f"{prefix}.emb_{name}",
                (rng.standard_normal((size, self.emb_dim)) * scale).astype(dtype))
            self.tables.append(table)
        self.pos = Linear(registry, f"{prefix}.pos", 2, self.pos_dim, rng, dtype)

    def __call__(self, attr_ids: np.ndarray, positions: np.ndarray,
                 obj_mask: np.ndarray) -> Tensor:
        """attr_ids [b, n, 4], positions [b, n, 2], obj_mask [b, n] ->
        x_v [b, n, d_v] with padded rows exactly zero."""
        parts = [embedding(t.value, attr_ids[..., i])
                 for i, t in enumerate(self.tables)]
        parts.append(tanh(self.pos(Tensor(positions.astype(self.dtype)))))
        tokens = concat(parts, axis=-1)
        mask = Tensor(obj_mask.astype(self.dtype)[..., None])
        return mul(tokens, mask)


class AnswerClassifier:
    """Two-layer perceptron with a tanh hidden layer over y_s."""

    def __init__(self, registry, d_m, n_answers, rng, dtype=DEFAULT_DTYPE,
                 prefix="cls"):
        self.hidden = Linear(registry, f"{prefix}.hidden", d_m, d_m, rng, dtype)
        self.out = Linear(registry, f"{prefix}.out", d_m, n_answers, rng, dtype)

    def __call__(self, y_s: Tensor) -> Tensor:
        return self.out(tanh(self.hidden(y_s)))


def classify(head: AnswerClassifier, y_s: Tensor) -> Tensor:
    return head(y_s)


class VqaModel:
    """Encoders + reasoner + answer head; the trainable unit.

    ``reasoner_kind`` is "iprm", "cross" or "concat". For the baselines the
    reasoning trace is absent.
    """

    def __init__(self, vocab: Vocab, attribute_sizes,
                 config: IprmConfig | None = None,
                 baseline: BaselineConfig | None = None,
                 reasoner_kind: str = "iprm", seed: int = 0,
                 dtype=DEFAULT_DTYPE):
        if reasoner_kind not in ("iprm", "cross", "concat"):
            raise NumericsError(f"unknown reasoner kind {reasoner_kind!r}")
        self.vocab = vocab
        # Accept either name -> cardinality or name -> value tuple.
        self.attribute_sizes = {
            name: (size if isinstance(size, int) else len(size))
            for name, size in dict(attribute_sizes).items()
        }
        self.reasoner_kind = reasoner_kind
        self.config = config if config is not None else IprmConfig()
        self.baseline_config = baseline
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.registry = ParameterRegistry()
        rng = np.random.default_rng(seed)

        d_m, d_l, d_v = self.config.d_m, self.config.d_l, self.config.d_v
        self.question_encoder = QuestionEncoder(
            self.registry, vocab.n_tokens, d_l, rng, self.dtype)
        self.scene_encoder = SceneEncoder(
            self.registry, self.attribute_sizes, d_v, rng, self.dtype)
        if reasoner_kind == "iprm":
            self.reasoner = IprmModule(self.config, self.registry, rng, self.dtype)
        else:
            if baseline is None:
                baseline = BaselineConfig(variant=reasoner_kind, d_model=d_m)
            if baseline.variant != reasoner_kind:
                raise NumericsError(
                    f"baseline variant {baseline.variant!r} does not match "
                    f"reasoner kind {reasoner_kind!r}")
            self.baseline_config = baseline
            self.reasoner = TransformerBaseline(
                baseline, self.registry, rng, d_l=d_l, d_v=d_v, d_m=d_m,
                dtype=self.dtype)
        self.classifier = AnswerClassifier(
            self.registry, d_m, vocab.n_answers, rng, self.dtype)

    def encode(self, batch: Batch) -> EncodedInputs:
        x_l, l_s = self.question_encoder(batch.token_ids, batch.lengths)
        x_v = self.scene_encoder(batch.attr_ids, batch.positions, batch.obj_mask)
        n_l = batch.token_ids.shape[1]
        pad = (np.arange(n_l)[None, :] >= batch.lengths[:, None])
        lang_mask = pad.astype(self.dtype)[:, None, :]
        return EncodedInputs(x_l=x_l, l_s=l_s, x_v=x_v, lang_mask=lang_mask,
                             lengths=batch.lengths)

    def forward(self, batch: Batch):
        """-> (logits [b, n_answers], IprmOutput | None)."""
        enc = self.encode(batch)
        if self.reasoner_kind == "iprm":
            out: IprmOutput = self.reasoner.forward(
                enc.x_v, enc.x_l, enc.l_s, lang_mask=enc.lang_mask)
            logits = self.classifier(out.y_s)
            out.trace.predicted_answer = np.argmax(logits.data, axis=-1)
            return logits, out
        y_s = self.reasoner.forward(enc.x_v, enc.x_l, enc.l_s,
                                    lang_mask=enc.lang_mask)
        return self.classifier(y_s), None

    def zero_grad(self):
        self.registry.zero_grad()

    def parameter_count(self) -> int:
        return self.registry.count_values()


def make_batch(samples, vocab: Vocab, attribute_values) -> Batch:
    """Pad a list of task samples into one Batch.

    ``attribute_values`` maps attribute name -> tuple of values, in the
    order the scene encoder's tables were created.
    """
    if not samples:
        raise NumericsError("cannot batch zero samples")
    names = list(attribute_values)
    value_ids = {n: {v: i for i, v in enumerate(attribute_values[n])} for n in names}
    n_l = max(len(s.question) for s in samples)
    n_v = max(len(s.scene.objects) for s in samples)
    b = len(samples)

    token_ids = np.zeros((b, n_l), dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    attr_ids = np.zeros((b, n_v, len(names)), dtype=np.int64)
    positions = np.zeros((b, n_v, 2), dtype=np.float64)
    obj_mask = np.zeros((b, n_v), dtype=np.float64)
    answer_ids = np.zeros(b, dtype=np.int64)
    program_lengths = np.zeros(b, dtype=np.int64)

    for i, s in enumerate(samples):
        ids = vocab.encode(s.question)
        token_ids[i, :len(ids)] = ids
        lengths[i] = len(ids)
        for j, obj in enumerate(s.scene.objects):
            for a, name in enumerate(names):
                value = getattr(obj, name)
                try:
                    attr_ids[i, j, a] = value_ids[name][value]
                except KeyError:
                    raise VocabError(
                        f"unknown attribute value {value!r} for {name}") from None
            positions[i, j] = (obj.x, obj.y)
            obj_mask[i, j] = 1.0
        answer_ids[i] = vocab.encode_answer(s.answer)
        program_lengths[i] = len(s.program)

    return Batch(token_ids=token_ids, lengths=lengths, attr_ids=attr_ids,
                 positions=positions, obj_mask=obj_mask, answer_ids=answer_ids,
                 families=[s.family for s in samples],
                 program_lengths=program_lengths)
