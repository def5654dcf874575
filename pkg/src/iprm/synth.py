"""Synthetic compositional VQA task with a symbolic oracle.

Scenes are small sets of attributed objects on the unit square. Questions
are generated as typed functional programs first, evaluated by the oracle,
then rendered to a fixed templated surface form; linguistic variety is a
non-goal, compositional structure is the point. Four families:

* chain    - filter -> relate/same hops -> query_attr (iterative reasoning)
* parallel - max_occurring_attr, optionally composed into a chain
* logic    - and/or over two exist clauses
* count    - counting and count comparison

Ambiguous questions (non-unique referents, modal ties) are rejected at
generation time; the oracle signals them with a sentinel rather than
guessing.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

SHAPES = ("cube", "sphere", "cylinder", "cone")
COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")
SIZES = ("small", "large")
MATERIALS = ("metal", "rubber")
ATTRIBUTE_VALUES = {
    "shape": SHAPES,
    "color": COLORS,
    "size": SIZES,
    "material": MATERIALS,
}
ATTR_NAMES = tuple(ATTRIBUTE_VALUES)

DIRECTIONS = ("left", "right", "front", "behind")
FAMILIES = ("chain", "parallel", "logic", "count")
SPLITS = ("train", "val", "test")

MIN_OBJECT_DISTANCE = 0.05
MIN_OBJECTS, MAX_OBJECTS = 3, 10
PLACEMENT_BUDGET = 1000
QUESTION_BUDGET = 200

AMBIGUOUS = "__ambiguous__"

DATASET_FORMAT = "iprm-qa"
DATASET_VERSION = 1

PLURALS = {"cube": "cubes", "sphere": "spheres", "cylinder": "cylinders",
           "cone": "cones", "thing": "things"}
DIRECTION_TOKENS = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "front": ("in", "front", "of"),
    "behind": ("behind",),
}

_TEMPLATE_WORDS = (
    "what", "is", "the", "of", "a", "an", "with", "same", "as",
    "most", "common", "among", "thing", "things", "have",
    "how", "many", "are", "there", "and", "or",
    "more", "fewer", "than",
)
QUESTION_TOKENS = tuple(sorted(set(
    _TEMPLATE_WORDS
    + sum((tuple(DIRECTION_TOKENS[d]) for d in DIRECTIONS), ())
    + SHAPES + COLORS + SIZES + MATERIALS
    + tuple(PLURALS.values())
    + ATTR_NAMES
)))
ANSWERS = (("yes", "no")
           + tuple(str(i) for i in range(MAX_OBJECTS + 1))
           + SHAPES + COLORS + SIZES + MATERIALS)


class DatasetError(Exception):
    """Malformed dataset files and serialization problems."""


class ProgramError(Exception):
    """Ill-typed functional programs."""


class GenerationError(Exception):
    """Could not produce a valid sample within budget."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    material: str
    x: float
    y: float


@dataclass(frozen=True)
class Scene:
    objects: tuple
    seed: int


@dataclass(frozen=True)
class QASample:
    scene: Scene
    question: tuple       # surface tokens
    program: tuple        # functional program steps (dicts)
    answer: str
    family: str
    split: str

    @property
    def program_length(self) -> int:
        return len(self.program)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def gen_scene(seed: int, n_objects: int | None = None) -> Scene:
    """Deterministic scene from a single integer seed.

    Positions are rejection-sampled until every pair is at least
    MIN_OBJECT_DISTANCE apart so spatial relations are unambiguous.
    """
    rng = np.random.default_rng(np.uint64(seed))
    if n_objects is None:
        n_objects = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    if not MIN_OBJECTS <= n_objects <= MAX_OBJECTS:
        raise GenerationError(
            f"n_objects={n_objects} outside [{MIN_OBJECTS}, {MAX_OBJECTS}]")
    positions = []
    tries = 0
    while len(positions) < n_objects:
        if tries >= PLACEMENT_BUDGET:
            raise GenerationError(
                f"placement budget ({PLACEMENT_BUDGET}) exhausted for seed {seed}")
        tries += 1
        x, y = rng.uniform(0.0, 1.0, size=2)
        if all((x - px) ** 2 + (y - py) ** 2 >= MIN_OBJECT_DISTANCE ** 2
               for px, py in positions):
            positions.append((float(x), float(y)))
    objects = []
    for x, y in positions:
        objects.append(SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=SIZES[rng.integers(len(SIZES))],
            material=MATERIALS[rng.integers(len(MATERIALS))],
            x=x, y=y))
    return Scene(objects=tuple(objects), seed=int(seed))


# ---------------------------------------------------------------------------
# The symbolic oracle
# ---------------------------------------------------------------------------


def _relate_indices(objects, idx: int, direction: str):
    target = objects[idx]
    if direction == "left":
        return frozenset(i for i, o in enumerate(objects) if o.x < target.x)
    if direction == "right":
        return frozenset(i for i, o in enumerate(objects) if o.x > target.x)
    if direction == "front":
        return frozenset(i for i, o in enumerate(objects) if o.y < target.y)
    if direction == "behind":
        return frozenset(i for i, o in enumerate(objects) if o.y > target.y)
    raise ProgramError(f"unknown direction {direction!r}")


def _check_attr(attr: str):
    if attr not in ATTRIBUTE_VALUES:
        raise ProgramError(f"unknown attribute {attr!r}")


def oracle_answer(scene: Scene, program) -> str:
    """Evaluate a functional program against a scene.

    Returns the answer string, or the AMBIGUOUS sentinel when a step that
    needs a unique referent (relate, same_attr, query_attr) sees a
    non-singleton set or max_occurring_attr ties. Ill-typed programs raise
    ProgramError.
    """
    objects = scene.objects
    everything = frozenset(range(len(objects)))
    outputs = []

    def arg(step, i, kind):
        ins = step.get("in", [])
        if i >= len(ins):
            raise ProgramError(f"{step['op']} needs {i + 1} inputs, got {len(ins)}")
        ref = ins[i]
        if not isinstance(ref, int) or not 0 <= ref < len(outputs):
            raise ProgramError(f"bad input index {ref!r} at step {len(outputs)}")
        tag, value = outputs[ref]
        if tag != kind and tag != "ambiguous":
            raise ProgramError(
                f"{step['op']} wants a {kind} input, got {tag} from step {ref}")
        return tag, value

    def set_input(step):
        if not step.get("in"):
            return "set", everything
        return arg(step, 0, "set")

    for step in program:
        op = step.get("op")
        if op == "filter_attr":
            attr = step["attr"]
            _check_attr(attr)
            tag, members = set_input(step)
            if "value_from" in step:
                ref = step["value_from"]
                if not isinstance(ref, int) or not 0 <= ref < len(outputs):
                    raise ProgramError(f"bad value_from index {ref!r}")
                vtag, value = outputs[ref]
                if vtag == "ambiguous":
                    outputs.append(("ambiguous", AMBIGUOUS))
                    continue
                if vtag != "value":
                    raise ProgramError("value_from must reference a value step")
            else:
                value = step["value"]
                if value not in ATTRIBUTE_VALUES[attr]:
                    raise ProgramError(f"unknown {attr} value {value!r}")
            if tag == "ambiguous":
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            outputs.append(("set", frozenset(
                i for i in members if getattr(objects[i], attr) == value)))
        elif op == "relate":
            tag, members = set_input(step)
            if tag == "ambiguous" or len(members) != 1:
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            (idx,) = members
            outputs.append(("set", _relate_indices(objects, idx, step["direction"])))
        elif op == "same_attr":
            attr = step["attr"]
            _check_attr(attr)
            tag, members = set_input(step)
            if tag == "ambiguous" or len(members) != 1:
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            (idx,) = members
            value = getattr(objects[idx], attr)
            outputs.append(("set", frozenset(
                i for i in everything
                if i != idx and getattr(objects[i], attr) == value)))
        elif op == "count":
            tag, members = set_input(step)
            if tag == "ambiguous":
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            outputs.append(("int", len(members)))
        elif op == "exist":
            tag, members = set_input(step)
            if tag == "ambiguous":
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            outputs.append(("bool", len(members) > 0))
        elif op == "query_attr":
            attr = step["attr"]
            _check_attr(attr)
            tag, members = set_input(step)
            if tag == "ambiguous" or len(members) != 1:
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            (idx,) = members
            outputs.append(("value", getattr(objects[idx], attr)))
        elif op == "max_occurring_attr":
            attr = step["attr"]
            _check_attr(attr)
            tag, members = set_input(step)
            if tag == "ambiguous" or not members:
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            counts = Counter(getattr(objects[i], attr) for i in members)
            ranked = counts.most_common()
            if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            outputs.append(("value", ranked[0][0]))
        elif op in ("and", "or"):
            tag_a, a = arg(step, 0, "bool")
            tag_b, b = arg(step, 1, "bool")
            if tag_a == "ambiguous" or tag_b == "ambiguous":
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            outputs.append(("bool", (a and b) if op == "and" else (a or b)))
        elif op == "compare_count":
            tag_a, a = arg(step, 0, "int")
            tag_b, b = arg(step, 1, "int")
            if tag_a == "ambiguous" or tag_b == "ambiguous":
                outputs.append(("ambiguous", AMBIGUOUS))
                continue
            cmp = step.get("cmp", "more")
            if cmp == "more":
                outputs.append(("bool", a > b))
            elif cmp == "fewer":
                outputs.append(("bool", a < b))
            elif cmp == "equal":
                outputs.append(("bool", a == b))
            else:
                raise ProgramError(f"unknown comparator {cmp!r}")
        else:
            raise ProgramError(f"unknown program op {op!r}")

    if not outputs:
        raise ProgramError("empty program")
    tag, value = outputs[-1]
    if tag == "ambiguous":
        return AMBIGUOUS
    if tag == "bool":
        return "yes" if value else "no"
    if tag == "int":
        return str(value)
    if tag == "value":
        return value
    raise ProgramError(f"program ends in a {tag}, not an answer")


# ---------------------------------------------------------------------------
# Question builders
# ---------------------------------------------------------------------------


class _ProgramBuilder:
    def __init__(self):
        self.steps = []

    def add(self, op, in_=(), **extra) -> int:
        step = {"op": op, "in": [i for i in in_ if i is not None]}
        step.update(extra)
        self.steps.append(step)
        return len(self.steps) - 1

    def add_filters(self, filters: dict, src: int | None) -> int | None:
        prev = src
        for attr in ATTR_NAMES:
            if attr in filters:
                prev = self.add("filter_attr", [prev], attr=attr,
                                value=filters[attr])
        return prev


def _descriptor_tokens(filters: dict, plural=False):
    toks = []
    for attr in ("size", "color", "material"):
        if attr in filters:
            toks.append(filters[attr])
    if "shape" in filters:
        toks.append(PLURALS[filters["shape"]] if plural else filters["shape"])
    else:
        toks.append("things" if plural else "thing")
    return toks


def _matches(obj: SceneObject, filters: dict) -> bool:
    return all(getattr(obj, a) == v for a, v in filters.items())


def _unique_filters(rng, pool, target: SceneObject, max_attrs: int):
    """A filter dict that picks out ``target`` uniquely within ``pool``, or
    None. Empty dict is valid when the pool is just the target."""
    others = [o for o in pool if o is not target]
    if not others:
        return {}
    order = list(ATTR_NAMES)
    rng.shuffle(order)
    filters = {}
    for attr in order:
        if len(filters) >= max_attrs:
            break
        filters[attr] = getattr(target, attr)
        others = [o for o in others if _matches(o, filters)]
        if not others:
            # Sometimes keep one redundant attribute for surface variety.
            if len(filters) < max_attrs and rng.random() < 0.2:
                extra = [a for a in order if a not in filters]
                if extra:
                    filters[extra[0]] = getattr(target, extra[0])
            return filters
    return None


def _random_filters(rng, n_attrs: int, exclude=()):
    attrs = [a for a in ATTR_NAMES if a not in exclude]
    rng.shuffle(attrs)
    chosen = attrs[:n_attrs]
    return {a: ATTRIBUTE_VALUES[a][rng.integers(len(ATTRIBUTE_VALUES[a]))]
            for a in chosen}


def _relate_pool(objects, current: SceneObject, direction: str):
    if direction == "left":
        return [o for o in objects if o.x < current.x]
    if direction == "right":
        return [o for o in objects if o.x > current.x]
    if direction == "front":
        return [o for o in objects if o.y < current.y]
    return [o for o in objects if o.y > current.y]


def _build_reference(rng, scene: Scene, builder: _ProgramBuilder, hops: int):
    """A uniquely-referring chain of relate/same hops.

    Returns (last step index, surface tokens for "the <reference>", final
    object) or None when the scene does not support the requested depth.
    """
    objects = scene.objects
    anchor = objects[rng.integers(len(objects))]
    base = _unique_filters(rng, objects, anchor, max_attrs=3)
    if not base:
        return None  # the innermost reference must carry at least one word
    segments = [("base", base, None)]
    current = anchor
    for _ in range(hops):
        if rng.random() < 0.25:
            attr = ATTR_NAMES[rng.integers(len(ATTR_NAMES))]
            pool = [o for o in objects
                    if o is not current and getattr(o, attr) == getattr(current, attr)]
            hop = ("same", attr)
        else:
            direction = DIRECTIONS[rng.integers(len(DIRECTIONS))]
            pool = _relate_pool(objects, current, direction)
            hop = ("relate", direction)
        if not pool:
            return None
        nxt = pool[rng.integers(len(pool))]
        filters = _unique_filters(rng, pool, nxt, max_attrs=2)
        if filters is None:
            return None
        segments.append((hop[0], filters, hop[1]))
        current = nxt

    idx = builder.add_filters(segments[0][1], None)
    for kind, filters, detail in segments[1:]:
        if kind == "relate":
            idx = builder.add("relate", [idx], direction=detail)
        else:
            idx = builder.add("same_attr", [idx], attr=detail)
        idx = builder.add_filters(filters, idx)

    tokens = []
    for pos in range(len(segments) - 1, -1, -1):
        kind, filters, detail = segments[pos]
        tokens += _descriptor_tokens(filters)
        if pos == 0:
            break
        if kind == "relate":
            tokens += list(DIRECTION_TOKENS[detail]) + ["the"]
        else:
            tokens += ["with", "the", "same", detail, "as", "the"]
    return idx, tokens, current, segments


def _build_chain(rng, scene: Scene):
    hops = int(rng.choice([0, 1, 2, 3], p=[0.2, 0.3, 0.25, 0.25]))
    builder = _ProgramBuilder()
    ref = _build_reference(rng, scene, builder, hops)
    if ref is None:
        return None
    idx, ref_tokens, _, segments = ref
    free = [a for a in ATTR_NAMES if a not in segments[-1][1]]
    if not free:
        return None
    q_attr = free[rng.integers(len(free))]
    builder.add("query_attr", [idx], attr=q_attr)
    return builder.steps, ["what", q_attr, "is", "the"] + ref_tokens


def _build_parallel(rng, scene: Scene):
    m_attr = ATTR_NAMES[rng.integers(len(ATTR_NAMES))]
    variant = rng.integers(3)
    builder = _ProgramBuilder()
    if variant == 0:
        scope = _random_filters(rng, 1, exclude=(m_attr,))
        idx = builder.add_filters(scope, None)
        builder.add("max_occurring_attr", [idx], attr=m_attr)
        tokens = (["what", "is", "the", "most", "common", m_attr,
                   "among", "the"] + _descriptor_tokens(scope, plural=True))
        return builder.steps, tokens
    mode = builder.add("max_occurring_attr", [], attr=m_attr)
    idx = builder.add("filter_attr", [], attr=m_attr, value_from=mode)
    if variant == 1:
        n_lits = int(rng.integers(0, 3))
        lits = _random_filters(rng, n_lits, exclude=(m_attr, "shape"))
        idx = builder.add_filters(lits, idx) if lits else idx
        free = [a for a in ATTR_NAMES if a != m_attr and a not in lits]
        if not free:
            return None
        q_attr = free[rng.integers(len(free))]
        builder.add("query_attr", [idx], attr=q_attr)
        tokens = (["what", "is", "the", q_attr, "of", "the"]
                  + [lits[a] for a in ("size", "color", "material") if a in lits]
                  + ["thing", "with", "the", "most", "common", m_attr])
        return builder.steps, tokens
    builder.add("count", [idx])
    tokens = ["how", "many", "things", "have", "the", "most", "common", m_attr]
    return builder.steps, tokens


def _build_logic(rng, scene: Scene):
    op = "and" if rng.random() < 0.5 else "or"
    clauses = []
    for _ in range(2):
        if rng.random() < 0.55:
            obj = scene.objects[rng.integers(len(scene.objects))]
            attrs = list(ATTR_NAMES)
            rng.shuffle(attrs)
            chosen = attrs[:int(rng.integers(1, 3))]
            clauses.append({a: getattr(obj, a) for a in chosen})
        else:
            clauses.append(_random_filters(rng, int(rng.integers(1, 3))))
    if clauses[0] == clauses[1]:
        return None
    builder = _ProgramBuilder()
    exists = []
    for filters in clauses:
        idx = builder.add_filters(filters, None)
        exists.append(builder.add("exist", [idx]))
    builder.add(op, exists)
    tokens = (["is", "there", "a"] + _descriptor_tokens(clauses[0])
              + [op, "a"] + _descriptor_tokens(clauses[1]))
    return builder.steps, tokens


def _build_count(rng, scene: Scene):
    builder = _ProgramBuilder()
    roll = rng.random()
    if roll < 0.45:
        f_a = _random_filters(rng, int(rng.integers(1, 4)))
        f_b = _random_filters(rng, int(rng.integers(1, 4)))
        if f_a == f_b:
            return None
        cmp = ("more", "fewer", "equal")[rng.integers(3)]
        count_a = builder.add("count", [builder.add_filters(f_a, None)])
        count_b = builder.add("count", [builder.add_filters(f_b, None)])
        builder.add("compare_count", [count_a, count_b], cmp=cmp)
        if cmp == "equal":
            tokens = (["are", "there", "as", "many"]
                      + _descriptor_tokens(f_a, plural=True) + ["as"]
                      + _descriptor_tokens(f_b, plural=True))
        else:
            tokens = (["are", "there", cmp]
                      + _descriptor_tokens(f_a, plural=True) + ["than"]
                      + _descriptor_tokens(f_b, plural=True))
        return builder.steps, tokens
    if roll < 0.78:
        # how many <desc> are <direction> the <reference chain>
        hops = int(rng.choice([0, 1], p=[0.6, 0.4]))
        ref = _build_reference(rng, scene, builder, hops)
        if ref is None:
            return None
        idx, ref_tokens, _, _ = ref
        direction = DIRECTIONS[rng.integers(len(DIRECTIONS))]
        filters = {} if rng.random() < 0.5 else _random_filters(rng, 1)
        idx = builder.add("relate", [idx], direction=direction)
        idx = builder.add_filters(filters, idx) if filters else idx
        builder.add("count", [idx])
        tokens = (["how", "many"] + _descriptor_tokens(filters, plural=True)
                  + ["are"] + list(DIRECTION_TOKENS[direction]) + ["the"]
                  + ref_tokens)
        return builder.steps, tokens
    filters = _random_filters(rng, int(rng.integers(1, 3)))
    builder.add("count", [builder.add_filters(filters, None)])
    tokens = (["how", "many"] + _descriptor_tokens(filters, plural=True)
              + ["are", "there"])
    return builder.steps, tokens


_BUILDERS = {
    "chain": _build_chain,
    "parallel": _build_parallel,
    "logic": _build_logic,
    "count": _build_count,
}


def gen_question(rng: np.random.Generator, scene: Scene, family: str,
                 split: str = "train") -> QASample:
    """Sample a question of the given family whose oracle answer is unique
    and unambiguous, retrying up to the question budget."""
    try:
        builder = _BUILDERS[family]
    except KeyError:
        raise GenerationError(f"unknown question family {family!r}") from None
    for _ in range(QUESTION_BUDGET):
        built = builder(rng, scene)
        if built is None:
            continue
        program, tokens = built
        if not 2 <= len(program) <= 12:
            continue
        answer = oracle_answer(scene, tuple(program))
        if answer == AMBIGUOUS:
            continue
        return QASample(scene=scene, question=tuple(tokens),
                        program=tuple(program), answer=answer,
                        family=family, split=split)
    raise GenerationError(
        f"no valid {family!r} question for scene {scene.seed} "
        f"after {QUESTION_BUDGET} resamples")


# ---------------------------------------------------------------------------
# Dataset assembly and persistence
# ---------------------------------------------------------------------------


def scene_seed(global_seed: int, split: str, index: int) -> int:
    """Per-sample scene seed; the (split, index) entropy tuple partitions the
    seed space so train/val/test scenes are disjoint."""
    code = SPLITS.index(split)
    ss = np.random.SeedSequence([int(global_seed), code, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def _balance_cap(family: str) -> float:
    # A binary-answer family cannot keep both classes under 40%; it gets a
    # balanced 55% budget instead.
    return 0.55 if family == "logic" else 0.40


def generate_split(global_seed: int, split: str, n: int, families=FAMILIES):
    """Generate ``n`` balanced samples for one split.

    Families are interleaved round-robin; per family, a sample is rejected
    while its answer's running share would breach the family's balance cap.
    """
    families = tuple(families)
    for fam in families:
        if fam not in FAMILIES:
            raise GenerationError(f"unknown question family {fam!r}")
    samples = []
    answer_counts = {f: Counter() for f in families}
    totals = Counter()
    index = 0
    while len(samples) < n:
        family = families[len(samples) % len(families)]
        cap = _balance_cap(family)
        for attempt in range(QUESTION_BUDGET):
            seed = scene_seed(global_seed, split, index)
            index += 1
            scene = gen_scene(seed)
            rng = np.random.default_rng(
                np.random.SeedSequence([int(global_seed), SPLITS.index(split),
                                        int(index), 1]))
            try:
                sample = gen_question(rng, scene, family, split=split)
            except GenerationError:
                continue
            total = totals[family]
            share = (answer_counts[family][sample.answer] + 1) / (total + 1)
            if total >= 30 and share > cap * 0.95 and attempt < QUESTION_BUDGET - 1:
                continue
            answer_counts[family][sample.answer] += 1
            totals[family] += 1
            samples.append(sample)
            break
        else:
            raise GenerationError(
                f"could not balance family {family!r} within budget")
    return samples


def generate_dataset(global_seed: int, n_train: int, n_val: int, n_test: int,
                     families=FAMILIES):
    """-> dict split -> samples, each split independently balanced."""
    return {
        "train": generate_split(global_seed, "train", n_train, families),
        "val": generate_split(global_seed, "val", n_val, families),
        "test": generate_split(global_seed, "test", n_test, families),
    }


def _sample_record(sample: QASample) -> dict:
    return {
        "seed": sample.scene.seed,
        "split": sample.split,
        "family": sample.family,
        "objects": [vars(o) for o in sample.scene.objects],
        "question": list(sample.question),
        "program": [dict(step) for step in sample.program],
        "answer": sample.answer,
    }


def _record_sample(record: dict) -> QASample:
    objects = tuple(SceneObject(**o) for o in record["objects"])
    return QASample(
        scene=Scene(objects=objects, seed=record["seed"]),
        question=tuple(record["question"]),
        program=tuple(record["program"]),
        answer=record["answer"],
        family=record["family"],
        split=record["split"],
    )


def write_dataset(samples, path):
    """Line-delimited records, one sample per line, behind a version header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT,
                             "version": DATASET_VERSION}) + "\n")
        for sample in samples:
            fh.write(json.dumps(_sample_record(sample), sort_keys=True) + "\n")


def read_dataset(path):
    """Lossless inverse of write_dataset; an empty file is an empty dataset."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return samples
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}:1: malformed header: {err}") from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}:1: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetError(
            f"{path}:1: unsupported dataset version {header.get('version')!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            samples.append(_record_sample(record))
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise DatasetError(f"{path}:{lineno}: malformed sample: {err}") from None
    return samples


def majority_answer(samples):
    """Most frequent answer and its frequency; the shortcut baseline."""
    counts = Counter(s.answer for s in samples)
    answer, hits = counts.most_common(1)[0]
    return answer, hits / len(samples)


def majority_class_accuracy(train_samples, eval_samples) -> float:
    answer, _ = majority_answer(train_samples)
    if not eval_samples:
        return 0.0
    return sum(s.answer == answer for s in eval_samples) / len(eval_samples)


def with_split(sample: QASample, split: str) -> QASample:
    return replace(sample, split=split)
