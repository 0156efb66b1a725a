"""Deterministic synthetic VQA-style continual-learning sequences.

Scenes are small grids of objects. Each object is a concept (shape class x
supercategory) painted in one colour. Visual tokens are one per grid cell:

    [shape one-hot (12) | supercategory one-hot (5) | colour one-hot (8) |
     row one-hot (4) | column one-hot (4)] + N(0, noise_std)

Three settings of five tasks each are produced: ``DiverseContent`` (random
concept groups), ``TaxonomyContent`` (one supercategory per task) and
``QuestionTypes`` (one question type per task).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle", "star", "heart", "cross",
          "ring", "diamond", "hexagon", "arrow", "moon", "cube")
SUPERCATEGORIES = ("animals", "food", "interior", "sports", "transport")
COLORS = ("red", "orange", "yellow", "green", "blue", "purple", "gray", "white")
COLOR_FAMILIES = {"red": "warm", "orange": "warm", "yellow": "warm",
                  "green": "cool", "blue": "cool", "purple": "cool",
                  "gray": "neutral", "white": "neutral"}
QTYPES = ("count", "color", "existence", "position", "shape")
GRID = 4
MAX_OBJECTS = 6
MAX_COUNT = 4
MAX_DISTRACTORS = 2
NUM_TASKS = 5
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")

TEMPLATES = {
    "count": ("how many {} are there", "count the {} objects", "number of {}"),
    "color": ("what color is the {}", "which color does the {} have", "color of the {}"),
    "existence": ("is there a {}", "does the scene contain a {}", "any {} in the picture"),
    "position": ("where is the {}", "in which part is the {}"),
    "shape": ("what shape is the {} object", "which shape is {}", "shape of the {} thing"),
}

ANSWERS = {
    "count": tuple(str(k) for k in range(1, MAX_COUNT + 1)),
    "color": COLORS,
    "existence": ("yes", "no"),
    "position": QUADRANTS,
    "shape": SHAPES,
}


def _build_vocab() -> dict[str, int]:
    words = ["<pad>"]
    for temps in TEMPLATES.values():
        for t in temps:
            words += [w for w in t.split() if w != "{}"]
    words += list(SHAPES) + list(COLORS)
    vocab: dict[str, int] = {}
    for w in words:
        vocab.setdefault(w, len(vocab))
    return vocab


VOCAB = _build_vocab()
VOCAB_SIZE = len(VOCAB)
FEATURE_DIM = len(SHAPES) + len(SUPERCATEGORIES) + len(COLORS) + 2 * GRID
NUM_CELLS = GRID * GRID
MAX_TEXT_LEN = max(len(t.split()) for temps in TEMPLATES.values() for t in temps)

_SHAPE0 = 0
_SUPER0 = _SHAPE0 + len(SHAPES)
_COLOR0 = _SUPER0 + len(SUPERCATEGORIES)
_ROW0 = _COLOR0 + len(COLORS)
_COL0 = _ROW0 + GRID


class SettingKind(str, Enum):
    DIVERSE = "DiverseContent"
    TAXONOMY = "TaxonomyContent"
    QTYPES = "QuestionTypes"


@dataclass(frozen=True)
class Concept:
    id: int
    shape_class: str
    supercategory: str


def default_universe() -> list[Concept]:
    """60 concepts: every shape class in every supercategory."""
    return [Concept(i * len(SHAPES) + j, s, sc)
            for i, sc in enumerate(SUPERCATEGORIES) for j, s in enumerate(SHAPES)]


@dataclass(frozen=True)
class SceneObject:
    concept: int
    color: str
    cell: int  # row-major index on the GRID x GRID board


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"scene must hold 1..{MAX_OBJECTS} objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("scene objects share a cell")


@dataclass(frozen=True)
class Question:
    qtype: str
    target: str  # shape name, or colour name for "shape" questions
    template: int = 0

    @property
    def tokens(self) -> tuple[int, ...]:
        text = TEMPLATES[self.qtype][self.template].format(self.target)
        return tuple(VOCAB[w] for w in text.split())


@dataclass(frozen=True)
class Sample:
    question_tokens: tuple[int, ...]
    visual: np.ndarray = field(compare=False)  # [NUM_CELLS, FEATURE_DIM], read-only
    label: str
    task: int
    qtype: str
    uid: str = ""

    def __post_init__(self):
        self.visual.setflags(write=False)


class Unanswerable(ValueError):
    pass


def oracle_answer(scene: Scene, question: Question, universe: Sequence[Concept] | None = None) -> str:
    """Ground-truth answer; raises :class:`Unanswerable` when the question has no unique answer."""
    universe = universe or default_universe()
    shape_of = {c.id: c.shape_class for c in universe}
    if question.qtype == "shape":
        hits = [o for o in scene.objects if o.color == question.target]
        if len(hits) != 1:
            raise Unanswerable(f"{len(hits)} objects are {question.target}")
        return shape_of[hits[0].concept]
    hits = [o for o in scene.objects if shape_of[o.concept] == question.target]
    if question.qtype == "existence":
        return "yes" if hits else "no"
    if question.qtype == "count":
        if not 1 <= len(hits) <= MAX_COUNT:
            raise Unanswerable(f"count {len(hits)} outside answer range")
        return str(len(hits))
    if len(hits) != 1:
        raise Unanswerable(f"{len(hits)} objects of shape {question.target}")
    if question.qtype == "color":
        return hits[0].color
    if question.qtype == "position":
        row, col = divmod(hits[0].cell, GRID)
        return QUADRANTS[2 * (row >= GRID // 2) + (col >= GRID // 2)]
    raise ValueError(f"unknown question type {question.qtype!r}")


def render_sample(scene: Scene, question: Question, noise_seed: int, *, task: int = 0,
                  noise_std: float = 0.1, universe: Sequence[Concept] | None = None,
                  uid: str = "") -> Sample:
    universe = universe or default_universe()
    by_id = {c.id: c for c in universe}
    feats = np.zeros((NUM_CELLS, FEATURE_DIM))
    for cell in range(NUM_CELLS):
        row, col = divmod(cell, GRID)
        feats[cell, _ROW0 + row] = 1.0
        feats[cell, _COL0 + col] = 1.0
    for obj in scene.objects:
        c = by_id[obj.concept]
        feats[obj.cell, _SHAPE0 + SHAPES.index(c.shape_class)] = 1.0
        feats[obj.cell, _SUPER0 + SUPERCATEGORIES.index(c.supercategory)] = 1.0
        feats[obj.cell, _COLOR0 + COLORS.index(obj.color)] = 1.0
    feats += np.random.default_rng(noise_seed).normal(0.0, noise_std, size=feats.shape)
    label = oracle_answer(scene, question, universe)
    return Sample(question.tokens, feats, label, task, question.qtype, uid)


# --------------------------------------------------------------------------
# scene construction per question type
# --------------------------------------------------------------------------


def _place(rng, concepts: list[int], colors: list[str], seed: int) -> Scene:
    cells = rng.choice(NUM_CELLS, size=len(concepts), replace=False)
    return Scene(tuple(SceneObject(int(c), col, int(cell))
                       for c, col, cell in zip(concepts, colors, cells)), seed)


def _make_pair(rng, qtype: str, allowed: list[Concept], seed: int) -> tuple[Scene, Question]:
    shapes = sorted({c.shape_class for c in allowed}, key=SHAPES.index)
    template = int(rng.integers(len(TEMPLATES[qtype])))
    rand_color = lambda: COLORS[int(rng.integers(len(COLORS)))]  # noqa: E731

    if qtype == "shape":
        first = allowed[int(rng.integers(len(allowed)))]
        color = rand_color()
        others = [c for c in COLORS if c != color]
        n_d = int(rng.integers(0, MAX_DISTRACTORS + 1))
        concepts = [first.id] + [allowed[int(rng.integers(len(allowed)))].id for _ in range(n_d)]
        colors = [color] + [others[int(rng.integers(len(others)))] for _ in range(n_d)]
        return _place(rng, concepts, colors, seed), Question("shape", color, template)

    target = shapes[int(rng.integers(len(shapes)))]
    same = [c for c in allowed if c.shape_class == target]
    other = [c for c in allowed if c.shape_class != target]
    if qtype == "count":
        k = int(rng.integers(1, MAX_COUNT + 1))
    elif qtype == "existence":
        k = int(rng.integers(1, 3)) if rng.random() < 0.5 else 0
    else:
        k = 1
    lo = 1 if k == 0 else 0
    n_d = int(rng.integers(lo, min(MAX_DISTRACTORS, MAX_OBJECTS - k) + 1)) if other else 0
    if k == 0 and not other:
        k = 1  # no distractor concept available; existence answer degenerates to "yes"
    concepts = [same[int(rng.integers(len(same)))].id for _ in range(k)]
    concepts += [other[int(rng.integers(len(other)))].id for _ in range(n_d)]
    colors = [rand_color() for _ in concepts]
    return _place(rng, concepts, colors, seed), Question(qtype, target, template)


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------


@dataclass
class Task:
    index: int
    name: str
    concepts: tuple[int, ...]
    qtypes: tuple[str, ...]
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    labels: tuple[str, ...]


@dataclass
class TaskSequence:
    kind: SettingKind
    seed: int
    tasks: list[Task]
    task_order: tuple[int, ...] = tuple(range(NUM_TASKS))

    def ordered(self) -> list[Task]:
        return [self.tasks[i] for i in self.task_order]

    def with_order(self, order: Sequence[int]) -> "TaskSequence":
        if sorted(order) != list(range(len(self.tasks))):
            raise ValueError(f"{order} is not a permutation of the tasks")
        return TaskSequence(self.kind, self.seed, self.tasks, tuple(int(i) for i in order))


def task_orders(seed: int, count: int, n_tasks: int = NUM_TASKS) -> list[tuple[int, ...]]:
    """``count`` task orders for a seed; order 0 is always the canonical one."""
    rng = np.random.default_rng([seed, 0x0DE5])
    orders = [tuple(range(n_tasks))]
    while len(orders) < count:
        perm = tuple(int(i) for i in rng.permutation(n_tasks))
        if perm not in orders or len(orders) >= _factorial(n_tasks):
            orders.append(perm)
    return orders[:count]


def _factorial(n):
    out = 1
    for i in range(2, n + 1):
        out *= i
    return out


def _group_concepts(kind: SettingKind, universe: list[Concept], rng) -> list[tuple[str, list[Concept]]]:
    supercats = sorted({c.supercategory for c in universe})
    if len(universe) < 50 or len(supercats) < NUM_TASKS:
        raise ValueError(f"universe too small for five disjoint tasks: {len(universe)} concepts, "
                         f"{len(supercats)} supercategories (need >= 50 and >= 5)")
    if kind is SettingKind.QTYPES:
        return [(q, list(universe)) for q in QTYPES]
    if kind is SettingKind.TAXONOMY:
        chosen = [s for s in SUPERCATEGORIES if s in supercats][:NUM_TASKS]
        if len(chosen) < NUM_TASKS:
            chosen = supercats[:NUM_TASKS]
        return [(s, [c for c in universe if c.supercategory == s]) for s in chosen]
    perm = rng.permutation(len(universe))[:50]
    groups = []
    for i in range(NUM_TASKS):
        members = sorted((universe[j] for j in perm[i * 10:(i + 1) * 10]), key=lambda c: c.id)
        groups.append((f"group{i}", members))
    return groups


def _make_split(seed: int, task: int, split: int, n: int, allowed: list[Concept],
                qtypes: Sequence[str], noise_std: float, universe) -> list[Sample]:
    rng = np.random.default_rng([seed, task, split])
    out = []
    for k in range(n):
        qtype = qtypes[int(rng.integers(len(qtypes)))]
        scene_seed = int(rng.integers(2**31))
        scene, question = _make_pair(np.random.default_rng(scene_seed), qtype, allowed, scene_seed)
        out.append(render_sample(scene, question, int(rng.integers(2**31)), task=task,
                                 noise_std=noise_std, universe=universe,
                                 uid=f"t{task}/{'trn val tst'.split()[split]}/{k}"))
    return out


def generate_sequence(seed: int, kind: SettingKind | str, sizes: Sequence[int] = (2000, 500, 1000),
                      *, noise_std: float = 0.1, universe: list[Concept] | None = None) -> TaskSequence:
    """Build the five tasks of a setting. Same arguments give bit-identical output."""
    kind = SettingKind(kind)
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError("sizes must be three positive counts (train, val, test)")
    universe = universe or default_universe()
    groups = _group_concepts(kind, universe, np.random.default_rng([seed, 0xC0C0]))
    tasks = []
    for i, (name, members) in enumerate(groups):
        qtypes = (name,) if kind is SettingKind.QTYPES else QTYPES
        splits = [_make_split(seed, i, s, n, members, qtypes, noise_std, universe)
                  for s, n in enumerate(sizes)]
        labels = sorted({smp.label for split in splits for smp in split})
        if kind is SettingKind.QTYPES:
            labels = list(ANSWERS[name])
        tasks.append(Task(i, name, tuple(c.id for c in members), tuple(qtypes), *splits, tuple(labels)))
    return TaskSequence(kind, seed, tasks)


# --------------------------------------------------------------------------
# question-gated linear probe features (learnability check)
# --------------------------------------------------------------------------


def probe_features(sample: Sample) -> np.ndarray:
    """Rendered features of the cells the question refers to, pooled.

    A linear classifier on these recovers the oracle answer for a single
    question type, showing the answer is a linear read-out of the rendering
    once the referenced cells are selected.
    """
    inv = {v: k for k, v in VOCAB.items()}
    words = [inv[t] for t in sample.question_tokens]
    vis = sample.visual
    occupied = vis[:, _COLOR0:_ROW0].max(axis=1) > 0.5
    if sample.qtype == "shape":
        target = next(w for w in words if w in COLORS)
        block = vis[:, _COLOR0:_ROW0]
        idx = COLORS.index(target)
    else:
        target = next(w for w in words if w in SHAPES)
        block = vis[:, _SHAPE0:_SUPER0]
        idx = SHAPES.index(target)
    hit = occupied & (block.argmax(axis=1) == idx)
    count = np.zeros(MAX_OBJECTS + 1)
    count[min(int(hit.sum()), MAX_OBJECTS)] = 1.0
    pooled = vis[hit].sum(axis=0) if hit.any() else np.zeros(FEATURE_DIM)
    return np.concatenate([count, pooled])


# --------------------------------------------------------------------------
# dump format
# --------------------------------------------------------------------------

DUMP_FIELDS = ("task", "qtype", "label", "question_tokens", "visual_shape", "visual", "uid")


def dump_samples(samples: Iterable[Sample], path: str | Path) -> None:
    """One JSON object per line, keys in ``DUMP_FIELDS`` order; floats use repr (exact)."""
    with open(path, "w") as fh:
        for s in samples:
            rec = {
                "task": s.task,
                "qtype": s.qtype,
                "label": s.label,
                "question_tokens": list(s.question_tokens),
                "visual_shape": list(s.visual.shape),
                "visual": s.visual.reshape(-1).tolist(),
                "uid": s.uid,
            }
            fh.write(json.dumps(rec) + "\n")


def load_samples(path: str | Path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            vis = np.array(rec["visual"], dtype=np.float64).reshape(rec["visual_shape"])
            out.append(Sample(tuple(rec["question_tokens"]), vis, rec["label"], rec["task"],
                              rec["qtype"], rec.get("uid", "")))
    return out
