"""Representation similarity (linear CKA, text/vision ratio) and continual-learning metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

_CKA_FLOOR = 1e-9


class AnalysisError(ValueError):
    pass


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA in feature space: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise AnalysisError(f"CKA needs two matrices with equal row counts, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise AnalysisError("CKA needs at least two rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom <= 0.0:
        raise AnalysisError("zero-variance input to CKA")
    num = np.linalg.norm(yc.T @ xc) ** 2
    return float(min(max(num / denom, 0.0), 1.0))


@dataclass
class RepresentationDump:
    """``text[t][d]`` / ``vision[t][d]``: rows are probe positions, stage t = 0 is the first stage."""

    text: list[list[np.ndarray]]
    vision: list[list[np.ndarray]]

    def __post_init__(self):
        if len(self.text) != len(self.vision):
            raise AnalysisError("text and vision dumps cover different stages")
        for t in range(len(self.text)):
            if len(self.text[t]) != len(self.text[0]) or len(self.vision[t]) != len(self.text[0]):
                raise AnalysisError(f"stage {t + 1}: layer count differs from stage 1")
            for d in range(len(self.text[t])):
                if (self.text[t][d].shape[0] != self.text[0][d].shape[0]
                        or self.vision[t][d].shape[0] != self.vision[0][d].shape[0]):
                    raise AnalysisError(f"stage {t + 1}, layer {d}: row count differs from stage 1")


def cka_ratio(dump: RepresentationDump) -> np.ndarray:
    """``R[t-2][d] = CKA(Q_1, Q_t) / CKA(V_1, V_t)`` for stages t = 2..T (rows) and layers d."""
    n_stages = len(dump.text)
    if n_stages < 2:
        raise AnalysisError("ratio needs at least two stages")
    n_layers = len(dump.text[0])
    out = np.zeros((n_stages - 1, n_layers))
    for t in range(1, n_stages):
        for d in range(n_layers):
            cq = linear_cka(dump.text[0][d], dump.text[t][d])
            cv = linear_cka(dump.vision[0][d], dump.vision[t][d])
            if cv < _CKA_FLOOR:
                raise AnalysisError(f"vision CKA {cv:.3g} too small at stage {t + 1}, layer {d}")
            out[t - 1, d] = cq / cv
    return out


def write_ratio_csv(ratio: np.ndarray, path: str | Path) -> None:
    """Long format ``stage,layer,value``; stage is 1-based (first row is stage 2)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "layer", "value"])
        for i, row in enumerate(ratio):
            for d, v in enumerate(row):
                w.writerow([i + 2, d, repr(float(v))])


def read_ratio_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [(int(r["stage"]), int(r["layer"]), float(r["value"])) for r in csv.DictReader(fh)]
    n_t = max(r[0] for r in rows) - 1
    n_d = max(r[1] for r in rows) + 1
    out = np.full((n_t, n_d), np.nan)
    for t, d, v in rows:
        out[t - 2, d] = v
    return out


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _as_matrix(m) -> np.ndarray:
    return np.array(m, dtype=np.float64)


def final_accuracy(accuracy_matrix) -> float:
    """Macro average of the last row ``A_{T,i}``, i = 1..T."""
    a = _as_matrix(accuracy_matrix)
    if a.ndim != 2 or a.shape[0] < 1:
        raise AnalysisError("accuracy matrix must be 2-D")
    last = a[-1, : a.shape[1]]
    if np.isnan(last).any():
        raise AnalysisError("final row incomplete")
    return float(last.mean())


def backward_transfer(matrix) -> float:
    """``1/(T-1) sum_{i<T} (M[T,i] - M[i,i])``."""
    m = _as_matrix(matrix)
    t = m.shape[0]
    if t < 2:
        raise AnalysisError("backward transfer needs at least two tasks")
    diffs = [m[-1, i] - m[i, i] for i in range(t - 1)]
    if np.isnan(diffs).any():
        raise AnalysisError("matrix incomplete on the diagonal or final row")
    return float(np.mean(diffs))


def sbwt(weighted_matrix, accuracy_matrix) -> tuple[float, float]:
    """(semantic backward transfer, plain backward transfer)."""
    return backward_transfer(weighted_matrix), backward_transfer(accuracy_matrix)


@dataclass
class AnswerSimilarity:
    labels: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        n = len(self.labels)
        if m.shape != (n, n):
            raise AnalysisError("similarity matrix does not match labels")
        if not np.allclose(m, m.T, atol=0) or not np.all(np.diag(m) == 1.0):
            raise AnalysisError("similarity must be symmetric with unit diagonal")
        if (m < 0).any() or (m > 1).any():
            raise AnalysisError("similarity entries must lie in [0, 1]")
        self.matrix = m
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def sim(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        i, j = self._index.get(a), self._index.get(b)
        if i is None or j is None:
            return 0.0
        return float(self.matrix[i, j])

    def credit(self, preds: Sequence[str], golds: Sequence[str]) -> np.ndarray:
        return np.array([1.0 if p == g else self.sim(p, g) for p, g in zip(preds, golds)])

    @classmethod
    def identity(cls, labels: Sequence[str] = ()) -> "AnswerSimilarity":
        return cls(list(labels), np.eye(len(labels)))

    @classmethod
    def load(cls, path: str | Path) -> "AnswerSimilarity":
        """Tab-separated labelled matrix: header row of labels, then one row per label."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
        header = rows[0][1:]
        names = [r[0] for r in rows[1:]]
        if names != header:
            raise AnalysisError("row labels differ from column labels")
        return cls(header, np.array([[float(v) for v in r[1:]] for r in rows[1:]]))

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["label"] + self.labels)
            for lab, row in zip(self.labels, self.matrix):
                w.writerow([lab] + [repr(float(v)) for v in row])


def default_similarity() -> AnswerSimilarity:
    with resources.as_file(resources.files("mafed.data") / "answer_similarity.tsv") as p:
        return AnswerSimilarity.load(p)


def build_default_similarity() -> AnswerSimilarity:
    """Adjacent counts 0.5, colours of the same family 0.25, everything else 0."""
    from .tasks import ANSWERS, COLOR_FAMILIES, QTYPES

    labels = [a for q in QTYPES for a in ANSWERS[q]]
    n = len(labels)
    m = np.eye(n)
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            if i == j:
                continue
            if a.isdigit() and b.isdigit() and abs(int(a) - int(b)) == 1:
                m[i, j] = 0.5
            elif a in COLOR_FAMILIES and b in COLOR_FAMILIES and COLOR_FAMILIES[a] == COLOR_FAMILIES[b]:
                m[i, j] = 0.25
    return AnswerSimilarity(labels, m)
