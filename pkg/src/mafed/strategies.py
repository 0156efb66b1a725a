"""Continual-learning strategies: replay, EWC, and modality-aware feature distillation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import TEXT, VISION, Model, MultimodalBatch, build_forward, param_leaves
from .numcore import Tape, frobenius_norm_sq, node_grads
from .tasks import Sample

STRATEGIES = ("ft", "ewc", "er", "fd", "mafed_b", "mafed_a", "multitask")
ALPHA_MODES = ("token_proportional", "balanced", "adaptive")
DISTILLING = {"fd": "token_proportional", "mafed_b": "balanced", "mafed_a": "adaptive"}


class StrategyError(ValueError):
    pass


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def collate(samples: Sequence[Sample], label_index: dict[str, int] | None = None) -> MultimodalBatch:
    """Stack samples into a batch; text is right-padded to the longest question.

    Without ``label_index`` the labels are zero placeholders (inference only).
    """
    q = max(len(s.question_tokens) for s in samples)
    tokens = np.zeros((len(samples), q), dtype=np.int64)
    for i, s in enumerate(samples):
        tokens[i, : len(s.question_tokens)] = s.question_tokens
    visual = np.stack([s.visual for s in samples])
    if label_index is None:
        labels = np.zeros(len(samples), dtype=np.int64)
    else:
        labels = np.array([label_index[s.label] for s in samples], dtype=np.int64)
    return MultimodalBatch(tokens, visual, labels)


# --------------------------------------------------------------------------
# replay memory
# --------------------------------------------------------------------------


@dataclass
class ReplayMemory:
    capacity_per_task: int
    per_task: dict[int, tuple[Sample, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity_per_task < 1:
            raise StrategyError("memory capacity must be >= 1")

    def pool(self) -> list[Sample]:
        return [s for t in sorted(self.per_task) for s in self.per_task[t]]

    def __len__(self):
        return sum(len(v) for v in self.per_task.values())


def update_memory(memory: ReplayMemory, task_id: int, samples: Sequence[Sample],
                  rng: np.random.Generator) -> ReplayMemory:
    """Store a uniform random subset (without replacement) of ``samples`` for ``task_id``."""
    n = min(memory.capacity_per_task, len(samples))
    idx = np.sort(rng.choice(len(samples), size=n, replace=False))
    per_task = dict(memory.per_task)
    per_task[task_id] = tuple(samples[i] for i in idx)
    return ReplayMemory(memory.capacity_per_task, per_task)


def draw_replay(memory: ReplayMemory, n: int, rng: np.random.Generator) -> list[Sample]:
    pool = memory.pool()
    if not pool:
        raise StrategyError("replay memory is empty")
    idx = rng.choice(len(pool), size=n, replace=n > len(pool))
    return [pool[i] for i in idx]


# --------------------------------------------------------------------------
# EWC
# --------------------------------------------------------------------------


@dataclass
class EwcState:
    anchor: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise StrategyError("EWC lambda must be >= 0")
        for k, f in self.fisher.items():
            if f.shape != self.anchor[k].shape:
                raise StrategyError(f"fisher/anchor shape mismatch for {k}")
            if (f < 0).any():
                raise StrategyError(f"negative fisher entries for {k}")


def compute_fisher(model: Model, data: Sequence[Sample], trainable: set[str] | None = None
                   ) -> dict[str, np.ndarray]:
    """Empirical diagonal Fisher: mean over samples of the squared gradient of the
    per-sample classification loss at the stored answer."""
    if not data:
        raise StrategyError("fisher needs at least one sample")
    names = set(model.params) if trainable is None else set(trainable)
    fisher = {k: np.zeros_like(v) for k, v in model.params.items() if k in names}
    lidx = model.label_index()
    for s in data:
        tape = Tape()
        pv = param_leaves(tape, model.params, names)
        batch = collate([s], lidx)
        logits, _ = build_forward(tape, model, batch, pv)
        loss = tape.cross_entropy(logits, batch.labels)
        grads = node_grads(tape, loss, [pv[k] for k in fisher])
        for k, g in zip(fisher, grads):
            fisher[k] += g * g
    return {k: v / len(data) for k, v in fisher.items()}


def _pad_to(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    out = np.zeros(shape)
    out[tuple(slice(0, s) for s in a.shape)] = a
    return out


def ewc_penalty(params: dict, ewc: EwcState, tape: Tape | None = None):
    """``lam * sum_j F_j (p_j - a_j)^2``.

    ``params`` holds numpy arrays (returns a float) or tape vars (returns a
    scalar var). Head rows added after the anchor was taken carry zero Fisher.
    """
    if tape is None:
        total = 0.0
        for k, f in ewc.fisher.items():
            p = np.asarray(params[k])
            d = p - _pad_to(ewc.anchor[k], p.shape)
            total += float(np.sum(_pad_to(f, p.shape) * d * d))
        return ewc.lam * total
    terms = []
    for k, f in ewc.fisher.items():
        p = params[k]
        d = p - _pad_to(ewc.anchor[k], p.shape)
        terms.append(tape.sum(d * d * _pad_to(f, p.shape)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * ewc.lam


# --------------------------------------------------------------------------
# feature distillation
# --------------------------------------------------------------------------


def distilled_layers(num_layers: int, selection: Sequence[int] | None = None) -> list[int]:
    """Layer indices to distil; the final block is never included."""
    allowed = list(range(num_layers - 1))
    if selection is None:
        return allowed
    chosen = sorted(set(int(i) for i in selection))
    bad = [i for i in chosen if i not in allowed]
    if bad or not chosen:
        raise StrategyError(f"distillation layers {bad or chosen} outside 0..{num_layers - 2}")
    return chosen


def layer_discount_weights(gamma: float, num_distilled: int) -> np.ndarray:
    """``w_d = gamma**d / sum_d gamma**d`` for d = 0 (deepest) .. num_distilled - 1."""
    if not 0.0 < gamma <= 1.0:
        raise StrategyError(f"gamma must lie in (0, 1], got {gamma}")
    if num_distilled < 1:
        raise StrategyError("need at least one distilled layer")
    raw = gamma ** np.arange(num_distilled, dtype=np.float64)
    return raw / raw.sum()


def weights_for_layers(gamma: float, layers: Sequence[int], num_layers: int) -> np.ndarray:
    """Discount weights aligned with ``layers`` (ascending depth); distance is from the head."""
    dist = np.array([num_layers - 2 - i for i in layers], dtype=np.float64)
    if not 0.0 < gamma <= 1.0:
        raise StrategyError(f"gamma must lie in (0, 1], got {gamma}")
    raw = gamma ** dist
    return raw / raw.sum()


def _modality_weights(mask: np.ndarray, hidden: int):
    text = (mask == TEXT).astype(np.float64)
    vision = (mask == VISION).astype(np.float64)
    nq, nv = text.sum(), vision.sum()
    if nq == 0 or nv == 0:
        raise StrategyError(f"empty modality partition (text={int(nq)}, vision={int(nv)})")
    return text / nq, vision / nv, int(nq), int(nv)


def fd_modality_losses(student_states, teacher_states, mask, layers: Sequence[int] | None = None,
                       tape: Tape | None = None):
    """Per distilled layer ``(L_Q, L_V)``: mean squared L2 distance over text / vision tokens.

    With ``tape`` given, ``student_states`` are vars and the result holds vars;
    otherwise everything is numpy and floats are returned.
    """
    mask = np.asarray(mask)
    layers = range(len(teacher_states)) if layers is None else layers
    wq, wv, _, _ = _modality_weights(mask, 0)
    out = []
    for d in layers:
        s, t = student_states[d], np.asarray(teacher_states[d])
        if tuple(s.shape) != t.shape:
            raise StrategyError(f"layer {d}: student {tuple(s.shape)} vs teacher {t.shape}")
        if tape is None:
            per_tok = ((np.asarray(s) - t) ** 2).sum(axis=-1)
            out.append((float((per_tok * wq).sum()), float((per_tok * wv).sum())))
        else:
            per_tok = tape.sq_l2(s - t, axis=-1)
            out.append((tape.sum(per_tok * wq), tape.sum(per_tok * wv)))
    return out


def compute_alpha(mode: str, i_q: float = 0.0, i_v: float = 0.0, q_count: int = 0, v_count: int = 0) -> float:
    if mode == "balanced":
        return 0.5
    if mode == "adaptive":
        if i_q < 0 or i_v < 0:
            raise StrategyError("importances must be non-negative")
        if i_q + i_v <= 0:
            raise StrategyError("both modality importances vanished; cannot normalise")
        return i_q / (i_q + i_v)
    if mode == "token_proportional":
        if q_count < 0 or v_count < 0 or q_count + v_count == 0:
            raise StrategyError("token counts must be non-negative with a positive total")
        return q_count / (q_count + v_count)
    raise StrategyError(f"unknown alpha mode {mode!r}")


def modality_importance(model: Model, memory_data: Sequence[Sample], layer: int,
                        batch_size: int = 128) -> tuple[float, float]:
    """Mean squared Frobenius norm of the classification-loss gradient w.r.t. the
    layer's text and vision states, over ``memory_data`` with ground-truth labels."""
    if not memory_data:
        raise StrategyError("importance estimation needs non-empty memory")
    if not 0 <= layer < model.config.num_layers:
        raise StrategyError(f"importance layer {layer} out of range")
    lidx = model.label_index()
    iq = iv = 0.0
    for start in range(0, len(memory_data), batch_size):
        chunk = memory_data[start:start + batch_size]
        batch = collate(chunk, lidx)
        tape = Tape()
        pv = param_leaves(tape, model.params, trainable=False)
        # a zero-valued differentiable offset exposes d loss / d state at the layer
        probe = tape.leaf("state_probe", np.zeros((len(chunk),) + _state_shape(batch, model)),
                          requires_grad=True)
        logits, _ = build_forward(tape, model, batch, pv, {layer: probe})
        # summed loss: each sample's state gradient equals its own per-sample gradient
        loss = tape.cross_entropy(logits, batch.labels, reduction="sum")
        (g,) = node_grads(tape, loss, [probe])
        mask = batch.modality_mask
        for b in range(len(chunk)):
            iq += frobenius_norm_sq(g[b][mask[b] == TEXT])
            iv += frobenius_norm_sq(g[b][mask[b] == VISION])
    n = len(memory_data)
    return iq / n, iv / n


def _state_shape(batch: MultimodalBatch, model: Model) -> tuple[int, int]:
    return batch.modality_mask.shape[1], model.config.hidden_dim


# --------------------------------------------------------------------------
# loss composition
# --------------------------------------------------------------------------


@dataclass
class DistillState:
    teacher: Model
    gamma: float
    layers: list[int]
    layer_weights: np.ndarray
    mode: str
    alpha: float = 0.5
    importances: tuple[float, float] = (0.0, 0.0)
    fd_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ALPHA_MODES:
            raise StrategyError(f"unknown alpha mode {self.mode!r}")
        if len(self.layer_weights) != len(self.layers):
            raise StrategyError("layer weights misaligned with distilled layers")
        if abs(float(np.sum(self.layer_weights)) - 1.0) > 1e-12 or (np.asarray(self.layer_weights) < 0).any():
            raise StrategyError("layer weights must be non-negative and sum to 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise StrategyError("alpha must lie in [0, 1]")
        if self.mode == "balanced" and self.alpha != 0.5:
            raise StrategyError("balanced mode requires alpha == 0.5")
        if self.fd_scale < 0:
            raise StrategyError("fd_scale must be >= 0")


def total_loss(cls_loss, per_layer, alpha, layer_weights, fd_scale: float = 1.0, ewc_term=0.0):
    """``cls + fd_scale * sum_d w_d (alpha L_Q,d + (1 - alpha) L_V,d) + ewc``.

    Works on floats and on tape vars alike. ``alpha`` may be a scalar or one
    value per layer.
    """
    if len(per_layer) != len(layer_weights):
        raise StrategyError(f"{len(per_layer)} layer losses for {len(layer_weights)} weights")
    alphas = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (len(per_layer),))
    total = cls_loss
    if fd_scale and len(per_layer):
        fd = None
        for (lq, lv), w, a in zip(per_layer, layer_weights, alphas):
            term = lq * float(w * a) + lv * float(w * (1.0 - a))
            fd = term if fd is None else fd + term
        total = total + fd * float(fd_scale)
    if not (isinstance(ewc_term, (int, float)) and ewc_term == 0):
        total = total + ewc_term
    return total
