"""Tiny encoder-only multimodal transformer on top of :mod:`mafed.numcore`.

Sequence layout per sample: ``[CLS, text_0 .. text_{Q-1}, vis_0 .. vis_{V-1}]``.
Text positions holding the padding id are tagged PAD and masked as attention keys.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import Tape, Var

CLS, TEXT, VISION, PAD = 0, 1, 2, 3
PAD_ID = 0
_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    text_vocab_size: int
    visual_feature_dim: int
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    max_text_len: int = 12
    max_visual_len: int = 16
    mlp_ratio: int = 4
    init_std: float = 0.1  # embeddings; weight matrices use 1 / sqrt(fan_in)
    head_init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be a multiple of num_heads")
        for key in ("text_vocab_size", "visual_feature_dim", "max_text_len", "max_visual_len"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")


@dataclass
class MultimodalBatch:
    question_tokens: np.ndarray  # int [B, Q], PAD_ID marks padding
    visual_tokens: np.ndarray  # float [B, V, F]
    labels: np.ndarray  # int [B], indices into the head's label table
    modality_mask: np.ndarray = field(init=False)  # int [B, 1 + Q + V]

    def __post_init__(self):
        self.question_tokens = np.asarray(self.question_tokens, dtype=np.int64)
        self.visual_tokens = np.asarray(self.visual_tokens, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        b, q = self.question_tokens.shape
        if q < 1 or self.visual_tokens.shape[1] < 1:
            raise ValueError("batch needs at least one text and one visual position")
        if self.visual_tokens.shape[0] != b or self.labels.shape != (b,):
            raise ValueError("batch components disagree on batch size")
        self.modality_mask = modality_mask(self.question_tokens, self.visual_tokens.shape[1])

    def __len__(self):
        return self.question_tokens.shape[0]


def modality_mask(question_tokens: np.ndarray, n_visual: int) -> np.ndarray:
    b = question_tokens.shape[0]
    text = np.where(question_tokens == PAD_ID, PAD, TEXT)
    return np.concatenate(
        [np.full((b, 1), CLS), text, np.full((b, n_visual), VISION)], axis=1
    ).astype(np.int64)


@dataclass
class ClassifierHead:
    label_table: list[str]
    weight: np.ndarray  # [num_labels, hidden_dim]
    bias: np.ndarray  # [num_labels]

    def __post_init__(self):
        if len(set(self.label_table)) != len(self.label_table):
            raise ValueError("duplicate labels in head")
        if self.weight.shape[0] != len(self.label_table) or self.bias.shape != (len(self.label_table),):
            raise ValueError("head weight/bias do not match label table")


def expand_head(head: ClassifierHead, new_labels: Sequence[str], rng: np.random.Generator,
                std: float = 0.02) -> ClassifierHead:
    """Append rows for unseen labels; existing rows are copied bit for bit."""
    fresh = []
    for lab in new_labels:
        if lab not in head.label_table and lab not in fresh:
            fresh.append(lab)
    if not fresh:
        return ClassifierHead(list(head.label_table), head.weight.copy(), head.bias.copy())
    rows = rng.normal(0.0, std, size=(len(fresh), head.weight.shape[1]))
    return ClassifierHead(
        head.label_table + fresh,
        np.concatenate([head.weight, rows], axis=0),
        np.concatenate([head.bias, np.zeros(len(fresh))]),
    )


@dataclass
class LayerStates:
    states: list[np.ndarray]  # per block: [B, S, H]

    def __len__(self):
        return len(self.states)


def _block_param_shapes(cfg: ModelConfig, i: int) -> dict[str, tuple]:
    h, m = cfg.hidden_dim, cfg.hidden_dim * cfg.mlp_ratio
    p = f"blocks.{i}."
    return {
        p + "ln1.g": (h,), p + "ln1.b": (h,),
        p + "attn.wq": (h, h), p + "attn.bq": (h,),
        p + "attn.wk": (h, h), p + "attn.bk": (h,),
        p + "attn.wv": (h, h), p + "attn.bv": (h,),
        p + "attn.wo": (h, h), p + "attn.bo": (h,),
        p + "ln2.g": (h,), p + "ln2.b": (h,),
        p + "mlp.w1": (h, m), p + "mlp.b1": (m,),
        p + "mlp.w2": (m, h), p + "mlp.b2": (h,),
    }


_EMBEDDINGS = ("text_emb", "text_pos", "vis_pos")


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    h = cfg.hidden_dim
    shapes = {
        "cls": (h,),
        "text_emb": (cfg.text_vocab_size, h),
        "text_pos": (cfg.max_text_len, h),
        "seg_text": (h,),
        "vis_proj": (cfg.visual_feature_dim, h),
        "vis_bias": (h,),
        "vis_pos": (cfg.max_visual_len, h),
        "seg_vis": (h,),
    }
    for i in range(cfg.num_layers):
        shapes.update(_block_param_shapes(cfg, i))
    shapes.update({"ln_f.g": (h,), "ln_f.b": (h,)})
    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2") or name == "vis_bias":
            params[name] = np.zeros(shape)
        elif len(shape) == 2 and name not in _EMBEDDINGS:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            params[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return params


class Model:
    """Parameters, config and the expandable classification head."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], labels: Sequence[str] = ()):
        self.config = config
        self.params = params
        self.labels = list(labels)
        if "head.weight" not in self.params:
            self.params["head.weight"] = np.zeros((0, config.hidden_dim))
            self.params["head.bias"] = np.zeros(0)

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    @property
    def head(self) -> ClassifierHead:
        return ClassifierHead(list(self.labels), self.params["head.weight"], self.params["head.bias"])

    def expand_head(self, new_labels: Sequence[str], rng: np.random.Generator) -> list[str]:
        """Expand in place; returns the labels that were actually added."""
        before = len(self.labels)
        head = expand_head(self.head, new_labels, rng, self.config.head_init_std)
        self.labels = head.label_table
        self.params["head.weight"] = head.weight
        self.params["head.bias"] = head.bias
        return self.labels[before:]

    def label_index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    def clone(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.labels)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays["meta/config"] = np.array(json.dumps(asdict(self.config), sort_keys=True))
        arrays["meta/labels"] = np.array(json.dumps(self.labels))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        with np.load(path, allow_pickle=False) as z:
            cfg = ModelConfig(**json.loads(str(z["meta/config"])))
            labels = json.loads(str(z["meta/labels"]))
            params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        return cls(cfg, params, labels)


def param_leaves(tape: Tape, params: dict[str, np.ndarray], trainable=True) -> dict[str, Var]:
    """Bind parameters as tape leaves. ``trainable`` may be a bool or a set of names."""
    out = {}
    for name, value in params.items():
        rg = trainable if isinstance(trainable, bool) else name in trainable
        out[name] = tape.leaf(name, value, requires_grad=rg)
    return out


def build_forward(tape: Tape, model: Model, batch: MultimodalBatch, pv: dict[str, Var],
                  state_offsets: dict[int, np.ndarray | Var] | None = None) -> tuple[Var, list[Var]]:
    """Record the forward pass; returns (logits, per-layer state nodes).

    ``state_offsets`` adds a constant array or an existing tape var to the
    output of the given blocks (used to probe gradients w.r.t. hidden states).
    """
    cfg = model.config
    b, q = batch.question_tokens.shape
    v = batch.visual_tokens.shape[1]
    if q > cfg.max_text_len or v > cfg.max_visual_len:
        raise ValueError(f"sequence ({q} text, {v} visual) exceeds configured maximum "
                         f"({cfg.max_text_len}, {cfg.max_visual_len})")
    if batch.visual_tokens.shape[2] != cfg.visual_feature_dim:
        raise ValueError("visual feature dimension does not match config")
    if len(model.labels) == 0:
        raise ValueError("classifier head is empty")
    if batch.question_tokens.size and batch.question_tokens.max() >= cfg.text_vocab_size:
        raise ValueError("question token id outside vocabulary")
    h, nh = cfg.hidden_dim, cfg.num_heads
    dh = h // nh
    s = 1 + q + v

    text = tape.embedding(pv["text_emb"], batch.question_tokens)
    text = text + tape.take(pv["text_pos"], np.arange(q), axis=0) + pv["seg_text"]
    vis = tape.constant(batch.visual_tokens) @ pv["vis_proj"] + pv["vis_bias"]
    vis = vis + tape.take(pv["vis_pos"], np.arange(v), axis=0) + pv["seg_vis"]
    cls = tape.constant(np.zeros((b, 1, h))) + pv["cls"]
    x = tape.concat([cls, text, vis], axis=1)

    key_pad = batch.modality_mask == PAD
    mask = np.broadcast_to(np.where(key_pad, _NEG, 0.0)[:, None, None, :], (b, nh, s, s))
    mask_c = tape.constant(mask)
    scale = 1.0 / np.sqrt(dh)

    states = []
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        a = tape.layer_norm(x, cfg.ln_eps) * pv[p + "ln1.g"] + pv[p + "ln1.b"]

        def heads(w, bias):
            t = a @ pv[w] + pv[bias]
            return tape.transpose(tape.reshape(t, (b, s, nh, dh)), (0, 2, 1, 3))

        qh = heads(p + "attn.wq", p + "attn.bq")
        kh = heads(p + "attn.wk", p + "attn.bk")
        vh = heads(p + "attn.wv", p + "attn.bv")
        scores = (qh @ tape.transpose(kh, (0, 1, 3, 2))) * scale + mask_c
        ctx = tape.softmax(scores) @ vh
        ctx = tape.reshape(tape.transpose(ctx, (0, 2, 1, 3)), (b, s, h))
        x = x + (ctx @ pv[p + "attn.wo"] + pv[p + "attn.bo"])

        m = tape.layer_norm(x, cfg.ln_eps) * pv[p + "ln2.g"] + pv[p + "ln2.b"]
        m = tape.gelu(m @ pv[p + "mlp.w1"] + pv[p + "mlp.b1"]) @ pv[p + "mlp.w2"] + pv[p + "mlp.b2"]
        x = x + m
        if state_offsets and i in state_offsets:
            off = state_offsets[i]
            x = x + (off if isinstance(off, Var) else tape.constant(off))
        states.append(x)

    pooled = tape.take(x, 0, axis=1)
    pooled = tape.layer_norm(pooled, cfg.ln_eps) * pv["ln_f.g"] + pv["ln_f.b"]
    logits = pooled @ tape.transpose(pv["head.weight"], (1, 0)) + pv["head.bias"]
    return logits, states


def forward(model: Model, batch: MultimodalBatch,
            state_offsets: dict[int, np.ndarray] | None = None) -> tuple[np.ndarray, LayerStates]:
    """Inference forward: numpy logits [B, num_labels] and all layer states."""
    tape = Tape()
    pv = param_leaves(tape, model.params, trainable=False)
    logits, states = build_forward(tape, model, batch, pv, state_offsets)
    return logits.value, LayerStates([st.value for st in states])


def split_states_by_modality(states: LayerStates | Sequence[np.ndarray], mask: np.ndarray):
    """Per layer ``(text_rows, vision_rows)``; CLS and PAD positions are dropped.

    Rows are gathered in (sample, position) order, so each array is
    ``[n_positions_of_that_modality, hidden_dim]``.
    """
    layers = states.states if isinstance(states, LayerStates) else list(states)
    mask = np.asarray(mask)
    out = []
    for d, st in enumerate(layers):
        if st.shape[:2] != mask.shape:
            raise ValueError(f"layer {d}: state shape {st.shape[:2]} does not match mask {mask.shape}")
        out.append((st[mask == TEXT], st[mask == VISION]))
    return out
