"""Sequential task training, evaluation and representation dumps."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import strategies as st
from .analysis import AnswerSimilarity, RepresentationDump, backward_transfer, cka_ratio, final_accuracy
from .model import Model, ModelConfig, build_forward, forward, param_leaves, split_states_by_modality
from .numcore import Tape, backward
from .tasks import FEATURE_DIM, MAX_TEXT_LEN, NUM_CELLS, VOCAB_SIZE, Sample, Task, TaskSequence

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    warmup_fraction: float = 0.1
    batch_size: int = 32
    max_epochs: int = 15
    patience: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 256
    probe_size: int = 512

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")


@dataclass
class StrategyConfig:
    name: str = "ft"
    gamma: float = 0.5
    lambda_ewc: float = 100.0
    fd_scale: float = 1.0
    memory_per_task: int = 1000
    importance_layer: int | None = None  # None: middle distilled layer
    replay: bool | None = None  # None: on for er and the distillation strategies
    distill_layers: tuple[int, ...] | None = None  # None: every layer but the last
    alpha_mode: str | None = None  # None: implied by the strategy
    fisher_samples: int = 1000

    def __post_init__(self):
        if self.name not in st.STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.memory_per_task < 0 or self.lambda_ewc < 0 or self.fd_scale < 0:
            raise ValueError("memory_per_task, lambda_ewc and fd_scale must be >= 0")
        if self.alpha_mode is not None and self.alpha_mode not in st.ALPHA_MODES:
            raise ValueError(f"unknown alpha mode {self.alpha_mode!r}")
        if self.uses_memory and self.memory_per_task < 1:
            raise ValueError(f"strategy {self.name} needs memory_per_task >= 1")

    @property
    def distills(self) -> bool:
        return self.name in st.DISTILLING

    @property
    def mode(self) -> str | None:
        if not self.distills:
            return None
        return self.alpha_mode or st.DISTILLING[self.name]

    @property
    def uses_replay(self) -> bool:
        if self.replay is not None:
            return self.replay and self.name not in ("multitask",)
        return self.name == "er" or self.distills

    @property
    def uses_memory(self) -> bool:
        return self.uses_replay or self.mode == "adaptive"


def lr_at_step(step: int, total_steps: int, max_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up from 0 to ``max_lr`` then linear decay to 0 at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    if step < warm:
        return max_lr * step / warm
    return max_lr * (total_steps - step) / (total_steps - warm)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            g = g.data if hasattr(g, "data") else g
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopper:
    """Tracks the best validation score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, score: float, epoch: int) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.wait = score, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def default_model_config(**overrides) -> ModelConfig:
    base = dict(text_vocab_size=VOCAB_SIZE, visual_feature_dim=FEATURE_DIM,
                max_text_len=max(12, MAX_TEXT_LEN), max_visual_len=NUM_CELLS)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def predict(model: Model, samples: Sequence[Sample], batch_size: int = 256) -> list[str]:
    preds = []
    for start in range(0, len(samples), batch_size):
        batch = st.collate(samples[start:start + batch_size])
        logits, _ = forward(model, batch)
        preds += [model.labels[i] for i in logits.argmax(axis=1)]
    return preds


def evaluate_samples(model: Model, samples: Sequence[Sample], similarity: AnswerSimilarity,
                     batch_size: int = 256) -> tuple[float, float]:
    """(exact-match accuracy, mean semantic credit)."""
    preds = predict(model, samples, batch_size)
    golds = [s.label for s in samples]
    acc = float(np.mean([p == g for p, g in zip(preds, golds)]))
    return acc, float(np.mean(similarity.credit(preds, golds)))


def probe_representations(model: Model, samples: Sequence[Sample], batch_size: int = 256):
    """Per layer (text rows, vision rows) over the probe set, in a fixed batching."""
    text = [[] for _ in range(model.config.num_layers)]
    vision = [[] for _ in range(model.config.num_layers)]
    for start in range(0, len(samples), batch_size):
        batch = st.collate(samples[start:start + batch_size])
        _, states = forward(model, batch)
        for d, (q, v) in enumerate(split_states_by_modality(states, batch.modality_mask)):
            text[d].append(q)
            vision[d].append(v)
    return [np.concatenate(x) for x in text], [np.concatenate(x) for x in vision]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class EpochLog:
    task: str
    stage: int
    epoch: int
    split: str
    cls_loss: float
    fd_text: float
    fd_vision: float
    ewc: float
    accuracy: float
    lr: float
    alpha: float | None
    steps: int


def train_task(model: Model, train: Sequence[Sample], val: Sequence[Sample], strategy: StrategyConfig,
               config: TrainConfig, *, rng: np.random.Generator, similarity: AnswerSimilarity,
               memory: st.ReplayMemory | None = None, distill: st.DistillState | None = None,
               ewc: st.EwcState | None = None, stage: int = 0, task_name: str = "",
               lr_trace: list | None = None) -> tuple[Model, list[EpochLog]]:
    """Train on one task with early stopping; ``model`` ends up holding the best-validation weights."""
    if not train:
        raise ValueError("empty training set")
    lidx = model.label_index()
    bs = config.batch_size
    steps_per_epoch = math.ceil(len(train) / bs)
    total = steps_per_epoch * config.max_epochs
    opt = Adam(model.params, config.beta1, config.beta2, config.adam_eps)
    stopper = EarlyStopper(config.patience)
    best = {k: v.copy() for k, v in model.params.items()}
    replaying = strategy.uses_replay and memory is not None and len(memory) > 0
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train))
        sums = np.zeros(4)
        alpha_sum = 0.0
        lr = 0.0
        for k in range(steps_per_epoch):
            cur = [train[i] for i in order[k * bs:(k + 1) * bs]]
            if replaying:
                cur = cur + st.draw_replay(memory, len(cur), rng)
            batch = st.collate(cur, lidx)
            tape = Tape()
            pv = param_leaves(tape, model.params, True)
            logits, states = build_forward(tape, model, batch, pv)
            cls = tape.cross_entropy(logits, batch.labels)
            per_layer, alpha, weights, fd_scale = [], 0.5, [], 0.0
            if distill is not None:
                _, teacher_states = forward(distill.teacher, batch)
                per_layer = st.fd_modality_losses(states, teacher_states.states, batch.modality_mask,
                                                  distill.layers, tape=tape)
                weights, fd_scale = distill.layer_weights, distill.fd_scale
                if distill.mode == "token_proportional":
                    mask = batch.modality_mask
                    alpha = st.compute_alpha(distill.mode, q_count=int((mask == 1).sum()),
                                             v_count=int((mask == 2).sum()))
                else:
                    alpha = distill.alpha
                alpha_sum += alpha
            ewc_term = st.ewc_penalty(pv, ewc, tape=tape) if ewc is not None else 0.0
            loss = st.total_loss(cls, per_layer, alpha, weights, fd_scale, ewc_term)
            grads = backward(tape, loss)
            lr = lr_at_step(step, total, config.max_lr, config.warmup_fraction)
            if lr_trace is not None:
                lr_trace.append((step, total, lr))
            opt.step(model.params, grads, lr)
            step += 1
            fdq = sum(float(w) * lq.item() for (lq, _), w in zip(per_layer, weights))
            fdv = sum(float(w) * lv.item() for (_, lv), w in zip(per_layer, weights))
            sums += [cls.item(), fdq, fdv, ewc_term.item() if ewc is not None else 0.0]
        means = sums / steps_per_epoch
        acc, _ = evaluate_samples(model, val, similarity, config.eval_batch_size)
        alpha_mean = alpha_sum / steps_per_epoch if distill is not None else None
        logs.append(EpochLog(task_name, stage, epoch, "val", *map(float, means), acc, lr,
                             alpha_mean, step))
        log.debug("stage %d epoch %d cls %.4f val %.4f", stage, epoch, means[0], acc)
        stop = stopper.update(acc, epoch)
        if stopper.best_epoch == epoch:
            best = {k: v.copy() for k, v in model.params.items()}
        if stop:
            break
    model.params = best
    return model, logs


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    strategy: str
    task_names: list[str]
    accuracy_matrix: np.ndarray  # [T, T], NaN where undefined
    weighted_matrix: np.ndarray
    cka_ratio: np.ndarray | None  # [T-1, L]
    alpha_log: list[dict] = field(default_factory=list)
    epoch_logs: list[EpochLog] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    probe_dumps: RepresentationDump | None = None

    @property
    def metrics(self) -> dict:
        out = {"final_accuracy": final_accuracy(self.accuracy_matrix)}
        if self.strategy != "multitask" and len(self.task_names) > 1:
            out["sbwt"] = backward_transfer(self.weighted_matrix)
            out["bwt"] = backward_transfer(self.accuracy_matrix)
        return out


def _stage_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def run_sequence(sequence: TaskSequence, strategy: StrategyConfig, config: TrainConfig,
                 model_config: ModelConfig | None = None, similarity: AnswerSimilarity | None = None,
                 run_dir: str | Path | None = None, save_checkpoints: str = "all",
                 keep_dumps: bool = False, on_stage: Callable[[int, RunResult], None] | None = None
                 ) -> RunResult:
    """Train through the ordered tasks and fill the accuracy matrices.

    Random streams are keyed by (seed, task order, stage) only, so data order,
    replay memory contents and head initialisation are shared across strategies.
    """
    from .analysis import default_similarity

    similarity = similarity or default_similarity()
    model_config = model_config or default_model_config()
    tasks: list[Task] = sequence.ordered()
    n = len(tasks)
    seed = config.seed
    okey = int("".join(map(str, sequence.task_order)))
    model = Model.create(model_config, seed)
    acc = np.full((n, n), np.nan)
    wacc = np.full((n, n), np.nan)
    result = RunResult(strategy.name, [t.name for t in tasks], acc, wacc, None)
    run_dir = Path(run_dir) if run_dir else None
    if run_dir and save_checkpoints != "none":
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    if strategy.name == "multitask":
        labels = [lab for t in tasks for lab in t.labels]
        model.expand_head(labels, _stage_rng(seed, okey, 0, 1))
        train = [s for t in tasks for s in t.train]
        val = [s for t in tasks for s in t.val]
        model, logs = train_task(model, train, val, strategy, config, rng=_stage_rng(seed, okey, 0, 2),
                                 similarity=similarity, stage=0, task_name="multitask")
        result.epoch_logs += logs
        for i, t in enumerate(tasks):
            acc[n - 1, i], wacc[n - 1, i] = evaluate_samples(model, t.test, similarity, config.eval_batch_size)
        if run_dir and save_checkpoints != "none":
            path = run_dir / "checkpoints" / f"stage{n}.npz"
            model.save(path)
            result.checkpoints.append(str(path.relative_to(run_dir)))
        return result

    probe = tasks[0].test[: config.probe_size]
    memory = st.ReplayMemory(max(strategy.memory_per_task, 1))
    layers = st.distilled_layers(model_config.num_layers, strategy.distill_layers)
    imp_layer = strategy.importance_layer
    if imp_layer is None:
        imp_layer = (model_config.num_layers - 1) // 2
    fisher_acc: dict[str, np.ndarray] | None = None
    anchor_params: dict[str, np.ndarray] = {}
    text_dump, vis_dump = [], []

    for t, task in enumerate(tasks):
        model.expand_head(task.labels, _stage_rng(seed, okey, t, 1))
        distill = ewc = None
        if strategy.distills and t > 0:
            weights = st.weights_for_layers(strategy.gamma, layers, model_config.num_layers)
            alpha, imps = 0.5, (0.0, 0.0)
            if strategy.mode == "adaptive":
                imps = st.modality_importance(model, memory.pool(), imp_layer)
                alpha = st.compute_alpha("adaptive", *imps)
            distill = st.DistillState(model.clone(), strategy.gamma, layers, weights, strategy.mode,
                                      alpha, imps, strategy.fd_scale)
            result.alpha_log.append({"stage": t + 1, "task": task.name, "mode": strategy.mode,
                                     "layer": imp_layer if strategy.mode == "adaptive" else None,
                                     "alpha": alpha,
                                     "i_q": imps[0] if strategy.mode == "adaptive" else None,
                                     "i_v": imps[1] if strategy.mode == "adaptive" else None})
        if strategy.name == "ewc" and fisher_acc is not None:
            ewc = st.EwcState({k: anchor_params[k] for k in fisher_acc}, fisher_acc, strategy.lambda_ewc)
        model, logs = train_task(model, task.train, task.val, strategy, config,
                                 rng=_stage_rng(seed, okey, t, 2), similarity=similarity,
                                 memory=memory if strategy.uses_replay else None,
                                 distill=distill, ewc=ewc, stage=t + 1, task_name=task.name)
        result.epoch_logs += logs
        if distill is not None and distill.mode == "token_proportional":
            # alpha follows each batch's token counts; log its mean over training
            result.alpha_log[-1]["alpha"] = float(np.mean([e.alpha for e in logs]))
        if strategy.uses_memory:
            memory = st.update_memory(memory, task.index, task.train, _stage_rng(seed, okey, t, 3))
        if strategy.name == "ewc":
            fisher = st.compute_fisher(model, task.train[: strategy.fisher_samples])
            if fisher_acc is None:
                fisher_acc = fisher
            else:
                fisher_acc = {k: fisher[k] + st._pad_to(fisher_acc[k], fisher[k].shape) for k in fisher}
            anchor_params = {k: v.copy() for k, v in model.params.items()}
        for i in range(t + 1):
            acc[t, i], wacc[t, i] = evaluate_samples(model, tasks[i].test, similarity, config.eval_batch_size)
        q, v = probe_representations(model, probe, config.eval_batch_size)
        text_dump.append(q)
        vis_dump.append(v)
        if run_dir and (save_checkpoints == "all" or (save_checkpoints == "final" and t == n - 1)):
            path = run_dir / "checkpoints" / f"stage{t + 1}.npz"
            model.save(path)
            result.checkpoints.append(str(path.relative_to(run_dir)))
        log.info("%s stage %d (%s): acc row %s", strategy.name, t + 1, task.name,
                 np.array2string(acc[t, : t + 1], precision=3))
        if on_stage:
            on_stage(t, result)

    dump = RepresentationDump(text_dump, vis_dump)
    if n > 1:
        result.cka_ratio = cka_ratio(dump)
    if keep_dumps:
        result.probe_dumps = dump
    return result


METRICS_HEADER = ("metric", "value")


def write_run(result: RunResult, run_dir: str | Path, extra: dict | None = None) -> None:
    """Persist metrics, matrices, ratio and logs for one run (deterministic bytes).

    ``metrics.csv`` rows: final_accuracy, sbwt, bwt, then ``cka_ratio_inner_mean_stage<t>``
    (mean of R_t over every layer except the first and the last).
    """
    from .analysis import write_ratio_csv

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = list(result.metrics.items())
    if result.cka_ratio is not None:
        inner = result.cka_ratio[:, 1:-1] if result.cka_ratio.shape[1] > 2 else result.cka_ratio
        rows += [(f"cka_ratio_inner_mean_stage{t + 2}", float(v)) for t, v in enumerate(inner.mean(axis=1))]
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows((k, repr(float(v))) for k, v in rows)
    info = {"strategy": result.strategy, "task_names": result.task_names,
            "checkpoints": result.checkpoints, **(extra or {})}
    (run_dir / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    for name, m in (("accuracy.csv", result.accuracy_matrix), ("weighted.csv", result.weighted_matrix)):
        lines = ["stage," + ",".join(result.task_names)]
        for t, row in enumerate(m):
            lines.append(f"{t + 1}," + ",".join("" if np.isnan(x) else repr(float(x)) for x in row))
        (run_dir / name).write_text("\n".join(lines) + "\n")
    if result.cka_ratio is not None:
        write_ratio_csv(result.cka_ratio, run_dir / "cka_ratio.csv")
    if result.alpha_log:
        keys = ("stage", "task", "mode", "layer", "alpha", "i_q", "i_v")
        with open(run_dir / "alpha.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for a in result.alpha_log:
                w.writerow(["" if a[k] is None else (repr(a[k]) if isinstance(a[k], float) else a[k])
                            for k in keys])
    with open(run_dir / "log.jsonl", "w") as fh:
        for e in result.epoch_logs:
            fh.write(json.dumps(e.__dict__, sort_keys=True) + "\n")


def read_metrics(run_dir: str | Path) -> dict[str, float]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}
