"""Experiment runner: INI configs, run directories, reports and checkpoint probes.

Subcommands::

    mafed run CONFIG [--output-dir DIR] [--workers N] [--resume]
    mafed report DIR [DIR ...] [--out DIR]
    mafed probe CKPT_A CKPT_B --data DUMP [--out CSV]
    mafed dump OUT --setting KIND --seed N [--task I] [--split test] [--sizes 2000,500,1000]

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import functools
import hashlib
import io
import json
import logging
import platform
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import strategies as st
from .analysis import RepresentationDump, linear_cka, read_ratio_csv
from .model import Model
from .tasks import SettingKind, dump_samples, generate_sequence, load_samples, task_orders
from .trainer import (StrategyConfig, TrainConfig, default_model_config, probe_representations,
                      read_metrics, run_sequence, write_run)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
STD_NOTE = "# std is the sample standard deviation (n-1) over completed runs; 0 when n = 1"


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key


class ExperimentError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# config parsing
# --------------------------------------------------------------------------


def _words(text: str) -> tuple[str, ...]:
    return tuple(w.strip() for w in text.replace(",", " ").split() if w.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(w) for w in _words(text))


def _optional(parse: Callable) -> Callable:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


REQUIRED = object()
_T = TrainConfig()

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "experiment": {
        "setting": (str, REQUIRED),
        "strategy": (_words, REQUIRED),
        "seeds": (_ints, (0,)),
        "task_orders": (int, 1),
        "output_dir": (str, "runs"),
        "workers": (int, 1),
        "checkpoints": (str, "final"),
    },
    "strategy": {
        "gamma": (float, 0.5),
        "lambda_ewc": (float, 100.0),
        "fd_scale": (float, 1.0),
        "memory_per_task": (int, 1000),
        "importance_layer": (_optional(int), None),
        "alpha_mode": (_optional(str), None),
        "replay": (_optional(_bool), None),
        "distill_layers": (_optional(_ints), None),
        "fisher_samples": (int, 1000),
    },
    "train": {k: (type(getattr(_T, k)), getattr(_T, k))
              for k in ("max_lr", "warmup_fraction", "batch_size", "max_epochs", "patience",
                        "beta1", "beta2", "adam_eps", "eval_batch_size", "probe_size")},
    "data": {
        "train_size": (int, 2000),
        "val_size": (int, 500),
        "test_size": (int, 1000),
        "noise_std": (float, 0.1),
    },
    "model": {
        "num_layers": (int, 6),
        "hidden_dim": (int, 64),
        "num_heads": (int, 4),
        "mlp_ratio": (int, 4),
        "init_std": (float, 0.1),
        "head_init_std": (float, 0.02),
        "ln_eps": (float, 1e-6),
    },
}

# key -> (predicate, reason); checked after parsing
_RANGES: dict[str, tuple[Callable, str]] = {
    "gamma": (lambda v: 0.0 < v <= 1.0, "must lie in (0, 1]"),
    "lambda_ewc": (lambda v: v >= 0, "must be >= 0"),
    "fd_scale": (lambda v: v >= 0, "must be >= 0"),
    "memory_per_task": (lambda v: v >= 0, "must be >= 0"),
    "fisher_samples": (lambda v: v >= 1, "must be >= 1"),
    "seeds": (lambda v: len(v) >= 1 and all(s >= 0 for s in v), "needs at least one non-negative seed"),
    "task_orders": (lambda v: v >= 1, "must be >= 1"),
    "workers": (lambda v: v >= 1, "must be >= 1"),
    "checkpoints": (lambda v: v in ("all", "final", "none"), "must be one of all, final, none"),
    "alpha_mode": (lambda v: v is None or v in st.ALPHA_MODES, f"must be one of {', '.join(st.ALPHA_MODES)}"),
    "max_lr": (lambda v: v > 0, "must be positive"),
    "warmup_fraction": (lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)"),
    "batch_size": (lambda v: v >= 1, "must be >= 1"),
    "max_epochs": (lambda v: v >= 1, "must be >= 1"),
    "patience": (lambda v: v >= 1, "must be >= 1"),
    "eval_batch_size": (lambda v: v >= 1, "must be >= 1"),
    "probe_size": (lambda v: v >= 2, "must be >= 2"),
    "train_size": (lambda v: v >= 1, "must be >= 1"),
    "val_size": (lambda v: v >= 1, "must be >= 1"),
    "test_size": (lambda v: v >= 1, "must be >= 1"),
    "noise_std": (lambda v: v >= 0, "must be >= 0"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str
    strategies: tuple[str, ...]
    seeds: tuple[int, ...] = (0,)
    task_orders: int = 1
    output_dir: str = "runs"
    workers: int = 1
    checkpoints: str = "final"
    strategy: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)

    def strategy_config(self, name: str) -> StrategyConfig:
        return StrategyConfig(name=name, **self.strategy)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.train)

    def model_config(self):
        return default_model_config(**self.model)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.data["train_size"], self.data["val_size"], self.data["test_size"]


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", f"malformed config: {exc}") from exc
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
    for section, schema in SCHEMA.items():
        got = dict(cp[section]) if cp.has_section(section) else {}
        for key in got:
            if key not in schema:
                raise ConfigError(key, f"unknown key in [{section}]")
        out = {}
        for key, (parse, default) in schema.items():
            if key in got:
                try:
                    out[key] = parse(got[key])
                except ValueError as exc:
                    raise ConfigError(key, f"cannot parse {got[key]!r}: {exc}") from exc
            elif default is REQUIRED:
                raise ConfigError(key, f"required key missing from [{section}]")
            else:
                out[key] = default
            check = _RANGES.get(key)
            if check and not check[0](out[key]):
                raise ConfigError(key, f"{check[1]} (got {out[key]!r})")
        values[section] = out
    return _build(values)


def _build(values: dict[str, dict]) -> ExperimentConfig:
    exp = values["experiment"]
    try:
        setting = SettingKind(exp["setting"]).value
    except ValueError:
        raise ConfigError("setting", f"unknown setting {exp['setting']!r}; "
                          f"expected one of {', '.join(k.value for k in SettingKind)}") from None
    names = exp["strategy"]
    if not names:
        raise ConfigError("strategy", "no strategy given")
    for name in names:
        if name not in st.STRATEGIES:
            raise ConfigError("strategy", f"unknown strategy {name!r}; expected one of "
                              f"{', '.join(st.STRATEGIES)}")
    if len(set(names)) != len(names):
        raise ConfigError("strategy", "listed more than once")
    cfg = ExperimentConfig(setting, names, exp["seeds"], exp["task_orders"], exp["output_dir"],
                           exp["workers"], exp["checkpoints"], values["strategy"], values["train"],
                           values["data"], values["model"])
    # cross-field checks, reported against the most specific key
    train = cfg.train
    if train["patience"] > train["max_epochs"]:
        raise ConfigError("patience", "must not exceed max_epochs")
    try:
        mc = cfg.model_config()
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from exc
    for name in names:
        try:
            sc = cfg.strategy_config(name)
        except ValueError as exc:
            raise ConfigError("memory_per_task" if "memory" in str(exc) else "strategy", str(exc)) from exc
        layers = cfg.strategy["distill_layers"]
        if layers is not None and sc.distills:
            try:
                st.distilled_layers(mc.num_layers, layers)
            except ValueError as exc:
                raise ConfigError("distill_layers", str(exc)) from exc
        imp = cfg.strategy["importance_layer"]
        if imp is not None and not 0 <= imp < mc.num_layers:
            raise ConfigError("importance_layer", f"must lie in [0, {mc.num_layers})")
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    return parse_config_text(text)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: ExperimentConfig, *, include_paths: bool = True) -> str:
    """Canonical INI text; ``parse_config_text(format_config(c)) == c``."""
    exp = {"setting": cfg.setting, "strategy": cfg.strategies, "seeds": cfg.seeds,
           "task_orders": cfg.task_orders, "output_dir": cfg.output_dir, "workers": cfg.workers,
           "checkpoints": cfg.checkpoints}
    if not include_paths:
        # neither affects results, so they stay out of the config hash
        del exp["output_dir"], exp["workers"]
    sections = {"experiment": exp, "strategy": cfg.strategy, "train": cfg.train,
                "data": cfg.data, "model": cfg.model}
    buf = io.StringIO()
    for name, values in sections.items():
        buf.write(f"[{name}]\n")
        for key in SCHEMA[name]:
            if key in values:
                buf.write(f"{key} = {_fmt(values[key])}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(format_config(cfg, include_paths=False).encode()).hexdigest()


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------


def run_label(cfg: ExperimentConfig, name: str) -> str:
    """Directory name for a strategy; flags replay overrides so ablations never collide."""
    sc = cfg.strategy_config(name)
    default = StrategyConfig(name=name, memory_per_task=max(sc.memory_per_task, 1)).uses_replay
    if sc.uses_replay == default:
        return name
    return f"{name}-noreplay" if default else f"{name}+replay"


@dataclass(frozen=True)
class Job:
    label: str
    strategy: str
    seed: int
    order_index: int
    task_order: tuple[int, ...]

    @property
    def rel_dir(self) -> str:
        return f"{self.label}/seed{self.seed}_order{self.order_index}"


def plan_jobs(cfg: ExperimentConfig) -> list[Job]:
    jobs = []
    for name in cfg.strategies:
        label = run_label(cfg, name)
        for seed in cfg.seeds:
            for k, order in enumerate(task_orders(seed, cfg.task_orders)):
                jobs.append(Job(label, name, seed, k, order))
    return jobs


def _versions() -> dict[str, str]:
    return {"mafed": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _estimate_bytes(cfg: ExperimentConfig, n_jobs: int) -> int:
    mc = cfg.model_config()
    h, f = mc.hidden_dim, mc.mlp_ratio * mc.hidden_dim
    per_layer = 4 * h * h + 2 * h * f
    n_params = mc.num_layers * per_layer + (mc.text_vocab_size + 64) * h
    stages = {"all": 5, "final": 1, "none": 0}[cfg.checkpoints]
    per_run = stages * n_params * 8 + 2_000_000  # logs, csvs, headroom
    return n_jobs * per_run


def _check_writable(out: Path, need: int) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out, prefix=".write-check-"):
            pass
    except OSError as exc:
        raise ExperimentError(f"output directory {out} is not writable: {exc.strerror or exc}") from exc
    free = shutil.disk_usage(out).free
    if free < need:
        raise ExperimentError(f"output directory {out} has {free} bytes free; about {need} needed")


@functools.lru_cache(maxsize=4)
def _sequence(seed: int, setting: str, sizes: tuple[int, int, int], noise_std: float):
    return generate_sequence(seed, setting, sizes, noise_std=noise_std)


def _run_job(cfg: ExperimentConfig, job: Job, out: str) -> str:
    seq = _sequence(job.seed, cfg.setting, cfg.sizes, cfg.data["noise_std"]).with_order(job.task_order)
    run_dir = Path(out) / job.rel_dir
    result = run_sequence(seq, cfg.strategy_config(job.strategy), cfg.train_config(job.seed),
                          cfg.model_config(), run_dir=run_dir, save_checkpoints=cfg.checkpoints)
    write_run(result, run_dir, {"setting": cfg.setting, "label": job.label, "seed": job.seed,
                                "order_index": job.order_index, "task_order": list(job.task_order)})
    return job.rel_dir


def write_manifests(cfg: ExperimentConfig, jobs: Sequence[Job], out: Path) -> list[Path]:
    text = format_config(cfg, include_paths=False)
    paths = []
    for label in dict.fromkeys(j.label for j in jobs):
        mine = [j for j in jobs if j.label == label]
        manifest = {
            "label": label,
            "strategy": mine[0].strategy,
            "setting": cfg.setting,
            "config": text,
            "config_sha256": config_hash(cfg),
            "versions": _versions(),
            "runs": [{"dir": Path(j.rel_dir).name, "seed": j.seed, "order_index": j.order_index,
                      "task_order": list(j.task_order)} for j in mine],
        }
        path = out / label / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None, *,
                   workers: int | None = None, resume: bool = False) -> Path:
    """Train every (strategy, seed, task order) and write one directory per run.

    Layout: ``<out>/<label>/manifest.json`` and ``<out>/<label>/seed<s>_order<k>/``.
    With ``resume`` a run whose ``metrics.csv`` already exists is skipped.
    """
    out = Path(output_dir or cfg.output_dir)
    jobs = plan_jobs(cfg)
    _check_writable(out, _estimate_bytes(cfg, len(jobs)))
    write_manifests(cfg, jobs, out)
    todo = [j for j in jobs if not (resume and (out / j.rel_dir / "metrics.csv").exists())]
    n_workers = max(1, min(workers or cfg.workers, len(todo) or 1))
    log.info("%d runs planned, %d to execute on %d worker(s)", len(jobs), len(todo), n_workers)
    if n_workers == 1:
        for j in todo:
            log.info("run %s", j.rel_dir)
            _run_job(cfg, j, str(out))
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for rel in pool.map(_run_job, [cfg] * len(todo), todo, [str(out)] * len(todo)):
                log.info("finished %s", rel)
    return out


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------


@dataclass
class RunRecord:
    setting: str
    label: str
    path: Path
    complete: bool


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text())


def collect_runs(dirs: Sequence[str | Path]) -> list[RunRecord]:
    """Every planned or finished run under ``dirs``; planned-but-missing runs stay listed."""
    seen: dict[Path, RunRecord] = {}
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise ExperimentError(f"{d} is not a directory")
        for mf in sorted(d.rglob("manifest.json")):
            m = _read_json(mf)
            for r in m["runs"]:
                p = (mf.parent / r["dir"]).resolve()
                seen[p] = RunRecord(m["setting"], m["label"], p, (p / "metrics.csv").exists())
        for met in sorted(d.rglob("metrics.csv")):
            p = met.parent.resolve()
            if p not in seen and (p / "run.json").exists():
                info = _read_json(p / "run.json")
                seen[p] = RunRecord(info.get("setting", "unknown"), info.get("label", info["strategy"]),
                                    p, True)
    return sorted(seen.values(), key=lambda r: (r.setting, r.label, str(r.path)))


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def _cell(x: float | None) -> str:
    return "absent" if x is None else repr(float(x))


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_+" else "_" for c in text)


def emit_report(dirs: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Aggregate runs into ``summary.csv``, ``ratio_<setting>_<label>.csv`` and, for
    adaptive-weighting runs only, ``alpha_<setting>_<label>.csv``."""
    runs = collect_runs(dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in runs:
        groups.setdefault((r.setting, r.label), []).append(r)
    written = []

    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        fh.write(STD_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "strategy", "runs_completed", "runs_missing", "accuracy_mean",
                    "accuracy_std", "sbwt_mean", "sbwt_std", "bwt_mean", "bwt_std"])
        for (setting, label), rs in sorted(groups.items()):
            done = [read_metrics(r.path) for r in rs if r.complete]
            row = [setting, label, len(done), len(rs) - len(done)]
            for key in ("final_accuracy", "sbwt", "bwt"):
                vals = [m[key] for m in done if key in m]
                if vals:
                    row += [_cell(v) for v in _mean_std(vals)]
                else:
                    row += ["absent", "absent"]
            w.writerow(row)
    written.append(summary)

    for (setting, label), rs in sorted(groups.items()):
        ratios = [read_ratio_csv(r.path / "cka_ratio.csv") for r in rs
                  if r.complete and (r.path / "cka_ratio.csv").exists()]
        if ratios:
            stack = np.stack(ratios)
            path = out / f"ratio_{_slug(setting)}_{_slug(label)}.csv"
            with open(path, "w", newline="") as fh:
                fh.write(STD_NOTE + "\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["stage", "layer", "mean", "std", "n"])
                for t in range(stack.shape[1]):
                    for d in range(stack.shape[2]):
                        m, s = _mean_std(stack[:, t, d])
                        w.writerow([t + 2, d, repr(m), repr(s), len(ratios)])
            written.append(path)

        alpha_rows: dict[tuple[int, str], list[float]] = {}
        for r in rs:
            f = r.path / "alpha.csv"
            if not (r.complete and f.exists()):
                continue
            with open(f, newline="") as fh:
                for a in csv.DictReader(fh):
                    if a["mode"] == "adaptive":
                        alpha_rows.setdefault((int(a["stage"]), a["task"]), []).append(float(a["alpha"]))
        if alpha_rows:
            path = out / f"alpha_{_slug(setting)}_{_slug(label)}.csv"
            with open(path, "w", newline="") as fh:
                fh.write(STD_NOTE + "\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["stage", "task", "alpha_mean", "alpha_std", "n"])
                for (stage, task), vals in sorted(alpha_rows.items()):
                    m, s = _mean_std(vals)
                    w.writerow([stage, task, repr(m), repr(s), len(vals)])
            written.append(path)
    return written


# --------------------------------------------------------------------------
# checkpoint probe
# --------------------------------------------------------------------------


def probe_checkpoints(ckpt_a: str | Path, ckpt_b: str | Path, data: str | Path,
                      batch_size: int = 256) -> list[dict]:
    """Per layer CKA of text and vision rows between two checkpoints, and their ratio."""
    samples = load_samples(data)
    if len(samples) < 2:
        raise ExperimentError("probe data needs at least two samples")
    reps = []
    for path in (ckpt_a, ckpt_b):
        model = Model.load(path)
        reps.append(probe_representations(model, samples, batch_size))
    dump = RepresentationDump([reps[0][0], reps[1][0]], [reps[0][1], reps[1][1]])
    rows = []
    for d in range(len(dump.text[0])):
        cq = linear_cka(dump.text[0][d], dump.text[1][d])
        cv = linear_cka(dump.vision[0][d], dump.vision[1][d])
        rows.append({"layer": d, "cka_text": cq, "cka_vision": cv,
                     "ratio": cq / cv if cv > 0 else float("nan")})
    return rows


# --------------------------------------------------------------------------
# command line
# --------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mafed", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every (strategy, seed, task order) of a config")
    r.add_argument("config")
    r.add_argument("--output-dir", help="overrides [experiment] output_dir")
    r.add_argument("--workers", type=int, help="overrides [experiment] workers")
    r.add_argument("--resume", action="store_true", help="skip runs that already have metrics")

    rep = sub.add_parser("report", help="aggregate finished runs into CSV tables")
    rep.add_argument("dirs", nargs="+")
    rep.add_argument("--out", help="report directory (default: <first dir>/report)")

    pr = sub.add_parser("probe", help="per-layer CKA ratio between two checkpoints")
    pr.add_argument("ckpt_a")
    pr.add_argument("ckpt_b")
    pr.add_argument("--data", required=True, help="dataset dump (JSON lines) to probe with")
    pr.add_argument("--out", help="CSV path (default: stdout)")

    d = sub.add_parser("dump", help="write one split of a generated task as JSON lines")
    d.add_argument("out")
    d.add_argument("--setting", default=SettingKind.QTYPES.value,
                   choices=[k.value for k in SettingKind])
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--task", type=int, default=0)
    d.add_argument("--split", choices=("train", "val", "test"), default="test")
    d.add_argument("--sizes", default="2000,500,1000", help="train,val,test counts")
    return p


def _write_rows(rows: list[dict], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            out = run_experiment(cfg, args.output_dir, workers=args.workers, resume=args.resume)
            print(out)
        elif args.command == "report":
            out = args.out or str(Path(args.dirs[0]) / "report")
            for path in emit_report(args.dirs, out):
                print(path)
        elif args.command == "probe":
            rows = probe_checkpoints(args.ckpt_a, args.ckpt_b, args.data)
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    _write_rows(rows, fh)
            else:
                _write_rows(rows, sys.stdout)
        elif args.command == "dump":
            try:
                sizes = _ints(args.sizes)
            except ValueError:
                sizes = ()
            if len(sizes) != 3:
                raise ConfigError("sizes", "expected three comma-separated counts")
            seq = generate_sequence(args.seed, args.setting, sizes)
            if not 0 <= args.task < len(seq.tasks):
                raise ConfigError("task", f"must lie in [0, {len(seq.tasks)})")
            dump_samples(getattr(seq.tasks[args.task], args.split), args.out)
            print(args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
