import csv
import json

import numpy as np
import pytest

from mafed import cli
from mafed.model import Model
from mafed.tasks import load_samples
from mafed.trainer import read_metrics

TINY = """
[experiment]
setting = QuestionTypes
strategy = {strategies}
seeds = {seeds}
task_orders = {orders}
checkpoints = {ckpt}

[train]
max_lr = 0.003
batch_size = 8
max_epochs = 1
patience = 1
probe_size = 4

[strategy]
memory_per_task = 4

[data]
train_size = 8
val_size = 4
test_size = 4

[model]
num_layers = 2
hidden_dim = 8
num_heads = 2
"""


def _tiny(strategies="ft", seeds="1", orders=1, ckpt="none"):
    return cli.parse_config_text(TINY.format(strategies=strategies, seeds=seeds, orders=orders, ckpt=ckpt))


def _minimal(extra=""):
    return "[experiment]\nsetting = QuestionTypes\nstrategy = ft\n" + extra


# -- config ------------------------------------------------------------------------


def test_minimal_config_fills_defaults():
    cfg = cli.parse_config_text(_minimal())
    assert cfg.strategies == ("ft",) and cfg.seeds == (0,) and cfg.task_orders == 1
    assert cfg.strategy["gamma"] == 0.5 and cfg.strategy["memory_per_task"] == 1000
    assert cfg.train["max_epochs"] == 15 and cfg.train["patience"] == 3
    assert cfg.model["num_layers"] == 6


@pytest.mark.parametrize("extra, key", [
    ("[strategy]\ngamma = 1.5\n", "gamma"),
    ("[strategy]\ngama = 0.5\n", "gama"),
    ("[strategy]\nmemory_per_task = -1\n", "memory_per_task"),
    ("[train]\nmax_epochs = 2\npatience = 3\n", "patience"),
    ("[bogus]\nx = 1\n", "bogus"),
])
def test_bad_values_name_their_key(extra, key):
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config_text(_minimal(extra))
    assert err.value.key == key and key in str(err.value)


def test_unknown_strategy_and_missing_key():
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config_text("[experiment]\nsetting = QuestionTypes\nstrategy = sgd\n")
    assert err.value.key == "strategy"
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config_text("[experiment]\nsetting = QuestionTypes\n")
    assert err.value.key == "strategy"


def test_mafed_a_with_large_memory_accepted():
    text = "[experiment]\nsetting = QuestionTypes\nstrategy = mafed_a\n[strategy]\nmemory_per_task = 1000\n"
    cfg = cli.parse_config_text(text)
    assert cfg.strategy_config("mafed_a").memory_per_task == 1000


def test_config_round_trip():
    cfg = _tiny("ft, er, mafed_a", "1, 2", 2)
    assert cli.parse_config_text(cli.format_config(cfg)) == cfg
    assert cli.config_hash(cfg) == cli.config_hash(cli.parse_config_text(cli.format_config(cfg)))


def test_shipped_configs_parse():
    from pathlib import Path

    for path in sorted(Path(__file__).parent.parent.joinpath("configs").glob("*.ini")):
        cli.parse_config(path)


def test_replay_override_gets_its_own_label():
    cfg = cli.parse_config_text(_minimal("[strategy]\nreplay = false\n").replace("= ft", "= fd"))
    assert cli.run_label(cfg, "fd") == "fd-noreplay"
    assert cli.run_label(_tiny("fd"), "fd") == "fd"


# -- running -------------------------------------------------------------------------


def test_nine_runs_for_three_seeds_and_three_orders(tmp_path):
    cfg = _tiny(seeds="1, 2, 3", orders=3)
    out = cli.run_experiment(cfg, tmp_path / "out")
    runs = sorted(p.parent.name for p in out.rglob("metrics.csv"))
    assert len(runs) == 9 and len(set(runs)) == 9
    manifest = json.loads((out / "ft" / "manifest.json").read_text())
    assert manifest["config_sha256"] == cli.config_hash(cfg) and len(manifest["runs"]) == 9
    assert "timestamp" not in json.dumps(manifest)


def test_strategy_sweep_writes_one_manifest_each_and_reruns_identically(tmp_path):
    cfg = _tiny("ft, er, fd, mafed_b, mafed_a")
    a = cli.run_experiment(cfg, tmp_path / "a")
    b = cli.run_experiment(cfg, tmp_path / "b")
    manifests = sorted(p.parent.name for p in a.rglob("manifest.json"))
    assert manifests == ["er", "fd", "ft", "mafed_a", "mafed_b"]
    for met in a.rglob("metrics.csv"):
        twin = b / met.relative_to(a)
        assert met.read_bytes() == twin.read_bytes()
    for name in ("manifest.json",):
        assert (a / "ft" / name).read_bytes() == (b / "ft" / name).read_bytes()


def test_resume_skips_finished_runs(tmp_path):
    cfg = _tiny()
    out = cli.run_experiment(cfg, tmp_path)
    met = next(out.rglob("metrics.csv"))
    met.write_text("metric,value\nfinal_accuracy,0.5\n")
    cli.run_experiment(cfg, tmp_path, resume=True)
    assert read_metrics(met.parent) == {"final_accuracy": 0.5}


def test_unwritable_output_rejected_before_training(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(cli.ExperimentError):
        cli.run_experiment(_tiny(), blocker / "sub")


# -- report ---------------------------------------------------------------------------


def _fake_runs(root, label, accs, strategy=None, alpha=False, missing=0):
    runs = [{"dir": f"seed{i}_order0", "seed": i, "order_index": 0, "task_order": [0, 1, 2, 3, 4]}
            for i in range(len(accs) + missing)]
    (root / label).mkdir(parents=True)
    (root / label / "manifest.json").write_text(json.dumps(
        {"label": label, "strategy": strategy or label, "setting": "QuestionTypes", "runs": runs}))
    for i, acc in enumerate(accs):
        d = root / label / f"seed{i}_order0"
        d.mkdir()
        (d / "metrics.csv").write_text(f"metric,value\nfinal_accuracy,{acc}\nsbwt,-0.1\nbwt,-0.2\n")
        if alpha:
            (d / "alpha.csv").write_text("stage,task,mode,layer,alpha,i_q,i_v\n"
                                         f"2,color,adaptive,2,{0.2 + 0.1 * i},1.0,4.0\n")


def _summary(path):
    lines = [line for line in path.read_text().splitlines() if not line.startswith("#")]
    return {r["strategy"]: r for r in csv.DictReader(lines)}


def test_report_std_conventions_and_alpha_table(tmp_path):
    _fake_runs(tmp_path, "er", [0.6, 0.8])
    _fake_runs(tmp_path, "ft", [0.3])
    _fake_runs(tmp_path, "mafed_a", [0.5, 0.5], alpha=True)
    written = cli.emit_report([tmp_path], tmp_path / "report")
    names = {p.name for p in written}
    assert "alpha_QuestionTypes_mafed_a.csv" in names
    assert not any(n.startswith("alpha_") and "ft" in n for n in names)
    text = (tmp_path / "report" / "summary.csv").read_text()
    assert text.startswith("# std is the sample standard deviation")
    rows = _summary(tmp_path / "report" / "summary.csv")
    assert float(rows["er"]["accuracy_mean"]) == pytest.approx(0.7, abs=1e-15)
    assert float(rows["er"]["accuracy_std"]) == pytest.approx(0.1414213562, abs=1e-9)
    assert float(rows["ft"]["accuracy_std"]) == 0.0 and float(rows["ft"]["sbwt_std"]) == 0.0


def test_missing_runs_are_marked_absent(tmp_path):
    _fake_runs(tmp_path, "fd", [], missing=2)
    _fake_runs(tmp_path, "er", [0.4], missing=1)
    cli.emit_report([tmp_path], tmp_path / "report")
    rows = _summary(tmp_path / "report" / "summary.csv")
    assert rows["fd"]["accuracy_mean"] == "absent" and rows["fd"]["runs_missing"] == "2"
    assert rows["er"]["runs_completed"] == "1" and rows["er"]["runs_missing"] == "1"


def test_report_is_order_independent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _fake_runs(a, "er", [0.6, 0.8])
    _fake_runs(b, "ft", [0.3])
    cli.emit_report([a, b], tmp_path / "r1")
    cli.emit_report([b, a], tmp_path / "r2")
    assert (tmp_path / "r1/summary.csv").read_bytes() == (tmp_path / "r2/summary.csv").read_bytes()


def test_report_on_real_runs_has_ratio_table(tmp_path):
    out = cli.run_experiment(_tiny("ft", "1, 2"), tmp_path / "runs")
    written = cli.emit_report([out], tmp_path / "report")
    ratio = tmp_path / "report" / "ratio_QuestionTypes_ft.csv"
    assert ratio in written
    rows = list(csv.DictReader(line for line in ratio.read_text().splitlines() if not line.startswith("#")))
    assert len(rows) == 4 * 2 and all(r["n"] == "2" for r in rows)


# -- command line ---------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(_minimal("[strategy]\ngamma = 1.5\n"))
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert "gamma" in capsys.readouterr().err
    assert cli.main(["report", str(tmp_path / "nowhere")]) == cli.EXIT_RUNTIME
    good = tmp_path / "good.ini"
    good.write_text(TINY.format(strategies="ft", seeds="1", orders=1, ckpt="none"))
    assert cli.main(["run", str(good), "--output-dir", str(tmp_path / "o")]) == cli.EXIT_OK
    assert cli.main(["report", str(tmp_path / "o")]) == cli.EXIT_OK


def test_dump_and_probe(tmp_path, capsys):
    data = tmp_path / "probe.jsonl"
    assert cli.main(["dump", str(data), "--sizes", "8,4,6", "--seed", "2"]) == cli.EXIT_OK
    assert len(load_samples(data)) == 6
    out = cli.run_experiment(_tiny(ckpt="all"), tmp_path / "runs")
    ckpts = sorted(out.rglob("stage*.npz"))
    assert len(ckpts) == 5
    assert cli.main(["probe", str(ckpts[0]), str(ckpts[0]), "--data", str(data),
                     "--out", str(tmp_path / "same.csv")]) == cli.EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "same.csv")))
    assert len(rows) == Model.load(ckpts[0]).config.num_layers
    np.testing.assert_allclose([float(r["ratio"]) for r in rows], 1.0, atol=1e-12)
    rows = cli.probe_checkpoints(ckpts[0], ckpts[-1], data)
    assert all(0.0 <= r["cka_text"] <= 1.0 for r in rows)
    assert cli.main(["dump", str(data), "--sizes", "8,4"]) == cli.EXIT_CONFIG
