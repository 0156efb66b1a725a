import numpy as np
import pytest

from mafed import strategies as st
from mafed import trainer as tr
from mafed.analysis import AnswerSimilarity, default_similarity
from mafed.model import Model
from mafed.tasks import FEATURE_DIM, NUM_CELLS, Sample, generate_sequence

SMALL = dict(num_layers=2, hidden_dim=8, num_heads=2)


@pytest.fixture(scope="module")
def seq():
    return generate_sequence(5, "QuestionTypes", (24, 8, 8))


def _cfg(**kw):
    base = dict(max_lr=3e-3, batch_size=8, max_epochs=2, patience=1, seed=3, probe_size=8)
    base.update(kw)
    return tr.TrainConfig(**base)


def _run(seq, name, **kw):
    return tr.run_sequence(seq, tr.StrategyConfig(name=name, memory_per_task=6, fisher_samples=4), _cfg(),
                           tr.default_model_config(**SMALL), **kw)


# -- schedule and early stopping ----------------------------------------------------


def test_lr_examples():
    assert tr.lr_at_step(0, 100, 1.0, 0.1) == 0.0
    assert tr.lr_at_step(10, 100, 2.0, 0.1) == 2.0
    assert tr.lr_at_step(55, 100, 1.0, 0.1) == pytest.approx(0.5, abs=1e-15)
    assert tr.lr_at_step(100, 100, 1.0, 0.1) == 0.0
    with pytest.raises(ValueError):
        tr.lr_at_step(101, 100, 1.0, 0.1)


def test_lr_continuous_at_junction():
    left, mid, right = (tr.lr_at_step(s, 100, 1.0, 0.1) for s in (9, 10, 11))
    assert mid == 1.0 and mid - left == pytest.approx(0.1) and mid - right == pytest.approx(1 / 90)


def test_config_invariants():
    with pytest.raises(ValueError):
        tr.TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(max_epochs=2, patience=3)
    with pytest.raises(ValueError):
        tr.StrategyConfig(name="er", memory_per_task=0)
    with pytest.raises(ValueError):
        tr.StrategyConfig(gamma=1.5)


def test_early_stopper_contract():
    s = tr.EarlyStopper(1)
    assert not s.update(0.5, 0)
    assert s.update(0.4, 1)
    assert s.best_epoch == 0


def _train_setup(seq, epochs=4, patience=1):
    model = Model.create(tr.default_model_config(**SMALL), 0)
    task = seq.tasks[2]
    model.expand_head(task.labels, np.random.default_rng(1))
    return model, task, _cfg(max_epochs=epochs, patience=patience)


def test_decreasing_validation_stops_at_second_epoch_and_restores_best(seq, monkeypatch):
    model, task, cfg = _train_setup(seq)
    scores = iter([0.9, 0.8, 0.7, 0.6])
    snapshots = []

    def fake_eval(m, samples, similarity, batch_size=256):
        snapshots.append({k: v.copy() for k, v in m.params.items()})
        return next(scores), 0.0

    monkeypatch.setattr(tr, "evaluate_samples", fake_eval)
    model, logs = tr.train_task(model, task.train, task.val, tr.StrategyConfig(), cfg,
                                rng=np.random.default_rng(0), similarity=default_similarity())
    assert [e.epoch for e in logs] == [0, 1]
    for k, v in model.params.items():
        assert v.tobytes() == snapshots[0][k].tobytes()


def test_logged_lr_matches_schedule(seq):
    model, task, cfg = _train_setup(seq, epochs=2, patience=2)
    trace = []
    _, logs = tr.train_task(model, task.train, task.val, tr.StrategyConfig(), cfg,
                            rng=np.random.default_rng(0), similarity=default_similarity(), lr_trace=trace)
    assert [s for s, _, _ in trace] == list(range(len(trace)))
    for step, total, lr in trace:
        assert lr == tr.lr_at_step(step, total, cfg.max_lr, cfg.warmup_fraction)
    by_step = {s: lr for s, _, lr in trace}
    for e in logs:
        assert e.lr == by_step[e.steps - 1]


def test_empty_train_rejected(seq):
    model, task, cfg = _train_setup(seq)
    with pytest.raises(ValueError):
        tr.train_task(model, [], task.val, tr.StrategyConfig(), cfg, rng=np.random.default_rng(0),
                      similarity=default_similarity())


def test_ft_learns_linearly_separable_toy():
    rng = np.random.default_rng(0)
    samples = []
    for i in range(64):
        visual = rng.normal(scale=0.1, size=(NUM_CELLS, FEATURE_DIM))
        label = "yes" if i % 2 else "no"
        visual[0, 0] = 1.0 if label == "yes" else -1.0
        samples.append(Sample((3, 4), visual, label, 0, "existence", str(i)))
    model = Model.create(tr.default_model_config(num_layers=2, hidden_dim=16, num_heads=2), 0)
    model.expand_head(["yes", "no"], np.random.default_rng(1))
    cfg = tr.TrainConfig(max_lr=3e-3, batch_size=8, max_epochs=15, patience=15)
    sim = AnswerSimilarity.identity(["yes", "no"])
    model, _ = tr.train_task(model, samples, samples, tr.StrategyConfig(), cfg,
                             rng=np.random.default_rng(2), similarity=sim)
    acc, _ = tr.evaluate_samples(model, samples, sim)
    assert acc >= 0.99


# -- sequences -------------------------------------------------------------------------


def test_multitask_fills_only_the_final_row(seq):
    res = _run(seq, "multitask")
    assert np.isnan(res.accuracy_matrix[:-1]).all()
    assert not np.isnan(res.accuracy_matrix[-1]).any()
    assert set(res.metrics) == {"final_accuracy"}


def test_matrix_is_lower_triangular_in_unit_range(seq):
    res = _run(seq, "er")
    a = res.accuracy_matrix
    for t in range(5):
        assert not np.isnan(a[t, : t + 1]).any() and np.isnan(a[t, t + 1:]).all()
    valid = a[~np.isnan(a)]
    assert ((valid >= 0) & (valid <= 1)).all()
    assert res.cka_ratio.shape == (4, 2)


def test_ft_runs_are_bitwise_identical(seq, tmp_path):
    a, b = _run(seq, "ft"), _run(seq, "ft")
    assert a.accuracy_matrix.tobytes() == b.accuracy_matrix.tobytes()
    assert a.cka_ratio.tobytes() == b.cka_ratio.tobytes()
    tr.write_run(a, tmp_path / "a")
    tr.write_run(b, tmp_path / "b")
    for name in ("metrics.csv", "accuracy.csv", "cka_ratio.csv", "log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert set(tr.read_metrics(tmp_path / "a")) >= {"final_accuracy", "sbwt", "bwt"}


def test_ft_logs_no_distillation_or_ewc(seq):
    res = _run(seq, "ft")
    assert all(e.fd_text == 0.0 and e.fd_vision == 0.0 and e.ewc == 0.0 and e.alpha is None
               for e in res.epoch_logs)
    assert res.alpha_log == []


def test_ewc_logs_positive_penalty_after_first_task(seq):
    res = _run(seq, "ewc")
    assert all(e.ewc == 0.0 for e in res.epoch_logs if e.stage == 1)
    assert any(e.ewc > 0.0 for e in res.epoch_logs if e.stage > 1)


def test_teacher_is_previous_best_checkpoint(seq, tmp_path, monkeypatch):
    teachers = []
    real = st.DistillState

    def capture(teacher, *args, **kw):
        teachers.append({k: v.copy() for k, v in teacher.params.items()})
        return real(teacher, *args, **kw)

    monkeypatch.setattr(st, "DistillState", capture)
    res = _run(seq, "mafed_a", run_dir=tmp_path, save_checkpoints="all")
    assert len(teachers) == 4 and len(res.alpha_log) == 4
    for t, teacher in enumerate(teachers):
        saved = Model.load(tmp_path / f"checkpoints/stage{t + 1}.npz").params
        for k, v in saved.items():
            got = teacher[k][tuple(slice(0, s) for s in v.shape)]
            assert got.tobytes() == v.tobytes(), k
    for row in res.alpha_log:
        assert row["alpha"] == row["i_q"] / (row["i_q"] + row["i_v"])


def test_distillation_logs_alpha(seq):
    res = _run(seq, "fd")
    later = [e for e in res.epoch_logs if e.stage > 1]
    assert all(0.0 < e.alpha < 1.0 and e.fd_text >= 0.0 for e in later)
    assert all(e.alpha is None for e in res.epoch_logs if e.stage == 1)
    res_b = _run(seq, "mafed_b")
    assert all(e.alpha == 0.5 for e in res_b.epoch_logs if e.stage > 1)
