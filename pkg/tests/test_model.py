import numpy as np
import pytest

from mafed.model import (CLS, PAD, TEXT, VISION, ClassifierHead, LayerStates, Model, ModelConfig,
                         MultimodalBatch, build_forward, expand_head, forward, modality_mask,
                         param_leaves, split_states_by_modality)
from mafed.numcore import Tape, backward, evaluate, finite_diff_grad

from _tapes import rel_error

CFG = ModelConfig(text_vocab_size=20, visual_feature_dim=5, num_layers=3, hidden_dim=8, num_heads=2,
                  max_text_len=6, max_visual_len=4, mlp_ratio=2)


def _model(labels=("yes", "no", "red"), seed=0):
    m = Model.create(CFG, seed)
    m.expand_head(list(labels), np.random.default_rng(seed + 1))
    return m


def _batch(b=3, q=4, v=4, seed=0, pad_from=None):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(1, CFG.text_vocab_size, size=(b, q))
    if pad_from is not None:
        tokens[:, pad_from:] = 0
    return MultimodalBatch(tokens, rng.normal(size=(b, v, CFG.visual_feature_dim)), np.zeros(b, dtype=int))


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(text_vocab_size=5, visual_feature_dim=3, num_layers=1)
    with pytest.raises(ValueError):
        ModelConfig(text_vocab_size=5, visual_feature_dim=3, hidden_dim=10, num_heads=4)


def test_desk_scale_defaults():
    cfg = ModelConfig(text_vocab_size=5, visual_feature_dim=3)
    assert (cfg.num_layers, cfg.hidden_dim, cfg.num_heads) == (6, 64, 4)
    assert (cfg.max_text_len, cfg.max_visual_len) == (12, 16)


def test_mask_layout():
    mask = modality_mask(np.array([[5, 6, 0]]), 2)
    np.testing.assert_array_equal(mask, [[CLS, TEXT, TEXT, PAD, VISION, VISION]])
    b = _batch(b=2, q=3, v=4, pad_from=2)
    assert b.modality_mask.shape == (2, 1 + 3 + 4)
    assert (b.modality_mask[:, 0] == CLS).all() and ((b.modality_mask == CLS).sum(axis=1) == 1).all()


def test_shapes_batch_of_one():
    logits, states = forward(_model(), _batch(b=1))
    assert logits.shape == (1, 3)
    assert isinstance(states, LayerStates) and len(states) == CFG.num_layers
    assert states.states[0].shape == (1, 1 + 4 + 4, CFG.hidden_dim)


def test_identical_samples_identical_logits():
    b = _batch(b=1)
    twin = MultimodalBatch(np.repeat(b.question_tokens, 2, 0), np.repeat(b.visual_tokens, 2, 0), [0, 0])
    logits, _ = forward(_model(), twin)
    np.testing.assert_array_equal(logits[0], logits[1])


def test_zero_head_gives_zero_logits():
    m = _model()
    m.params["head.weight"][:] = 0.0
    m.params["head.bias"][:] = 0.0
    logits, _ = forward(m, _batch())
    np.testing.assert_array_equal(logits, 0.0)


def test_batch_equivariance():
    m = _model()
    b = _batch(b=4, seed=3)
    perm = np.array([2, 0, 3, 1])
    pb = MultimodalBatch(b.question_tokens[perm], b.visual_tokens[perm], b.labels[perm])
    np.testing.assert_allclose(forward(m, pb)[0], forward(m, b)[0][perm], rtol=0, atol=1e-12)


def test_padding_does_not_change_real_positions():
    m = _model()
    b = _batch(b=2, q=3)
    padded = MultimodalBatch(np.pad(b.question_tokens, ((0, 0), (0, 2))), b.visual_tokens, b.labels)
    l1, s1 = forward(m, b)
    l2, s2 = forward(m, padded)
    np.testing.assert_allclose(l1, l2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s1.states[-1][:, 1:4], s2.states[-1][:, 1:4], rtol=0, atol=1e-12)


def test_rejects_bad_inputs():
    m = _model()
    with pytest.raises(ValueError):
        forward(m, _batch(q=CFG.max_text_len + 1))
    b = _batch()
    b.question_tokens[0, 0] = CFG.text_vocab_size
    with pytest.raises(ValueError):
        forward(m, b)
    with pytest.raises(ValueError):
        forward(Model.create(CFG, 0), _batch())  # empty head


# -- head expansion ---------------------------------------------------------


def _head(labels, h=4, seed=0):
    rng = np.random.default_rng(seed)
    return ClassifierHead(list(labels), rng.normal(size=(len(labels), h)), rng.normal(size=len(labels)))


def test_expand_preserves_old_rows():
    head = _head(["yes", "no"])
    new = expand_head(head, ["red"], np.random.default_rng(1))
    assert new.label_table == ["yes", "no", "red"]
    assert new.weight[:2].tobytes() == head.weight.tobytes()
    assert new.bias[:2].tobytes() == head.bias.tobytes()
    assert new.bias[2] == 0.0


def test_expand_duplicate_is_noop():
    head = _head(["yes", "no"])
    new = expand_head(head, ["yes"], np.random.default_rng(1))
    assert new.label_table == head.label_table
    np.testing.assert_array_equal(new.weight, head.weight)


def test_expand_empty_head_keeps_order():
    head = ClassifierHead([], np.zeros((0, 4)), np.zeros(0))
    assert expand_head(head, ["a", "b", "c"], np.random.default_rng(0)).label_table == ["a", "b", "c"]


def test_new_rows_small_gaussian():
    head = ClassifierHead([], np.zeros((0, 64)), np.zeros(0))
    new = expand_head(head, [str(i) for i in range(200)], np.random.default_rng(0))
    assert abs(new.weight.std() - 0.02) < 0.001
    assert abs(new.weight.mean()) < 0.001


def test_old_logits_survive_expansion():
    m = _model()
    b = _batch()
    before, _ = forward(m, b)
    m.expand_head(["blue", "4"], np.random.default_rng(9))
    after, _ = forward(m, b)
    np.testing.assert_allclose(after[:, :3], before, rtol=0, atol=1e-15)


# -- modality split ---------------------------------------------------------


def test_split_counts():
    mask = np.array([[CLS, TEXT, TEXT, VISION]])
    states = [np.arange(8.0).reshape(1, 4, 2)]
    (q, v), = split_states_by_modality(states, mask)
    assert q.shape == (2, 2) and v.shape == (1, 2)


def test_split_paper_sizes_and_partition():
    tokens = np.arange(1, 10)[None, :]
    mask = modality_mask(tokens, 33)
    states = [np.zeros((1, mask.shape[1], 3))]
    (q, v), = split_states_by_modality(states, mask)
    assert (q.shape[0], v.shape[0]) == (9, 33)
    assert q.shape[0] + v.shape[0] + (mask == CLS).sum() + (mask == PAD).sum() == mask.shape[1]


def test_split_all_pad_is_empty():
    mask = np.array([[CLS, PAD, PAD]])
    (q, v), = split_states_by_modality([np.zeros((1, 3, 2))], mask)
    assert q.shape[0] == 0 and v.shape[0] == 0


def test_split_rejects_mismatch():
    with pytest.raises(ValueError):
        split_states_by_modality([np.zeros((1, 5, 2))], np.array([[CLS, TEXT, VISION]]))


# -- persistence and gradients ---------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = _model()
    m.save(tmp_path / "m.npz")
    back = Model.load(tmp_path / "m.npz")
    assert back.config == m.config and back.labels == m.labels
    for k, v in m.params.items():
        assert back.params[k].tobytes() == v.tobytes()


def test_model_gradients_match_finite_differences():
    m = _model()
    b = _batch(b=2, q=3, pad_from=2)
    b.labels[:] = [0, 2]
    names = ["blocks.1.attn.wq", "text_emb", "vis_proj", "head.weight", "blocks.0.mlp.b1"]
    tape = Tape()
    pv = param_leaves(tape, m.params, set(names))
    logits, _ = build_forward(tape, m, b, pv)
    loss = tape.name(tape.cross_entropy(logits, b.labels), "loss")
    grads = backward(tape, loss)
    rng = np.random.default_rng(0)
    for name in names:
        base = m.params[name]
        # check a random subset of coordinates to keep this fast
        idx = rng.choice(base.size, size=min(12, base.size), replace=False)

        def f(sub, name=name, base=base, idx=idx):
            x = base.copy().reshape(-1)
            x[idx] = sub
            return float(evaluate(tape, {name: x.reshape(base.shape)})["loss"].data)

        fd = finite_diff_grad(f, base.reshape(-1)[idx], 1e-5).data
        evaluate(tape, {name: base})
        assert rel_error(grads[name].data.reshape(-1)[idx], fd, loss.item()) < 1e-4, name
