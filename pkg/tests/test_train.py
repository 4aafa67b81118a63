import json
import math

import numpy as np
import pytest

from revft.exceptions import ConfigError, NonFiniteError, ShapeMismatch
from revft.model import ModelDims, SegmentPlan, assemble_model
from revft.reversible import MeftKind, ScalingConfig
from revft.tensor import make_rng
from revft.train import (
    AdamState,
    Dataset,
    TaskSpec,
    TrainConfig,
    adam_step,
    clip_grad_norm,
    cross_entropy_loss,
    generate_synthetic_task,
    global_norm,
    lr_schedule,
    parity_labels,
    read_jsonl,
    total_train_steps,
    train_loop,
    write_metrics,
)

DIMS = ModelDims(vocab=8, max_len=6, d_model=16, heads=4, n_classes=2)
TASK = TaskSpec("synth_classify", vocab=8, seq_len=6, n_train=64, n_dev=32)


# --- optimizer -------------------------------------------------------------


def test_adam_first_step_is_sign_times_lr():
    # after one step m_hat = g and v_hat = g^2, so the update is g/(|g|+eps)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([3.0, -0.25, 1e-3])}
    adam_step(AdamState(), p, g, lr=1.0)
    expected = np.array([1.0, -2.0, 0.5]) - np.array([3.0, -0.25, 1e-3]) / (np.abs([3.0, 0.25, 1e-3]) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=0, atol=1e-15)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([0.3, -0.7])}
    adam_step(AdamState(), p, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p["w"], [0.3, -0.7])


def test_adamw_decay_is_decoupled():
    p = {"w": np.array([2.0, -4.0])}
    adam_step(AdamState(weight_decay=0.1), p, {"w": np.zeros(2)}, lr=0.01)
    np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.001), rtol=1e-15)


def test_adam_bias_correction_second_step():
    state = AdamState()
    p = {"w": np.array([0.0])}
    adam_step(state, p, {"w": np.array([1.0])}, lr=1.0)
    adam_step(state, p, {"w": np.array([1.0])}, lr=1.0)
    # constant gradient: both corrected moments equal 1 at every step
    assert p["w"][0] == pytest.approx(-2.0 / (1 + 1e-8), abs=1e-12)
    assert state.t == 2


def test_adam_rejects_bad_gradients():
    p = {"w": np.zeros(2)}
    with pytest.raises(ShapeMismatch):
        adam_step(AdamState(), p, {"w": np.zeros(3)}, 0.1)
    with pytest.raises(NonFiniteError):
        adam_step(AdamState(), p, {"w": np.array([np.nan, 0.0])}, 0.1)
    with pytest.raises(KeyError):
        adam_step(AdamState(), p, {"w": np.zeros(2), "q": np.zeros(1)}, 0.1)


def test_adam_keeps_single_precision():
    p = {"w": np.ones(3, dtype=np.float32)}
    adam_step(AdamState(weight_decay=0.1), p, {"w": np.ones(3, dtype=np.float32)}, 0.1)
    assert p["w"].dtype == np.float32


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(g) == 5.0
    clipped, norm = clip_grad_norm(g, 1.0)
    assert norm == 5.0
    assert global_norm(clipped) <= 1.0
    assert global_norm(clipped) == pytest.approx(1.0, rel=1e-6)
    same, _ = clip_grad_norm(g, 10.0)
    assert same is g


# --- schedule --------------------------------------------------------------


def test_lr_schedule_points():
    # 100 steps, 6% warmup -> 6 warmup steps
    assert lr_schedule(0, 100, 0.06, 1.0) == 0.0
    assert lr_schedule(3, 100, 0.06, 1.0) == 0.5
    assert lr_schedule(6, 100, 0.06, 2.0) == 2.0
    assert lr_schedule(53, 100, 0.06, 1.0) == pytest.approx(47 / 94, abs=1e-15)
    assert lr_schedule(100, 100, 0.06, 1.0) == 0.0
    assert lr_schedule(250, 100, 0.06, 1.0) == 0.0
    assert lr_schedule(0, 10, 0.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        lr_schedule(0, 0, 0.06, 1.0)


# --- loss ------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy_loss(np.zeros((3, 4)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-16)
    np.testing.assert_allclose(grad[0], np.array([-0.75, 0.25, 0.25, 0.25]) / 3, atol=1e-16)


def test_cross_entropy_lm_shape_and_stability():
    logits = np.array([[[1000.0, 0.0], [0.0, 1000.0]]])
    loss, grad = cross_entropy_loss(logits, np.array([[0, 1]]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert grad.shape == logits.shape
    with pytest.raises(ShapeMismatch):
        cross_entropy_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeMismatch):
        cross_entropy_loss(np.zeros((2, 3)), [0])


# --- data ------------------------------------------------------------------


def test_parity_labels():
    assert parity_labels([1, 2, 3]) == 0
    np.testing.assert_array_equal(parity_labels([[1, 2], [1, 1], [0, 0]]), [1, 0, 0])


def test_synthetic_tasks_shapes_and_determinism():
    train, dev = generate_synthetic_task(TASK, make_rng(3))
    assert train.tokens.shape == (64, 6) and dev.tokens.shape == (32, 6)
    np.testing.assert_array_equal(train.targets, parity_labels(train.tokens))
    again, _ = generate_synthetic_task(TASK, make_rng(3))
    np.testing.assert_array_equal(train.tokens, again.tokens)
    lm = TaskSpec("synth_lm", vocab=5, seq_len=7, n_train=10, n_dev=4)
    tr, dv = generate_synthetic_task(lm, make_rng(0))
    assert tr.task == "lm" and tr.tokens.shape == (10, 7) and tr.targets.shape == (10, 7)
    assert dv.tokens.shape == (4, 7)
    # next-token targets are the shifted inputs
    np.testing.assert_array_equal(tr.targets[:, :-1], tr.tokens[:, 1:])


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("bogus")
    with pytest.raises(ConfigError):
        TaskSpec(vocab=1)
    with pytest.raises(ConfigError):
        TaskSpec("jsonl_dataset")


def test_read_jsonl(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"tokens": [1, 2], "label": 1}\n\n{"tokens": [0, 3], "label": 0}\n')
    data = read_jsonl(path, vocab=4)
    np.testing.assert_array_equal(data.tokens, [[1, 2], [0, 3]])
    np.testing.assert_array_equal(data.targets, [1, 0])
    lm = tmp_path / "lm.jsonl"
    lm.write_text('{"tokens": [1, 2, 3]}\n')
    d = read_jsonl(lm, vocab=4)
    assert d.task == "lm"
    np.testing.assert_array_equal(d.targets, [[2, 3]])


@pytest.mark.parametrize("text,match", [
    ("{bad json\n", ":1:"),
    ('{"tokens": [1, 9], "label": 0}\n', "outside"),
    ('{"tokens": [1, 2], "label": 0}\n{"tokens": [1], "label": 0}\n', "length"),
    ('{"tokens": "ab"}\n', "list of integers"),
    ('{"tokens": [1, 2], "label": 0}\n{"tokens": [1, 2]}\n', "mixes"),
    ('{"tokens": [1, 2], "label": -1}\n', "non-negative"),
    ("\n", "no examples"),
])
def test_read_jsonl_errors(tmp_path, text, match):
    path = tmp_path / "bad.jsonl"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        read_jsonl(path, vocab=4)


# --- loop ------------------------------------------------------------------


def small_model(seed=0, scaling=None):
    return assemble_model(SegmentPlan(1, 2, 0), MeftKind.MEFT1, DIMS, r=4,
                          scaling=scaling, rng=make_rng(seed))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_ratio=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(grad_mode="cheap")
    with pytest.raises(ConfigError):
        TrainConfig(max_steps=0)
    assert total_train_steps(65, TrainConfig(batch_size=16, epochs=3)) == 15
    assert total_train_steps(65, TrainConfig(batch_size=16, epochs=3, max_steps=7)) == 7


def test_training_reduces_loss_and_is_reproducible():
    cfg = TrainConfig(lr=3e-3, batch_size=16, epochs=50, max_steps=200, patience=100, weight_decay=0.0)
    m1 = small_model()
    h1 = train_loop(m1, TASK, cfg)
    assert h1.steps == 200
    assert h1.final_loss < h1.initial_loss
    m2 = small_model()
    h2 = train_loop(m2, TASK, cfg)
    assert h1.step_losses == h2.step_losses
    for (n, a), (_, b) in zip(sorted(m1.trainable_parameters().items()),
                              sorted(m2.trainable_parameters().items())):
        np.testing.assert_array_equal(a, b, err_msg=n)


def test_frozen_weights_bitwise_constant():
    m = small_model(1)
    frozen = {n: a.copy() for n, a in m.named_parameters() if n not in m.trainable_parameters()}
    assert frozen
    train_loop(m, TASK, TrainConfig(lr=1e-2, epochs=2, patience=10))
    after = dict(m.named_parameters())
    for n, a in frozen.items():
        np.testing.assert_array_equal(after[n], a, err_msg=n)


def test_reversible_and_vanilla_training_agree_short():
    cfg = dict(lr=3e-3, batch_size=16, epochs=5, max_steps=20, patience=100)
    hv = train_loop(mv := small_model(2, ScalingConfig(1.0, 1.0)), TASK, TrainConfig(**cfg, grad_mode="vanilla"))
    hr = train_loop(mr := small_model(2, ScalingConfig(1.0, 1.0)), TASK, TrainConfig(**cfg, grad_mode="reversible"))
    assert abs(hv.final_loss - hr.final_loss) < 1e-9
    pv, pr = mv.trainable_parameters(), mr.trainable_parameters()
    assert max(float(np.abs(pv[n] - pr[n]).max()) for n in pv) < 1e-9


class ConstantModel:
    """Logits are a trainable bias; with a large class-0 lead the argmax never moves."""

    head_mode = "classify"

    def __init__(self):
        self.w = np.array([10.0, 0.0])

    def trainable_parameters(self):
        return {"w": self.w}

    def forward(self, tokens, cache_mode="vanilla"):
        return np.tile(self.w, (len(tokens), 1)), len(tokens)

    def backward(self, record, dlogits, ledger=None):
        return {"w": dlogits.sum(axis=0)}


@pytest.mark.parametrize("patience", [1, 3])
def test_early_stopping_after_exactly_patience_epochs(patience):
    train, dev = generate_synthetic_task(TASK, make_rng(0))
    hist = train_loop(ConstantModel(), (train, dev), TrainConfig(lr=1e-3, epochs=20, patience=patience))
    # dev accuracy is flat, so epoch 0 is best and patience more epochs run
    assert hist.stopped_early
    assert hist.best_epoch == 0
    assert len(hist.epoch_losses) == 1 + patience
    assert hist.steps == (1 + patience) * 4


def test_write_metrics(tmp_path):
    hist = train_loop(small_model(), TASK, TrainConfig(epochs=1, max_steps=2))
    write_metrics(tmp_path / "m.json", hist, {"note": "x"})
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["steps"] == 2 and data["note"] == "x"
    assert len(data["step_losses"]) == 2
    assert data["memory"]["total_persistent_bytes"] > 0


def test_dataset_pair_accepted():
    ds = Dataset(np.zeros((4, 6), dtype=np.int64), np.array([0, 1, 0, 1]))
    hist = train_loop(small_model(), (ds, ds), TrainConfig(batch_size=2, epochs=1))
    assert hist.steps == 2
