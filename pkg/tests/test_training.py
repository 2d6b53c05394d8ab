import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_samples, tiny_fusion, tiny_model
from vglab.errors import ContractError, DegenerateInputError, TrainingError
from vglab.tensor import Tensor
from vglab.training import (
    BACKBONE_LR_PRESETS,
    FUSION_LR,
    EarlyStopping,
    OptimizerState,
    TrainSchedule,
    adam_step,
    cross_entropy_loss,
    lr_at,
    strip_special,
    train,
    write_history,
)


# ---------------------------------------------------------------- loss

def test_uniform_logits_give_log_vocab():
    loss = cross_entropy_loss(Tensor(np.zeros((2, 3, 7))), np.ones((2, 3), dtype=int), np.ones((2, 3), dtype=bool))
    assert loss.item() == pytest.approx(math.log(7), abs=1e-12)


def test_two_class_hand_case():
    loss = cross_entropy_loss(Tensor(np.array([[[0.0, math.log(3.0)]]])), np.array([[1]]), np.array([[True]]))
    assert loss.item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_margin_drives_loss_to_zero():
    values = []
    for margin in (1.0, 5.0, 20.0):
        logits = np.zeros((1, 1, 4))
        logits[0, 0, 2] = margin
        values.append(cross_entropy_loss(Tensor(logits), np.array([[2]]), np.array([[True]])).item())
    assert values[0] > values[1] > values[2] and values[2] < 1e-8


def test_masked_positions_are_ignored():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 3, 5))
    full = cross_entropy_loss(Tensor(logits[:, :2]), np.array([[1, 2]]), np.ones((1, 2), dtype=bool)).item()
    masked = cross_entropy_loss(Tensor(logits), np.array([[1, 2, 4]]), np.array([[True, True, False]])).item()
    assert masked == pytest.approx(full, abs=1e-12)


def test_all_masked_is_degenerate():
    with pytest.raises(DegenerateInputError):
        cross_entropy_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))


def test_target_outside_vocab():
    with pytest.raises(ContractError):
        cross_entropy_loss(Tensor(np.zeros((1, 1, 3))), np.array([[3]]), np.array([[True]]))


# ---------------------------------------------------------------- Adam

def one_param(value, group="backbone"):
    p = Tensor(np.array(value, dtype=float), requires_grad=True)
    return {"w": p}, OptimizerState.for_groups({group: {"w": p}})


def test_zero_gradient_zero_decay_is_a_no_op():
    params, state = one_param([1.5, -2.0])
    adam_step(params, {"w": np.zeros(2)}, state, {"backbone": 0.1}, weight_decay=0.0)
    np.testing.assert_array_equal(params["w"].data, [1.5, -2.0])


@given(g=st.floats(-100, 100).filter(lambda x: abs(x) > 1e-3), lr=st.floats(1e-5, 1e-1))
def test_first_step_moves_by_about_lr(g, lr):
    params, state = one_param(0.7)
    adam_step(params, {"w": np.array(g)}, state, {"backbone": lr}, weight_decay=0.0)
    step = 0.7 - params["w"].data
    assert step == pytest.approx(lr * g / (abs(g) + 1e-8), rel=1e-9)


def test_weight_decay_alone_shrinks_magnitude():
    params, state = one_param([3.0, -3.0])
    adam_step(params, {"w": np.zeros(2)}, state, {"backbone": 1e-3}, weight_decay=1e-5)
    assert (np.abs(params["w"].data) < 3.0).all()


def test_adam_uses_group_rates():
    a = Tensor(np.array(1.0), requires_grad=True)
    b = Tensor(np.array(1.0), requires_grad=True)
    state = OptimizerState.for_groups({"backbone": {"a": a}, "fusion": {"b": b}})
    adam_step({"a": a, "b": b}, {"a": np.array(1.0), "b": np.array(1.0)}, state,
              {"backbone": 1e-2, "fusion": 1e-3}, weight_decay=0.0)
    assert 1 - a.item() == pytest.approx(1e-2, rel=1e-6)
    assert 1 - b.item() == pytest.approx(1e-3, rel=1e-6)


def test_adam_is_deterministic():
    out = []
    for _ in range(2):
        params, state = one_param([0.1, 0.2, 0.3])
        for i in range(5):
            adam_step(params, {"w": np.array([1.0, -2.0, 0.5]) * (i + 1)}, state, {"backbone": 0.01})
        out.append(params["w"].data)
    assert np.array_equal(out[0], out[1])


def test_adam_shape_mismatch():
    params, state = one_param([1.0, 2.0])
    with pytest.raises(ContractError):
        adam_step(params, {"w": np.zeros(3)}, state, {"backbone": 0.1})


# ---------------------------------------------------------------- schedule

@pytest.mark.parametrize("epoch,expected", [(0, 6e-4), (9, 6e-4), (10, 5.7e-4), (25, 5.415e-4)])
def test_lr_decay_values(epoch, expected):
    assert lr_at(epoch, 6e-4) == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 500))
def test_lr_is_non_increasing(epoch):
    assert lr_at(epoch + 1, 1e-3) <= lr_at(epoch, 1e-3)


def test_default_rates():
    s = TrainSchedule()
    assert s.lr_backbone == BACKBONE_LR_PRESETS["t5"] == 6e-4
    assert BACKBONE_LR_PRESETS["bart"] == 3e-5
    assert s.lr_fusion == FUSION_LR == 1.5e-4
    assert (s.max_epochs, s.patience, s.decay_factor, s.decay_every) == (60, 5, 0.95, 10)


def test_early_stopping_after_five_flat_epochs():
    stop = EarlyStopping(5)
    seq = [0.1, 0.2, 0.3, 0.3, 0.25, 0.29, 0.1, 0.3]
    fired = [stop.update(m, e) for e, m in enumerate(seq)]
    assert fired == [False] * 7 + [True]
    assert stop.best == 0.3 and stop.best_epoch == 2


def test_strictly_improving_never_stops():
    stop = EarlyStopping(5)
    assert not any(stop.update(0.01 * e, e) for e in range(100))


def test_bad_patience():
    with pytest.raises(ValueError):
        EarlyStopping(0)


def test_strip_special():
    assert strip_special([0, 5, 6, 2, 7]) == [5, 6]


# ---------------------------------------------------------------- train loop

def test_fusion_disabled_loss_curve_matches_text_only(rng):
    samples = random_samples(12, rng)
    tr, va = samples[:10], samples[10:]
    sched = TrainSchedule(max_epochs=3, batch_size=4, seed=1)
    curves = []
    for fusion in (None, tiny_fusion(encoder_locations=(0, 0))):
        res = train(tiny_model(fusion, seed=2), tr, va, sched)
        curves.append([row["loss"] for row in res.history])
    assert curves[0] == curves[1]


def test_small_corpus_is_memorised():
    rng = np.random.default_rng(0)
    samples = random_samples(8, rng, frames=(1, 2))
    model = tiny_model(tiny_fusion(), seed=0, d_model=16, d_ff=32, n_heads=2, n_layers=1)
    sched = TrainSchedule(lr_backbone=1e-2, lr_fusion=1e-2, max_epochs=400, patience=400, batch_size=8, max_steps=400)
    res = train(model, samples, samples[:0], sched, evaluate=lambda m, e: -e)
    assert res.history[-1]["loss"] < 0.1


def test_best_state_is_restored(rng):
    samples = random_samples(6, rng)
    model = tiny_model(None, seed=1)
    snap = {}

    def metric(m, epoch):
        if epoch == 1:
            snap.update(m.state_dict())
        return 1.0 if epoch == 1 else 0.0

    res = train(model, samples[:4], samples[4:], TrainSchedule(max_epochs=4, patience=2, batch_size=2), evaluate=metric)
    assert res.best_epoch == 1 and res.stopped_early
    for k, v in model.state_dict().items():
        assert np.array_equal(v, snap[k])


def test_overlapping_splits_rejected(rng):
    samples = random_samples(3, rng)
    with pytest.raises(ValueError):
        train(tiny_model(), samples, samples[:1], TrainSchedule(max_epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_blowup_aborts_with_diagnostics(rng):
    model = tiny_model(None, seed=0)
    model.backbone.embed.data[:] = 1e200
    with pytest.raises(TrainingError, match="epoch 0"):
        train(model, random_samples(2, rng), [], TrainSchedule(max_epochs=1))


def test_history_csv(tmp_path, rng):
    samples = random_samples(4, rng)
    res = train(tiny_model(), samples[:3], samples[3:], TrainSchedule(max_epochs=2, batch_size=2))
    write_history(tmp_path / "h.csv", res.history)
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert list(rows[0]) == ["epoch", "loss", "rouge2", "lr_backbone", "lr_fusion"]
    assert len(rows) == 2 and float(rows[0]["lr_fusion"]) == FUSION_LR
