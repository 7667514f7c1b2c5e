import csv
import math

import numpy as np
import pytest

from conftest import TINY
from esfp import diffcore as dc
from esfp.hpstm import HPSTM
from esfp.kinematics import chain_skeleton, extract_bone_lengths
from esfp.training import (
    LOG_COLUMNS, AdamW, CurriculumConfig, PlateauState, SyntheticDatasetSpec, adamw_step, generate_synthetic_dataset,
    plateau_scheduler_step, run_curriculum,
)


def scalar_adamw(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_adamw_matches_scalar_recursion():
    grads = [0.5, -1.0, 2.0, 0.1]
    p = dc.Parameter(np.array([1.0]))
    for g in grads:
        p.grad = np.array([g])
        adamw_step([p], 1e-2)
    assert p.value[0] == pytest.approx(scalar_adamw(1.0, grads, 1e-2), abs=1e-15)


def test_adamw_first_step_is_lr_sized_and_decay_is_decoupled():
    p = dc.Parameter(np.array([2.0, -3.0]))
    p.grad = np.array([1e-3, -50.0])
    adamw_step([p], 0.1, weight_decay=0.0)
    np.testing.assert_allclose(p.value, [1.9, -2.9], atol=1e-6)
    q = dc.Parameter(np.array([2.0]))
    q.grad = np.zeros(1)
    adamw_step([q], 0.1, weight_decay=0.5)
    assert q.value[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_skips_non_finite_gradients():
    opt = AdamW(lr=0.1)
    p = dc.Parameter(np.array([1.0]))
    p.grad = np.array([np.nan])
    assert opt.step([p]) is False
    assert opt.skipped == 1 and p.value[0] == 1.0 and p.step == 0


def test_plateau_halves_on_patience_th_bad_evaluation():
    state = PlateauState(lr=1e-3, patience=3)
    lrs = []
    for loss in [1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.6, 0.6]:
        state, lr = plateau_scheduler_step(state, loss)
        lrs.append(lr)
    assert lrs == [1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 5e-4, 2.5e-4]


def test_plateau_respects_floor_and_min_delta():
    state = PlateauState(lr=2e-7, patience=1, lr_min=1e-7, min_delta=0.1)
    state, _ = plateau_scheduler_step(state, 1.0)
    state, lr = plateau_scheduler_step(state, 0.95)  # not enough improvement
    assert lr == 1e-7
    state, lr = plateau_scheduler_step(state, 0.5)
    state, lr = plateau_scheduler_step(state, 0.5)
    assert lr == 1e-7


def test_synthetic_dataset_on_manifold_and_seeded():
    sk = chain_skeleton([0.0, 0.3, 0.25, 0.2])
    spec = SyntheticDatasetSpec(sequences=3, frames=12, joints=4, seed=5)
    a = generate_synthetic_dataset(spec, sk)
    b = generate_synthetic_dataset(spec, sk)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert a.positions.shape == (3, 12, 4, 3)
    for i in range(3):
        np.testing.assert_allclose(extract_bone_lengths(a.positions[i], sk), np.broadcast_to(a.lengths[i], (12, 4)),
                                   atol=1e-12)
    assert np.all(np.abs(a.lengths[:, 1:] / sk.canonical_lengths[1:] - 1) <= 0.1 + 1e-12)
    train, val = a.split(0.34)
    assert (len(train), len(val)) == (2, 1)
    np.testing.assert_array_equal(val.positions[0], a.positions[2])
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SyntheticDatasetSpec(joints=24), sk)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    sk = chain_skeleton([0.0, 0.3, 0.25, 0.2])
    data = generate_synthetic_dataset(SyntheticDatasetSpec(sequences=10, frames=16, joints=4, seed=1), sk)
    cfg = CurriculumConfig(epochs=(2, 1, 1), lr=1e-3, batch_size=4, crops_per_sequence=2, seed=3)
    out = tmp_path_factory.mktemp("train")
    model = HPSTM(TINY, sk, seed=0)
    result = run_curriculum(cfg, data, model, out)
    return result, out, data, cfg, sk


def test_curriculum_log_structure(tiny_run):
    result, out, *_ = tiny_run
    log = result.log
    assert [(e["stage"], e["epoch"]) for e in log] == [(1, 0), (1, 1), (1, 2), (2, 3), (3, 4)]
    assert math.isnan(log[0]["train_loss"]) and math.isfinite(log[0]["val_loss"])
    assert [e["noise"] for e in log] == [False, False, False, True, True]
    assert [e["nll_term"] for e in log] == [False, False, False, False, True]
    assert log[-1]["lr"] == pytest.approx(1e-5)
    with (out / "train_log.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 5


def test_curriculum_checkpoints_reload(tiny_run):
    result, out, data, cfg, sk = tiny_run
    assert set(result.checkpoints) == {"stage1", "stage2", "stage3", "final"}
    reloaded = HPSTM.load(out / "model", sk)
    x = data.positions[0, :5]
    np.testing.assert_array_equal(reloaded(x).positions, result.model(x).positions)
    stage2 = HPSTM.load(out / "stage2", sk)
    for k, v in result.stage_weights[2].items():
        np.testing.assert_array_equal(stage2.params[k].value, v)


def test_covariance_head_frozen_until_stage3(tiny_run):
    result, *_ = tiny_run
    w1, w2, w3 = (result.stage_weights[s] for s in (1, 2, 3))
    for k in w1:
        if k.startswith("head.cov"):
            np.testing.assert_array_equal(w1[k], w2[k])
            assert not np.array_equal(w2[k], w3[k])


def test_training_is_deterministic(tiny_run):
    result, out, data, cfg, sk = tiny_run
    again = run_curriculum(cfg, data, HPSTM(TINY, sk, seed=0))
    for k, v in result.model.weights().items():
        np.testing.assert_array_equal(again.model.params[k].value, v)


def test_stage1_reduces_validation_loss():
    sk = chain_skeleton([0.0, 0.3, 0.25, 0.2])
    data = generate_synthetic_dataset(SyntheticDatasetSpec(sequences=10, frames=16, joints=4, seed=2), sk)
    cfg = CurriculumConfig(epochs=(6, 0, 0), lr=3e-3, batch_size=4, crops_per_sequence=4, seed=0)
    log = run_curriculum(cfg, data, HPSTM(TINY, sk, seed=0)).log
    assert log[-1]["val_loss"] < 0.5 * log[0]["val_loss"]


def test_curriculum_input_validation():
    sk = chain_skeleton([0.0, 0.3, 0.25, 0.2])
    data = generate_synthetic_dataset(SyntheticDatasetSpec(sequences=3, frames=4, joints=4), sk)
    with pytest.raises(ValueError, match="shorter"):
        run_curriculum(CurriculumConfig(epochs=(1, 0, 0)), data, HPSTM(TINY, sk))
    with pytest.raises(ValueError):
        CurriculumConfig(lr=0.0)
