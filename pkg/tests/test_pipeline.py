import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_model
from esfp.pipeline import (
    StreamingSmoother, WeakPerspectiveCamera, covariance_weight, export_csv, fuse_windows, load_pose_sequence,
    run_offline, run_threaded, save_pose_sequence, unproject_weak_perspective,
)
from esfp.retarget import RetargetConfig

ARM = (1, 2, 3)


@pytest.fixture(scope="module")
def model():
    return tiny_model(seed=11, jitter=0.1, window=7)


@pytest.fixture(scope="module")
def model_nocov():
    return tiny_model(seed=11, jitter=0.1, window=7, covariance=False)


def test_unproject_identity_camera(rng):
    j = rng.normal(size=(24, 3))
    np.testing.assert_allclose(unproject_weak_perspective(j, WeakPerspectiveCamera(1.0, 0.0, 0.0)), j, atol=1e-15)


def test_unproject_scale_halves(rng):
    j = rng.normal(size=(24, 3))
    K = np.array([[2.0, 0.1, 0.3], [0.0, 1.5, -0.2], [0.0, 0.0, 1.0]])
    a = unproject_weak_perspective(j, WeakPerspectiveCamera(1.0, 0.2, -0.1, K))
    b = unproject_weak_perspective(j, WeakPerspectiveCamera(2.0, 0.2, -0.1, K))
    np.testing.assert_allclose(b, a / 2, atol=1e-15)


def test_unproject_matches_dense_oracle(rng):
    for _ in range(20):
        j = rng.normal(size=(24, 3))
        K = np.eye(3) + np.triu(rng.normal(0, 0.3, (3, 3)))
        K[2] = [0, 0, 1]
        s, tx, ty = rng.uniform(0.5, 3.0), *rng.normal(size=2)
        Kinv = np.linalg.inv(K)
        expected = np.empty_like(j)
        for i, (x, y, z) in enumerate(j):
            xy = Kinv @ np.array([x + tx, y + ty, 1.0])
            expected[i] = [xy[0] / s, xy[1] / s, z / s]
        np.testing.assert_allclose(unproject_weak_perspective(j, WeakPerspectiveCamera(s, tx, ty, K)), expected,
                                   atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        WeakPerspectiveCamera(0.0, 0.0, 0.0)
    with pytest.raises(np.linalg.LinAlgError):
        unproject_weak_perspective(np.zeros((2, 3)), WeakPerspectiveCamera(1.0, 0, 0, np.zeros((3, 3))))


def test_fuse_single_estimate_unchanged(rng):
    p = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(fuse_windows([(p, np.broadcast_to(np.eye(3), (4, 3, 3)))]), p)


def test_fuse_equal_covariance_is_mean(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    L = np.broadcast_to(np.eye(3) * 0.1, (4, 3, 3))
    np.testing.assert_allclose(fuse_windows([(a, L), (b, L)]), (a + b) / 2, atol=1e-12)


def test_fuse_trace_ratio_one_to_four():
    a = np.zeros((2, 3))
    b = np.ones((2, 3)) * 5
    la = np.broadcast_to(np.eye(3), (2, 3, 3))
    lb = np.broadcast_to(np.eye(3) * 2, (2, 3, 3))  # trace of L L^T is 4x larger
    fused, w = fuse_windows([(a, la), (b, lb)], return_weights=True)
    np.testing.assert_allclose(w[:, 0], [0.8, 0.2], atol=1e-9)
    np.testing.assert_allclose(fused, a + (b - a) / 5, atol=1e-8)


@given(st.integers(1, 6), st.integers(0, 1000))
def test_fusion_weights_normalise(n, seed):
    r = np.random.default_rng(seed)
    est = []
    for _ in range(n):
        L = np.tril(r.normal(size=(5, 3, 3)))
        idx = np.arange(3)
        L[:, idx, idx] = np.abs(L[:, idx, idx]) + 0.01
        est.append((r.normal(size=(5, 3)), L))
    _, w = fuse_windows(est, return_weights=True)
    assert np.all(w > 0)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-12)


def test_root_relative_fusion_keeps_rigid_offsets(rng):
    # two estimates of the same rigid pose at different root positions: the fused pose is still that pose
    pose = rng.normal(size=(4, 3))
    pose[0] = 0
    la = np.broadcast_to(np.eye(3), (4, 3, 3))
    fused = fuse_windows([(pose + [1, 0, 0], la), (pose + [3, 0, 0], la * 3)])
    np.testing.assert_allclose(fused - fused[0], pose, atol=1e-12)
    assert covariance_weight(la)[0] == pytest.approx(1 / 3)


def test_warm_up_emits_nothing(model, rng):
    sm = StreamingSmoother(model, stride=3)
    out = [sm.push(f) for f in rng.normal(0, 0.2, (6, 4, 3))]
    assert all(o == [] for o in out)
    assert sm.push(rng.normal(0, 0.2, (4, 3)))


@pytest.mark.parametrize("stride", [1, 2, 3, 5, 7])
def test_latency_bound_and_complete_ordered_output(model, rng, stride):
    seq = rng.normal(0, 0.2, (23, 4, 3))
    _, frames = run_offline(seq, model, stride=stride, return_frames=True)
    assert [f.index for f in frames] == list(range(23))
    w = model.config.window
    assert all(f.received - 1 - f.index <= w - 1 + stride for f in frames)


def test_no_overlap_reproduces_window_outputs(model, rng):
    seq = rng.normal(0, 0.2, (21, 4, 3))
    out = run_offline(seq, model, stride=7)
    for s in (0, 7, 14):
        np.testing.assert_array_equal(out[s:s + 7], model(seq[s:s + 7]).positions)


def test_constant_input_gives_constant_interior_output(model):
    # every window sees the same frames, so frames covered by all W windows fuse the same estimate set
    seq = np.broadcast_to(np.random.default_rng(3).normal(0, 0.2, (4, 3)), (20, 4, 3))
    out = run_offline(seq, model, stride=1)
    w = model.config.window
    interior = out[w - 1:20 - w + 1]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0], interior.shape), atol=1e-9)


def test_plain_averaging_without_covariance(model_nocov, rng):
    seq = rng.normal(0, 0.2, (9, 4, 3))
    out = run_offline(seq, model_nocov, stride=2)
    w0, w1 = model_nocov(seq[0:7]).positions, model_nocov(seq[2:9]).positions
    # frame 4 is covered by the windows starting at 0 and 2 only
    np.testing.assert_allclose(out[4], fuse_windows([(w0[4], None), (w1[2], None)]), atol=1e-15)
    np.testing.assert_allclose(out[4, 1:] - out[4, :1], ((w0[4, 1:] - w0[4, :1]) + (w1[2, 1:] - w1[2, :1])) / 2, atol=1e-12)


def test_offline_streaming_and_threaded_agree_bitwise(model, rng):
    seq = rng.normal(0, 0.2, (30, 4, 3))
    offline = run_offline(seq, model, stride=5)
    sm = StreamingSmoother(model, stride=5)
    streamed = [f.positions for frame in seq for f in sm.push(frame)] + [f.positions for f in sm.flush()]
    np.testing.assert_array_equal(np.stack(streamed), offline)
    threaded, _ = run_threaded(seq, model, stride=5)
    np.testing.assert_array_equal(threaded, offline)


def test_retarget_handoff(model, rng):
    seq = rng.normal(0, 0.2, (30, 4, 3))
    cfg = RetargetConfig()
    (smoothed, cmds) = run_offline(seq, model, stride=5, retarget_config=cfg, arm_indices=ARM)
    _, threaded_cmds = run_threaded(seq, model, stride=5, retarget_config=cfg, arm_indices=ARM)
    assert cmds == threaded_cmds and len(cmds) == 20
    with pytest.raises(ValueError, match="arm_indices"):
        run_offline(seq, model, retarget_config=cfg)


def test_errors(model, rng):
    with pytest.raises(ValueError, match="shorter"):
        run_offline(rng.normal(size=(3, 4, 3)), model)
    with pytest.raises(ValueError, match="stride"):
        StreamingSmoother(model, stride=0)
    with pytest.raises(ValueError, match="frame"):
        StreamingSmoother(model).push(np.zeros((5, 3)))
    sm = StreamingSmoother(model)
    sm.push(np.zeros((4, 3)))
    with pytest.raises(ValueError, match="full window"):
        sm.flush()
    bad = rng.normal(size=(10, 4, 3))
    bad[8] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        run_threaded(bad, model)


def test_pose_sequence_files(tmp_path, rng):
    seq = rng.normal(size=(5, 24, 3))
    meta = save_pose_sequence(seq, tmp_path / "s", extra={"seed": 4})
    assert '"layout": "frame-major TxJx3"' in meta.read_text()
    assert (tmp_path / "s.bin").stat().st_size == 5 * 24 * 3 * 4
    loaded = load_pose_sequence(tmp_path / "s")
    np.testing.assert_array_equal(loaded, seq.astype("<f4").astype(np.float64))
    raw = np.frombuffer((tmp_path / "s.bin").read_bytes(), dtype="<f4")
    assert raw[3] == np.float32(seq[0, 1, 0])
    export_csv(seq[:1, :2], tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "frame,joint,x,y,z" and len(lines) == 3
