"""Streaming orchestration: lifting, sliding-window smoothing and uncertainty-weighted fusion.

A window of the ``W`` most recent frames is smoothed every ``stride`` frames
once the buffer is full.  Each absolute frame collects one estimate per
window that covered it; when no later window can cover it, its estimates
are fused (root translation and root-relative joints separately, weighted by
inverse covariance trace) and the frame is emitted in order.
"""
from __future__ import annotations

import csv
import json
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from esfp.hpstm import HPSTM
from esfp.retarget import ArmMapper, ArmTriple, RetargetConfig, RobotCommand

FUSION_EPS = 1e-9


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    s: float
    t_x: float
    t_y: float
    K: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("camera scale must be positive")


def unproject_weak_perspective(joints_canonical, cam: WeakPerspectiveCamera) -> np.ndarray:
    """Lift root-centred joints ``(J, 3)`` into the camera frame.

    The image-plane part ``(x + t_x, y + t_y, 1)`` goes through ``K^-1`` and
    the scale division; the canonical depth is divided by the scale only.
    """
    joints = np.asarray(joints_canonical, dtype=np.float64)
    K = np.asarray(cam.K, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise np.linalg.LinAlgError("intrinsics matrix is singular")
    homog = np.column_stack([joints[:, 0] + cam.t_x, joints[:, 1] + cam.t_y, np.ones(len(joints))])
    xy = np.linalg.solve(K, homog.T).T[:, :2]
    return np.column_stack([xy, joints[:, 2]]) / cam.s


# --------------------------------------------------------------------------
# fusion


def covariance_weight(chol) -> np.ndarray:
    """``1 / (trace(L L^T) + eps)`` for factors ``(..., 3, 3)``."""
    chol = np.asarray(chol, dtype=np.float64)
    return 1.0 / ((chol * chol).sum(axis=(-1, -2)) + FUSION_EPS)


def fuse_windows(estimates, root: int = 0, return_weights: bool = False):
    """Fuse per-window estimates of one frame.

    ``estimates`` is a list of ``(positions (J, 3), chol (J, 3, 3) or None)``.
    A lone estimate is returned unchanged.  Returned weights (with
    ``return_weights``) are normalised per joint, shape ``(n, J)``.
    """
    if not estimates:
        raise ValueError("need at least one estimate")
    pos = np.stack([np.asarray(p, dtype=np.float64) for p, _ in estimates])  # (n, J, 3)
    n, j, _ = pos.shape
    w = np.stack([np.ones(j) if c is None else covariance_weight(c) for _, c in estimates])  # (n, J)
    w = w / w.sum(axis=0, keepdims=True)
    if n == 1:
        return (pos[0].copy(), w) if return_weights else pos[0].copy()
    roots = pos[:, root, :]
    fused_root = (w[:, root, None] * roots).sum(axis=0)
    rel = pos - roots[:, None, :]
    fused = fused_root + (w[..., None] * rel).sum(axis=0)
    fused[root] = fused_root
    return (fused, w) if return_weights else fused


# --------------------------------------------------------------------------
# streaming


@dataclass
class EmittedFrame:
    index: int
    positions: np.ndarray
    received: int  # frames received when this one was emitted


class StreamingSmoother:
    """Single-threaded streaming state: ring buffer plus per-frame estimate lists."""

    def __init__(self, model: HPSTM, stride: int = 5, use_covariance: bool | None = None):
        self.model = model
        self.window = model.config.window
        if not 1 <= stride <= self.window:
            raise ValueError(f"stride must be in [1, {self.window}]")
        self.stride = stride
        self.use_covariance = model.config.covariance if use_covariance is None else use_covariance
        self.buffer: deque = deque(maxlen=self.window)
        self.received = 0
        self.next_start = 0  # start index of the next scheduled window
        self.covered_until = 0  # frames [0, covered_until) have had at least one window
        self.pending: dict[int, list] = {}
        self.next_emit = 0
        self.windows_run = 0

    def _run_window(self, start: int) -> None:
        frames = np.stack(self.buffer)
        out = self.model.forward_graph(frames[None], covariance=self.use_covariance)
        pos = out.positions.value[0]
        chol = None if out.chol is None else out.chol.value[0]
        for k in range(self.window):
            self.pending.setdefault(start + k, []).append((pos[k], None if chol is None else chol[k]))
        self.covered_until = max(self.covered_until, start + self.window)
        self.windows_run += 1

    def _emit_ready(self, limit: int) -> list[EmittedFrame]:
        ready = []
        while self.next_emit < limit:
            est = self.pending.pop(self.next_emit)
            ready.append(EmittedFrame(self.next_emit, fuse_windows(est), self.received))
            self.next_emit += 1
        return ready

    def push(self, frame) -> list[EmittedFrame]:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.model.config.joints, 3):
            raise ValueError(f"expected a ({self.model.config.joints}, 3) frame, got {frame.shape}")
        self.buffer.append(frame)
        self.received += 1
        start = self.received - self.window
        if start < self.next_start:
            return []
        self._run_window(start)
        self.next_start = start + self.stride
        # frames before the next window's start will get no further estimates
        return self._emit_ready(min(self.next_start, self.covered_until))

    def flush(self) -> list[EmittedFrame]:
        """End of stream: cover any trailing frames with a final end-aligned window."""
        if self.received < self.window:
            raise ValueError("stream ended before one full window arrived")
        if self.covered_until < self.received:
            self._run_window(self.received - self.window)
        return self._emit_ready(self.received)


def run_offline(seq, model: HPSTM, stride: int = 5, retarget_config: RetargetConfig | None = None,
                arm_indices=None, use_covariance: bool | None = None, return_frames: bool = False):
    """Smooth a whole ``(T, J, 3)`` sequence through the streaming path.

    With ``retarget_config`` (and the shoulder/elbow/wrist ``arm_indices``)
    the smoothed frames are also mapped to robot commands, returned as a
    second value.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] < model.config.window:
        raise ValueError(f"sequence of {seq.shape[0]} frames is shorter than the window {model.config.window}")
    smoother = StreamingSmoother(model, stride, use_covariance)
    emitted: list[EmittedFrame] = []
    for frame in seq:
        emitted.extend(smoother.push(frame))
    emitted.extend(smoother.flush())
    smoothed = np.stack([e.positions for e in emitted])
    result = (smoothed, emitted) if return_frames else smoothed
    if retarget_config is None:
        return result
    if arm_indices is None:
        raise ValueError("arm_indices are required for retargeting")
    commands = ArmMapper(retarget_config).run(smoothed, arm_indices)
    return result, commands


def run_threaded(seq, model: HPSTM, stride: int = 5, retarget_config: RetargetConfig | None = None,
                 arm_indices=None, use_covariance: bool | None = None, maxsize: int = 64):
    """Ingest, inference and emission on three threads joined by bounded queues.

    Returns ``(smoothed, commands)``; ``commands`` is empty without a
    retarget config.
    """
    seq = np.asarray(seq, dtype=np.float64)
    frames_q: queue.Queue = queue.Queue(maxsize)
    out_q: queue.Queue = queue.Queue(maxsize)
    done = object()
    errors: list[BaseException] = []
    smoothed: list[np.ndarray] = []
    commands: list[RobotCommand] = []

    def ingest():
        for frame in seq:
            frames_q.put(frame)
        frames_q.put(done)

    def infer():
        item = None
        try:
            smoother = StreamingSmoother(model, stride, use_covariance)
            while (item := frames_q.get()) is not done:
                for e in smoother.push(item):
                    out_q.put(e)
            for e in smoother.flush():
                out_q.put(e)
        except BaseException as exc:  # surfaced to the caller after join
            errors.append(exc)
            # unblock ingest unless its sentinel was already consumed
            while item is not done:
                item = frames_q.get()
        finally:
            out_q.put(done)

    def emit():
        mapper = ArmMapper(retarget_config) if retarget_config is not None else None
        while (e := out_q.get()) is not done:
            smoothed.append(e.positions)
            if mapper is not None:
                cmd = mapper.feed(ArmTriple.from_frame(e.positions, arm_indices), e.index / retarget_config.input_rate)
                if cmd is not None:
                    commands.append(cmd)

    threads = [threading.Thread(target=f, daemon=True) for f in (ingest, infer, emit)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return np.stack(smoothed), commands


# --------------------------------------------------------------------------
# pose sequence files


def save_pose_sequence(positions, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (layout sidecar) and ``<path>.bin`` (little-endian float32, frame-major).

    ``extra`` keys (e.g. the run seed) are stored alongside the layout fields.
    """
    positions = np.asarray(positions)
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise ValueError("pose sequences are (T, J, 3)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"joints": int(positions.shape[1]), "frames": int(positions.shape[0]),
            "layout": "frame-major TxJx3", "dtype": "f32le", **(extra or {})}
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(positions, dtype="<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return path.with_suffix(".json")


def load_pose_sequence(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("layout") != "frame-major TxJx3" or meta.get("dtype") != "f32le":
        raise ValueError(f"unsupported pose sequence layout: {meta}")
    data = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    return data.reshape(meta["frames"], meta["joints"], 3).astype(np.float64)


def export_csv(positions, path: str | Path) -> None:
    positions = np.asarray(positions)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "joint", "x", "y", "z"])
        for t, frame in enumerate(positions):
            for j, (x, y, z) in enumerate(frame):
                writer.writerow([t, j, repr(float(x)), repr(float(y)), repr(float(z))])
