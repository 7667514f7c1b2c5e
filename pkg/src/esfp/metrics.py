"""Accuracy, smoothness and bone-integrity metrics for ``(T, J, 3)`` sequences in metres."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from esfp.kinematics import SkeletonDefinition, extract_bone_lengths

METRIC_LABELS = {
    "mpjpe_mm": "MPJPE (mm)",
    "pa_mpjpe_mm": "PA-MPJPE (mm)",
    "rr_mpjpe_mm": "RR-MPJPE (mm)",
    "mean_accel": "MeanAccel",
    "mean_jerk": "MeanJerk",
    "bone_mae_mm": "BoneMAE (mm)",
    "bone_stddev_mm": "BoneStdDev (mm)",
}


@dataclass(frozen=True)
class MetricReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    rr_mpjpe_mm: float
    mean_accel: float
    mean_jerk: float
    bone_mae_mm: float
    bone_stddev_mm: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([repr(float(v)) for v in asdict(self).values()])
        return buf.getvalue()

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(MetricReport)) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})

    @classmethod
    def mean(cls, reports: list["MetricReport"]) -> "MetricReport":
        arr = np.array([[getattr(r, f.name) for f in fields(cls)] for r in reports])
        return cls(*arr.mean(axis=0).tolist())


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def procrustes_align(pred, gt) -> np.ndarray:
    """Per-frame similarity alignment (rotation, translation, uniform scale) of pred onto gt."""
    pred, gt = _check(pred, gt)
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    x, y = pred - mu_p, gt - mu_g
    cov = np.swapaxes(x, -1, -2) @ y  # (..., 3, 3)
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.ones(s.shape)
    fix[..., -1] = d
    rot = (u * fix[..., None, :]) @ vt  # maps row vectors: x @ rot
    var = (x * x).sum(axis=(-1, -2))
    scale = np.where(var > 0, (s * fix).sum(axis=-1) / np.where(var > 0, var, 1.0), 1.0)
    return scale[..., None, None] * (x @ rot) + mu_g


def compute_accuracy(pred, gt, skeleton: SkeletonDefinition | None = None, root: int = 0) -> tuple[float, float, float]:
    """(MPJPE, PA-MPJPE, RR-MPJPE) in millimetres."""
    pred, gt = _check(pred, gt)
    err = mpjpe(pred, gt)
    pa = mpjpe(procrustes_align(pred, gt), gt)
    rr = mpjpe(pred - pred[..., root:root + 1, :], gt - gt[..., root:root + 1, :])
    return err, pa, rr


def compute_smoothness(pred) -> tuple[float, float]:
    """Mean norm of second and third temporal differences (metres per frame^k)."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[0] < 4:
        raise ValueError("smoothness metrics need at least 4 frames")
    accel = np.linalg.norm(np.diff(pred, 2, axis=0), axis=-1).mean()
    jerk = np.linalg.norm(np.diff(pred, 3, axis=0), axis=-1).mean()
    return float(accel), float(jerk)


def compute_bone_metrics(pred, skeleton: SkeletonDefinition) -> tuple[float, float]:
    """(BoneMAE, BoneStdDev) in millimetres over non-root bones.

    BoneMAE compares against the skeleton's canonical lengths; BoneStdDev is
    the temporal standard deviation of each bone, averaged over bones.
    """
    lengths = extract_bone_lengths(pred, skeleton)[:, 1:]
    canon = skeleton.canonical_lengths[1:]
    mae = np.abs(lengths - canon).mean() * 1000.0
    std = lengths.std(axis=0).mean() * 1000.0
    return float(mae), float(std)


def evaluate(pred, gt, skeleton: SkeletonDefinition) -> MetricReport:
    acc = compute_accuracy(pred, gt, skeleton)
    smooth = compute_smoothness(pred)
    bones = compute_bone_metrics(pred, skeleton)
    return MetricReport(*acc, *smooth, *bones)
