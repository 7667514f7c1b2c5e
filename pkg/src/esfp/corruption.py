"""Stochastic corruptions of clean pose sequences ``(T, J, 3)``.

Four perturbations are combined by :func:`apply_profile` in a fixed order:
bone-length jitter, temporally correlated jitter, i.i.d. Gaussian
displacement, then sparse outliers.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from esfp.kinematics import SkeletonDefinition

MAX_RESAMPLES = 10
MIN_SCALE = 0.01


@dataclass(frozen=True)
class NoiseProfile:
    gaussian_sigma: float = 0.0
    bone_jitter_rel: float = 0.0
    temporal_sigma: float = 0.0
    temporal_window: int = 1
    outlier_prob: float = 0.0
    outlier_max_dev: float = 0.0
    seed: int = 0
    # when set, outlier_max_dev is a fraction of the sequence's bounding-box diagonal
    outlier_relative: bool = False

    def __post_init__(self):
        mags = (self.gaussian_sigma, self.bone_jitter_rel, self.temporal_sigma, self.outlier_max_dev)
        if min(mags) < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if self.temporal_window < 1 or self.temporal_window % 2 == 0:
            raise ValueError("temporal_window must be odd and >= 1")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier_prob must lie in [0, 1]")

    def with_seed(self, seed: int) -> "NoiseProfile":
        return replace(self, seed=int(seed))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown noise profile fields: {sorted(unknown)}")
        return cls(**d)


PROFILES = {
    "none": NoiseProfile(),
    "stage2": NoiseProfile(
        gaussian_sigma=0.01, bone_jitter_rel=0.03, temporal_sigma=0.015, temporal_window=7,
        outlier_prob=0.005, outlier_max_dev=0.25, outlier_relative=True,
    ),
    "eval-hard": NoiseProfile(
        gaussian_sigma=0.03, bone_jitter_rel=0.08, temporal_sigma=0.03, temporal_window=7,
        outlier_prob=0.0025, outlier_max_dev=0.25,
    ),
}


def load_profile(name_or_path: str) -> NoiseProfile:
    """A named profile (``stage2``, ``eval-hard``, ``none``) or a JSON file."""
    if name_or_path in PROFILES:
        return PROFILES[name_or_path]
    return NoiseProfile.from_dict(json.loads(Path(name_or_path).read_text()))


def corrupt_gaussian(seq, sigma: float, rng: np.random.Generator) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if sigma == 0:
        return seq.copy()
    return seq + rng.normal(0.0, sigma, size=seq.shape)


def corrupt_bone_jitter(seq, skeleton: SkeletonDefinition, rel_sigma: float, rng: np.random.Generator,
                        eps=None) -> np.ndarray:
    """Scale each parent-to-child offset by ``1 + eps`` per frame and re-chain.

    ``eps`` (shape ``(T, J)``) overrides sampling; non-positive scales are
    resampled a bounded number of times and then clamped to 0.01.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[-2] != skeleton.num_joints:
        raise ValueError(f"sequence has {seq.shape[-2]} joints, skeleton has {skeleton.num_joints}")
    if eps is None:
        if rel_sigma == 0:
            return seq.copy()
        eps = rng.normal(0.0, rel_sigma, size=seq.shape[:-1])
        for _ in range(MAX_RESAMPLES):
            bad = 1.0 + eps <= 0
            if not bad.any():
                break
            eps[bad] = rng.normal(0.0, rel_sigma, size=int(bad.sum()))
    scale = np.maximum(1.0 + np.asarray(eps, dtype=np.float64), MIN_SCALE)
    out = np.empty_like(seq)
    out[..., 0, :] = seq[..., 0, :]
    for c in range(1, skeleton.num_joints):
        p = skeleton.parents[c]
        out[..., c, :] = out[..., p, :] + scale[..., c, None] * (seq[..., c, :] - seq[..., p, :])
    return out


def moving_average(x, w: int, axis: int = 0) -> np.ndarray:
    """Centered moving average of odd width ``w``; edges average the frames available."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    n, half = x.shape[0], w // 2
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + half + 1, 0, n)
    count = (hi - lo).reshape((n,) + (1,) * (x.ndim - 1))
    return np.moveaxis((csum[hi] - csum[lo]) / count, 0, axis)


def corrupt_temporal_filtered(seq, signal_sigma: float, w: int, rng: np.random.Generator) -> np.ndarray:
    """Add moving-average-filtered white noise, each track rescaled to std ``signal_sigma``."""
    seq = np.asarray(seq, dtype=np.float64)
    if w < 1 or w % 2 == 0:
        raise ValueError("filter window must be odd and >= 1")
    if signal_sigma == 0:
        return seq.copy()
    white = rng.normal(size=seq.shape)
    track = moving_average(white, w, axis=-3)
    std = track.std(axis=-3, keepdims=True)
    # a single frame has no temporal spread; fall back to the raw draw
    safe = np.where(std > 0, std, 1.0)
    return seq + signal_sigma * track / safe


def corrupt_outliers(seq, prob: float, max_dev: float, rng: np.random.Generator, return_mask: bool = False):
    """Displace each joint-frame with probability ``prob`` by up to ``max_dev`` metres."""
    seq = np.asarray(seq, dtype=np.float64)
    if prob == 0:
        out = seq.copy()
        return (out, np.zeros(seq.shape[:-1], dtype=bool)) if return_mask else out
    mask = rng.random(seq.shape[:-1]) < prob
    n = int(mask.sum())
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    magnitude = rng.uniform(0.0, max_dev, size=(n, 1))
    out = seq.copy()
    out[mask] += direction * magnitude
    return (out, mask) if return_mask else out


def bounding_box_diagonal(seq) -> float:
    flat = np.asarray(seq).reshape(-1, 3)
    return float(np.linalg.norm(flat.max(axis=0) - flat.min(axis=0)))


def apply_profile(seq, profile: NoiseProfile, skeleton: SkeletonDefinition,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Bone jitter, temporal jitter, Gaussian, then outliers; seeded by ``profile.seed``."""
    rng = np.random.default_rng(profile.seed) if rng is None else rng
    seq = np.asarray(seq, dtype=np.float64)
    out = corrupt_bone_jitter(seq, skeleton, profile.bone_jitter_rel, rng)
    out = corrupt_temporal_filtered(out, profile.temporal_sigma, profile.temporal_window, rng)
    out = corrupt_gaussian(out, profile.gaussian_sigma, rng)
    max_dev = profile.outlier_max_dev
    if profile.outlier_relative:
        max_dev *= bounding_box_diagonal(seq)
    out = corrupt_outliers(out, profile.outlier_prob, max_dev, rng)
    return out
