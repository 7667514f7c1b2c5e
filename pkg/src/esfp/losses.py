"""Training objectives for the smoother.

Every loss accepts arrays or :class:`~esfp.diffcore.Node` values shaped
``(B, T, J, 3)`` (positions) and returns a scalar node; use ``float(x.value)``
for a plain number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from esfp import diffcore as dc

HALF_LOG_2PI_3D = 1.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    w_pos: float = 1.0
    w_bone: float = 0.3
    w_vel: float = 0.5
    w_accel: float = 0.5
    lambda_nll: float = 1e-4

    def __post_init__(self):
        if min(self.w_pos, self.w_bone, self.w_vel, self.w_accel, self.lambda_nll) < 0:
            raise ValueError("loss weights must be non-negative")


def _pair(pred, gt):
    pred, gt = dc.as_node(pred), dc.as_node(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def _time_diff(x, axis):
    n = x.shape[axis]
    hi = [slice(None)] * x.ndim
    lo = [slice(None)] * x.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    return x[tuple(hi)] - x[tuple(lo)]


def loss_position(pred, gt) -> dc.Node:
    """Mean squared coordinate error."""
    pred, gt = _pair(pred, gt)
    diff = pred - gt
    return dc.mean(diff * diff)


def loss_bone(pred_lengths, canonical) -> dc.Node:
    """Mean squared deviation of per-frame lengths ``(B, T, J)`` from ``(B, J)`` targets."""
    pred_lengths = dc.as_node(pred_lengths)
    canonical = dc.as_node(canonical)
    if canonical.ndim == pred_lengths.ndim - 1:
        canonical = dc.reshape(canonical, canonical.shape[:-1] + (1, canonical.shape[-1]))
    if canonical.shape[-1] != pred_lengths.shape[-1] or canonical.ndim != pred_lengths.ndim:
        raise ValueError(f"shape mismatch: {pred_lengths.shape} vs {canonical.shape}")
    diff = pred_lengths - canonical
    return dc.mean(diff * diff)


def loss_velocity(pred, gt, time_axis: int = -3) -> dc.Node:
    """L1 error of first temporal differences."""
    pred, gt = _pair(pred, gt)
    if pred.shape[time_axis] < 2:
        raise ValueError("velocity loss needs at least 2 frames")
    return dc.mean(dc.abs_(_time_diff(pred, time_axis) - _time_diff(gt, time_axis)))


def loss_acceleration(pred, gt, time_axis: int = -3) -> dc.Node:
    """L1 error of second temporal differences."""
    pred, gt = _pair(pred, gt)
    if pred.shape[time_axis] < 3:
        raise ValueError("acceleration loss needs at least 3 frames")
    acc_p = _time_diff(_time_diff(pred, time_axis), time_axis)
    acc_g = _time_diff(_time_diff(gt, time_axis), time_axis)
    return dc.mean(dc.abs_(acc_p - acc_g))


def loss_nll(pred, gt, factors) -> dc.Node:
    """Gaussian negative log-likelihood with Cholesky factors ``(..., 3, 3)``.

    The Mahalanobis term uses forward substitution on the lower-triangular
    factor; no inverse is formed.
    """
    pred, gt = _pair(pred, gt)
    factors = dc.as_node(factors)
    if factors.shape != pred.shape + (3,):
        raise ValueError(f"factors shape {factors.shape} does not match positions {pred.shape}")
    if (factors.value[..., [0, 1, 2], [0, 1, 2]] <= 0).any():
        raise ValueError("Cholesky factors need a strictly positive diagonal")
    e = gt - pred
    L = factors
    y0 = e[..., 0] / L[..., 0, 0]
    y1 = (e[..., 1] - L[..., 1, 0] * y0) / L[..., 1, 1]
    y2 = (e[..., 2] - L[..., 2, 0] * y0 - L[..., 2, 1] * y1) / L[..., 2, 2]
    maha = y0 * y0 + y1 * y1 + y2 * y2
    logdet = dc.log(L[..., 0, 0]) + dc.log(L[..., 1, 1]) + dc.log(L[..., 2, 2])
    return dc.mean(0.5 * maha + logdet) + HALF_LOG_2PI_3D


def loss_total(stage: int, components: dict, weights: LossWeights = LossWeights()) -> dc.Node:
    """Curriculum objective.

    ``components`` maps ``pos``, ``bone``, ``vel``, ``accel`` and ``nll`` to
    scalar nodes (or floats); only those the stage needs must be present.
    """
    get = components.get
    if stage == 1:
        return dc.as_node(components["pos"])
    if stage not in (2, 3):
        raise ValueError(f"unknown stage {stage}")
    total = (dc.as_node(get("pos")) * weights.w_pos + dc.as_node(get("bone")) * weights.w_bone
             + dc.as_node(get("vel")) * weights.w_vel + dc.as_node(get("accel")) * weights.w_accel)
    if stage == 3:
        if get("nll") is None:
            raise ValueError("stage 3 needs the NLL term (covariance factors missing)")
        total = total + dc.as_node(get("nll")) * weights.lambda_nll
    return total


def compute_components(output, gt, canonical_lengths, stage: int) -> dict:
    """All loss terms a stage needs, from a :class:`~esfp.hpstm.GraphOutput`."""
    comps = {"pos": loss_position(output.positions, gt)}
    if stage >= 2:
        comps["bone"] = loss_bone(output.bone_lengths, canonical_lengths)
        comps["vel"] = loss_velocity(output.positions, gt)
        comps["accel"] = loss_acceleration(output.positions, gt)
    if stage == 3:
        if output.chol is None:
            raise ValueError("stage 3 needs the covariance head")
        comps["nll"] = loss_nll(output.positions, gt, output.chol)
    return comps
