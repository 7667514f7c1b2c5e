"""Classical smoothers: Savitzky-Golay, a constant-velocity particle filter and the one-euro filter."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import savgol_filter

log = logging.getLogger(__name__)

# below this a linear-domain likelihood underflows to zero in float64
LOG_UNDERFLOW = math.log(np.finfo(np.float64).tiny)


def savgol_smooth(seq, window: int = 7, order: int = 2) -> np.ndarray:
    """Savitzky-Golay smoothing along time (axis 0) for every joint coordinate.

    Interior samples take the centre value of the local least-squares
    polynomial; the first and last ``window // 2`` samples are evaluated on
    the polynomial fitted to the first/last full window.  Sequences shorter
    than ``window`` fall back to the largest odd window that fits.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive")
    if order >= window:
        raise ValueError("polynomial order must be smaller than the window")
    n = seq.shape[0]
    if n < window:
        fallback = n if n % 2 else n - 1
        log.warning("savgol: %d frames < window %d, using window %d", n, window, fallback)
        window, order = fallback, min(order, fallback - 1)
    if window == 1:
        return seq.copy()
    return savgol_filter(seq, window, order, axis=0, mode="interp")


# --------------------------------------------------------------------------
# particle filter


def _systematic_resample(weights, rng):
    """Indices for each row of ``weights`` (rows sum to 1)."""
    j, n = weights.shape
    positions = (rng.random((j, 1)) + np.arange(n)) / n
    cum = np.cumsum(weights, axis=1)
    cum[:, -1] = 1.0
    return np.stack([np.searchsorted(cum[i], positions[i]) for i in range(j)])


@dataclass
class ParticleFilterStats:
    reinitialisations: int = 0
    resamples: int = 0


def particle_filter_smooth(seq, particles: int = 500, process_sigma: float = 0.01, meas_sigma: float = 0.03,
                           rng: np.random.Generator | None = None, init_state=None,
                           stats: ParticleFilterStats | None = None, return_spread: bool = False):
    """Per-joint bootstrap particle filter with a constant-velocity model.

    Each joint carries particles over ``(position, velocity)``.  Velocities
    receive Gaussian process noise, positions advance by the velocity, and
    weights follow a Gaussian likelihood of the observed position.  Systematic
    resampling runs when the effective sample size drops below ``N / 2``.
    Output is the weighted posterior mean position per frame.

    Weights are kept in the log domain.  When every particle's likelihood
    for a joint would underflow to zero, that joint is reinitialised around
    the observation and counted in ``stats``.

    ``init_state`` (``(J, 6)``) starts every particle at a known state at the first frame;
    otherwise particles are drawn around the first observation.  With
    ``return_spread`` the per-frame particle bounding boxes are returned too.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if particles < 1:
        raise ValueError("need at least one particle")
    if process_sigma < 0 or meas_sigma < 0:
        raise ValueError("noise levels must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    stats = ParticleFilterStats() if stats is None else stats
    t_len, j, _ = seq.shape
    n = particles

    def spawn(obs):
        pos = obs[:, None, :] + rng.normal(0.0, meas_sigma, size=(j, n, 3))
        vel = rng.normal(0.0, process_sigma, size=(j, n, 3))
        return pos, vel

    if init_state is not None:
        init_state = np.asarray(init_state, dtype=np.float64)
        pos = np.repeat(init_state[:, None, :3], n, axis=1)
        vel = np.repeat(init_state[:, None, 3:], n, axis=1)
    else:
        pos, vel = spawn(seq[0])
    logw = np.full((j, n), -math.log(n))
    out = np.empty_like(seq)
    lo = np.empty_like(seq)
    hi = np.empty_like(seq)
    for t in range(t_len):
        if t > 0:
            if process_sigma > 0:
                vel = vel + rng.normal(0.0, process_sigma, size=vel.shape)
            pos = pos + vel
        d2 = ((pos - seq[t][:, None, :]) ** 2).sum(axis=-1)
        if meas_sigma > 0:
            loglik = -0.5 * d2 / meas_sigma**2
        else:
            loglik = np.where(d2 == d2.min(axis=1, keepdims=True), 0.0, -np.inf)
        logw = logw + loglik
        peak = logw.max(axis=1, keepdims=True)
        dead = ~(loglik.max(axis=1) >= LOG_UNDERFLOW)
        if dead.any():
            stats.reinitialisations += int(dead.sum())
            log.warning("particle filter: all weights vanished for %d joints at frame %d", int(dead.sum()), t)
            fresh_pos, fresh_vel = spawn(seq[t])
            pos[dead], vel[dead] = fresh_pos[dead], fresh_vel[dead]
            logw[dead] = -math.log(n)
            peak = logw.max(axis=1, keepdims=True)
        w = np.exp(logw - peak)
        w /= w.sum(axis=1, keepdims=True)
        out[t] = (w[..., None] * pos).sum(axis=1)
        lo[t], hi[t] = pos.min(axis=1), pos.max(axis=1)
        ess = 1.0 / (w * w).sum(axis=1)
        resample = ess < n / 2
        if resample.any():
            stats.resamples += int(resample.sum())
            idx = _systematic_resample(w[resample], rng)
            rows = np.flatnonzero(resample)[:, None]
            pos[resample] = pos[rows, idx]
            vel[resample] = vel[rows, idx]
            w[resample] = 1.0 / n
        logw = np.log(np.maximum(w, 1e-300))
    if return_spread:
        return out, lo, hi
    return out


# --------------------------------------------------------------------------
# one-euro filter


@dataclass(frozen=True)
class OneEuroState:
    x: np.ndarray | None = None  # last filtered value
    dx: np.ndarray | None = None  # last filtered derivative
    t: float | None = None


def smoothing_factor(cutoff, dt: float):
    tau = 1.0 / (2.0 * math.pi * cutoff)
    return 1.0 / (1.0 + tau / dt)


def one_euro_step(state: OneEuroState, sample, t: float, min_cutoff: float = 1.0, beta: float = 0.007,
                  d_cutoff: float = 1.0) -> tuple[OneEuroState, np.ndarray]:
    """Advance the filter by one timestamped sample (seconds)."""
    x = np.asarray(sample, dtype=np.float64)
    if state.t is None:
        return OneEuroState(x.copy(), np.zeros_like(x), float(t)), x.copy()
    dt = t - state.t
    if not dt > 0:
        raise ValueError(f"timestamps must strictly increase ({state.t} -> {t})")
    a_d = smoothing_factor(d_cutoff, dt)
    dx = a_d * (x - state.x) / dt + (1.0 - a_d) * state.dx
    cutoff = min_cutoff + beta * np.abs(dx)
    a = smoothing_factor(cutoff, dt)
    x_hat = a * x + (1.0 - a) * state.x
    return replace(state, x=x_hat, dx=dx, t=float(t)), x_hat


class OneEuroFilter:
    def __init__(self, min_cutoff: float = 1.0, beta: float = 0.007, d_cutoff: float = 1.0):
        self.min_cutoff, self.beta, self.d_cutoff = min_cutoff, beta, d_cutoff
        self.state = OneEuroState()

    def __call__(self, sample, t: float) -> np.ndarray:
        self.state, out = one_euro_step(self.state, sample, t, self.min_cutoff, self.beta, self.d_cutoff)
        return out
