"""Synthetic motion, optimizer, LR schedule and the three-stage curriculum.

Stage 1 trains on clean windows with the position loss only.  Stage 2 adds
corrupted inputs and the bone, velocity and acceleration terms.  Stage 3
switches the covariance head on, adds the NLL term and restarts AdamW at a
lower learning rate.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from esfp import diffcore as dc
from esfp.corruption import PROFILES, NoiseProfile, apply_profile
from esfp.hpstm import HPSTM
from esfp.kinematics import PoseParameters, SkeletonDefinition, forward_kinematics, quat_from_axis_angle
from esfp.losses import LossWeights, compute_components, loss_total

log = logging.getLogger(__name__)

LOG_COLUMNS = ("stage", "epoch", "train_loss", "val_loss", "lr", "wall_seconds")


# --------------------------------------------------------------------------
# synthetic motion


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    sequences: int = 200
    frames: int = 96
    joints: int = 24
    amplitude: tuple[float, float] = (0.1, 0.6)  # rad, per joint angle track
    frequency: tuple[float, float] = (0.2, 1.2)  # Hz
    root_amplitude: float = 0.3  # m
    root_frequency: tuple[float, float] = (0.05, 0.3)  # Hz
    bone_spread: float = 0.1  # relative, uniform +/-
    fps: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.sequences < 1 or self.frames < 1:
            raise ValueError("need at least one sequence and one frame")
        if not (-math.pi <= self.amplitude[0] <= self.amplitude[1] <= math.pi):
            raise ValueError("amplitudes must lie within +/- pi")


@dataclass(frozen=True, eq=False)
class MotionDataset:
    positions: np.ndarray  # (N, T, J, 3)
    lengths: np.ndarray  # (N, J) per-subject bone lengths
    params: list[PoseParameters]  # empty when loaded from files

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, idx) -> "MotionDataset":
        idx = list(idx)
        return MotionDataset(self.positions[idx], self.lengths[idx], [self.params[i] for i in idx] if self.params else [])

    def split(self, val_fraction: float = 0.2) -> tuple["MotionDataset", "MotionDataset"]:
        """Fixed split by sequence index: the last ``val_fraction`` is held out."""
        n_train = len(self) - max(1, int(round(len(self) * val_fraction)))
        return self.subset(range(n_train)), self.subset(range(n_train, len(self)))


def _sinusoid_track(rng, t, amp_range, freq_range, n_terms=2):
    total = rng.uniform(*amp_range)
    weights = rng.dirichlet(np.ones(n_terms))
    freqs = rng.uniform(*freq_range, size=n_terms)
    phases = rng.uniform(0, 2 * math.pi, size=n_terms)
    return (total * weights[:, None] * np.sin(2 * math.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, skeleton: SkeletonDefinition) -> MotionDataset:
    """Smooth random motions rendered through FK, so ground truth is on the manifold."""
    if spec.joints != skeleton.num_joints:
        raise ValueError("spec joint count does not match skeleton")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.frames) / spec.fps
    j = skeleton.num_joints
    positions, lengths, params = [], [], []
    for _ in range(spec.sequences):
        scale = 1.0 + rng.uniform(-spec.bone_spread, spec.bone_spread, size=j)
        bones = skeleton.canonical_lengths * scale
        axes = rng.normal(size=(j, 3))
        angles = np.stack([_sinusoid_track(rng, t, spec.amplitude, spec.frequency) for _ in range(j)], axis=1)
        quats = quat_from_axis_angle(axes[None], angles)  # (T, J, 4)
        root = np.stack([_sinusoid_track(rng, t, (0.0, spec.root_amplitude), spec.root_frequency)
                         for _ in range(3)], axis=1)
        p = PoseParameters(root, quats[:, 0], quats[:, 1:], np.broadcast_to(bones, (spec.frames, j)))
        positions.append(forward_kinematics(skeleton, p))
        lengths.append(bones)
        params.append(p)
    return MotionDataset(np.stack(positions), np.stack(lengths), params)


# --------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamW:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    skipped: int = 0

    def step(self, params) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite gradients."""
        return adamw_step(params, self.lr, self.betas, self.eps, self.weight_decay, self)

    @staticmethod
    def reset(params) -> None:
        for p in params:
            p.reset_state()


def adamw_step(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01,
               counter: AdamW | None = None) -> bool:
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    if not all(np.all(np.isfinite(g)) for g in grads):
        if counter is not None:
            counter.skipped += 1
        return False
    b1, b2 = betas
    for p, g in zip(params, grads):
        p.step += 1
        p.value -= lr * weight_decay * p.value
        p.m = b1 * p.m + (1 - b1) * g
        p.v = b2 * p.v + (1 - b2) * g * g
        m_hat = p.m / (1 - b1**p.step)
        v_hat = p.v / (1 - b2**p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return True


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 3
    min_delta: float = 1e-5
    lr_min: float = 1e-7
    best: float = math.inf
    bad_evals: int = 0


def plateau_scheduler_step(state: PlateauState, validation_loss: float) -> tuple[PlateauState, float]:
    if validation_loss < state.best - state.min_delta:
        state = replace(state, best=validation_loss, bad_evals=0)
    else:
        state = replace(state, bad_evals=state.bad_evals + 1)
        if state.bad_evals >= state.patience:
            state = replace(state, lr=max(state.lr * state.factor, state.lr_min), bad_evals=0)
    return state, state.lr


# --------------------------------------------------------------------------
# curriculum


@dataclass(frozen=True)
class CurriculumConfig:
    epochs: tuple[int, int, int] = (10, 10, 10)
    lr: float = 1e-4
    lr_stage3: float = 1e-5
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-5
    lr_min: float = 1e-7
    batch_size: int = 16
    crops_per_sequence: int = 1
    val_crops_per_sequence: int = 2
    seed: int = 0
    stage2_profile: NoiseProfile = field(default_factory=lambda: PROFILES["stage2"])
    loss_weights: LossWeights = field(default_factory=LossWeights)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    reinit_optimizer_stage2: bool = False
    val_fraction: float = 0.2

    def __post_init__(self):
        if min(self.epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr <= 0 or self.lr_stage3 <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainingResult:
    model: HPSTM
    log: list[dict]
    checkpoints: dict[str, Path] = field(default_factory=dict)
    stage_weights: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


def _crop_starts(rng, n_seq, n_frames, window, per_seq):
    seq_idx = np.repeat(np.arange(n_seq), per_seq)
    starts = rng.integers(0, n_frames - window + 1, size=seq_idx.size)
    order = rng.permutation(seq_idx.size)
    return seq_idx[order], starts[order]


def _val_starts(n_seq, n_frames, window, per_seq):
    starts = np.linspace(0, n_frames - window, per_seq).round().astype(int)
    return np.repeat(np.arange(n_seq), per_seq), np.tile(starts, n_seq)


def _corrupt_all(data: MotionDataset, profile: NoiseProfile, skeleton, seed_seq) -> np.ndarray:
    out = np.empty_like(data.positions)
    for i in range(len(data)):
        rng = np.random.default_rng([*seed_seq, i])
        out[i] = apply_profile(data.positions[i], profile, skeleton.with_lengths(data.lengths[i]), rng)
    return out


def _batched_loss(model, noisy, clean, lengths, seq_idx, starts, stage, weights, batch_size, train, opt=None,
                  trainable=None):
    window = model.config.window
    total, count = 0.0, 0
    for b0 in range(0, seq_idx.size, batch_size):
        si, st = seq_idx[b0:b0 + batch_size], starts[b0:b0 + batch_size]
        frames = st[:, None] + np.arange(window)
        x = noisy[si[:, None], frames]
        y = clean[si[:, None], frames]
        out = model.forward_graph(x, covariance=stage == 3)
        loss = loss_total(stage, compute_components(out, y, lengths[si], stage), weights)
        value = float(loss.value)
        if not math.isfinite(value):
            return value
        if train:
            dc.zero_grad(trainable)
            dc.backpropagate(loss)
            opt.step(trainable)
        total += value * si.size
        count += si.size
    return total / max(count, 1)


def run_curriculum(config: CurriculumConfig, dataset: MotionDataset, model: HPSTM,
                   out_dir: str | Path | None = None) -> TrainingResult:
    """Train ``model`` in place through the configured stages.

    The log gets an epoch-0 validation record before any update, then one
    record per epoch.  Checkpoints are written to ``out_dir`` after each stage
    when a directory is given.
    """
    skeleton = model.skeleton
    train, val = dataset.split(config.val_fraction)
    window = model.config.window
    if train.positions.shape[1] < window:
        raise ValueError("sequences are shorter than the model window")
    if len(train) * config.crops_per_sequence < config.batch_size:
        raise ValueError("not enough training windows for one batch")
    out_dir = Path(out_dir) if out_dir is not None else None
    weights = config.loss_weights
    opt = AdamW(config.lr, config.betas, config.eps, config.weight_decay)
    sched = PlateauState(config.lr, config.plateau_factor, config.plateau_patience, config.plateau_min_delta,
                         config.lr_min)
    val_idx, val_st = _val_starts(len(val), val.positions.shape[1], window, config.val_crops_per_sequence)
    val_noisy = _corrupt_all(val, config.stage2_profile, skeleton, (config.seed, 99))
    result = TrainingResult(model, [])
    t0 = time.perf_counter()

    def validate(stage):
        inputs = val.positions if stage == 1 else val_noisy
        return _batched_loss(model, inputs, val.positions, val.lengths, val_idx, val_st, stage, weights,
                             config.batch_size, train=False)

    def record(stage, epoch, train_loss, val_loss):
        entry = {"stage": stage, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr,
                 "wall_seconds": round(time.perf_counter() - t0, 3), "noise": stage >= 2,
                 "nll_term": stage == 3}
        result.log.append(entry)
        log.info("stage %d epoch %d train %.6g val %.6g lr %.3g", stage, epoch, train_loss, val_loss, opt.lr)

    record(1, 0, math.nan, validate(1))
    epoch = 0
    for stage, n_epochs in zip((1, 2, 3), config.epochs):
        if n_epochs == 0:
            continue
        trainable = model.trainable(covariance=stage == 3)
        if stage == 2 and config.reinit_optimizer_stage2:
            AdamW.reset(model.params.values())
            opt.lr = config.lr
        if stage == 3:
            AdamW.reset(model.params.values())
            opt.lr = config.lr_stage3
        sched = replace(sched, lr=opt.lr, best=math.inf, bad_evals=0)
        for _ in range(n_epochs):
            epoch += 1
            rng = np.random.default_rng([config.seed, stage, epoch])
            if stage == 1:
                inputs = train.positions
            else:
                inputs = _corrupt_all(train, config.stage2_profile, skeleton, (config.seed, stage, epoch))
            idx, st = _crop_starts(rng, len(train), train.positions.shape[1], window, config.crops_per_sequence)
            train_loss = _batched_loss(model, inputs, train.positions, train.lengths, idx, st, stage, weights,
                                       config.batch_size, train=True, opt=opt, trainable=trainable)
            if not math.isfinite(train_loss):
                raise FloatingPointError(f"training diverged in stage {stage}, epoch {epoch}")
            val_loss = validate(stage)
            if not math.isfinite(val_loss):
                raise FloatingPointError(f"validation loss diverged in stage {stage}, epoch {epoch}")
            record(stage, epoch, train_loss, val_loss)
            sched, opt.lr = plateau_scheduler_step(sched, val_loss)
        result.stage_weights[stage] = model.weights()
        if out_dir is not None:
            result.checkpoints[f"stage{stage}"] = model.save(out_dir / f"stage{stage}")
    if out_dir is not None:
        result.checkpoints["final"] = model.save(out_dir / "model")
        write_training_log(result.log, out_dir / "train_log.csv")
    return result


def write_training_log(entries: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(entries)
