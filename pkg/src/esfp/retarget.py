"""Geometric mapping of human shoulder-elbow-wrist triples to desktop-arm commands.

Human frame: +X forward, +Y left, +Z up.  Robot frame: +X forward (reach),
+Y up, +Z right.  The wrist-minus-shoulder vector is rotated into the robot
frame, rescaled so the human arm length maps to the robot's target reach,
offset to the robot shoulder and clipped per axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from esfp.baselines import OneEuroFilter

DEFAULT_ROTATION = ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, -1.0, 0.0))


@dataclass(frozen=True)
class RetargetConfig:
    rotation_map: tuple = DEFAULT_ROTATION
    target_reach: float = 250.0  # mm
    shoulder_offset: tuple = (100.0, 150.0, 0.0)  # mm
    clip_box: tuple = ((100.0, 300.0), (0.0, 250.0), (-150.0, 150.0))  # mm, per axis
    tau_min: float = 0.05  # m
    lambda_0: float = 0.5
    command_rate: float = 20.0  # Hz
    input_rate: float = 30.0  # Hz
    speed: float = 100.0
    filter_min_cutoff: float = 1.0
    filter_beta: float = 0.007
    filter_d_cutoff: float = 1.0
    arm_joints: tuple = ("right_shoulder", "right_elbow", "right_wrist")

    def __post_init__(self):
        rot = np.asarray(self.rotation_map, dtype=float)
        if rot.shape != (3, 3) or np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation_map must be an orthonormal 3x3 matrix")
        box = np.asarray(self.clip_box, dtype=float)
        if box.shape != (3, 2) or np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("clip_box needs min < max on every axis")
        if self.target_reach <= 0 or self.tau_min <= 0:
            raise ValueError("target_reach and tau_min must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.rotation_map, dtype=float)

    @property
    def box(self) -> np.ndarray:
        return np.asarray(self.clip_box, dtype=float)

    @classmethod
    def from_dict(cls, d: dict) -> "RetargetConfig":
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, (list, tuple)) else v

        return cls(**{k: tup(v) for k, v in d.items()})

    @classmethod
    def load(cls, path: str | Path) -> "RetargetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


@dataclass(frozen=True)
class ArmTriple:
    p_s: np.ndarray
    p_e: np.ndarray
    p_w: np.ndarray

    @classmethod
    def from_frame(cls, frame, indices) -> "ArmTriple":
        s, e, w = indices
        frame = np.asarray(frame, dtype=np.float64)
        return cls(frame[s], frame[e], frame[w])


@dataclass(frozen=True)
class RobotCommand:
    t_ms: float
    x: float
    y: float
    z: float
    wrist_deg: float
    speed: float

    def to_json(self) -> str:
        return json.dumps({"t_ms": self.t_ms, "x_mm": self.x, "y_mm": self.y, "z_mm": self.z,
                           "wrist_deg": self.wrist_deg, "speed": self.speed})

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def relative_wrist_vector(triple: ArmTriple) -> np.ndarray:
    return np.asarray(triple.p_w, dtype=np.float64) - np.asarray(triple.p_s, dtype=np.float64)


def arm_length(triple: ArmTriple) -> float:
    return float(np.linalg.norm(np.subtract(triple.p_e, triple.p_s)) + np.linalg.norm(np.subtract(triple.p_w, triple.p_e)))


def compute_scale(triple: ArmTriple, config: RetargetConfig) -> float:
    """Target reach over human arm length (both in mm); ``lambda_0`` for short arms."""
    length = arm_length(triple)
    if length < config.tau_min:
        return config.lambda_0
    return config.target_reach / (length * 1000.0)


def map_position_unclipped(v_h, scale: float, config: RetargetConfig) -> np.ndarray:
    return np.asarray(config.shoulder_offset, dtype=float) + scale * (config.rotation @ (np.asarray(v_h) * 1000.0))


def clip_to_box(p, config: RetargetConfig) -> np.ndarray:
    box = config.box
    return np.clip(p, box[:, 0], box[:, 1])


def map_command(triple: ArmTriple, config: RetargetConfig, v_h=None) -> np.ndarray:
    """Clipped robot target (mm).  ``v_h`` overrides the raw wrist vector (e.g. a filtered one)."""
    v = relative_wrist_vector(triple) if v_h is None else v_h
    return clip_to_box(map_position_unclipped(v, compute_scale(triple, config), config), config)


def wrist_angle(triple: ArmTriple, config: RetargetConfig, previous: float = 90.0) -> float:
    """Forearm heading in the robot's horizontal plane; 90 is straight ahead, 180 fully left."""
    forearm = np.subtract(triple.p_w, triple.p_e)
    if np.linalg.norm(forearm) <= 1e-6:
        return previous
    fx, _, fz = config.rotation @ forearm
    if math.hypot(fx, fz) <= 1e-12:
        return previous
    deg = 90.0 + math.degrees(math.atan2(-fz, fx))
    return float(min(max(deg, 0.0), 180.0))


class ArmMapper:
    """Stateful mapper: one-euro filtering of the wrist vector and command decimation."""

    def __init__(self, config: RetargetConfig = RetargetConfig()):
        self.config = config
        self.filter = OneEuroFilter(config.filter_min_cutoff, config.filter_beta, config.filter_d_cutoff)
        self.angle = 90.0
        self.next_command_t = 0.0
        self.latest: RobotCommand | None = None

    def update(self, triple: ArmTriple, t: float) -> RobotCommand:
        """Filter one input sample (time in seconds) and return the current command."""
        v = self.filter(relative_wrist_vector(triple), t)
        pos = map_command(triple, self.config, v_h=v)
        self.angle = wrist_angle(triple, self.config, self.angle)
        self.latest = RobotCommand(round(t * 1000.0, 3), *map(float, pos), self.angle, self.config.speed)
        return self.latest

    def feed(self, triple: ArmTriple, t: float) -> RobotCommand | None:
        """Consume an input sample; emit a command when the command clock is due.

        The command carries the newest filtered state, stamped with the tick time.
        """
        cmd = self.update(triple, t)
        if t + 1e-9 >= self.next_command_t:
            tick = self.next_command_t
            self.next_command_t += 1.0 / self.config.command_rate
            return replace(cmd, t_ms=round(tick * 1000.0, 3))
        return None

    def run(self, frames, joint_indices) -> list[RobotCommand]:
        """Map a whole ``(T, J, 3)`` sequence sampled at ``input_rate``."""
        out = []
        for i, frame in enumerate(frames):
            cmd = self.feed(ArmTriple.from_frame(frame, joint_indices), i / self.config.input_rate)
            if cmd is not None:
                out.append(cmd)
        return out


class CommandLog:
    """Simulated arm sink: appends one JSON object per command."""

    def __init__(self, stream: TextIO):
        self.stream = stream
        self.count = 0

    def send(self, cmd: RobotCommand) -> None:
        self.stream.write(cmd.to_json() + "\n")
        self.count += 1


def write_command_log(commands: Iterable[RobotCommand], path: str | Path) -> int:
    with Path(path).open("w") as fh:
        sink = CommandLog(fh)
        for cmd in commands:
            sink.send(cmd)
    return sink.count


def read_command_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
