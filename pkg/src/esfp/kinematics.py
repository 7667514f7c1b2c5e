"""Skeleton description, quaternion algebra and forward kinematics.

Quaternions are stored as ``(..., 4)`` arrays in ``w, x, y, z`` order.  FK
uses a parent-relative convention: a joint sits at its parent's position plus
``bone_length * rest_direction`` rotated by the parent's accumulated global
rotation.

Two FK routes are provided: :func:`forward_kinematics` on plain arrays and
:func:`forward_kinematics_graph` on :mod:`esfp.diffcore` nodes (used by the
smoother, processed one tree depth at a time).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from esfp import diffcore as dc

SKELETON_KEYS = ("names", "parents", "rest_directions", "canonical_lengths")


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SkeletonDefinition:
    joint_names: tuple[str, ...]
    parents: np.ndarray
    rest_directions: np.ndarray
    canonical_lengths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parents", _frozen(self.parents, np.int64))
        object.__setattr__(self, "rest_directions", _frozen(self.rest_directions))
        object.__setattr__(self, "canonical_lengths", _frozen(self.canonical_lengths))
        j = len(self.joint_names)
        if self.parents.shape != (j,) or self.rest_directions.shape != (j, 3) or self.canonical_lengths.shape != (j,):
            raise ValueError("skeleton field lengths disagree")
        roots = np.flatnonzero(self.parents < 0)
        if roots.tolist() != [0]:
            raise ValueError("skeleton needs exactly one root, at index 0")
        if np.any(self.parents[1:] >= np.arange(1, j)):
            raise ValueError("parents must precede children (parent index < child index)")
        if np.any(np.abs(np.linalg.norm(self.rest_directions, axis=1) - 1.0) > 1e-9):
            raise ValueError("rest directions must be unit vectors")
        if np.any(self.canonical_lengths < 0) or self.canonical_lengths[0] != 0:
            raise ValueError("canonical lengths must be >= 0 with a zero-length root")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    @cached_property
    def depth(self) -> np.ndarray:
        d = np.zeros(self.num_joints, dtype=np.int64)
        for j in range(1, self.num_joints):
            d[j] = d[self.parents[j]] + 1
        return d

    @cached_property
    def level_plan(self) -> "_LevelPlan":
        return _LevelPlan(self)

    def with_lengths(self, lengths) -> "SkeletonDefinition":
        """Copy with different canonical lengths (e.g. a specific subject)."""
        return SkeletonDefinition(self.joint_names, self.parents, self.rest_directions, lengths)

    def to_dict(self) -> dict:
        return {
            "names": list(self.joint_names),
            "parents": [int(p) for p in self.parents],
            "rest_directions": self.rest_directions.tolist(),
            "canonical_lengths": self.canonical_lengths.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonDefinition":
        if set(d) != set(SKELETON_KEYS):
            raise ValueError(f"skeleton file must have exactly the keys {SKELETON_KEYS}")
        parents = [-1 if p is None else p for p in d["parents"]]
        return cls(d["names"], parents, d["rest_directions"], d["canonical_lengths"])


def load_skeleton(path: str | Path) -> SkeletonDefinition:
    return SkeletonDefinition.from_dict(json.loads(Path(path).read_text()))


def save_skeleton(skeleton: SkeletonDefinition, path: str | Path) -> None:
    Path(path).write_text(json.dumps(skeleton.to_dict(), indent=1))


def default_skeleton() -> SkeletonDefinition:
    """SMPL-like 24-joint topology with plausible adult lengths (config defaults)."""
    text = resources.files("esfp").joinpath("data/skeleton_smpl24.json").read_text()
    return SkeletonDefinition.from_dict(json.loads(text))


def chain_skeleton(lengths, direction=(1.0, 0.0, 0.0)) -> SkeletonDefinition:
    """Serial chain rooted at joint 0, all rest directions equal to ``direction``."""
    n = len(lengths)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return SkeletonDefinition(
        [f"j{i}" for i in range(n)], [-1] + list(range(n - 1)), np.tile(d, (n, 1)), lengths
    )


# --------------------------------------------------------------------------
# quaternion algebra (numpy)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("degenerate rotation")
    return q / n


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _hamilton(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def compose_quaternions(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first), renormalized."""
    return quat_normalize(_hamilton(quat_normalize(a), quat_normalize(b)))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(m.shape[:-1] + (3, 3))


def rotate_by_quaternion(q, v) -> np.ndarray:
    """Rotate ``v`` by ``q`` via ``q * (0, v) * q^-1``."""
    q = quat_normalize(q)
    v = np.asarray(v, dtype=np.float64)
    pure = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    return _hamilton(_hamilton(q, pure), quat_conjugate(q))[..., 1:]


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def random_quaternions(rng: np.random.Generator, shape: tuple = ()) -> np.ndarray:
    return quat_normalize(rng.normal(size=tuple(shape) + (4,)))


# --------------------------------------------------------------------------
# pose parameters and FK


@dataclass(frozen=True, eq=False)
class PoseParameters:
    """Manifold coordinates for one frame or a batch ``(..., )`` of frames."""

    root_translation: np.ndarray
    root_orientation: np.ndarray
    local_rotations: np.ndarray
    bone_lengths: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "root_translation", _frozen(self.root_translation))
        object.__setattr__(self, "root_orientation", _frozen(quat_normalize(self.root_orientation)))
        object.__setattr__(self, "local_rotations", _frozen(quat_normalize(self.local_rotations)))
        object.__setattr__(self, "bone_lengths", _frozen(self.bone_lengths))

    @property
    def num_joints(self) -> int:
        return self.bone_lengths.shape[-1]

    @property
    def quaternions(self) -> np.ndarray:
        """Root orientation followed by local rotations, ``(..., J, 4)``."""
        return np.concatenate([self.root_orientation[..., None, :], self.local_rotations], axis=-2)

    @classmethod
    def rest(cls, skeleton: SkeletonDefinition, root_translation=(0.0, 0.0, 0.0)) -> "PoseParameters":
        j = skeleton.num_joints
        return cls(root_translation, IDENTITY_QUAT, np.tile(IDENTITY_QUAT, (j - 1, 1)), skeleton.canonical_lengths)


def forward_kinematics(skeleton: SkeletonDefinition, params: PoseParameters) -> np.ndarray:
    """Global joint positions ``(..., J, 3)`` for (batched) pose parameters."""
    j = skeleton.num_joints
    if params.num_joints != j or params.local_rotations.shape[-2] != j - 1:
        raise ValueError(f"pose parameters have {params.num_joints} joints, skeleton has {j}")
    rot = quat_to_matrix(params.quaternions)
    lengths = params.bone_lengths
    batch = lengths.shape[:-1]
    glob = np.empty(batch + (j, 3, 3))
    pos = np.empty(batch + (j, 3))
    glob[..., 0, :, :] = rot[..., 0, :, :]
    pos[..., 0, :] = params.root_translation
    for c in range(1, j):
        p = skeleton.parents[c]
        offset = lengths[..., c, None] * skeleton.rest_directions[c]
        pos[..., c, :] = pos[..., p, :] + np.einsum("...ij,...j->...i", glob[..., p, :, :], offset)
        glob[..., c, :, :] = glob[..., p, :, :] @ rot[..., c, :, :]
    return pos


def extract_bone_lengths(positions, skeleton: SkeletonDefinition) -> np.ndarray:
    """Per-joint distance to the parent joint; the root entry is 0."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-2] != skeleton.num_joints:
        raise ValueError(f"expected {skeleton.num_joints} joints, got {positions.shape[-2]}")
    parents = np.where(skeleton.parents < 0, 0, skeleton.parents)
    return np.linalg.norm(positions - positions[..., parents, :], axis=-1)


# --------------------------------------------------------------------------
# differentiable FK


def quat_to_matrix_graph(q: dc.Node) -> dc.Node:
    """``(..., 4)`` unit quaternions to ``(..., 3, 3)`` matrices on the graph."""
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = [
        1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
        2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
        2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
    ]
    m = dc.stack(entries, axis=-1)
    return dc.reshape(m, q.shape[:-1] + (3, 3))


class _LevelPlan:
    """Joint indices grouped by tree depth, with parent slots in the previous level."""

    def __init__(self, skeleton: SkeletonDefinition):
        depth = skeleton.depth
        self.levels = [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]
        self.parent_slots = [None]
        for prev, cur in zip(self.levels[:-1], self.levels[1:]):
            slot = {int(j): k for k, j in enumerate(prev)}
            self.parent_slots.append(np.array([slot[int(skeleton.parents[c])] for c in cur]))
        order = np.concatenate(self.levels)
        self.inverse = np.argsort(order)


def forward_kinematics_graph(skeleton: SkeletonDefinition, root_translation, quaternions, bone_lengths) -> dc.Node:
    """Differentiable FK.

    ``root_translation`` is ``(..., 3)``, ``quaternions`` ``(..., J, 4)`` unit
    quaternions (root orientation first), ``bone_lengths`` ``(..., J)``.
    Returns ``(..., J, 3)`` positions.
    """
    quaternions = dc.as_node(quaternions)
    bone_lengths = dc.as_node(bone_lengths)
    root_translation = dc.as_node(root_translation)
    j = skeleton.num_joints
    if quaternions.shape[-2] != j or bone_lengths.shape[-1] != j:
        raise ValueError(f"pose parameters do not match a {j}-joint skeleton")
    plan = skeleton.level_plan
    rot = quat_to_matrix_graph(quaternions)
    glob = rot[..., 0:1, :, :]
    pos = dc.reshape(root_translation, root_translation.shape[:-1] + (1, 3))
    levels_pos = [pos]
    for level, slots in zip(plan.levels[1:], plan.parent_slots[1:]):
        g_par = glob[..., slots, :, :]
        p_par = pos[..., slots, :]
        offset = bone_lengths[..., level][..., None] * skeleton.rest_directions[level]
        moved = dc.matmul(g_par, offset[..., None])[..., 0]
        pos = p_par + moved
        glob = dc.matmul(g_par, rot[..., level, :, :])
        levels_pos.append(pos)
    stacked = dc.concatenate(levels_pos, axis=-2)
    return stacked[..., plan.inverse, :]
