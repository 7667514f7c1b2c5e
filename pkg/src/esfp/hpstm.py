"""Encoder-decoder attention smoother that decodes through forward kinematics.

The encoder reads a window of noisy joint positions.  ``T`` learned query
vectors drive the decoder, which cross-attends to the encoder memory (no
causal mask).  Per output frame the heads emit a root translation, one
quaternion per joint, one bone length per joint and, optionally, six numbers
per joint that become a lower-triangular Cholesky factor.  Positions come
only from FK, so every output frame lies on the skeleton's manifold.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from esfp import diffcore as dc
from esfp.kinematics import PoseParameters, SkeletonDefinition, forward_kinematics_graph

BONE_FLOOR = 1e-4
CHOL_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    window: int = 31
    joints: int = 24
    d_model: int = 128
    heads: int = 4
    encoder_layers: int = 3
    decoder_layers: int = 3
    ff_width: int = 256
    dropout: float = 0.1
    covariance: bool = True
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.window < 3:
            raise ValueError("window must be at least 3 frames")
        if self.activation not in dc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=32, heads=2, encoder_layers=2, decoder_layers=2, ff_width=64, dropout=0.0)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


@dataclass(frozen=True, eq=False)
class SmoothedWindow:
    positions: np.ndarray  # (T, J, 3)
    params: PoseParameters  # batched over T
    cov: np.ndarray | None = None  # (T, J, 3, 3) Cholesky factors

    def parameter_vector(self) -> np.ndarray:
        """``T x (3 + 4J + J)``: root translation, quaternions, bone lengths."""
        p = self.params
        t = p.root_translation.shape[0]
        return np.concatenate([p.root_translation, p.quaternions.reshape(t, -1), p.bone_lengths], axis=1)


@dataclass
class GraphOutput:
    positions: dc.Node  # (B, T, J, 3)
    root_translation: dc.Node
    quaternions: dc.Node
    bone_lengths: dc.Node
    chol: dc.Node | None


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


def assemble_cholesky(raw) -> dc.Node:
    """Six raw numbers ``(..., 6)`` to lower-triangular ``(..., 3, 3)`` factors.

    ``raw[..., :3]`` feed the diagonal through ``exp`` (floored at 1e-6);
    ``raw[..., 3:]`` are the (1,0), (2,0), (2,1) entries, used unchanged.
    """
    raw = dc.as_node(raw)
    diag = dc.maximum(dc.exp(raw[..., 0:3]), CHOL_FLOOR)
    zero = np.zeros(raw.shape[:-1])
    entries = [
        diag[..., 0], zero, zero,
        raw[..., 3], diag[..., 1], zero,
        raw[..., 4], raw[..., 5], diag[..., 2],
    ]
    return dc.reshape(dc.stack(entries, axis=-1), raw.shape[:-1] + (3, 3))


def _xavier(rng, fan_in, fan_out, gain=1.0):
    return rng.normal(0.0, gain * math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_weights(config: ModelConfig, skeleton: SkeletonDefinition, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh weights; heads start at the rest pose with the skeleton's canonical lengths."""
    if skeleton.num_joints != config.joints:
        raise ValueError("skeleton joint count does not match config")
    rng = np.random.default_rng(seed)
    d, f, j = config.d_model, config.ff_width, config.joints
    w: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out, gain=1.0):
        w[f"{name}.w"] = _xavier(rng, n_in, n_out, gain)
        w[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        w[f"{name}.g"] = np.ones(d)
        w[f"{name}.b"] = np.zeros(d)

    def attention(name):
        for part in ("q", "k", "v", "o"):
            linear(f"{name}.{part}", d, d)

    linear("embed", 3 * j, d)
    for i in range(config.encoder_layers):
        norm(f"enc{i}.ln1")
        attention(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        linear(f"enc{i}.ff1", d, f)
        linear(f"enc{i}.ff2", f, d)
    norm("enc.ln")
    w["queries"] = sinusoidal_encoding(config.window, d) + rng.normal(0.0, 0.02, size=(config.window, d))
    for i in range(config.decoder_layers):
        norm(f"dec{i}.ln1")
        attention(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attention(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        linear(f"dec{i}.ff1", d, f)
        linear(f"dec{i}.ff2", f, d)
    norm("dec.ln")

    head_gain = 0.1
    linear("head.root", d, 3, head_gain)
    linear("head.quat", d, 4 * j, head_gain)
    w["head.quat.b"] = np.tile([1.0, 0.0, 0.0, 0.0], j)
    linear("head.bone", d, j, head_gain)
    target = np.maximum(skeleton.canonical_lengths - BONE_FLOOR, 1e-3)
    w["head.bone.b"] = target + np.log(-np.expm1(-target))  # inverse softplus
    linear("head.cov", d, 6 * j, head_gain)
    w["head.cov.b"] = np.tile([math.log(0.05)] * 3 + [0.0] * 3, j)
    return w


class HPSTM:
    """Smoother bound to a skeleton; owns its trainable parameters."""

    def __init__(self, config: ModelConfig, skeleton: SkeletonDefinition, weights: dict | None = None, seed: int = 0):
        self.config = config
        self.skeleton = skeleton
        if weights is None:
            weights = init_weights(config, skeleton, seed)
        expected = init_weights(config, skeleton, 0)
        if set(weights) != set(expected) or any(np.shape(weights[k]) != expected[k].shape for k in expected):
            raise ValueError("weights do not match the model configuration")
        self.params = {k: dc.Parameter(np.array(v, dtype=np.float64), name=k) for k, v in sorted(weights.items())}
        self.root_mask = np.ones(config.joints)
        self.root_mask[0] = 0.0
        self.pos_enc = sinusoidal_encoding(config.window, config.d_model)
        self.cov_head_evaluations = 0

    # -- parameter plumbing -------------------------------------------------
    def weights(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def trainable(self, covariance: bool | None = None) -> list[dc.Parameter]:
        use_cov = self.config.covariance if covariance is None else covariance
        return [p for k, p in self.params.items() if use_cov or not k.startswith("head.cov")]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        dc.save_checkpoint(self.params, path)
        path.with_suffix(".config.json").write_text(self.config.to_json())
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path: str | Path, skeleton: SkeletonDefinition) -> "HPSTM":
        path = Path(path)
        cfg = ModelConfig(**json.loads(path.with_suffix(".config.json").read_text()))
        return cls(cfg, skeleton, dc.load_checkpoint(path))

    # -- layers ---------------------------------------------------------------
    def _linear(self, x, name):
        return dc.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _norm(self, x, name):
        return dc.layer_norm(x) * self.params[f"{name}.g"] + self.params[f"{name}.b"]

    def _dropout(self, x, rng):
        p = self.config.dropout
        if rng is None or p <= 0:
            return x
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * keep

    def _attention(self, x, memory, name):
        b, t, d = x.shape
        s = memory.shape[1]
        h = self.config.heads
        dh = d // h

        def split(z, n):
            return dc.transpose(dc.reshape(z, (b, n, h, dh)), (0, 2, 1, 3))

        q = split(self._linear(x, f"{name}.q"), t)
        k = split(self._linear(memory, f"{name}.k"), s)
        v = split(self._linear(memory, f"{name}.v"), s)
        scores = dc.matmul(q, dc.swapaxes(k)) * (1.0 / math.sqrt(dh))
        ctx = dc.matmul(dc.softmax(scores), v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self._linear(ctx, f"{name}.o")

    def _feed_forward(self, x, name, rng):
        act = dc.ACTIVATIONS[self.config.activation]
        hidden = act(self._linear(x, f"{name}.ff1"))
        return self._linear(self._dropout(hidden, rng), f"{name}.ff2")

    @staticmethod
    def _check(x, where):
        if not np.all(np.isfinite(x.value)):
            raise FloatingPointError(f"non-finite activations in {where}")

    # -- forward ----------------------------------------------------------------
    def embed_window(self, noisy) -> dc.Node:
        """``(B, T, J, 3)`` positions to ``(B, T, d)`` encoder input."""
        noisy = dc.as_node(noisy)
        b, t, j, _ = noisy.shape
        if t != self.config.window or j != self.config.joints:
            raise ValueError(f"expected windows of shape (T={self.config.window}, J={self.config.joints}, 3), "
                             f"got {noisy.shape[1:]}")
        flat = dc.reshape(noisy, (b, t, 3 * j))
        return self._linear(flat, "embed") + self.pos_enc

    def forward_graph(self, noisy, covariance: bool | None = None, rng: np.random.Generator | None = None) -> GraphOutput:
        """Differentiable forward pass on a batch ``(B, T, J, 3)``.

        ``covariance`` overrides the config flag (training stages 1-2 switch the
        head off).  Passing ``rng`` enables dropout.
        """
        noisy = np.asarray(noisy, dtype=np.float64)
        if noisy.ndim == 3:
            noisy = noisy[None]
        if not np.all(np.isfinite(noisy)):
            raise ValueError("input window contains non-finite values")
        use_cov = self.config.covariance if covariance is None else covariance
        b = noisy.shape[0]
        center = noisy[:, :, 0, :].mean(axis=1, keepdims=True)  # (B, 1, 3)
        x = self._dropout(self.embed_window(noisy - center[:, :, None, :]), rng)

        for i in range(self.config.encoder_layers):
            xn = self._norm(x, f"enc{i}.ln1")
            x = x + self._dropout(self._attention(xn, xn, f"enc{i}.attn"), rng)
            x = x + self._dropout(self._feed_forward(self._norm(x, f"enc{i}.ln2"), f"enc{i}", rng), rng)
            self._check(x, f"encoder layer {i}")
        memory = self._norm(x, "enc.ln")

        y = dc.multiply(np.ones((b, 1, 1)), self.params["queries"])
        for i in range(self.config.decoder_layers):
            yn = self._norm(y, f"dec{i}.ln1")
            y = y + self._dropout(self._attention(yn, yn, f"dec{i}.self"), rng)
            y = y + self._dropout(self._attention(self._norm(y, f"dec{i}.ln2"), memory, f"dec{i}.cross"), rng)
            y = y + self._dropout(self._feed_forward(self._norm(y, f"dec{i}.ln3"), f"dec{i}", rng), rng)
            self._check(y, f"decoder layer {i}")
        y = self._norm(y, "dec.ln")

        t, j = self.config.window, self.config.joints
        root = self._linear(y, "head.root") + center
        raw_q = dc.reshape(self._linear(y, "head.quat"), (b, t, j, 4))
        quats = raw_q / dc.sqrt(dc.sum_(raw_q * raw_q, axis=-1, keepdims=True))
        sign = np.where(quats.value[..., :1] < 0, -1.0, 1.0)
        quats = quats * sign
        bones = (dc.softplus(self._linear(y, "head.bone")) + BONE_FLOOR) * self.root_mask
        chol = None
        if use_cov:
            self.cov_head_evaluations += 1
            chol = assemble_cholesky(dc.reshape(self._linear(y, "head.cov"), (b, t, j, 6)))
        positions = forward_kinematics_graph(self.skeleton, root, quats, bones)
        self._check(positions, "forward kinematics output")
        return GraphOutput(positions, root, quats, bones, chol)

    def __call__(self, noisy, covariance: bool | None = None) -> SmoothedWindow | list[SmoothedWindow]:
        """Inference on one window ``(T, J, 3)`` or a batch ``(B, T, J, 3)``."""
        noisy = np.asarray(noisy, dtype=np.float64)
        single = noisy.ndim == 3
        out = self.forward_graph(noisy, covariance=covariance)
        windows = []
        for i in range(out.positions.shape[0]):
            q = out.quaternions.value[i]
            params = PoseParameters(out.root_translation.value[i], q[:, 0], q[:, 1:], out.bone_lengths.value[i])
            cov = None if out.chol is None else out.chol.value[i]
            windows.append(SmoothedWindow(out.positions.value[i], params, cov))
        return windows[0] if single else windows


def model_forward(config: ModelConfig, weights: dict, noisy, skeleton: SkeletonDefinition) -> SmoothedWindow:
    """Functional form: run a ``(T, J, 3)`` window through freshly bound weights."""
    return HPSTM(config, skeleton, weights)(noisy)
