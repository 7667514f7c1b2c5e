"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every primitive call computes its value
immediately and records its inputs so that :func:`backpropagate` can walk the
graph in reverse topological order.  Each primitive is a (forward, vjp) pair
held in :data:`PRIMITIVES`, which lets :func:`evaluate` replay a graph after
leaf values change and lets tests swap a backward rule for fault injection.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class Node:
    __slots__ = ("value", "grad", "op", "parents", "attrs", "requires_grad", "name")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, value, op="leaf", parents=(), attrs=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


class Parameter(Node):
    """A trainable leaf with AdamW moment slots."""

    __slots__ = ("m", "v", "step")

    def __init__(self, value, name=None):
        super().__init__(value, requires_grad=True, name=name)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    def reset_state(self):
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


# --------------------------------------------------------------------------
# primitive registry


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _gelu_parts(x):
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    return c, t


def _gelu_fwd(x):
    _, t = _gelu_parts(x)
    return 0.5 * x * (1.0 + t)


def _gelu_vjp(g, out, x):
    c, t = _gelu_parts(x)
    dinner = c * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)


def _softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _layernorm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _layernorm_vjp(g, out, x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * out).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - out * gy),)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _sum_vjp(g, out, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_vjp(g, out, x, axis, keepdims):
    count = x.size // max(out.size, 1) if axis is not None else x.size
    (gx,) = _sum_vjp(g, out, x, axis, keepdims)
    return (gx / count,)


def _is_basic_key(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in items)


def _getitem_vjp(g, out, x, key):
    gx = np.zeros_like(x)
    if _is_basic_key(key):
        gx[key] = g
    else:
        np.add.at(gx, key, g)
    return (gx,)


def _concat_vjp(g, out, *xs, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _matmul_vjp(g, out, a, b):
    return _unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)


def _divide_vjp(g, out, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (np.add, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "subtract": (np.subtract, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "multiply": (np.multiply, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "divide": (np.divide, _divide_vjp),
    "matmul": (np.matmul, _matmul_vjp),
    "reshape": (lambda x, shape: x.reshape(shape), lambda g, out, x, shape: (g.reshape(x.shape),)),
    "transpose": (
        lambda x, axes: np.transpose(x, axes),
        lambda g, out, x, axes: (np.transpose(g, np.argsort(axes) if axes is not None else None),),
    ),
    "concatenate": (lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp),
    "getitem": (lambda x, key: x[key], _getitem_vjp),
    "sum": (lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims), _sum_vjp),
    "mean": (lambda x, axis, keepdims: np.mean(x, axis=axis, keepdims=keepdims), _mean_vjp),
    "exp": (np.exp, lambda g, out, x: (g * out,)),
    "log": (np.log, lambda g, out, x: (g / x,)),
    "sqrt": (np.sqrt, lambda g, out, x: (g * 0.5 / out,)),
    "abs": (np.abs, lambda g, out, x: (g * np.sign(x),)),
    "maximum": (
        lambda x, c: np.maximum(x, c),
        lambda g, out, x, c: (g * (x > c),),
    ),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "layernorm": (_layernorm_fwd, _layernorm_vjp),
    "gelu": (_gelu_fwd, _gelu_vjp),
    "relu": (lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),)),
    "softplus": (lambda x: np.logaddexp(0.0, x), lambda g, out, x: (g * _sigmoid(x),)),
}


def apply(op: str, *inputs, **attrs) -> Node:
    """Run primitive ``op`` on ``inputs`` and record it in the graph."""
    nodes = [as_node(x) for x in inputs]
    fwd, _ = PRIMITIVES[op]
    try:
        with np.errstate(all="ignore"):
            value = fwd(*(n.value for n in nodes), **attrs)
    except ValueError as exc:
        raise ShapeError(f"{op}: {exc}") from None
    requires_grad = any(n.requires_grad for n in nodes)
    if not requires_grad:
        return Node(value, op=op, parents=nodes, attrs=attrs)
    return Node(value, op=op, parents=nodes, attrs=attrs, requires_grad=True)


# --------------------------------------------------------------------------
# public primitive wrappers


def add(a, b):
    return apply("add", a, b)


def subtract(a, b):
    return apply("subtract", a, b)


def multiply(a, b):
    return apply("multiply", a, b)


def divide(a, b):
    return apply("divide", a, b)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    return apply("matmul", a, b)


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def transpose(x, axes=None):
    return apply("transpose", x, axes=None if axes is None else tuple(axes))


def swapaxes(x, a1=-1, a2=-2):
    nd = as_node(x).ndim
    axes = list(range(nd))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concatenate(xs: Sequence, axis=0):
    return apply("concatenate", *xs, axis=axis)


def stack(xs: Sequence, axis=-1):
    """Stack along a new axis (built from reshape + concatenate)."""
    xs = [as_node(x) for x in xs]
    nd = xs[0].ndim + 1
    ax = axis % nd
    expanded = [reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in xs]
    return concatenate(expanded, axis=ax)


def getitem(x, key):
    return apply("getitem", x, key=key)


def sum_(x, axis=None, keepdims=False):
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", x, axis=axis, keepdims=keepdims)


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def sqrt(x):
    return apply("sqrt", x)


def abs_(x):
    return apply("abs", x)


def maximum(x, c: float):
    return apply("maximum", x, c=float(c))


def softmax(x):
    return apply("softmax", x)


def layer_norm(x, eps=1e-5):
    return apply("layernorm", x, eps=eps)


def gelu(x):
    return apply("gelu", x)


def relu(x):
    return apply("relu", x)


def softplus(x):
    return apply("softplus", x)


ACTIVATIONS = {"gelu": gelu, "relu": relu}


# --------------------------------------------------------------------------
# graph traversal


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def evaluate(root: Node) -> np.ndarray:
    """Recompute every non-leaf value under ``root`` from the current leaves."""
    for node in _topological(root):
        if not node.parents:
            continue
        fwd, _ = PRIMITIVES[node.op]
        try:
            with np.errstate(all="ignore"):
                node.value = np.asarray(fwd(*(p.value for p in node.parents), **node.attrs), dtype=DTYPE)
        except ValueError as exc:
            raise ShapeError(f"{node.op}: {exc}") from None
    return root.value


def backpropagate(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if root.value.size != 1:
        raise ValueError(f"backpropagate needs a scalar root, got shape {root.shape}")
    order = [n for n in _topological(root) if n.requires_grad]
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        _, vjp = PRIMITIVES[node.op]
        with np.errstate(all="ignore"):
            parent_grads = vjp(g, node.value, *(p.value for p in node.parents), **node.attrs)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


def _recompute(nodes: list[Node]) -> None:
    for node in nodes:
        fwd, _ = PRIMITIVES[node.op]
        with np.errstate(all="ignore"):
            node.value = np.asarray(fwd(*(p.value for p in node.parents), **node.attrs), dtype=DTYPE)


def check_gradients(builder: Callable[[], Node], params: Sequence[Parameter], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None,
                    replay: bool = False) -> float:
    """Compare analytic gradients with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over every probed
    coordinate.  ``max_coords`` caps the number of coordinates probed per
    parameter (sampled with ``rng``); by default all coordinates are probed.

    With ``replay`` the graph is built once and each probe recomputes only the
    nodes downstream of the perturbed parameter.  That is valid when the
    builder's graph structure does not depend on parameter values.
    """
    zero_grad(params)
    root = builder()
    if not np.all(np.isfinite(root.value)):
        raise FloatingPointError("non-finite loss at the base point")
    backpropagate(root)
    order = _topological(root) if replay else None
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        if replay:
            dirty = {id(p)}
            downstream = []
            for node in order:
                if node.parents and any(id(q) in dirty for q in node.parents):
                    dirty.add(id(node))
                    downstream.append(node)
            saved = [n.value for n in downstream]

            def probe():
                _recompute(downstream)
                return float(root.value)
        else:
            def probe():
                return float(builder().value)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = probe()
            flat[i] = orig - h
            fm = probe()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while probing {p.name or 'param'}[{i}]")
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        if replay:
            for n, v in zip(downstream, saved):
                n.value = v
    zero_grad(params)
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict[str, np.ndarray | Node], path: str | Path) -> Path:
    """Write ``<path>.json`` (name -> shape, offset) and ``<path>.bin`` (LE float64)."""
    path = Path(path)
    manifest, chunks, offset = {}, [], 0
    for name in sorted(params):
        arr = params[name].value if isinstance(params[name], Node) else np.asarray(params[name])
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(data)
        offset += len(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path.with_suffix(".json")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    payload = path.with_suffix(".bin").read_bytes()
    out = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        out[name] = arr.reshape(shape).astype(DTYPE)
    return out
