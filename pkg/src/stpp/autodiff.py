"""Reverse-mode automatic differentiation over dense float64 arrays.

A computation builds a DAG of `Tensor` nodes; `backprop` walks it once in
reverse topological order. Gradients are plain numpy arrays. Everything is
double precision: the flow log-determinants and the finite-difference
checks downstream need the headroom.

`Param`/`ParamStore` hold named learnable arrays; a forward pass turns them
into leaf tensors via `leaves()`, and `backward()` maps gradients back to
names. Checkpoints use a small binary container (magic ``STPP1``): JSON
header with per-name shape/offset, then a little-endian f64 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Param",
    "ParamStore",
    "constant",
    "backward",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """One node of the tape: a value plus the rule to push gradients back."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return negate(self)

    def __getitem__(self, key):
        return take(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Tensor(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value * b.value

    def bwd(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Tensor(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.value == 0.0):
        raise ZeroDivisionError("division by zero in autodiff div")
    out = a.value / b.value

    def bwd(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return Tensor(out, (a, b), bwd)


def negate(a: Tensor) -> Tensor:
    return Tensor(-a.value, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def bwd(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Tensor(out, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise ValueError("log of non-positive value")
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def elu(a: Tensor) -> Tensor:
    neg = np.exp(np.minimum(a.value, 0.0)) - 1.0
    out = np.where(a.value > 0.0, a.value, neg)

    def bwd(g):
        return (np.where(a.value > 0.0, g, g * (neg + 1.0)),)

    return Tensor(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.value)
    return Tensor(out, (a,), lambda g: (g * expit(a.value),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Tensor(out, (a,), bwd)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy() / count,)

    return Tensor(out, (a,), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.value, shape).copy()
    return Tensor(out, (a,), lambda g: (_unbroadcast(g, a.value.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.value.reshape(shape)
    return Tensor(out, (a,), lambda g: (g.reshape(a.value.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.value, axes)

    def bwd(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return Tensor(out, (a,), bwd)


def take(a: Tensor, key) -> Tensor:
    out = a.value[key]

    def bwd(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return Tensor(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(tensors), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, (a,), bwd)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.value)

    def bwd(g):
        return (np.where(mask, 0.0, g),)

    return Tensor(out, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    mu = a.value.mean(axis=axis, keepdims=True)
    xmu = a.value - mu
    var = (xmu * xmu).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xmu * inv
    out = gamma.value * xhat + beta.value

    def bwd(g):
        dgamma = _unbroadcast(g * xhat, gamma.value.shape)
        dbeta = _unbroadcast(g, beta.value.shape)
        dxhat = g * gamma.value
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axis, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor(out, (a, gamma, beta), bwd)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(a.value.shape) < keep).astype(np.float64) / keep
    out = a.value * mask
    return Tensor(out, (a,), lambda g: (g * mask,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ w (+ b); the embedding/projection workhorse."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# graph walk


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor) -> None:
    """Populate .grad on every node reachable from `loss` (a scalar)."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # accumulation always allocates a fresh array, so sharing g
            # across parents is safe
            parent.grad = g if parent.grad is None else parent.grad + g


def backward(loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. named leaves; unreachable leaves get zeros."""
    backprop(loss)
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    name: str
    value: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named parameter arrays; names must be unique."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value, trainable: bool = True) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate param name {name!r}")
        p = Param(name, np.asarray(value, dtype=np.float64), trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def leaves(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {
            p.name: Tensor(p.value, requires_grad=p.trainable, name=p.name)
            for p in self._params.values()
        }

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for p in self._params.values():
            out.add(p.name, p.value.copy(), p.trainable)
        return out


def grad_check(f, store: ParamStore, h: float = 1e-5, tol: float = 1e-4) -> dict[str, float]:
    """Central differences vs. reverse mode; max relative error per param.

    `f` maps a {name: Tensor} leaf dict to a scalar Tensor.
    """
    leaves = store.leaves()
    loss = f(leaves)
    grads = backward(loss, leaves)
    report: dict[str, float] = {}
    for p in store:
        if not p.trainable:
            continue
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        numflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(store.leaves()).value)
            flat[i] = orig - h
            down = float(f(store.leaves()).value)
            flat[i] = orig
            numflat[i] = (up - down) / (2.0 * h)
        denom = np.maximum(np.abs(num), np.abs(grads[p.name]))
        denom = np.where(denom < 1e-8, 1.0, denom)
        rel = np.abs(grads[p.name] - num) / denom
        report[p.name] = float(rel.max()) if rel.size else 0.0
    return report


# ---------------------------------------------------------------------------
# checkpoint container: magic STPP1 | u32 header length | JSON header | f64 payload

_MAGIC = b"STPP1"


def save_checkpoint(store: ParamStore, path) -> None:
    entries = {}
    offset = 0
    blobs = []
    for p in store:
        entries[p.name] = {
            "shape": list(p.value.shape),
            "offset": offset,
            "trainable": p.trainable,
        }
        blobs.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        offset += p.value.size
    header = json.dumps({"params": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    store = ParamStore()
    for name, meta in header["params"].items():
        shape = tuple(meta["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = meta["offset"] * 8
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start).reshape(shape)
        store.add(name, arr.copy(), meta["trainable"])
    return store
