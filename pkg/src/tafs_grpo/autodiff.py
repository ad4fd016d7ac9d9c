"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap float32 numpy arrays. Every op records its parents and a closure
that maps the output gradient to parent gradients; :meth:`Tensor.backward`
walks the graph once in reverse topological order.

Broadcasting is restricted to a single leading batch dimension: an operand of
shape ``(k,)`` may meet one of shape ``(B, k)``. Anything else is rejected.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32
_LOG_2PI = math.log(2.0 * math.pi)
_default_dtype = [DTYPE]


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    _default_dtype.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _default_dtype.pop()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_default_dtype[-1], order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], back) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
    return out


def _check_finite_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.ndim == b.data.ndim + 1 and a.shape[1:] == b.shape:
        return
    if b.data.ndim == a.data.ndim + 1 and b.shape[1:] == a.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, dtype=np.float64).astype(g.dtype)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def scale(a: Tensor, k: float) -> Tensor:
    k = a.data.dtype.type(k)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def back(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))).astype(x.dtype),)

    return _make(out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = ((x >= lo) & (x <= hi)).astype(x.dtype)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes differ {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    mask_a = take_a.astype(a.data.dtype)
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (g * mask_a, g * (1.0 - mask_a)),
    )


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ {[t.shape for t in tensors]}")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), back)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]`` (embedding lookup)."""
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_rows: table {table.shape}, index {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for table with {n} rows")

    def back(g):
        out = np.zeros(table.shape, dtype=table.data.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), back)


# ---------------------------------------------------------------- reductions
# Reductions accumulate in float64 and cast the result back to float32.


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    dt = a.data.dtype
    out = a.data.sum(axis=axis, dtype=np.float64).astype(dt)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.full(shape, g, dtype=dt),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(dt),)

    return _make(out, (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    dt = a.data.dtype
    out = (a.data.sum(axis=axis, dtype=np.float64) / n).astype(dt)
    shape = a.shape

    def back(g):
        g = g / dt.type(n)
        if axis is None:
            return (np.full(shape, g, dtype=dt),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(dt),)

    return _make(out, (a,), back)


def mse(pred: Tensor, target) -> Tensor:
    """Mean over rows of the squared Euclidean error ``mean_i ||pred_i - target_i||^2``."""
    dt = pred.data.dtype
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=dt)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.data - target
    rows = pred.shape[0] if pred.data.ndim > 1 else 1
    out = dt.type(np.square(diff, dtype=np.float64).sum() / rows)
    k = dt.type(2.0 / rows)
    return _make(np.asarray(out), (pred,), lambda g: (g * k * diff,))


def gaussian_logprob(sample, mean_: Tensor, std) -> Tensor:
    """Row-wise isotropic Gaussian log-density.

    ``sample`` is a constant ``(B, d)`` array, ``mean_`` a ``(B, d)`` tensor and
    ``std`` a positive scalar or a ``(B,)`` array of per-row scales. Returns
    shape ``(B,)``.
    """
    dt = mean_.data.dtype
    x = np.asarray(sample, dtype=dt)
    if x.shape != mean_.shape or x.ndim != 2:
        raise ShapeError(f"gaussian_logprob: sample {x.shape} vs mean {mean_.shape}")
    s = np.broadcast_to(np.asarray(std, dtype=np.float64), (x.shape[0],))
    if np.any(s <= 0):
        raise ValueError("gaussian_logprob needs std > 0")
    d = x.shape[1]
    diff = x.astype(np.float64) - mean_.data
    var = s * s
    out = (-0.5 * d * (_LOG_2PI + np.log(var)) - (diff * diff).sum(axis=1) / (2.0 * var)).astype(dt)
    dmean = (diff / var[:, None]).astype(dt)
    return _make(out, (mean_,), lambda g: (g[:, None] * dmean,))


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            grads[pid] = pg if pid not in grads else grads[pid] + pg


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Ordered name -> Tensor mapping of trainable parameters."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state(self, state) -> None:
        if list(state) != list(self._params):
            raise KeyError("parameter names do not match the store")
        for k, v in state.items():
            p = self._params[k]
            arr = np.asarray(v, dtype=DTYPE)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self._params.values()]))


@dataclass
class AdamState:
    """Decoupled-weight-decay Adam (AdamW) state."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        f = p.data.dtype.type
        m *= f(b1)
        m += f(1.0 - b1) * g
        v *= f(b2)
        v += f(1.0 - b2) * (g * g)
        update = (m / f(c1)) / (np.sqrt(v / f(c2)) + f(state.eps))
        if state.weight_decay:
            p.data *= f(1.0 - state.lr * state.weight_decay)
        p.data -= f(state.lr) * update
        p.grad = None


def finite_diff_check(
    params: ParamStore,
    loss_fn: Callable[[], Tensor],
    n_coords: int = 32,
    h: float = 1e-3,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> float:
    """Max relative error between autodiff and central differences.

    Both sides run the same graph under ``precision(dtype)``; at float32 the
    central difference alone carries ~1e-4 rounding noise for h = 1e-3, so
    the default evaluates in float64. Parameters are restored afterwards.
    """
    rng = rng or np.random.default_rng(0)
    saved = {k: p.data for k, p in params.items()}
    try:
        for p in params._params.values():
            p.data = p.data.astype(dtype)
        with precision(dtype):
            params.zero_grad()
            backward(loss_fn())
            analytic = {
                k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()
            }
            params.zero_grad()

            names = list(params)
            sizes = np.array([params[k].size for k in names])
            total = int(sizes.sum())
            picks = np.sort(rng.choice(total, size=min(n_coords, total), replace=False))
            offsets = np.concatenate([[0], np.cumsum(sizes)])

            worst = 0.0
            for fid in picks:
                which = int(np.searchsorted(offsets, fid, side="right") - 1)
                name, local = names[which], int(fid - offsets[which])
                flat = params[name].data.reshape(-1)
                orig = flat[local]
                flat[local] = orig + h
                up = float(loss_fn().data)
                flat[local] = orig - h
                down = float(loss_fn().data)
                flat[local] = orig
                numeric = (up - down) / (2 * h)
                a = float(analytic[name].reshape(-1)[local])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    finally:
        for k, p in params.items():
            p.data = saved[k]
            p.grad = None
    return worst
