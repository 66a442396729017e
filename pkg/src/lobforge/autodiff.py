"""Reverse-mode automatic differentiation on dense numpy arrays.

A Tensor wraps a float64 ndarray and remembers how it was produced, so
calling backward() on a scalar loss accumulates gradients into every
reachable tensor with requires_grad=True. Every forward result is checked
for NaN/Inf and trips an InvariantError immediately, which keeps training
divergence diagnosable at the op that produced it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import InvariantError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the reverse-mode graph; data is always float64."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- graph plumbing -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise InvariantError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

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

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


# -- primitive ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make("add", a.data + b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make("sub", a.data - b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make("mul", a.data * b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make("matmul", a.data @ b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid(x: Tensor) -> Tensor:
    # expit-style split avoids overflow in exp for large |x|
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _make("sigmoid", y, (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * y * (1.0 - y))

    out._backward = backward if out.requires_grad else None
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _make("tanh", y, (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * (1.0 - y * y))

    out._backward = backward if out.requires_grad else None
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = _make("relu", y, (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * (x.data > 0.0))

    out._backward = backward if out.requires_grad else None
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make("softmax", y, (x,))

    def backward():
        if x.requires_grad:
            g = out.grad
            x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts)
    sizes = [t.data.shape[axis] for t in ts]

    def backward():
        g = out.grad
        start = 0
        for t, size in zip(ts, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + size)
                t._accumulate(g[tuple(idx)])
            start += size

    out._backward = backward if out.requires_grad else None
    return out


def take(x: Tensor, idx) -> Tensor:
    out = _make("take", x.data[idx], (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x._accumulate(g)

    out._backward = backward if out.requires_grad else None
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make("reshape", x.data.reshape(shape), (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad.reshape(x.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = _make("swapaxes", np.swapaxes(x.data, a, b), (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(np.swapaxes(out.grad, a, b))

    out._backward = backward if out.requires_grad else None
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,))
    count = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])

    def backward():
        if x.requires_grad:
            g = out.grad
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.data.shape) / count)

    out._backward = backward if out.requires_grad else None
    return out


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,))

    def backward():
        if x.requires_grad:
            g = out.grad
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    out._backward = backward if out.requires_grad else None
    return out


def pow_const(x: Tensor, p: float) -> Tensor:
    y = x.data**p
    out = _make("pow", y, (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * p * x.data ** (p - 1.0))

    out._backward = backward if out.requires_grad else None
    return out


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup into a learnable table; idx is an integer array."""
    idx = np.asarray(idx)
    out = _make("embedding", table.data[idx], (table,))

    def backward():
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            table._accumulate(g)

    out._backward = backward if out.requires_grad else None
    return out


def moving_avg(x: Tensor, window: int) -> Tensor:
    """Centered moving average over axis -2 with edge-replicate padding.

    Each window subtracts its own center sample before averaging and adds
    it back, which is algebraically a no-op but makes constant inputs map
    to themselves exactly in floating point.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"moving_avg window must be odd and >= 1, got {window}")
    d = x.data
    if d.ndim < 2:
        raise ValueError("moving_avg expects a (..., L, d) array")
    L = d.shape[-2]
    half = (window - 1) // 2
    if window == 1:
        y = d.copy()
    else:
        first = np.repeat(d[..., :1, :], half, axis=-2)
        last = np.repeat(d[..., -1:, :], half, axis=-2)
        padded = np.concatenate([first, d, last], axis=-2)
        wins = np.lib.stride_tricks.sliding_window_view(padded, window, axis=-2)
        # wins shape (..., L, d, window); center sample of window i is x[..., i, :]
        y = d + (wins - d[..., :, :, None]).mean(axis=-1)
    out = _make("moving_avg", y, (x,))

    def backward():
        if not x.requires_grad:
            return
        g = out.grad
        if window == 1:
            x._accumulate(g.copy())
            return
        gp = np.zeros(d.shape[:-2] + (L + window - 1, d.shape[-1]))
        gw = g / window
        for j in range(window):
            gp[..., j : j + L, :] += gw
        gx = gp[..., half : half + L, :].copy()
        gx[..., 0, :] += gp[..., :half, :].sum(axis=-2)
        gx[..., L - 1, :] += gp[..., half + L :, :].sum(axis=-2)
        x._accumulate(gx)

    out._backward = backward if out.requires_grad else None
    return out


# -- losses ---------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    t = _as_tensor(target)
    if pred.shape != t.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {t.shape}")
    if pred.data.size == 0:
        raise ValueError("mse_loss on empty input")
    diff = sub(pred, t)
    return mean(mul(diff, diff))


def mae_loss(pred: Tensor, target) -> Tensor:
    t = _as_tensor(target)
    if pred.shape != t.shape:
        raise ValueError(f"mae_loss shape mismatch: {pred.shape} vs {t.shape}")
    d = pred.data - t.data
    out = _make("mae", np.array(np.abs(d).mean()), (pred,))

    def backward():
        if pred.requires_grad:
            pred._accumulate(out.grad * np.sign(d) / d.size)

    out._backward = backward if out.requires_grad else None
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Fused with log-softmax for stability; labels are integer class codes.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    out = _make("cross_entropy", np.array(nll.mean()), (logits,))

    def backward():
        if logits.requires_grad:
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(out.grad * p / n)

    out._backward = backward if out.requires_grad else None
    return out


# -- parameters and optimizer ----------------------------------------------


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adam with bias-corrected first/second moments; updates in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise InvariantError(f"gradient shape mismatch for '{k}'")
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
