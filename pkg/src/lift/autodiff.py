"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
topologically sorts the tape and accumulates gradients into every tensor
created with requires_grad=True.  Everything runs in float64 so analytic
gradients can be checked against central differences tightly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
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
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward_fn is None:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward_fn for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Elementwise and arithmetic ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return _make(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gelu; smooth everywhere, so finite differences
    agree with the analytic gradient tightly."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accumulate(a, g * da)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# Reductions, indexing, shaping


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(np.asarray(a.data.sum()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def bw(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g / n, a.data.shape))

    return _make(np.asarray(a.data.mean()), (a,), bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad or a._backward_fn:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _make(a.data[idx], (a,), bw)


def take_at(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather a[rows[i], cols[i]] into a vector."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad or a._backward_fn:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, cols), g)
            _accumulate(a, full)

    return _make(a.data[rows, cols], (a,), bw)


def segment_sum(a: Tensor, seg: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of a into n_segments buckets given per-row segment ids."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g[seg])

    return _make(out, (a,), bw)


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad or a._backward_fn:
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            _accumulate(a, full)

    return _make(a.data[..., start:stop], (a,), bw)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[-1] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=-1)

    def bw(g: np.ndarray) -> None:
        off = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[..., off : off + w])
            off += w

    return _make(data, tuple(parts), bw)


# ---------------------------------------------------------------------------
# Rows-of-logits ops


def softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _make(s, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g: np.ndarray) -> None:
        soft = np.exp(out)
        _accumulate(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g: np.ndarray) -> None:
        axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=axes))
        _accumulate(bias, g.sum(axis=axes))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# Optimizer and gradient checking


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_probes: int = 10_000,
) -> dict[str, float]:
    """Compare analytic gradients with central differences.

    loss_fn must be a deterministic closure over params.  When the total
    element count exceeds max_probes, a deterministic evenly-spaced subset
    is probed.  Returns {'max_rel_err': ..., 'n_probes': ...}; relative
    error uses max(1, |analytic|, |numeric|) as the denominator.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    flat: list[tuple[int, tuple[int, ...]]] = []
    for pi, p in enumerate(params):
        for idx in np.ndindex(p.data.shape):
            flat.append((pi, idx))
    if len(flat) > max_probes:
        stride = len(flat) / max_probes
        flat = [flat[int(i * stride)] for i in range(max_probes)]

    worst = 0.0
    for pi, idx in flat:
        p = params[pi]
        orig = p.data[idx]
        p.data[idx] = orig + step
        with no_grad():
            f_plus = loss_fn().item()
        p.data[idx] = orig - step
        with no_grad():
            f_minus = loss_fn().item()
        p.data[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[pi][idx])
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, rel)
    return {"max_rel_err": worst, "n_probes": float(len(flat))}
