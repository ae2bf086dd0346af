"""Dense float64 arrays with reverse-mode automatic differentiation.

Every activation and parameter in the model stack is a :class:`Tensor`.
Ops build a computation graph by storing parent links and a backward
closure on each result; :func:`backward` traces the graph into a
:class:`Tape` (a topologically ordered op-record list) and walks it once
in reverse. Gradients accumulate into the ``grad`` buffer of
``requires_grad`` leaves; callers (the trainer) own zeroing them.

Shape discipline is strict: binary elementwise ops demand identical
shapes and there is no implicit broadcasting. The only sanctioned
broadcast-like ops are :func:`scale` (scalar multiple), :func:`add_bias`
(explicit trailing-shape bias add) and :func:`tile`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A contiguous row-major float64 array, optionally on the autodiff graph.

    ``op`` names the operation that produced this tensor ("leaf" for
    inputs/parameters); ``parents`` and ``_backward`` are populated only
    when gradients flow through the node. ``grad`` is allocated eagerly
    (zeros) for ``requires_grad`` leaves and accumulated by backward().
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Optional[Callable] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if (self.requires_grad and not parents) else None
        self.op = op
        self.parents = parents
        self._backward = backward

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat it as read-only."""
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def _result(data: np.ndarray, parents: tuple, op: str, backward: Callable) -> Tensor:
    """Wrap an op result, recording graph edges only when gradients can flow."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar; the one blessed broadcast."""
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    x = a.data
    u = _GELU_C0 * (x + _GELU_C1 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _result(out, (a,), "gelu", back)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for stability at large |x|
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    """Natural log; caller guarantees positive input (the loss clips first)."""
    x = a.data
    return _result(np.log(x), (a,), "log", lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only strictly inside the band."""
    x = a.data
    mask = (x > lo) & (x < hi)
    return _result(np.clip(x, lo, hi), (a,), "clip", lambda g: (g * mask,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; only the trainer calls this, and only in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


# -- matmul and convolutions ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands are 2-D, or they are stacks with identical
    leading extents (no batch broadcasting).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ, {a.shape} vs {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def back(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _result(ad @ bd, (a, b), "matmul", back)


def _conv_geometry(H: int, W: int, k: int, stride: int, padding: str) -> tuple:
    if k < 1 or stride < 1:
        raise ValueError(f"conv: kernel ({k}) and stride ({stride}) must be >= 1")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv: padding must be 'same' or 'valid', got {padding!r}")
    p = k // 2 if padding == "same" else 0
    if H + 2 * p < k or W + 2 * p < k:
        raise ShapeError(
            f"conv: kernel {k}x{k} larger than padded input {H + 2 * p}x{W + 2 * p}")
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    return p, Ho, Wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """NHWC convolution: x is B,H,W,Cin and w is k,k,Cin,Cout."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D x and w, got {x.shape} and {w.shape}")
    B, H, W, Cin = x.shape
    k, k2, wc, Cout = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {w.shape}")
    if wc != Cin:
        raise ShapeError(f"conv2d: weight expects {wc} input channels, x has {Cin}")
    p, Ho, Wo = _conv_geometry(H, W, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    wd = w.data
    out = np.zeros((B, Ho, Wo, Cout))
    # one (Cin -> Cout) matmul per kernel offset; k is tiny so this is fast
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di:di + stride * (Ho - 1) + 1:stride,
                       dj:dj + stride * (Wo - 1) + 1:stride, :]
            out += patch @ wd[di, dj]

    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for di in range(k):
            for dj in range(k):
                si = slice(di, di + stride * (Ho - 1) + 1, stride)
                sj = slice(dj, dj + stride * (Wo - 1) + 1, stride)
                dxp[:, si, sj, :] += g @ wd[di, dj].T
                dw[di, dj] = np.tensordot(xp[:, si, sj, :], g, axes=([0, 1, 2], [0, 1, 2]))
        dx = dxp[:, p:p + H, p:p + W, :] if p else dxp
        return (dx, dw)

    return _result(out, (x, w), "conv2d", back)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel convolution: x is B,H,W,C and w is k,k,C. No channel mixing."""
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expected 4-D x and 3-D w, got {x.shape} and {w.shape}")
    B, H, W, C = x.shape
    k, k2, wc = w.shape
    if k != k2:
        raise ShapeError(f"depthwise_conv2d: kernel must be square, got {w.shape}")
    if wc != C:
        raise ShapeError(f"depthwise_conv2d: weight has {wc} channels, x has {C}")
    p, Ho, Wo = _conv_geometry(H, W, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    wd = w.data
    out = np.zeros((B, Ho, Wo, C))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di:di + stride * (Ho - 1) + 1:stride,
                       dj:dj + stride * (Wo - 1) + 1:stride, :]
            out += patch * wd[di, dj]

    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for di in range(k):
            for dj in range(k):
                si = slice(di, di + stride * (Ho - 1) + 1, stride)
                sj = slice(dj, dj + stride * (Wo - 1) + 1, stride)
                dxp[:, si, sj, :] += g * wd[di, dj]
                dw[di, dj] = (xp[:, si, sj, :] * g).sum(axis=(0, 1, 2))
        dx = dxp[:, p:p + H, p:p + W, :] if p else dxp
        return (dx, dw)

    return _result(out, (x, w), "depthwise_conv2d", back)


# -- normalization and softmax ----------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; slices sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), "softmax", back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({D},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        dxhat = g * gamma.data
        dgamma = (g * xhat).reshape(-1, D).sum(axis=0)
        dbeta = g.reshape(-1, D).sum(axis=0)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), "layer_norm", back)


# -- structural ops ----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range for rank {nd}")
    axis = axis % nd
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != nd or [e for i, e in enumerate(other) if i != axis] != \
                [e for i, e in enumerate(ref) if i != axis]:
            raise ShapeError(
                f"concat: non-axis extents differ, {tensors[0].shape} vs {t.shape} on axis {axis}")
    extents = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.split(g, np.cumsum(extents)[:-1], axis=axis))

    return _result(out, tuple(tensors), "concat", back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape) or not shape:
        raise ShapeError(f"reshape: extents must be >= 1, got {shape}")
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} ({x.size} elements) into {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation of rank {x.ndim}")
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                   lambda g: (g.transpose(inv),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"slice_axis: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    extent = x.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice_axis: [{start}:{stop}] invalid for extent {extent}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))

    def back(g):
        dx = np.zeros_like(x.data)
        dx[idx] = g
        return (dx,)

    return _result(x.data[idx].copy(), (x,), "slice", back)


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        out = np.array([x.data.sum()])
        return _result(out, (x,), "sum", lambda g: (np.full_like(x.data, g[0]),))
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.shape}")
    ax = axis % x.ndim
    reduced = x.shape[:ax] + x.shape[ax + 1:]  # () promotes to (1,) in the result

    def back(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(reduced), ax), x.shape).copy(),)

    return _result(x.data.sum(axis=ax), (x,), "sum", back)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = x.size
        out = np.array([x.data.mean()])
        return _result(out, (x,), "mean", lambda g: (np.full_like(x.data, g[0] / n),))
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    ax = axis % x.ndim
    n = x.shape[ax]
    reduced = x.shape[:ax] + x.shape[ax + 1:]

    def back(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(reduced) / n, ax), x.shape).copy(),)

    return _result(x.data.mean(axis=ax), (x,), "mean", back)


def tile(x: Tensor, reps: Sequence[int]) -> Tensor:
    """Explicit np.tile; gradient sums over the repeated blocks."""
    reps = tuple(int(r) for r in reps)
    if len(reps) != x.ndim or any(r < 1 for r in reps):
        raise ShapeError(f"tile: reps {reps} must match rank {x.ndim} with entries >= 1")
    shp = x.shape

    def back(g):
        interleaved = g.reshape(tuple(v for pair in zip(reps, shp) for v in pair))
        return (interleaved.sum(axis=tuple(range(0, 2 * len(shp), 2))),)

    return _result(np.tile(x.data, reps), (x,), "tile", back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a trailing-shape tensor to every leading slice of x.

    b.shape must equal x.shape[-b.ndim:]; the gradient for b sums over the
    leading axes. This is the explicit counterpart of numpy broadcasting.
    """
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} is not a suffix of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def back(g):
        return (g, g.sum(axis=lead) if lead else g)

    return _result(x.data + b.data, (x, b), "add_bias", back)


def mul_bias(x: Tensor, m: Tensor) -> Tensor:
    """Multiply every leading slice of x by a trailing-shape tensor.

    Same suffix rule as add_bias; used for per-channel scaling where m has
    shape (C,) and x is (..., C).
    """
    if m.ndim > x.ndim or x.shape[x.ndim - m.ndim:] != m.shape:
        raise ShapeError(f"mul_bias: factor shape {m.shape} is not a suffix of {x.shape}")
    lead = tuple(range(x.ndim - m.ndim))
    xd, md = x.data, m.data

    def back(g):
        gm = g * xd
        return (g * md, gm.sum(axis=lead) if lead else gm)

    return _result(xd * md, (x, m), "mul_bias", back)


# -- tape and backward --------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered op records reachable from a root tensor.

    records[i].parents all appear at indices < i. A backward pass walks
    the records exactly once, in reverse.
    """

    records: list

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack: list = [(root, False)]
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
                stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls keep accumulating; the trainer zeroes grads between
    steps. Intermediate gradients live in a scratch map and are freed as
    the walk passes them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.trace(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.parents:
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                slot = grads.get(id(parent))
                if slot is None:
                    grads[id(parent)] = pg.reshape(parent.shape).astype(np.float64, copy=True)
                else:
                    slot += pg.reshape(parent.shape)
        elif node.requires_grad:
            node.grad += g


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_elements: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"max_rel_err={self.max_rel_err:.3e} over {self.n_elements} elements [{status}]"


class NondeterministicFunctionError(RuntimeError):
    """Two forward passes disagreed; finite differences would be meaningless."""


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    rel_err = |a - n| / max(1, |a|, |n|) per element of x.
    """
    with no_grad():
        y1 = f(Tensor(x.data.copy())).data
        y2 = f(Tensor(x.data.copy())).data
    if not np.array_equal(y1, y2):
        raise NondeterministicFunctionError(
            "two forward passes disagree; disable dropout/randomness before grad_check")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x.data)
    base = x.data.copy()
    with no_grad():
        flat = base.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base)).item()
            flat[i] = orig - h
            fm = f(Tensor(base)).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    max_err = float(rel.max())
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol, n_elements=x.size)
