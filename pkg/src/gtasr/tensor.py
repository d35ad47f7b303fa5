"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every value is a :class:`Tensor` wrapping a numpy array (float32 by default).
Operations on tensors that require gradients record a :class:`Node`; calling
:func:`backward` on a scalar loss walks the recorded graph in reverse
topological order (the :class:`Tape`) and accumulates ``.grad`` on leaves.

Broadcasting is deliberately limited to scalar-vs-tensor; explicit
:func:`broadcast_to` covers the few places where a reduced axis must be
re-expanded.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

SQRT_EPS = 1e-12

_state = {"dtype": np.float32}


class TapeError(RuntimeError):
    """Raised on misuse of the differentiation tape."""


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    """Temporarily change the dtype new tensors are created with.

    Used by the finite-difference oracle, which evaluates in float64.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


class Node:
    __slots__ = ("parents", "backward_fn", "consumed", "op")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Dense array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        """Constant copy sharing no tape node (not a tape op, unlike stop_gradient)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    # gradient of a scalar operand that was broadcast against a tensor
    if grad.shape == t.shape:
        return grad
    return np.asarray(grad.sum()).reshape(t.shape)


# ---------------------------------------------------------------- elementwise

_UNARY = {"abs", "square", "sqrt_eps", "silu", "neg"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply an elementwise operation.

    Binary operands must have equal shapes unless one of them is a scalar.
    """
    a = as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _unary(op, a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"{op} needs two operands")
    b = as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if _is_scalar(a) and a.shape != b.shape:
        ad = ad.reshape(())
    if _is_scalar(b) and a.shape != b.shape:
        bd = bd.reshape(())

    if op == "add":
        out = ad + bd

        def bw(g):
            return _reduce_to(g, a), _reduce_to(g, b)

    elif op == "sub":
        out = ad - bd

        def bw(g):
            return _reduce_to(g, a), _reduce_to(-g, b)

    elif op == "mul":
        out = ad * bd

        def bw(g):
            return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    else:
        out = ad / bd

        def bw(g):
            return _reduce_to(g / bd, a), _reduce_to(-g * ad / (bd * bd), b)

    return _make(np.asarray(out), op, (a, b), bw)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "abs":
        out = np.abs(x)

        def bw(g):
            return (g * np.sign(x),)

    elif op == "square":
        out = x * x

        def bw(g):
            return (2 * g * x,)

    elif op == "sqrt_eps":
        out = np.sqrt(x + SQRT_EPS)

        def bw(g):
            return (g * 0.5 / out,)

    elif op == "silu":
        sig = expit(x)
        out = x * sig

        def bw(g):
            return (g * (sig * (1 + x * (1 - sig))),)

    else:
        out = -x

        def bw(g):
            return (-g,)

    return _make(np.asarray(out, dtype=np.result_type(x)), op, (a,), bw)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def abs_(a) -> Tensor:
    return elementwise("abs", a)


def square(a) -> Tensor:
    return elementwise("square", a)


def sqrt_eps(a) -> Tensor:
    return elementwise("sqrt_eps", a)


def silu(a) -> Tensor:
    return elementwise("silu", a)


# ------------------------------------------------------------------ reductions


def reduce(op: str, a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    """Reduce with ``sum``, ``mean`` or ``l1_mean`` (mean of absolute values).

    With ``axis=None`` the result is a scalar.
    """
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("cannot reduce an empty tensor")
    if op == "l1_mean":
        return reduce("mean", abs_(a), axis=axis, keepdims=keepdims)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    x = a.data
    axes = tuple(range(x.ndim)) if axis is None else ((axis,) if isinstance(axis, int) else tuple(axis))
    axes = tuple(ax % x.ndim for ax in axes)
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    out = x.sum(axis=axes, keepdims=keepdims)
    if op == "mean":
        out = out / count

    def bw(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        g = np.broadcast_to(g, x.shape)
        if op == "mean":
            g = g / count
        return (np.array(g, dtype=np.result_type(x, g)),)

    return _make(np.asarray(out, dtype=x.dtype), op, (a,), bw)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return reduce("sum", a, axis, keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return reduce("mean", a, axis, keepdims)


def l1_mean(a) -> Tensor:
    return reduce("l1_mean", a)


# --------------------------------------------------------------- shape plumbing


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    """Expand size-1 axes of ``a`` to ``shape``; backward sums them back."""
    a = as_tensor(a)
    if len(shape) != a.data.ndim:
        raise ValueError(f"broadcast_to needs equal rank: {a.shape} -> {shape}")
    expanded = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    for i in expanded:
        if a.shape[i] != 1:
            raise ValueError(f"cannot broadcast {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        return (g.sum(axis=expanded, keepdims=True) if expanded else g,)

    return _make(out, "broadcast_to", (a,), bw)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(src),)

    return _make(out, "reshape", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", ts, bw)


def upsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an NCHW tensor."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    out = a.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, "upsample_nearest", (a,), bw)


def stop_gradient(a) -> Tensor:
    """Identity forward; the backward rule sends exactly zero into ``a``."""
    a = as_tensor(a)

    def bw(g):
        return (np.zeros_like(a.data),)

    return _make(a.data.copy(), "stop_gradient", (a,), bw)


# ---------------------------------------------------------------------- conv2d


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # rows ordered (c, i, j) to match a flattened OIHW kernel; columns (n, ho, wo)
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, pad: tuple[int, int, int, int]):
    """Raw cross-correlation; ``pad`` is (top, bottom, left, right). Returns (out, cols)."""
    n = x.shape[0]
    o, c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), pad[:2], pad[2:])) if any(pad) else x
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    dtype = np.result_type(x, w)
    cols = _im2col(xp.astype(dtype, copy=False), kh, kw, stride, ho, wo)
    out = (w.reshape(o, -1).astype(dtype, copy=False) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x, w, stride: int = 1, padding: int | tuple[int, int] = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel (zero padding).

    ``padding`` is one value for both axes or a ``(rows, cols)`` pair.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    p, q = (padding, padding) if isinstance(padding, int) else padding
    if kh > h + 2 * p or kw > wd + 2 * q:
        raise ValueError("kernel larger than padded input")
    out, cols = _correlate(x.data, w.data, stride, (p, p, q, q))
    ho, wo = out.shape[2:]
    wdata = w.data

    def bw(g):
        gw = None
        if w.requires_grad:
            gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
            gw = (gm @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # transposed convolution: dilate by the stride, correlate with the flipped kernel
            if stride > 1:
                gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            extra_h = h + 2 * p - ((ho - 1) * stride + kh)
            extra_w = wd + 2 * q - ((wo - 1) * stride + kw)
            flipped = np.ascontiguousarray(wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            full, _ = _correlate(gd, flipped, 1, (kh - 1, kh - 1 + extra_h, kw - 1, kw - 1 + extra_w))
            gx = full[:, :, p:p + h, q:q + wd]
        return gx, gw

    return _make(out, "conv2d", (x, w), bw)


def add_bias(x, b) -> Tensor:
    """Add a per-channel bias of shape (C,) to an NCHW tensor."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValueError(f"bias shape {b.shape} does not match channels of {x.shape}")
    out = x.data + b.data.reshape(1, -1, 1, 1)

    def bw(g):
        return g, g.sum(axis=(0, 2, 3))

    return _make(out, "add_bias", (x, b), bw)


# -------------------------------------------------------------------- backward


class Tape:
    """Recorded operations reachable from a loss, in topological order."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        self.order = order

    def __len__(self) -> int:
        return len(self.order)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar ``loss`` into every leaf that requires grad.

    Returns a map from leaf tensor to its gradient. A graph can be consumed once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape(loss)
    for t in tape.order:
        if t.node is not None and t.node.consumed:
            raise TapeError("graph has already been consumed by a backward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if t.node is None:
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g if t.grad is None else t.grad + g
            leaves[t] = t.grad
            continue
        t.node.consumed = True
        if g is None:
            g = np.zeros_like(t.data)
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return leaves


# ---------------------------------------------------- finite-difference oracle


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is called with ``x`` itself (its data is perturbed in place and
    restored), so closures over model parameters work. Both routes evaluate in
    float64. With ``max_coords`` only a seeded random subset of coordinates is
    probed.
    """
    original = x.data
    prev_grad, prev_rg = x.grad, x.requires_grad
    try:
        with precision(np.float64):
            x.data = original.astype(np.float64)
            x.requires_grad = True
            x.grad = None
            loss = f(x)
            backward(loss)
            g_auto = np.zeros_like(x.data) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
            flat = x.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and max_coords < flat.size:
                idx = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)
            worst = 0.0
            for i in idx:
                keep = flat[i]
                flat[i] = keep + h
                fp = float(f(x).data.reshape(-1)[0])
                flat[i] = keep - h
                fm = float(f(x).data.reshape(-1)[0])
                flat[i] = keep
                g_fd = (fp - fm) / (2 * h)
                err = abs(g_auto.reshape(-1)[i] - g_fd) / (abs(g_fd) + 1e-8)
                worst = max(worst, err)
    finally:
        x.data = original
        x.grad = prev_grad
        x.requires_grad = prev_rg
    return worst
