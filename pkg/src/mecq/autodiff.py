"""Tape-based reverse-mode differentiation over dense numpy arrays.

Ops record onto the innermost active Tape (a context manager) whenever at
least one input has requires_grad set. backward() walks the tape in
reverse and returns a gradient map for the leaves. Gradients are cast to
each input's dtype on accumulation, so float32 parameters get float32
gradients even when part of the graph runs in float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

_STATE = threading.local()


def _stack() -> list:
    s = getattr(_STATE, "stack", None)
    if s is None:
        s = _STATE.stack = []
    return s


class Tensor:
    """A dense array plus a grad-tracking flag.

    node points at the tape entry that produced this tensor (None for
    leaves such as parameters and constants).
    """

    __slots__ = ("values", "requires_grad", "node")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ValidationError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def constant(values, dtype=None) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=False)


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered op record for one differentiable computation.

    Use as a context manager; ops executed inside record here. Nested
    tapes are allowed, recording goes to the innermost one only.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False


def _record(op: str, inputs, out_values, vjp) -> Tensor:
    stack = _stack()
    tape = stack[-1] if stack else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=track)
    if track:
        node = Node(op, tuple(inputs), out, vjp)
        out.node = node
        tape.nodes.append(node)
    return out


class GradientMap:
    """Gradients keyed by leaf Tensor; absent leaves read as exact zeros."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def _put(self, leaf: Tensor, g: np.ndarray):
        k = id(leaf)
        if k in self._grads:
            self._grads[k] = self._grads[k] + g
        else:
            self._grads[k] = g
            self._leaves[k] = leaf

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        g = self._grads.get(id(leaf))
        if g is None:
            return np.zeros_like(leaf.values)
        return g

    def get(self, leaf: Tensor, default=None):
        return self._grads.get(id(leaf), default)

    def items(self):
        return [(self._leaves[k], g) for k, g in self._grads.items()]

    def __len__(self):
        return len(self._grads)


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar loss recorded on this tape.

    Returns gradients for every requires_grad leaf the loss depends on.
    Gradient shapes are checked against input shapes and cast to each
    input's dtype before accumulation.
    """
    if not isinstance(loss, Tensor) or loss.values.size != 1:
        raise ValidationError("backward needs a scalar loss tensor")
    if loss.node is None or loss.node not in tape.nodes:
        raise ValidationError("loss was not recorded on this tape")

    interior: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves = GradientMap()

    for node in reversed(tape.nodes):
        g = interior.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        if len(input_grads) != len(node.inputs):
            raise ValidationError(
                f"op '{node.op}': backward returned {len(input_grads)} gradients"
                f" for {len(node.inputs)} inputs"
            )
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            ig = np.asarray(ig)
            if ig.shape != t.values.shape:
                raise ValidationError(
                    f"op '{node.op}': backward produced gradient of shape {ig.shape}"
                    f" for input of shape {t.values.shape}"
                )
            ig = ig.astype(t.values.dtype, copy=False)
            if t.node is None:
                leaves._put(t, ig)
            else:
                k = id(t)
                interior[k] = ig if k not in interior else interior[k] + ig
    return leaves


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# core ops


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2:
        raise ValidationError(f"matmul needs 2-d operands, got {av.shape} and {bv.shape}")
    left = av.T if transpose_a else av
    right = bv.T if transpose_b else bv
    if left.shape[1] != right.shape[0]:
        raise ValidationError(f"matmul inner dimensions differ: {left.shape} x {right.shape}")
    out = left @ right

    def vjp(g):
        if not transpose_a and not transpose_b:
            return g @ bv.T, av.T @ g
        if not transpose_a and transpose_b:
            return g @ bv, g.T @ av
        if transpose_a and not transpose_b:
            return bv @ g.T, av @ g
        return (g @ bv).T, (av @ g).T

    return _record("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av + bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _record("add", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record("mul", (a, b), out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    out = np.maximum(xv, 0)

    def vjp(g):
        return (g * (xv > 0),)

    return _record("relu", (x,), out, vjp)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    f = float(factor)
    out = x.values * f

    def vjp(g):
        return (g * f,)

    return _record("scale", (x,), out, vjp)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    axes = _axis_tuple(axis, xv.ndim)
    out = xv.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _record("reduce_sum", (x,), out, vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    axes = _axis_tuple(axis, xv.ndim)
    count = int(np.prod([xv.shape[a] for a in axes])) if axes else 1
    out = xv.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, xv.shape).copy(),)

    return _record("reduce_mean", (x,), out, vjp)


def softmax_logsum(x, axis: int = 0) -> Tensor:
    """Numerically stable log-softmax along one axis."""
    x = as_tensor(x)
    xv = x.values
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("softmax_logsum", (x,), out, vjp)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input and (F, C, kh, kw) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValidationError(f"conv2d needs 4-d input and kernel, got {xv.shape} and {wv.shape}")
    n, c, h, width = xv.shape
    f, cw, kh, kw = wv.shape
    if c != cw:
        raise ValidationError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv2d stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, width + 2 * padding
    if hp < kh or wp < kw:
        raise ValidationError("conv2d kernel larger than padded input")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    # windows: (n, c, oh, ow, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,fcij->nfhw", win, wv)
    oh, ow = out.shape[2], out.shape[3]

    def vjp(g):
        gw = np.einsum("nchwij,nfhw->fcij", win, g)
        gx = np.zeros_like(xp)
        # scatter each kernel tap's contribution back onto the padded input
        for i in range(kh):
            for j in range(kw):
                # (n,f,oh,ow) x (f,c) -> (n,c,oh,ow)
                piece = np.einsum("nfhw,fc->nchw", g, wv[:, :, i, j])
                gx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += piece
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + width]
        return gx, gw

    return _record("conv2d", (x, w), out, vjp)


# ---------------------------------------------------------------------------
# custom-gradient hook


def custom_gradient(forward_fn: Callable, backward_fn: Callable, name: Optional[str] = None):
    """Wrap a numpy forward and a hand-written backward into a taped op.

    forward_fn(*values, **params) -> ndarray
    backward_fn(grad, *values, **params) -> gradient per positional input
        (None to skip one); a bare array is accepted for single-input ops.

    The returned callable takes Tensors (or array-likes) plus keyword
    params and records like any built-in op.
    """
    op_name = name or getattr(forward_fn, "__name__", "custom_op")

    def op(*inputs, **params) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        values = tuple(t.values for t in tensors)
        out = np.asarray(forward_fn(*values, **params))

        def vjp(g):
            res = backward_fn(g, *values, **params)
            if not isinstance(res, tuple):
                res = (res,)
            return res

        return _record(op_name, tensors, out, vjp)

    return op


def _transpose_fwd(v):
    return v.T


def _transpose_bwd(g, v):
    return g.T


transpose = custom_gradient(_transpose_fwd, _transpose_bwd, name="transpose")


def _reshape_fwd(v, shape=None):
    return v.reshape(shape)


def _reshape_bwd(g, v, shape=None):
    return g.reshape(v.shape)


_reshape_op = custom_gradient(_reshape_fwd, _reshape_bwd, name="reshape")


def reshape(x, shape) -> Tensor:
    return _reshape_op(x, shape=tuple(shape))


OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "conv2d": conv2d,
    "softmax_logsum": softmax_logsum,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "scale": scale,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch one op by name; unknown kinds are rejected."""
    fn = OPS.get(kind)
    if fn is None:
        raise ValidationError(f"unknown op kind '{kind}'")
    return fn(*inputs, **params)
