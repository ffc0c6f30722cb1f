"""Reverse-mode automatic differentiation over numpy arrays.

Implements exactly the operator set the denoising network needs: 2D
convolution, 2x bilinear upsampling, pointwise nonlinearities, shape
rearrangement, and a mean-L1 loss. Graphs are built eagerly as ops run;
``Tensor.backward()`` sweeps the graph in reverse topological order and
accumulates gradients on every ``requires_grad`` ancestor. Gradients from
multiple uses of the same tensor add up.

Training and inference run in float32. Build float64 tensors when
verifying gradients against :func:`numeric_gradient`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (inference mode)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """Array node in the computation graph.

    ``data`` is a row-major numpy array. After ``backward()`` runs from a
    scalar loss, ``grad`` holds an array of identical shape on this tensor
    and on every ``requires_grad`` ancestor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``grad`` on all ``requires_grad`` ancestors of a scalar."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        # Iterative post-order DFS; graphs are shallow but can be wide.
        order: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                if parent._parents and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, 0))
            else:
                order.append(node)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise DimensionError(
                    f"{op}: operands differ on axis {axis}: {da} vs {db}"
                )
        raise DimensionError(f"{op}: operand ranks differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlate an NCHW input with OIKK weights, add per-channel bias.

    Zero padding; output spatial dims are floor((H + 2p - K)/stride) + 1.
    Uses an im2col GEMM, so memory scales with N*Hout*Wout*Cin*K*K.
    """
    if not isinstance(stride, int) or stride < 1:
        raise UsageError(f"conv2d: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise UsageError(f"conv2d: padding must be a non-negative int, got {padding!r}")
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4D NCHW, got {x.data.ndim}D")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weights must be 4D OIKK, got {weight.data.ndim}D")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if cin_w != cin:
        raise DimensionError(
            f"conv2d: input channels (axis 1) = {cin} does not match "
            f"weight input channels (axis 1) = {cin_w}"
        )
    if bias.data.shape != (cout,):
        raise DimensionError(
            f"conv2d: bias (axis 0) must have {cout} entries, got shape {bias.data.shape}"
        )
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(
            f"conv2d: kernel {k} does not fit padded input ({h + 2 * padding}, {w + 2 * padding})"
        )
    hout = (h + 2 * padding - k) // stride + 1
    wout = (w + 2 * padding - k) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n, hout * wout, cin * k * k)
    w2 = weight.data.reshape(cout, -1)
    out = cols @ w2.T
    out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, cout, hout, wout)

    def backward_fn(g: np.ndarray) -> None:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, hout * wout, cout)
        if bias.requires_grad:
            _acc(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))
            _acc(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, hout, wout, cin, k, k)
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + stride * hout:stride,
                        kj:kj + stride * wout:stride] += gcols[..., ki, kj]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            _acc(x, gxp)

    return _from_op(out, (x, weight, bias), backward_fn)


# ---------------------------------------------------------------------------
# bilinear 2x upsampling (separable, corners not aligned)


def _axis_slice(ndim: int, axis: int, s: slice) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # Output sample centers sit at (j + 0.5)/2 - 0.5 in input coordinates,
    # so even outputs blend 0.25*in[k-1] + 0.75*in[k] and odd outputs
    # 0.75*in[k] + 0.25*in[k+1], with edge clamping.
    nd = a.ndim
    n = a.shape[axis]
    first = a[_axis_slice(nd, axis, slice(0, 1))]
    last = a[_axis_slice(nd, axis, slice(n - 1, n))]
    left = np.concatenate([first, a[_axis_slice(nd, axis, slice(0, n - 1))]], axis=axis)
    right = np.concatenate([a[_axis_slice(nd, axis, slice(1, n))], last], axis=axis)
    shape = list(a.shape)
    shape[axis] = 2 * n
    out = np.empty(shape, dtype=a.dtype)
    out[_axis_slice(nd, axis, slice(0, None, 2))] = 0.25 * left + 0.75 * a
    out[_axis_slice(nd, axis, slice(1, None, 2))] = 0.75 * a + 0.25 * right
    return out


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    # Exact transpose of _upsample_axis, including the edge-clamp weights.
    nd = g.ndim
    n = g.shape[axis] // 2
    ge = g[_axis_slice(nd, axis, slice(0, None, 2))]
    go = g[_axis_slice(nd, axis, slice(1, None, 2))]
    out = 0.75 * (ge + go)
    if n > 1:
        out[_axis_slice(nd, axis, slice(0, n - 1))] += \
            0.25 * ge[_axis_slice(nd, axis, slice(1, n))]
        out[_axis_slice(nd, axis, slice(1, n))] += \
            0.25 * go[_axis_slice(nd, axis, slice(0, n - 1))]
    out[_axis_slice(nd, axis, slice(0, 1))] += 0.25 * ge[_axis_slice(nd, axis, slice(0, 1))]
    out[_axis_slice(nd, axis, slice(n - 1, n))] += 0.25 * go[_axis_slice(nd, axis, slice(n - 1, n))]
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of an NCHW tensor (corners not aligned)."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample2x: input must be 4D NCHW, got {x.data.ndim}D")
    out = _upsample_axis(_upsample_axis(x.data, 2), 3)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, _upsample_axis_adjoint(_upsample_axis_adjoint(g, 3), 2))

    return _from_op(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# pointwise ops


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, g * out * (1.0 - out))

    return _from_op(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, g * (x.data > 0))

    return _from_op(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    _check_same_shape("add", a, b)

    def backward_fn(g: np.ndarray) -> None:
        _acc(a, g)
        _acc(b, g)

    return _from_op(a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _check_same_shape("mul", a, b)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _acc(a, g * b.data)
        if b.requires_grad:
            _acc(b, g * a.data)

    return _from_op(a.data * b.data, (a, b), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    factor = float(factor)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, g * factor)

    return _from_op(x.data * factor, (x,), backward_fn)


def l1_loss(y_pred: Tensor, y_gt: Tensor) -> Tensor:
    """Mean absolute difference. Subgradient at exact ties is 0."""
    _check_same_shape("l1_loss", y_pred, y_gt)
    diff = y_pred.data - y_gt.data
    out = np.abs(diff).mean(dtype=diff.dtype)

    def backward_fn(g: np.ndarray) -> None:
        s = np.sign(diff) * (g / diff.size)
        if y_pred.requires_grad:
            _acc(y_pred, s)
        if y_gt.requires_grad:
            _acc(y_gt, -s)

    return _from_op(out, (y_pred, y_gt), backward_fn)


# ---------------------------------------------------------------------------
# shape rearrangement (pure index permutations)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, g.reshape(x.data.shape))

    return _from_op(data, (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, np.ascontiguousarray(g.transpose(inverse)))

    return _from_op(data, (x,), backward_fn)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows along axis 0. Repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise UsageError("take_rows: indices must be a 1D sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise UsageError(f"take_rows: index out of range for axis 0 of size {x.shape[0]}")
    data = x.data[idx]

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _acc(x, gx)

    return _from_op(data, (x,), backward_fn)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h-by-w spatial window of an NCHW tensor."""
    if x.data.ndim != 4:
        raise DimensionError(f"crop2d: input must be 4D NCHW, got {x.data.ndim}D")
    if h > x.shape[2] or w > x.shape[3]:
        raise DimensionError(
            f"crop2d: crop ({h}, {w}) exceeds input spatial dims {x.shape[2:]}"
        )
    data = np.ascontiguousarray(x.data[:, :, :h, :w])

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, :, :h, :w] = g
            _acc(x, gx)

    return _from_op(data, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along an axis; all other dims must agree."""
    if not tensors:
        raise UsageError("concat: need at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise DimensionError("concat: operand ranks differ")
        for ax, (da, db) in enumerate(zip(ref, t.shape)):
            if ax != axis and da != db:
                raise DimensionError(
                    f"concat: operands differ on axis {ax}: {da} vs {db}"
                )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _acc(t, piece)

    return _from_op(data, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_gradient(f, wrt: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of the scalar ``f()`` w.r.t. each tensor.

    ``f`` must rebuild its result from the tensors' current ``data`` on every
    call; evaluation happens under ``no_grad`` and never touches ``backward``.
    """
    grads = []
    with no_grad():
        for t in wrt:
            flat = t.data.reshape(-1)
            g = np.zeros_like(flat)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                fp = float(f().data)
                flat[i] = saved - h
                fm = float(f().data)
                flat[i] = saved
                g[i] = (fp - fm) / (2.0 * h)
            grads.append(g.reshape(t.data.shape))
    return grads


def check_gradients(f, wrt: Sequence[Tensor], h: float = 1e-5,
                    floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative-error denominator is floored at ``floor`` so near-zero
    gradient entries compare on an absolute scale.
    """
    for t in wrt:
        t.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for t, num in zip(wrt, numeric_gradient(f, wrt, h=h)):
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(floor, np.maximum(np.abs(ana), np.abs(num)))
        worst = max(worst, float((np.abs(ana - num) / denom).max()))
    return worst
