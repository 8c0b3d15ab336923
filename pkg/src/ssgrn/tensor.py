"""Dense tensors with reverse-mode automatic differentiation.

Every tensor produced by an operation remembers its parents and a backward
closure; calling ``backward()`` on a scalar root walks the recorded graph
once in reverse topological order and accumulates gradients into every
tensor that requires them. All math runs on row-major numpy buffers in
float32 (training) or float64 (gradient testing); there is no internal
parallel scheduling, so results are bitwise deterministic for fixed inputs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf, which is an error, not a state."""


#: When True (the default), every forward op validates that its output is
#: finite and raises NonFiniteError otherwise.
finite_checks = True

_grad_enabled = True

_FLOAT_DTYPES = (np.float32, np.float64)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _coerce(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)):
        return arr
    return arr.astype(np.float32)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional array with an optional gradient slot.

    ``data`` is the value buffer, ``grad`` (same shape, or None) accumulates
    d(root)/d(self) during ``backward()``. Tensors created by ops carry the
    tape edges needed for reverse mode; leaves carry none.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        if self.data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise TypeError(f"unsupported dtype {self.data.dtype}; use f32 or f64")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag}, op={self._op})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff core -------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            # copy: g may alias a child's grad buffer
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate grads of every requires_grad tensor reachable from self.

        The root must be scalar. Each tape node is visited exactly once, in
        reverse topological order; fan-out accumulates by summation.
        """
        if self.size != 1:
            raise ShapeError("backward() requires a scalar root")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    data = a.data**e

    def backward(g):
        a._accumulate(g * e * a.data ** (e - 1.0))

    return _make(data, (a,), backward, "pow")


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward, "exp")


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward, "log")


# -- linear algebra and structure ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _make(data, (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    orig = a.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _make(data, (a,), backward, "reshape")


def take(a: Tensor, key) -> Tensor:
    """Index a tensor with any numpy-compatible key; backward scatter-adds."""
    data = np.array(a.data[key])
    fancy = _has_fancy_index(key)

    def backward(g):
        buf = np.zeros_like(a.data)
        if fancy:
            np.add.at(buf, key, g)
        else:
            buf[key] += g
        a._accumulate(buf)

    return _make(data, (a,), backward, "take")


def _has_fancy_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), backward, "concat")


# -- reductions -----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(data), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- nonlinearities ---------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward, "relu")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Rows along ``axis`` sum to one; shift-invariant by max subtraction.

    Internal accumulation runs in f64 so stored row sums stay within 1e-6
    of one even for f32 tensors with many entries.
    """
    _validate_axis(a, axis)
    x = a.data.astype(np.float64, copy=False)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p64 = e / e.sum(axis=axis, keepdims=True)
    data = p64.astype(a.dtype, copy=False)

    def backward(g):
        gp = g * data
        a._accumulate(gp - data * gp.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int) -> Tensor:
    _validate_axis(a, axis)
    x = a.data.astype(np.float64, copy=False)
    x = x - x.max(axis=axis, keepdims=True)
    out64 = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))
    data = out64.astype(a.dtype, copy=False)

    def backward(g):
        a._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward, "log_softmax")


def _validate_axis(a: Tensor, axis: int) -> None:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")


# -- convolution -------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of a C_in x H x W input with C_out x C_in x k x k filters.

    Output extent: floor((H + 2p - d(k-1) - 1)/s) + 1. Gradients are computed
    for the input, the weights and the bias.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and (O,C,kh,kw) weight, got {x.shape}, {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"weight expects {wc_in} input channels, input has {c_in}")
    s, p, d = int(stride), int(padding), int(dilation)
    oh = (h + 2 * p - d * (kh - 1) - 1) // s + 1
    ow = (w + 2 * p - d * (kw - 1) - 1) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"non-positive conv output extent {oh}x{ow} for input {h}x{w}")

    if p > 0:
        xp = np.zeros((c_in, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, p : p + h, p : p + w] = x.data
    else:
        xp = x.data
    cols = np.empty((c_in, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[
                :,
                ki * d : ki * d + (oh - 1) * s + 1 : s,
                kj * d : kj * d + (ow - 1) * s + 1 : s,
            ]
    cols2 = cols.reshape(c_in * kh * kw, oh * ow)
    wflat = weight.data.reshape(c_out, c_in * kh * kw)
    out = (wflat @ cols2).reshape(c_out, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gflat = g.reshape(c_out, oh * ow)
        weight._accumulate((gflat @ cols2.T).reshape(weight.shape))
        if bias is not None:
            bias._accumulate(g.sum(axis=(1, 2)))
        dcols = (wflat.T @ gflat).reshape(c_in, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[
                    :,
                    ki * d : ki * d + (oh - 1) * s + 1 : s,
                    kj * d : kj * d + (ow - 1) * s + 1 : s,
                ] += dcols[:, ki, kj]
        x._accumulate(dxp[:, p : p + h, p : p + w] if p > 0 else dxp)

    return _make(out, parents, backward, "conv2d")


# -- normalization -------------------------------------------------------------------


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance per channel group over (C/G, H, W), then affine."""
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(c, h, w)
    out = gamma.data.reshape(c, 1, 1) * xhat + beta.data.reshape(c, 1, 1)

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=(1, 2)))
        beta._accumulate(g.sum(axis=(1, 2)))
        dxhat = (g * gamma.data.reshape(c, 1, 1)).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xh * (dxhat * xh).mean(axis=1, keepdims=True)
        )
        x._accumulate(dx.reshape(c, h, w))

    return _make(out, (x, gamma, beta), backward, "group_norm")


# -- pooling ---------------------------------------------------------------------------


def _pool_windows(h: int, w: int, kernel: int, stride: int):
    if (h - kernel) % stride != 0 or (w - kernel) % stride != 0:
        raise ShapeError(f"pool window {kernel}/{stride} does not tile {h}x{w} input")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    return oh, ow


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Window maximum; backward routes gradient to the first argmax per window."""
    c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"pool window {kernel} larger than input {h}x{w}")
    oh, ow = _pool_windows(h, w, kernel, stride)
    rows = (np.arange(oh)[:, None] * stride + np.arange(kernel)[None, :])  # oh x k
    colsi = (np.arange(ow)[:, None] * stride + np.arange(kernel)[None, :])  # ow x k
    # windows: C x oh x ow x k x k, window elements in row-major order
    windows = x.data[:, rows[:, None, :, None], colsi[None, :, None, :]]
    flat = windows.reshape(c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=3)  # first occurrence wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]

    def backward(g):
        # absolute source coordinate of each window's (first) argmax
        ki, kj = np.divmod(arg, kernel)
        base_r = np.arange(oh)[:, None] * stride
        base_c = np.arange(ow)[None, :] * stride
        abs_r = base_r[None, :, :] + ki
        abs_c = base_c[None, :, :] + kj
        buf = np.zeros_like(x.data).reshape(c, h * w)
        chan = np.repeat(np.arange(c), oh * ow)
        pos = (abs_r * w + abs_c).reshape(c, -1).ravel()
        np.add.at(buf, (chan, pos), g.reshape(c, -1).ravel())
        x._accumulate(buf.reshape(c, h, w))

    return _make(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None, ceil_mode: bool = False) -> Tensor:
    """Window mean. With ceil_mode, right/bottom edges are replicated so the
    output extent is ceil(H/stride); constant fields are preserved exactly."""
    if stride is None:
        stride = kernel
    c, h, w = x.shape
    if not ceil_mode and (kernel > h or kernel > w):
        raise ShapeError(f"pool window {kernel} larger than input {h}x{w}")
    if ceil_mode:
        oh = -(-h // stride)
        ow = -(-w // stride)
    else:
        oh, ow = _pool_windows(h, w, kernel, stride)
    rows = np.minimum(np.arange(oh)[:, None] * stride + np.arange(kernel)[None, :], h - 1)
    colsi = np.minimum(np.arange(ow)[:, None] * stride + np.arange(kernel)[None, :], w - 1)
    windows = x.data[:, rows[:, None, :, None], colsi[None, :, None, :]]
    # anchored mean: exactly the anchor value when the window is constant
    anchor = windows[:, :, :, :1, :1]
    out = anchor[:, :, :, 0, 0] + (windows - anchor).mean(axis=(3, 4))
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        buf = np.zeros_like(x.data).reshape(c, h * w)
        gw = np.broadcast_to((g * scale)[..., None, None], (c, oh, ow, kernel, kernel))
        pos = (rows[:, None, :, None] * w + colsi[None, :, None, :])  # oh x ow x k x k
        chan = np.repeat(np.arange(c), oh * ow * kernel * kernel)
        flat_pos = np.broadcast_to(pos[None], (c, oh, ow, kernel, kernel)).ravel()
        np.add.at(buf, (chan, flat_pos), gw.ravel())
        x._accumulate(buf.reshape(c, h, w))

    return _make(out, (x,), backward, "avg_pool2d")


# -- resampling ---------------------------------------------------------------------------


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with pixel centers at (i + 0.5)/n; exact on constants.

    The map is linear in the input, so the backward pass is its transpose.
    """
    c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = src - i0
        return i0, i1, t

    r0, r1, ty = axis_weights(h, out_h)
    c0, c1, tx = axis_weights(w, out_w)
    ty = ty.astype(x.dtype)[None, :, None]
    tx = tx.astype(x.dtype)[None, None, :]
    d = x.data
    q00 = d[:, r0[:, None], c0[None, :]]
    q01 = d[:, r0[:, None], c1[None, :]]
    q10 = d[:, r1[:, None], c0[None, :]]
    q11 = d[:, r1[:, None], c1[None, :]]
    # lerp form x0 + t*(x1 - x0) is exact on constant fields
    top = q00 + tx * (q01 - q00)
    bot = q10 + tx * (q11 - q10)
    out = top + ty * (bot - top)

    def backward(g):
        buf = np.zeros_like(x.data).reshape(c, h * w)
        chan = np.repeat(np.arange(c), out_h * out_w)
        for ri, ci, wgt in (
            (r0, c0, (1 - ty) * (1 - tx)),
            (r0, c1, (1 - ty) * tx),
            (r1, c0, ty * (1 - tx)),
            (r1, c1, ty * tx),
        ):
            pos = np.broadcast_to((ri[:, None] * w + ci[None, :])[None], g.shape).ravel()
            np.add.at(buf, (chan, pos), (g * wgt).ravel())
        x._accumulate(buf.reshape(c, h, w))

    return _make(out, (x,), backward, "bilinear_upsample")
