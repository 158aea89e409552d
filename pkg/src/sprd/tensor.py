"""Taped reverse-mode autodiff over numpy arrays.

Feature maps are rank-4 ``[N, C, H, W]``; a few ops (reshape, transpose,
row gathers, losses) work on other ranks because the detection heads need
to flatten anchors into rows.

Every op computes its forward value eagerly and, when any input requires a
gradient, records a closure that maps the output cotangent to input
cotangents.  ``Tensor.backward`` walks the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_state = {"dtype": np.float32, "grad_enabled": True}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 = verification mode)."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


def verification_mode():
    return precision(np.float64)


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        Only scalar roots are accepted unless an explicit cotangent is given.
        By default the recorded closures are released afterwards; pass
        ``retain_graph=True`` to backpropagate through the same graph again.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if self._backward is None and not self.requires_grad:
            raise RuntimeError("backward(): no recorded graph (built under no_grad, or already released)")
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._backward = None
                node._parents = ()


def _raise_nonscalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _state["grad_enabled"] and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad, name=name)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    ops = {"add": add, "mul": mul, "sigmoid": sigmoid, "relu": relu}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](*operands)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = a.shape, a.dtype
    return _make(np.asarray(a.data.sum(), dtype=dtype).reshape(()), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(dtype, copy=True),))


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {ref} vs {p.shape} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    n, _, h, w = parts[0].shape
    for p in parts:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: spatial mismatch {parts[0].shape} vs {p.shape}")
    return concat(parts, axis=1)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), backward)


def gather_pixels(a: Tensor, n_idx, y_idx, x_idx) -> Tensor:
    """Pick ``a[n, :, y, x]`` for each index triple -> ``[M, C, 1, 1]``."""
    n_idx, y_idx, x_idx = (np.asarray(i, dtype=np.intp).reshape(-1) for i in (n_idx, y_idx, x_idx))
    shape = a.shape
    N, C, H, W = shape
    if len(n_idx) and ((n_idx < 0).any() or (n_idx >= N).any() or (y_idx < 0).any()
                       or (y_idx >= H).any() or (x_idx < 0).any() or (x_idx >= W).any()):
        raise IndexError(f"pixel index out of bounds for feature of shape {shape}")
    out = a.data[n_idx, :, y_idx, x_idx]  # [M, C]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        vals = g.reshape(len(n_idx), C)
        # np.add.at keeps repeated indices additive
        np.add.at(full, (n_idx, slice(None), y_idx, x_idx), vals)
        return (full,)

    return _make(out.reshape(len(n_idx), C, 1, 1), (a,), backward)


def take_rows(a: Tensor, rows) -> Tensor:
    """Gather along axis 0 of a 2-d tensor (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, rows, g)
        return (full,)

    return _make(a.data[rows], (a,), backward)


def take_channel(a: Tensor, channels) -> Tensor:
    """``out[m, 0] = a[m, channels[m]]`` for a ``[M, K, H, W]`` tensor."""
    channels = np.asarray(channels, dtype=np.intp)
    M = a.shape[0]
    shape = a.shape
    idx = np.arange(M)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx, channels] = g[:, 0]
        return (full,)

    return _make(a.data[idx, channels][:, None], (a,), backward)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def parameters(self) -> list:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (k - 1) + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(n, ho, wo, c, k, k),
                      strides=(s0, s2 * stride, s3 * stride, s1, s2 * dilation, s3 * dilation),
                      writeable=False)


def _scatter_windows(cols: np.ndarray, out_shape, k: int, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of ``_windows``: cols ``[N, Ho, Wo, C, k, k]`` summed into a padded canvas."""
    n, ho, wo, c = cols.shape[:4]
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dilation, j * dilation
            out[:, :, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Dense 2-d cross-correlation, weight ``[C_out, C_in, k, k]``."""
    w = p.weight
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected rank-4 input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    s, pad, d = p.stride, p.padding, p.dilation
    if s < 1 or d < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride/padding/dilation {s}/{pad}/{d}")
    ho = conv_output_size(h, k, s, pad, d)
    wo = conv_output_size(wd, k, s, pad, d)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel extent {d * (k - 1) + 1} exceeds padded input {x.shape} (pad {pad})")
    xp = _pad(x.data, pad)
    if k == 1 and s == 1:
        cols = xp.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        cols = _windows(xp, k, s, d, ho, wo).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(co, -1)
    # one GEMM per sample keeps results bit-identical whatever the batch size
    out = np.matmul(cols.reshape(n, ho * wo, -1), wmat.T)
    if p.bias is not None:
        out += p.bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    parents = (x, w) + ((p.bias,) if p.bias is not None else ())
    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(w.shape) if _needs_grad(w) else None
        gx = None
        if _needs_grad(x):
            dcols = g2 @ wmat
            if k == 1 and s == 1:
                gxp = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                gxp = _scatter_windows(dcols.reshape(n, ho, wo, c, k, k), padded_shape, k, s, d)
            gx = np.ascontiguousarray(_unpad(gxp, pad))
        res = (gx, gw)
        if p.bias is not None:
            res += (g2.sum(axis=0),)
        return res

    return _make(np.ascontiguousarray(out), parents, backward)


def conv2d_transpose(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution, weight ``[C_in, C_out, k, k]``.

    The forward pass is the input-gradient of ``conv2d`` run with the same
    weight tensor (read as ``[C_out', C_in', k, k]`` of that conv), so the
    two are exact adjoints.
    """
    w = p.weight
    n, c, h, wd = x.shape
    ci, co, k, k2 = w.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d_transpose: input {x.shape} incompatible with weight {w.shape}")
    s, pad, d = p.stride, p.padding, p.dilation
    if s < 1 or pad < 0 or d < 1:
        raise ValueError(f"conv2d_transpose: invalid stride/padding/dilation {s}/{pad}/{d}")
    if pad >= k:
        raise ValueError(f"conv2d_transpose: padding {pad} must be smaller than kernel {k}")
    ho = conv_transpose_output_size(h, k, s, pad, d)
    wo = conv_transpose_output_size(wd, k, s, pad, d)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d_transpose: non-positive output size {ho}x{wo} for input {x.shape}")
    hp, wp = ho + 2 * pad, wo + 2 * pad
    xcols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = w.data.reshape(c, -1)
    dcols = np.matmul(xcols.reshape(n, h * wd, c), wmat).reshape(n, h, wd, co, k, k)
    out = _unpad(_scatter_windows(dcols, (n, co, hp, wp), k, s, d), pad)
    out = np.ascontiguousarray(out)
    if p.bias is not None:
        out += p.bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) + ((p.bias,) if p.bias is not None else ())

    def backward(g):
        gp = _pad(g, pad)
        cols = _windows(gp, k, s, d, h, wd).reshape(n * h * wd, co * k * k)
        gx = None
        if _needs_grad(x):
            gx = (cols @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        gw = (xcols.T @ cols).reshape(w.shape) if _needs_grad(w) else None
        res = (gx, gw)
        if p.bias is not None:
            res += (g.sum(axis=(0, 2, 3)),)
        return res

    return _make(out, parents, backward)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """One ``k x k`` filter per input channel; weight ``[C, 1, k, k]``."""
    w = p.weight
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[0] != c:
        raise ValueError(f"depthwise_conv2d: need weight [{c}, 1, k, k] (multiplier 1), got {w.shape}")
    k = w.shape[-1]
    s, pad, d = p.stride, p.padding, p.dilation
    ho = conv_output_size(h, k, s, pad, d)
    wo = conv_output_size(wd, k, s, pad, d)
    if ho < 1 or wo < 1:
        raise ValueError(f"depthwise_conv2d: kernel does not fit input {x.shape}")
    xp = _pad(x.data, pad)
    win = _windows(xp, k, s, d, ho, wo)  # n, ho, wo, c, k, k
    wk = w.data[:, 0]
    out = np.einsum("nyxcij,cij->ncyx", win, wk, optimize=True)
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) + ((p.bias,) if p.bias is not None else ())
    padded_shape = xp.shape

    def backward(g):
        gw = np.einsum("ncyx,nyxcij->cij", g, win, optimize=True)[:, None] if _needs_grad(w) else None
        gx = None
        if _needs_grad(x):
            dcols = np.einsum("ncyx,cij->nyxcij", g, wk, optimize=True)
            gx = np.ascontiguousarray(_unpad(_scatter_windows(dcols, padded_shape, k, s, d), pad))
        res = (gx, gw)
        if p.bias is not None:
            res += (g.sum(axis=(0, 2, 3)),)
        return res

    return _make(np.ascontiguousarray(out), parents, backward)


def separable_conv2d(x: Tensor, depthwise: ConvParams, pointwise: ConvParams) -> Tensor:
    if pointwise.kernel != 1:
        raise ValueError(f"separable_conv2d: pointwise kernel must be 1x1, got {pointwise.weight.shape}")
    return conv2d(depthwise_conv2d(x, depthwise), pointwise)


# ---------------------------------------------------------------------------
# resampling


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    f = int(factor)
    if f == 1:
        return x
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return upsample_nearest(x, 2)


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``[out, in]`` interpolation matrix, half-pixel centres."""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize of the last two axes."""
    ry = bilinear_matrix(arr.shape[-2], out_h)
    rx = bilinear_matrix(arr.shape[-1], out_w)
    return ry @ arr @ rx.T


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"upsample_bilinear: output size must be positive, got {out_h}x{out_w}")
    ry = bilinear_matrix(x.shape[2], out_h, x.dtype)
    rx = bilinear_matrix(x.shape[3], out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _make(out, (x,), backward)


__all__ = [
    "Tensor", "ConvParams", "tensor", "default_dtype", "set_default_dtype", "precision",
    "verification_mode", "no_grad", "add", "sub", "mul", "scale", "sigmoid", "relu",
    "elementwise", "sum", "detach", "reshape", "transpose", "concat", "concat_channels",
    "slice_channels", "gather_pixels", "take_rows", "take_channel", "conv2d",
    "conv2d_transpose", "depthwise_conv2d", "separable_conv2d", "upsample_nearest",
    "upsample_nearest2x", "upsample_bilinear", "bilinear_matrix", "resize_bilinear",
    "conv_output_size", "conv_transpose_output_size",
]
