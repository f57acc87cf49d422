"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
attaches a closure mapping the output gradient to input gradients. Tensor ids
are drawn from a monotone counter, so sorting reachable nodes by id yields a
valid topological order for the backward sweep.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "clip",
    "matmul",
    "sum",
    "mean",
    "amax",
    "reshape",
    "transpose",
    "concat",
    "take",
    "pad2d",
    "conv2d",
    "maxpool2d",
    "upsample_bilinear",
    "resize_bilinear",
    "interp_matrix",
    "softmax",
    "attention",
    "backward",
    "finite_diff_check",
]

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float array that may participate in differentiation.

    Attributes:
        data: the underlying numpy array (treated as immutable once produced).
        requires_grad: whether gradients should flow into this tensor.
        grad: accumulated gradient for leaf tensors after :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError(f"division by exact zero in denominator of shape {b.shape}")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids overflow of exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    limit = np.log(np.finfo(a.dtype).max) - 1
    out = np.exp(np.minimum(a.data, limit))
    clipped = a.data <= limit
    return _result(out, (a,), lambda g: (g * out * clipped,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1 + t)

    def bw(g):
        du = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)

    return _result(out.astype(a.dtype), (a,), bw, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading dimensions."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


# -- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axes, keepdims) * (1.0 / n)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    if not keepdims:
        out = np.squeeze(out, axis)
    return _result(out, (a,), bw, "amax")


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, bw, "concat")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; backward scatter-adds into repeated indices."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise IndexError(f"index out of range for axis {axis} of size {a.shape[axis]}")
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(a.data)
        moved = np.moveaxis(gx, axis, 0)
        # g's gathered block sits at [axis, axis + indices.ndim)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (gx,)

    return _result(out, (a,), bw, "take")


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(np.array(out, dtype=a.dtype), (a,), bw, "getitem")


# -- spatial ops -----------------------------------------------------------

PAD_MODES = ("zero", "circular", "edge")


def pad2d(x: Tensor, amount: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``amount`` on each side."""
    if amount == 0:
        return x
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(amount, amount)] * 2
        out = np.pad(x.data, widths)

        def bw(g):
            return (g[..., amount:-amount, amount:-amount],)

        return _result(out, (x,), bw, "pad")
    if mode not in PAD_MODES:
        raise ValueError(f"unknown padding mode {mode!r}; expected one of {PAD_MODES}")
    h, w = x.shape[-2:]
    rows = np.arange(-amount, h + amount)
    cols = np.arange(-amount, w + amount)
    if mode == "circular":
        rows, cols = rows % h, cols % w
    else:
        rows, cols = np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)
    return take(take(x, rows, axis=-2), cols, axis=-1)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    mode: str = "zero",
) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[K,C,S,S]`` via im2col."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, sh, sw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    if sh > h + 2 * padding or sw > w + 2 * padding:
        raise ShapeError(f"kernel {sh}x{sw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = pad2d(x, padding, mode)
    out = _conv_valid(xp, kernel, stride)
    if bias is not None:
        out = out + reshape(bias, (1, k, 1, 1))
    return out


def _conv_valid(xp: Tensor, kernel: Tensor, stride: int) -> Tensor:
    n, c, hp, wp = xp.shape
    k, _, sh, sw = kernel.shape
    ho = (hp - sh) // stride + 1
    wo = (wp - sw) // stride + 1
    if sh == 1 and sw == 1 and stride == 1:
        cols = xp.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp.data, (sh, sw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * sh * sw)
    wmat = kernel.data.reshape(k, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def bw(g):
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gmat = g_nhwc.reshape(-1, k)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if xp.requires_grad:
            if sh == 1 and sw == 1 and stride == 1:
                gx = (gmat @ wmat).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            else:
                acc = np.zeros((n, hp, wp, c), dtype=xp.dtype)
                per_offset = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1))
                for i in range(sh):
                    for j in range(sw):
                        part = (gmat @ per_offset[i, j]).reshape(n, ho, wo, c)
                        acc[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += part
                gx = acc.transpose(0, 3, 1, 2)
        return gx, gk

    return _result(np.ascontiguousarray(out), (xp, kernel), bw, "conv2d")


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties route to the first row-major index."""
    n, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = x.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), bw, "maxpool2d")


def interp_matrix(n_in: int, n_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Linear interpolation weights (half-pixel centres) mapping ``n_in`` samples to ``n_out``.

    Every row sums to one, so constants are reproduced exactly.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of the last two axes (align-corners false)."""
    h, w = x.shape[-2:]
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _result(out, (x,), bw, "resize_bilinear")


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be ≥ 1, got {factor}")
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    return resize_bilinear(x, h * factor, w * factor)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"invalid axis {axis} for {x.ndim}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(q·kᵀ·scale)·v over the last two axes.

    Computed one (batch, head) slice at a time so each score matrix stays
    cache-sized. :func:`attention_weights` returns the weights of the latest call.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes incompatible: q{q.shape} k{k.shape} v{v.shape}")
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
    qf = np.broadcast_to(q.data, lead + q.shape[-2:]).reshape(-1, *q.shape[-2:])
    kf = np.broadcast_to(k.data, lead + k.shape[-2:]).reshape(-1, *k.shape[-2:])
    vf = np.broadcast_to(v.data, lead + v.shape[-2:]).reshape(-1, *v.shape[-2:])
    b, tq = qf.shape[:2]
    out = np.empty((b, tq, vf.shape[-1]), dtype=np.result_type(qf, vf))
    weights = []
    for i in range(b):
        s = (qf[i] * scale) @ kf[i].T
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[i] = s @ vf[i]
        weights.append(s)

    def bw(g):
        gf = g.reshape(b, tq, -1)
        gq, gk, gv = np.empty_like(qf), np.empty_like(kf), np.empty_like(vf)
        # row-wise <dA, A> equals <g, out>, so it needs no pass over the scores
        rowdot = np.einsum("bij,bij->bi", gf, out)[..., None]
        for i in range(b):
            a = weights[i]
            gv[i] = a.T @ gf[i]
            ds = gf[i] @ vf[i].T
            ds -= rowdot[i]
            ds *= a
            gq[i] = (ds @ kf[i]) * scale
            gk[i] = (ds.T @ qf[i]) * scale
        return (
            _unbroadcast(gq.reshape(lead + q.shape[-2:]), q.shape),
            _unbroadcast(gk.reshape(lead + k.shape[-2:]), k.shape),
            _unbroadcast(gv.reshape(lead + v.shape[-2:]), v.shape),
        )

    _last_attention[0] = lambda: np.stack(weights).reshape(lead + (tq, kf.shape[1]))
    return _result(out.reshape(lead + out.shape[-2:]), (q, k, v), bw, "attention")


_last_attention: list[Callable | None] = [None]


def attention_weights() -> np.ndarray | None:
    """Attention weights of the most recent :func:`attention` call."""
    fn = _last_attention[0]
    return None if fn is None else fn()


# -- differentiation -------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops reachable from a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.next_id = (max(t.id for t in nodes) + 1) if nodes else 0

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t.id in seen or not t.requires_grad:
                continue
            seen.add(t.id)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t.id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Iterable[Tensor] = (), retain: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through the graph.

    Leaf tensors that require grad get ``.grad`` accumulated. Tensors listed in
    ``params`` are guaranteed a gradient entry (zeros when unreachable) and
    ``retain`` lets callers read gradients of intermediate activations.

    Returns:
        Mapping from tensor to its gradient array for every reached leaf plus
        the tensors in ``params`` and ``retain``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    keep = {t.id for t in retain}
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.get(node.id)
        if node.id not in keep:
            grads.pop(node.id, None)
        if g is None:
            continue
        if node.id in keep:
            result[node] = g
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.dtype:
                pg = pg.astype(parent.dtype)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        result.setdefault(p, p.grad)
    return result


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    indices: Iterable[int] | None = None,
) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` to central differences.

    Returns max |analytic - numeric| / (|analytic| + |numeric| + 1e-12) over the
    checked flat coordinates (all of them unless ``indices`` is given).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out, params=[leaf])
    analytic = leaf.grad.reshape(-1)
    base = x.data.copy()
    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst
