"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive is a :class:`Function` subclass. Custom
gradients (the straight-through estimator, the TV smoothing step) use the
same mechanism as the built-in ops, so there is a single code path for
recording and replaying the tape.
"""
from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array, optionally tracking gradients.

    ``data`` is a numpy array (float64 by default, float32 allowed for
    faster training). ``grad`` is populated by :meth:`backward` on leaves
    that were created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else DEFAULT_DTYPE))
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Context | None = None

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return Mul.apply(self, _lift(1.0 / other, self))

    def __neg__(self):
        return Mul.apply(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    @property
    def T(self) -> "Tensor":
        return Transpose.apply(self)

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Sum.apply(self) * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class Context:
    """One node of the tape: the op, its inputs and saved intermediates."""

    __slots__ = ("fn", "parents", "saved", "attrs", "needs")

    def __init__(self, fn, parents):
        self.fn = fn
        self.parents = parents
        self.needs = tuple(isinstance(p, Tensor) and p.requires_grad for p in parents)
        self.saved: tuple = ()
        self.attrs: dict = {}

    def save(self, *arrays) -> None:
        self.saved = arrays


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward(ctx, *arrays, **kw) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` returning one gradient (or ``None``)
    per tensor input. Registering a custom gradient is just writing a
    subclass; :meth:`apply` records it on the tape.
    """

    @staticmethod
    def forward(ctx, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):  # pragma: no cover - abstract
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        ctx = Context(cls, inputs)
        raw = [x.data if isinstance(x, Tensor) else x for x in inputs]
        out = cls.forward(ctx, *raw, **kwargs)
        result = Tensor(out)
        if _grad_enabled and any(ctx.needs):
            result.requires_grad = True
            result._ctx = ctx
        return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        ctx = node._ctx
        if ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = ctx.fn.backward(ctx, g)
        if not isinstance(parent_grads, tuple):
            parent_grads = (parent_grads,)
        for p, need, pg in zip(ctx.parents, ctx.needs, parent_grads):
            if not need or pg is None:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if pg.shape != p.shape:
                raise ShapeError(f"{ctx.fn.__name__} produced grad {pg.shape} for input {p.shape}")
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# -- elementwise --------------------------------------------------------------

def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unscalar(g: np.ndarray, shape) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_same(a, b, "add")
        ctx.attrs = {"sa": a.shape, "sb": b.shape}
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unscalar(g, ctx.attrs["sa"]), _unscalar(g, ctx.attrs["sb"])


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_same(a, b, "sub")
        ctx.attrs = {"sa": a.shape, "sb": b.shape}
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unscalar(g, ctx.attrs["sa"]), _unscalar(-g, ctx.attrs["sb"])


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_same(a, b, "mul")
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return _unscalar(g * b, a.shape), _unscalar(g * a, b.shape)


class Sum(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.attrs = {"shape": a.shape}
        return np.asarray(a.sum())

    @staticmethod
    def backward(ctx, g):
        return np.broadcast_to(g, ctx.attrs["shape"]).copy()


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.attrs = {"shape": a.shape}
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return g.reshape(ctx.attrs["shape"])


class Transpose(Function):
    @staticmethod
    def forward(ctx, a):
        if a.ndim != 2:
            raise ShapeError("transpose expects a matrix")
        return a.T.copy()

    @staticmethod
    def backward(ctx, g):
        return g.T.copy()


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return g @ b.T, a.T @ g


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return g * out


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


class ReLU(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a > 0)
        # np.maximum keeps NaNs visible instead of mapping them to 0
        return np.maximum(a, 0.0).astype(a.dtype)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return g * mask


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    return ReLU.apply(x)


class Narrow(Function):
    @staticmethod
    def forward(ctx, a, axis, start, length):
        ctx.attrs = {"shape": a.shape, "axis": axis, "start": start, "length": length}
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + length)
        return a[tuple(idx)].copy()

    @staticmethod
    def backward(ctx, g):
        at = ctx.attrs
        out = np.zeros(at["shape"], dtype=g.dtype)
        idx = [slice(None)] * len(at["shape"])
        idx[at["axis"]] = slice(at["start"], at["start"] + at["length"])
        out[tuple(idx)] = g
        return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    return Narrow.apply(x, axis=axis, start=start, length=length)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.attrs = {"sizes": [a.shape[axis] for a in arrays], "axis": axis}
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        splits = np.cumsum(ctx.attrs["sizes"])[:-1]
        return tuple(np.split(g, splits, axis=ctx.attrs["axis"]))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# -- convolution --------------------------------------------------------------

def _resolve_padding(padding, kh: int, kw: int) -> int:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0 or kh != kw:
            raise ShapeError("'same' padding needs a square odd kernel")
        return kh // 2
    if padding == "valid":
        return 0
    return int(padding)


def _check_conv(x_shape, k_shape, groups) -> None:
    if len(x_shape) != 4 or len(k_shape) != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x_shape}, {k_shape}")
    c = x_shape[1]
    if groups == 1:
        if k_shape[1] != c:
            raise ShapeError(f"conv2d: input has {c} channels, kernel expects {k_shape[1]}")
    else:
        if groups != c or k_shape[0] != c or k_shape[1] != 1:
            raise ShapeError(f"depthwise conv2d: input {x_shape} incompatible with kernel {k_shape}")


def _im2col(x, kh, kw, stride, pad):
    """Windows of ``x`` as (N, Ho, Wo, C, kh, kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d_raw(x, k, stride=1, pad=0, groups=1):
    """Cross-correlation on plain arrays (any numeric dtype)."""
    co, _, kh, kw = k.shape
    cols = _im2col(x, kh, kw, stride, pad)
    n, ho, wo = cols.shape[:3]
    if groups == 1:
        out = cols.reshape(n * ho * wo, -1) @ k.reshape(co, -1).T
        return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    out = np.einsum("nhwcij,cij->nchw", cols, k[:, 0])
    return out


def conv2d_transpose_raw(g, k, in_hw, stride=1, pad=0, groups=1):
    """Adjoint of :func:`conv2d_raw` with respect to its input."""
    n, co, ho, wo = g.shape
    _, ck, kh, kw = k.shape
    h, w = in_hw
    c = co if groups != 1 else ck
    if groups == 1:
        cols = (g.transpose(0, 2, 3, 1).reshape(-1, co) @ k.reshape(co, -1))
        cols = cols.reshape(n, ho, wo, c, kh, kw)
    else:
        cols = g.transpose(0, 2, 3, 1)[..., None, None] * k[:, 0][None, None, None]
    dtype = np.result_type(g.dtype, k.dtype)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + hs:stride, j:j + ws:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    return xp[:, :, pad:pad + h, pad:pad + w]


def _conv_kernel_grad(x, g, k_shape, stride, pad, groups):
    co, _, kh, kw = k_shape
    cols = _im2col(x, kh, kw, stride, pad)
    if groups == 1:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        return (g2.T @ cols.reshape(g2.shape[0], -1)).reshape(k_shape)
    return np.einsum("nchw,nhwcij->cij", g, cols)[:, None]


class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, k, stride, padding, groups):
        _check_conv(x.shape, k.shape, groups)
        pad = _resolve_padding(padding, k.shape[2], k.shape[3])
        ctx.save(x, k)
        ctx.attrs = {"stride": stride, "pad": pad, "groups": groups}
        return conv2d_raw(x, k, stride, pad, groups)

    @staticmethod
    def backward(ctx, g):
        x, k = ctx.saved
        a = ctx.attrs
        gx = gk = None
        if ctx.needs[0]:
            gx = conv2d_transpose_raw(g, k, x.shape[2:], a["stride"], a["pad"], a["groups"])
        if ctx.needs[1]:
            gk = _conv_kernel_grad(x, g, k.shape, a["stride"], a["pad"], a["groups"])
        return gx, gk


class Conv2dTranspose(Function):
    @staticmethod
    def forward(ctx, y, k, stride, padding, groups, out_hw):
        co, ck, kh, kw = k.shape
        if y.ndim != 4 or y.shape[1] != co:
            raise ShapeError(f"conv2d_transpose: input {y.shape} incompatible with kernel {k.shape}")
        pad = _resolve_padding(padding, kh, kw)
        if out_hw is None:
            out_hw = ((y.shape[2] - 1) * stride + kh - 2 * pad,
                      (y.shape[3] - 1) * stride + kw - 2 * pad)
        ctx.save(y, k)
        ctx.attrs = {"stride": stride, "pad": pad, "groups": groups}
        return conv2d_transpose_raw(y, k, out_hw, stride, pad, groups)

    @staticmethod
    def backward(ctx, g):
        y, k = ctx.saved
        a = ctx.attrs
        gy = gk = None
        if ctx.needs[0]:
            gy = conv2d_raw(g, k, a["stride"], a["pad"], a["groups"])
        if ctx.needs[1]:
            # <A_k^T y, g> = <y, A_k g>, so the kernel gradient swaps roles
            gk = _conv_kernel_grad(g, y, k.shape, a["stride"], a["pad"], a["groups"])
        return gy, gk


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding="same", groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``k`` has shape (Co, C, kh, kw), or (C, 1, kh, kw) with ``groups=C``
    for a depthwise filter.
    """
    return Conv2d.apply(x, k, stride=stride, padding=padding, groups=groups)


def conv2d_transpose(y: Tensor, k: Tensor, stride: int = 1, padding="same", groups: int = 1,
                     output_size=None) -> Tensor:
    """Exact adjoint of :func:`conv2d` for the same kernel and geometry."""
    return Conv2dTranspose.apply(y, k, stride=stride, padding=padding, groups=groups,
                                 out_hw=output_size)


# -- pooling, dense heads ----------------------------------------------------

def avg_pool2d_raw(x, size=2):
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial size {(h, w)} not divisible by {size}")
    return x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))


def avg_pool2d_adjoint_raw(y, size=2):
    return np.repeat(np.repeat(y, size, axis=2), size, axis=3) / (size * size)


class AvgPool2d(Function):
    @staticmethod
    def forward(ctx, x, size):
        ctx.attrs = {"size": size}
        return avg_pool2d_raw(x, size)

    @staticmethod
    def backward(ctx, g):
        return avg_pool2d_adjoint_raw(g, ctx.attrs["size"])


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling (window = stride = ``size``)."""
    return AvgPool2d.apply(x, size=size)


class GlobalAvgPool(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.attrs = {"shape": x.shape}
        return x.mean(axis=(2, 3))

    @staticmethod
    def backward(ctx, g):
        n, c, h, w = ctx.attrs["shape"]
        return np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


class Linear(Function):
    @staticmethod
    def forward(ctx, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
        ctx.save(x, w)
        out = x @ w.T
        return out + b if b is not None else out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved
        return g @ w, g.T @ x, g.sum(axis=0)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b for x of shape (N, in) and w of shape (out, in)."""
    return Linear.apply(x, w, b)


class SparseMatMul(Function):
    @staticmethod
    def forward(ctx, x, op, transpose):
        m = op.T if transpose else op
        if x.ndim != 2 or m.shape[1] != x.shape[0]:
            raise ShapeError(f"sparse matmul: operator {m.shape} vs features {x.shape}")
        ctx.attrs = {"m": m}
        return np.asarray(m @ x)

    @staticmethod
    def backward(ctx, g):
        return np.asarray(ctx.attrs["m"].T @ g)


def spmm(op, x: Tensor, transpose: bool = False) -> Tensor:
    """Apply a fixed sparse matrix (``op`` or its transpose) to node features."""
    return SparseMatMul.apply(x, op=op, transpose=transpose)


class CrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels, mask):
        if logits.ndim != 2:
            raise ShapeError("cross_entropy expects (N, C) logits")
        n, c = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise ValueError(f"labels must lie in [0, {c})")
        weights = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
        total = weights.sum()
        if total <= 0:
            raise ValueError("cross_entropy: empty label mask")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        nll = -logp[np.arange(n), labels]
        ctx.save(logp, labels, weights / total)
        return np.asarray((nll * weights).sum() / total, dtype=logits.dtype)

    @staticmethod
    def backward(ctx, g):
        logp, labels, w = ctx.saved
        grad = np.exp(logp)
        grad[np.arange(len(labels)), labels] -= 1.0
        return grad * (w[:, None] * g)


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean softmax cross-entropy; ``mask`` restricts the mean to selected rows."""
    return CrossEntropy.apply(logits, labels=labels, mask=mask)
