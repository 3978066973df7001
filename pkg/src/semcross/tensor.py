"""Minimal dense tensor library with reverse-mode autodiff.

Everything in this package that needs a gradient runs through this module.
The design is deliberately small: a Tensor wraps one numpy array, every
primitive op links its output to its inputs with a closure that maps the
output gradient to input gradients, and backward() walks that graph once
in reverse topological order, adding gradients where a value fans out.

Contract highlights:

- backward() is only legal on a scalar (size-1) output, and only once per
  graph. A second call on any tensor of a consumed graph raises
  ContractError. Leaves (plain data, parameters) stay reusable forever.
- Gradients accumulate additively across fan-out and land in ``.grad`` of
  every tensor that requires one. Intermediate grads are dropped as soon
  as they have been consumed to keep peak memory at episode scale.
- Two numeric modes: float64 for verification (the default) and float32
  for training. ``precision("float32")`` switches the dtype new tensors
  are created with; existing tensors keep theirs.
- Image ops come in two layouts. The channels-last kernels
  (``conv2d_nhwc`` and friends) are the fast path the model runs on,
  because im2col over a (B, H, W, C) block feeds the GEMM without layout
  copies on a single core. The channel-first functions (``conv2d``, ...)
  take C x H x W or B x C x H x W and are thin adapters over the same
  kernels; use those when the batch axis is incidental.

Ops never mutate their inputs. Running batch-norm statistics are the one
piece of mutable state, held in a RunningStats outside the graph.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

LOG_EPS = 1e-12  # floor for log arguments and division denominators

_default_dtype = np.float64
_grad_enabled = True

# Names of every op that installs its own gradient rule. The gradient-check
# suite is required to cover each of these.
PRIMITIVE_OPS = (
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sum",
    "mean",
    "reshape",
    "permute",
    "matmul",
    "softmax",
    "narrow",
    "concat",
    "conv2d_nhwc",
    "max_pool2d_nhwc",
    "batch_norm2d_nhwc",
)


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ParameterError(f"unsupported tensor dtype {dt}, use float32 or float64")
    _default_dtype = dt.type


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch the default dtype, e.g. ``with precision("float64"):``."""
    if mode not in ("float32", "float64"):
        raise ParameterError(f"unknown precision mode {mode!r}")
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(np.float32 if mode == "float32" else np.float64)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    """One executed primitive: parents plus the rule mapping dOut to dParents."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a size-1 tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    # arithmetic sugar; python scalars adopt the tensor's dtype so float32
    # graphs are not silently promoted
    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        return sub(self, other)

    def __rsub__(self, other):
        return sub(Tensor(np.asarray(other, dtype=self.data.dtype)), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(Tensor(np.asarray(other, dtype=self.data.dtype)), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return reshape(self, (self.data.size,))

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def transpose_last(self):
        return transpose_last(self)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._node is not None:
            flags.append(f"op={self._node.op}")
        tail = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tail})"


def _out(data, op, parents, backward_fn):
    """Wrap an op result, attaching the graph node when gradients are live."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(op, parents, backward_fn)
    else:
        t.requires_grad = False
        t._node = None
    return t


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _check_tensor(x, op):
    if not isinstance(x, Tensor):
        raise ContractError(f"{op} expects Tensor operands, got {type(x).__name__}")
    return x


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops


def add(a, b):
    a = _check_tensor(a, "add")
    b = _check_tensor(b, "add")
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    na, nb = a.requires_grad, b.requires_grad

    def backward_fn(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _out(data, "add", (a, b), backward_fn)


def sub(a, b):
    a = _check_tensor(a, "sub")
    b = _check_tensor(b, "sub")
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    na, nb = a.requires_grad, b.requires_grad

    def backward_fn(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(-g, b.data.shape) if nb else None,
        )

    return _out(data, "sub", (a, b), backward_fn)


def mul(a, b):
    a = _check_tensor(a, "mul")
    b = _check_tensor(b, "mul")
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if na else None,
            _unbroadcast(g * ad, bd.shape) if nb else None,
        )

    return _out(data, "mul", (a, b), backward_fn)


def div(a, b):
    """Elementwise a / b with denominators floored at LOG_EPS in magnitude."""
    a = _check_tensor(a, "div")
    b = _check_tensor(b, "div")
    sign = np.where(b.data < 0, -1.0, 1.0).astype(b.data.dtype, copy=False)
    safe = sign * np.maximum(np.abs(b.data), LOG_EPS)
    try:
        data = a.data / safe
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None
    na, nb = a.requires_grad, b.requires_grad
    ad = a.data

    def backward_fn(g):
        ga = _unbroadcast(g / safe, ad.shape) if na else None
        gb = _unbroadcast(-g * ad / (safe * safe), b.data.shape) if nb else None
        return ga, gb

    return _out(data, "div", (a, b), backward_fn)


def scale(a, c):
    a = _check_tensor(a, "scale")
    c = float(c)
    data = a.data * a.data.dtype.type(c)
    na = a.requires_grad

    def backward_fn(g):
        return ((g * g.dtype.type(c)) if na else None,)

    return _out(data, "scale", (a,), backward_fn)


def relu(x):
    x = _check_tensor(x, "relu")
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _out(data, "relu", (x,), backward_fn)


def sigmoid(x):
    x = _check_tensor(x, "sigmoid")
    # exp of a non-positive argument only, so no overflow on either tail
    t = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def backward_fn(g):
        return (g * data * (1.0 - data),)

    return _out(data, "sigmoid", (x,), backward_fn)


def exp(x):
    x = _check_tensor(x, "exp")
    data = np.exp(x.data)

    def backward_fn(g):
        return (g * data,)

    return _out(data, "exp", (x,), backward_fn)


def log(x):
    """Natural log with inputs floored at LOG_EPS, so log never sees zero."""
    x = _check_tensor(x, "log")
    floored = np.maximum(x.data, LOG_EPS)
    data = np.log(floored)

    def backward_fn(g):
        return (g / floored,)

    return _out(data, "log", (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim, op):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"{op}: repeated axis in {axes}")
    return tuple(sorted(out))


def sum_(x, axis=None):
    x = _check_tensor(x, "sum")
    axes = _norm_axes(axis, x.data.ndim, "sum")
    data = x.data.sum(axis=axes)
    in_shape = x.data.shape

    def backward_fn(g):
        keep = list(in_shape)
        for ax in axes:
            keep[ax] = 1
        return (np.broadcast_to(g.reshape(keep), in_shape),)

    return _out(data, "sum", (x,), backward_fn)


def mean(x, axis=None):
    x = _check_tensor(x, "mean")
    axes = _norm_axes(axis, x.data.ndim, "mean")
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    if count == 0:
        raise DimensionError(f"mean over empty axes {axes} of shape {x.shape}")
    data = x.data.mean(axis=axes)
    in_shape = x.data.shape
    inv = 1.0 / count

    def backward_fn(g):
        keep = list(in_shape)
        for ax in axes:
            keep[ax] = 1
        return (np.broadcast_to(g.reshape(keep) * g.dtype.type(inv), in_shape),)

    return _out(data, "mean", (x,), backward_fn)


def reshape(x, shape):
    x = _check_tensor(x, "reshape")
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {shape}") from None
    in_shape = x.data.shape

    def backward_fn(g):
        return (g.reshape(in_shape),)

    return _out(data, "reshape", (x,), backward_fn)


def permute(x, axes):
    x = _check_tensor(x, "permute")
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of a {x.data.ndim}-d tensor")
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _out(data, "permute", (x,), backward_fn)


def transpose_last(x):
    """Swap the last two axes (matrix transpose over any batch prefix)."""
    x = _check_tensor(x, "transpose_last")
    if x.data.ndim < 2:
        raise DimensionError(f"transpose_last needs >= 2 dims, got shape {x.shape}")
    axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    return permute(x, axes)


def narrow(x, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    x = _check_tensor(x, "narrow")
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"narrow: axis {axis} out of range for shape {x.shape}")
    axis %= ndim
    n = x.data.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise DimensionError(f"narrow: [{start}, {start + length}) outside axis of length {n}")
    index = (slice(None),) * axis + (slice(start, start + length),)
    data = x.data[index]
    in_shape = x.data.shape

    def backward_fn(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _out(data, "narrow", (x,), backward_fn)


def concat(a, b, axis=0):
    """Join two tensors along an existing axis; all other dims must agree."""
    a = _check_tensor(a, "concat")
    b = _check_tensor(b, "concat")
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat: ranks differ, {a.shape} vs {b.shape}")
    ndim = a.data.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} out of range for shape {a.shape}")
    axis %= ndim
    for i in range(ndim):
        if i != axis and a.data.shape[i] != b.data.shape[i]:
            raise DimensionError(f"concat: shapes {a.shape} and {b.shape} differ off axis {axis}")
    data = np.concatenate([a.data, b.data], axis=axis)
    split = a.data.shape[axis]
    na, nb = a.requires_grad, b.requires_grad

    def backward_fn(g):
        head = (slice(None),) * axis
        return (
            g[head + (slice(None, split),)] if na else None,
            g[head + (slice(split, None),)] if nb else None,
        )

    return _out(data, "concat", (a, b), backward_fn)


def matmul(a, b):
    """Matrix product, 2-d by 2-d or batched with broadcasting batch dims."""
    a = _check_tensor(a, "matmul")
    b = _check_tensor(b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape) if na else None
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape) if nb else None
        return ga, gb

    return _out(data, "matmul", (a, b), backward_fn)


def softmax(x, axis=-1, tau=1.0):
    """Temperature softmax along ``axis``; rows sum to one by construction."""
    x = _check_tensor(x, "softmax")
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = x.data / x.data.dtype.type(tau)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    inv_tau = 1.0 / tau

    def backward_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((data * (g - inner) * g.dtype.type(inv_tau)),)

    return _out(data, "softmax", (x,), backward_fn)


# ---------------------------------------------------------------------------
# image ops, channels-last kernels


def _kernel_matrix(w):
    """(O, C, 3, 3) kernel bank as a (9C, O) GEMM operand, offset-major rows."""
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]))


def _im2col(xp, H, W):
    """Gather 3x3 neighborhoods of a padded NHWC block into GEMM rows."""
    B = xp.shape[0]
    C = xp.shape[3]
    cols = np.empty((B, H, W, 9 * C), dtype=xp.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[..., k * C : (k + 1) * C] = xp[:, dy : dy + H, dx : dx + W, :]
            k += 1
    return cols.reshape(B * H * W, 9 * C)


def conv2d_nhwc(x, w, b):
    """3x3 convolution, stride 1, zero padding 1, on a (B, H, W, C) block.

    Kernels are stored (O, C, 3, 3) to match the checkpoint layout. Output
    is (B, H, W, O). Gradient for the input block is skipped entirely when
    nothing upstream needs it (the first layer sees raw images).
    """
    x = _check_tensor(x, "conv2d_nhwc")
    w = _check_tensor(w, "conv2d_nhwc")
    b = _check_tensor(b, "conv2d_nhwc")
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d_nhwc input must be (B, H, W, C), got {x.shape}")
    if w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d_nhwc kernels must be (O, C, 3, 3), got {w.shape}")
    B, H, W, C = x.data.shape
    O = w.data.shape[0]
    if w.data.shape[1] != C:
        raise DimensionError(f"conv2d_nhwc: input has {C} channels, kernels expect {w.data.shape[1]}")
    if b.data.shape != (O,):
        raise DimensionError(f"conv2d_nhwc bias must be ({O},), got {b.shape}")

    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.data.dtype)
    xp[:, 1:-1, 1:-1, :] = x.data
    wk = _kernel_matrix(w.data)
    out = _im2col(xp, H, W) @ wk
    out += b.data
    data = out.reshape(B, H, W, O)

    nx, nw, nb_ = x.requires_grad, w.requires_grad, b.requires_grad

    def backward_fn(g):
        g2 = g.reshape(B * H * W, O)
        gw = gb = gx = None
        if nw:
            # rebuild cols instead of keeping them; the padded block is smaller
            cols = _im2col(xp, H, W)
            gw = np.ascontiguousarray(
                (cols.T @ g2).reshape(3, 3, C, O).transpose(3, 2, 0, 1)
            )
        if nb_:
            gb = g2.sum(axis=0)
        if nx:
            dcols = (g2 @ wk.T).reshape(B, H, W, 9 * C)
            gxp = np.zeros_like(xp)
            k = 0
            for dy in range(3):
                for dx in range(3):
                    gxp[:, dy : dy + H, dx : dx + W, :] += dcols[..., k * C : (k + 1) * C]
                    k += 1
            gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gw, gb

    return _out(data, "conv2d_nhwc", (x, w, b), backward_fn)


def max_pool2d_nhwc(x):
    """2x2 max pooling with stride 2 on (B, H, W, C); odd edges are dropped.

    Ties route the gradient to the first window element in row-major window
    order, matching a flat argmax over each 2x2 patch.
    """
    x = _check_tensor(x, "max_pool2d_nhwc")
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d_nhwc input must be (B, H, W, C), got {x.shape}")
    B, H, W, C = x.data.shape
    if H < 2 or W < 2:
        raise DimensionError(f"max_pool2d_nhwc needs H, W >= 2, got {x.shape}")
    H2, W2 = H // 2, W // 2
    xc = x.data[:, : 2 * H2, : 2 * W2, :]
    a = xc[:, 0::2, 0::2, :]
    bq = xc[:, 0::2, 1::2, :]
    c = xc[:, 1::2, 0::2, :]
    d = xc[:, 1::2, 1::2, :]
    # first-index tie rule: >= keeps the earlier candidate at every merge
    v1 = np.maximum(a, bq)
    w1 = (bq > a).astype(np.int8)
    v2 = np.maximum(c, d)
    w2 = (d > c).astype(np.int8) + 2
    take2 = v2 > v1
    data = np.where(take2, v2, v1)
    idx = np.where(take2, w2, w1)
    in_shape = x.data.shape

    def backward_fn(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gc = gx[:, : 2 * H2, : 2 * W2, :]
        gc[:, 0::2, 0::2, :] += g * (idx == 0)
        gc[:, 0::2, 1::2, :] += g * (idx == 1)
        gc[:, 1::2, 0::2, :] += g * (idx == 2)
        gc[:, 1::2, 1::2, :] += g * (idx == 3)
        return (gx,)

    return _out(data, "max_pool2d_nhwc", (x,), backward_fn)


@dataclass
class RunningStats:
    """Exponential running moments a batch-norm layer drags along.

    Lives outside the autodiff graph; training-mode forward passes mutate
    it in place with the configured momentum.
    """

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels, momentum=0.1):
        return cls(
            mean=np.zeros(channels, dtype=np.float64),
            var=np.ones(channels, dtype=np.float64),
            momentum=momentum,
        )


BN_EPS = 1e-5


def batch_norm2d_nhwc(x, gamma, beta, stats, training):
    """Per-channel batch norm over a (B, H, W, C) block.

    Training mode normalizes with biased batch moments and folds them into
    ``stats`` (momentum-weighted); eval mode normalizes with the stored
    running moments and treats them as constants.
    """
    x = _check_tensor(x, "batch_norm2d_nhwc")
    gamma = _check_tensor(gamma, "batch_norm2d_nhwc")
    beta = _check_tensor(beta, "batch_norm2d_nhwc")
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm2d_nhwc input must be (B, H, W, C), got {x.shape}")
    C = x.data.shape[3]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise DimensionError(
            f"batch_norm2d_nhwc: gamma {gamma.shape} / beta {beta.shape} must be ({C},)"
        )
    if stats.mean.shape != (C,) or stats.var.shape != (C,):
        raise DimensionError(f"batch_norm2d_nhwc: running stats must have {C} channels")

    axes = (0, 1, 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, both here and in the running update
        m = stats.momentum
        stats.mean += m * (mu - stats.mean)
        stats.var += m * (var - stats.var)
    else:
        mu = stats.mean.astype(x.data.dtype, copy=False)
        var = stats.var.astype(x.data.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    inv_std = inv_std.astype(x.data.dtype, copy=False)
    mu = mu.astype(x.data.dtype, copy=False)
    xhat = (x.data - mu) * inv_std
    data = xhat * gamma.data + beta.data

    nx, ng, nb = x.requires_grad, gamma.requires_grad, beta.requires_grad
    gamma_d = gamma.data
    m_count = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]

    def backward_fn(g):
        gg = (g * xhat).sum(axis=axes) if (ng or (nx and training)) else None
        gb = g.sum(axis=axes) if (nb or (nx and training)) else None
        gx = None
        if nx:
            if training:
                # d/dx of normalizing with moments that depend on x itself
                gx = (gamma_d * inv_std / m_count) * (m_count * g - gb - xhat * gg)
            else:
                gx = g * (gamma_d * inv_std)
        return (
            gx,
            gg if ng else None,
            gb if nb else None,
        )

    return _out(data, "batch_norm2d_nhwc", (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# channel-first surfaces over the same kernels


def _as_batched_nhwc(x, op):
    """Lift (C, H, W) or (B, C, H, W) to (B, H, W, C); report if it was single."""
    if x.data.ndim == 3:
        x = reshape(x, (1,) + x.data.shape)
        single = True
    elif x.data.ndim == 4:
        single = False
    else:
        raise DimensionError(f"{op} input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    return permute(x, (0, 2, 3, 1)), single


def _from_batched_nhwc(y, single):
    y = permute(y, (0, 3, 1, 2))
    if single:
        y = reshape(y, y.data.shape[1:])
    return y


def conv2d(x, w, b):
    """Channel-first view of conv2d_nhwc; accepts (C, H, W) or (B, C, H, W)."""
    x = _check_tensor(x, "conv2d")
    nhwc, single = _as_batched_nhwc(x, "conv2d")
    return _from_batched_nhwc(conv2d_nhwc(nhwc, w, b), single)


def max_pool2d(x):
    """Channel-first view of max_pool2d_nhwc; accepts (C, H, W) or (B, C, H, W)."""
    x = _check_tensor(x, "max_pool2d")
    nhwc, single = _as_batched_nhwc(x, "max_pool2d")
    return _from_batched_nhwc(max_pool2d_nhwc(nhwc), single)


def batch_norm2d(x, gamma, beta, stats, training):
    """Channel-first view of batch_norm2d_nhwc; accepts (C, H, W) or (B, C, H, W)."""
    x = _check_tensor(x, "batch_norm2d")
    nhwc, single = _as_batched_nhwc(x, "batch_norm2d")
    return _from_batched_nhwc(batch_norm2d_nhwc(nhwc, gamma, beta, stats, training), single)


# ---------------------------------------------------------------------------
# backward pass


def backward(root):
    """Run one reverse pass from a scalar root, filling ``.grad`` fields.

    The graph under the root is consumed: its nodes are released and a
    second backward through any of them raises ContractError. Leaf tensors
    are untouched and stay reusable.
    """
    if not isinstance(root, Tensor):
        raise ContractError(f"backward expects a Tensor root, got {type(root).__name__}")
    if root._consumed:
        raise ContractError("backward: this graph was already consumed by a previous backward")
    if root.data.size != 1:
        raise ContractError(f"backward root must be a scalar, got shape {root.data.shape}")

    if root._node is None:
        root.grad = np.ones_like(root.data)
        return

    # children come after all their parents; leaves are not ordered
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._node.parents:
            if p._consumed:
                # a leaf never carries this flag, so this parent is an
                # intermediate spent by an earlier backward
                raise ContractError(
                    "backward: graph reuses a value consumed by a previous backward"
                )
            if p._node is not None and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for t in reversed(order):
        node = t._node
        grads = node.backward(t.grad)
        for p, g in zip(node.parents, grads):
            if g is None:
                continue
            if p.grad is None:
                p.grad = g
            else:
                p.grad = p.grad + g
        t._consumed = True
        t._node = None
        if t is not root:
            t.grad = None  # intermediate grads are spent once parents have them
