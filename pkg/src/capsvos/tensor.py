"""Dense float tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded if any input
requires a gradient. ``Tape.gradient`` replays the recorded adjoints in exact
reverse execution order. Tensors touched only outside a tape get zero
gradient.

Layout convention for convolutions is channels-last: ``(N, *spatial, C)``.
"""

import itertools
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import _accel
from .errors import ContractError, DimensionError, DomainError, ParameterError

_DTYPE = np.float64


def set_default_dtype(dtype):
    """Select float64 (default) or float32 for newly created tensors."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class Record:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _tapes():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one step.

    A tape is confined to the thread that entered it.
    """

    def __init__(self):
        self.records = []
        self.visited = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def gradient(self, loss, params):
        """Gradients of scalar ``loss`` for each tensor in ``params``.

        Parameters that did not participate get exact zeros.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        self.visited = []
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            self.visited.append(idx)
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape))
        return out


def backward(tape, loss, params):
    """Replay ``tape`` for ``loss``; store and return one gradient per parameter."""
    grads = tape.gradient(loss, params)
    for p, g in zip(params, grads):
        p.grad = g
    return grads


def _make(data, inputs, bw, op):
    tape = active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data)
    out.data = arr if arr.dtype == _DTYPE else arr.astype(_DTYPE)
    out.requires_grad = req
    out.grad = None
    out.name = None
    if req:
        tape.records.append(Record(op, out, tuple(inputs), bw))
    return out


def unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return unbroadcast(g / b.data, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x):
    # relative precision is kept for large negative x, where log(a) is taken downstream
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def clamp(a, lo=None, hi=None):
    """Clip to ``[lo, hi]``; gradient passes only where the value is inside."""
    a = as_tensor(a)
    out = a.data
    keep = np.ones(a.shape, dtype=bool)
    if lo is not None:
        keep &= out >= lo
        out = np.maximum(out, lo)
    if hi is not None:
        keep &= a.data <= hi
        out = np.minimum(out, hi)
    return _make(out, (a,), lambda g: (g * keep,), "clamp")


def where(cond, a, b):
    """Select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _make(out, (a, b), lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape),
                                        unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


_POINTWISE = {
    "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log, "neg": neg, "tanh": tanh,
    "add": add, "mul": mul, "sub": sub, "div": div,
}


def pointwise(kind, *operands):
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ParameterError(f"unknown pointwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _axes(x, axis):
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    if len(axis) == 0:
        raise ParameterError("empty axis list")
    out = []
    for ax in axis:
        if not -x.ndim <= ax < x.ndim:
            raise ParameterError(f"axis {ax} out of range for shape {x.shape}")
        out.append(ax % x.ndim)
    return tuple(sorted(set(out)))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: (np.array(_expand_back(g, x.shape, axes, keepdims)),), "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes(x, axis)
    n = float(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: (np.array(_expand_back(g, x.shape, axes, keepdims)) / n,), "mean")


def tmax(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes(x, axis)
    out = x.data.max(axis=axes, keepdims=True)
    hit = x.data == out
    share = hit / hit.sum(axis=axes, keepdims=True)
    res = out if keepdims else np.squeeze(out, axis=axes)
    return _make(res, (x,), lambda g: (share * _expand_back(g, x.shape, axes, keepdims),), "max")


def softmax(x, axis=-1):
    x = as_tensor(x)
    (ax,) = _axes(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def reduce(kind, x, axes=None):
    if kind == "sum":
        return tsum(x, axes)
    if kind == "mean":
        return mean(x, axes)
    if kind == "max":
        return tmax(x, axes)
    if kind == "softmax":
        if axes is None:
            axes = -1
        if isinstance(axes, (tuple, list)):
            if len(axes) != 1:
                raise ParameterError("softmax takes exactly one axis")
            axes = axes[0]
        return softmax(x, axes)
    raise ParameterError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a, b):
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def expand_dims(x, axis):
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def broadcast_to(x, shape):
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape)
    return _make(out, (x,), lambda g: (unbroadcast(g, x.shape),), "broadcast")


def getitem(x, idx):
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (x,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [expand_dims(as_tensor(t), axis) for t in tensors]
    return concat(tensors, axis)


def tile(x, reps):
    """``np.tile`` with ``len(reps) == x.ndim``."""
    x = as_tensor(x)
    reps = tuple(reps)
    out = np.tile(x.data, reps)

    def bw(g):
        shp = []
        for r, n in zip(reps, x.shape):
            shp.extend([r, n])
        return (g.reshape(shp).sum(axis=tuple(range(0, 2 * x.ndim, 2))),)

    return _make(out, (x,), bw, "tile")


def pad(x, widths):
    x = as_tensor(x)
    out = np.pad(x.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _make(out, (x,), lambda g: (g[sl],), "pad")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _per_axis(v, d, name):
    if np.isscalar(v):
        v = (int(v),) * d
    v = tuple(int(e) for e in v)
    if len(v) != d:
        raise ParameterError(f"{name} needs {d} entries, got {v}")
    return v


def _canon(d, vals, fill):
    return (fill,) * (3 - d) + tuple(vals)


def _conv_geometry(xshape, kshape, stride, padding):
    d = len(kshape) - 2
    if d < 1 or d > 3:
        raise DimensionError(f"kernel rank must be 3..5 (1..3 spatial axes), got shape {kshape}")
    if len(xshape) != d + 2:
        raise DimensionError(f"input shape {xshape} does not match kernel spatial rank {d} (kernel {kshape})")
    if xshape[-1] != kshape[-2]:
        raise DimensionError(f"input channels {xshape[-1]} != kernel input channels {kshape[-2]}")
    stride = _per_axis(stride, d, "stride")
    padding = _per_axis(padding, d, "padding")
    if any(s < 1 for s in stride):
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if any(p < 0 for p in padding):
        raise ParameterError(f"padding must be >= 0, got {padding}")
    ksize = kshape[:d]
    spatial = xshape[1:-1]
    if any(n + 2 * p < k for n, p, k in zip(spatial, padding, ksize)):
        raise DimensionError(f"kernel {ksize} larger than padded input {spatial} (padding {padding})")
    out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, padding, ksize, stride))
    return d, stride, padding, ksize, out


def _im2col_nd(x, d, ksize, stride, padding, out):
    """(N, *S, C) -> cols of shape (M, prod(k) * C) over canonical 3-D layout."""
    n, c = x.shape[0], x.shape[-1]
    x3 = x.reshape((n,) + _canon(d, x.shape[1:-1], 1) + (c,))
    pad3 = _canon(d, padding, 0)
    xp = np.pad(x3, ((0, 0),) + tuple((p, p) for p in pad3) + ((0, 0),))
    cols = _accel.im2col(xp, _canon(d, ksize, 1), _canon(d, stride, 1), _canon(d, out, 1))
    m = n * int(np.prod(out))
    return cols.reshape(m, -1), xp.shape


def _col2im_nd(cols, xpshape, d, ksize, stride, padding, out, xshape):
    n, c = xshape[0], xshape[-1]
    k3 = _canon(d, ksize, 1)
    o3 = _canon(d, out, 1)
    cols = cols.reshape((n,) + o3 + k3 + (c,))
    xp = _accel.col2im(cols, xpshape, _canon(d, stride, 1))
    pad3 = _canon(d, padding, 0)
    sl = tuple(slice(p, n - p) for p, n in zip(pad3, xpshape[1:4]))
    return xp[(slice(None),) + sl].reshape(xshape)


def convolve(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, *S, Cin) with ``kernel`` (*k, Cin, Cout), zero padded."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    d, stride, padding, ksize, out = _conv_geometry(x.shape, kernel.shape, stride, padding)
    cin, cout = kernel.shape[-2], kernel.shape[-1]
    cols, xpshape = _im2col_nd(x.data, d, ksize, stride, padding, out)
    wmat = kernel.data.reshape(-1, cout)
    res = (cols @ wmat).reshape((x.shape[0],) + out + (cout,))

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat.T
            gx = _col2im_nd(gcols, xpshape, d, ksize, stride, padding, out, x.shape)
        return gx, gk

    return _make(res, (x, kernel), bw, "convolve")


def transpose_convolve(x, kernel, stride=1):
    """Adjoint of :func:`convolve` with "same" padding.

    ``kernel`` has shape (*k, Cout, Cin) with odd k; it is the kernel of the
    forward convolution this operation is the adjoint of, so ``x`` carries
    ``Cin`` channels and the result ``Cout``. Spatial extent is multiplied by
    ``stride`` (padding (k-1)/2, output padding stride-1).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    d = kernel.ndim - 2
    if d < 1 or d > 3 or x.ndim != d + 2:
        raise DimensionError(f"input shape {x.shape} does not match kernel shape {kernel.shape}")
    stride = _per_axis(stride, d, "stride")
    if any(s < 1 for s in stride):
        raise ParameterError(f"stride must be >= 1, got {stride}")
    ksize = kernel.shape[:d]
    if any(k % 2 == 0 for k in ksize):
        raise ParameterError(f"transpose_convolve needs odd kernel sizes, got {ksize}")
    cout, cin = kernel.shape[-2], kernel.shape[-1]
    if x.shape[-1] != cin:
        raise DimensionError(f"input channels {x.shape[-1]} != kernel output channels {cin}")
    padding = tuple((k - 1) // 2 for k in ksize)
    insz = x.shape[1:-1]
    big = tuple(n * s for n, s in zip(insz, stride))
    outshape = (x.shape[0],) + big + (cout,)
    n = x.shape[0]
    wmat = kernel.data.reshape(-1, cin)
    xpshape = (n,) + tuple(b + 2 * p for b, p in zip(_canon(d, big, 1), _canon(d, padding, 0))) + (cout,)
    x2 = x.data.reshape(-1, cin)
    res = _col2im_nd(x2 @ wmat.T, xpshape, d, ksize, stride, padding, insz, outshape)

    def bw(g):
        cols, _ = _im2col_nd(g, d, ksize, stride, padding, insz)
        gx = (cols @ wmat).reshape(x.shape) if x.requires_grad else None
        gk = (cols.T @ x2).reshape(kernel.shape) if kernel.requires_grad else None
        return gx, gk

    return _make(res, (x, kernel), bw, "transpose_convolve")


def patches(x, ksize, stride=1, padding=0):
    """Receptive-field extraction: (N, *S, C) -> (N, *O, prod(k), C).

    Also returns a constant (*O, prod(k)) boolean array marking which field
    entries fall inside the unpadded input.
    """
    x = as_tensor(x)
    d = x.ndim - 2
    ksize = _per_axis(ksize, d, "ksize")
    kshape = ksize + (x.shape[-1], 1)
    d, stride, padding, ksize, out = _conv_geometry(x.shape, kshape, stride, padding)
    kk = int(np.prod(ksize))
    c = x.shape[-1]
    cols, xpshape = _im2col_nd(x.data, d, ksize, stride, padding, out)
    res = cols.reshape((x.shape[0],) + out + (kk, c))
    ones = np.ones((1,) + x.shape[1:-1] + (1,))
    vcols, _ = _im2col_nd(ones, d, ksize, stride, padding, out)
    valid = vcols.reshape(out + (kk,)) > 0.5

    def bw(g):
        return (_col2im_nd(g.reshape(-1, kk * c), xpshape, d, ksize, stride, padding, out, x.shape),)

    return _make(res, (x,), bw, "patches"), valid


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

GATES = ("input", "forget", "output", "candidate")


@dataclass
class MemoryState:
    """Hidden and cell maps of a convolutional recurrent cell.

    ``box`` records the high-resolution region the maps are expressed in, or
    None when they are not tied to a crop.
    """

    hidden: Tensor
    cell: Tensor
    box: Any = None

    @classmethod
    def zeros(cls, shape, box=None):
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)), box)

    def detach(self):
        return MemoryState(Tensor(self.hidden.data.copy()), Tensor(self.cell.data.copy()), self.box)


def recurrent_cell_step(x, state, gate_kernels, gate_biases=None):
    """One ConvLSTM update.

    ``gate_kernels`` maps each name in ``GATES`` to a kernel of shape
    (*k, Cin + Ch, Ch); ``k`` must be odd so the spatial extent is preserved.
    """
    x = as_tensor(x)
    h, c = state.hidden, state.cell
    if x.shape[:-1] != h.shape[:-1] or h.shape != c.shape:
        raise DimensionError(f"input {x.shape} and state {h.shape}/{c.shape} spatial extents differ")
    missing = [g for g in GATES if g not in gate_kernels]
    if missing:
        raise ParameterError(f"missing gate kernels {missing}")
    kern = concat([gate_kernels[g] for g in GATES], axis=-1)
    ksize = kern.shape[:-2]
    pad_ = tuple((k - 1) // 2 for k in ksize)
    z = convolve(concat([x, h], axis=-1), kern, 1, pad_)
    if gate_biases is not None:
        z = z + concat([gate_biases[g] for g in GATES], axis=-1)
    ch = h.shape[-1]
    zi, zf, zo, zg = (getitem(z, (Ellipsis, slice(i * ch, (i + 1) * ch))) for i in range(4))
    cell = sigmoid(zf) * c + sigmoid(zi) * tanh(zg)
    hidden = sigmoid(zo) * tanh(cell)
    return hidden, MemoryState(hidden, cell, state.box)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_difference(f, xs, h=1e-5, coords=None):
    """Central-difference gradient of scalar ``f(*xs)`` (plain arrays in, float out)."""
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")
    xs = [np.array(x, dtype=np.float64) for x in xs]
    out = []
    for k, x in enumerate(xs):
        g = np.zeros_like(x)
        idxs = itertools.product(*map(range, x.shape)) if coords is None else coords[k]
        for idx in idxs:
            old = x[idx]
            x[idx] = old + h
            fp = float(f(*xs))
            x[idx] = old - h
            fm = float(f(*xs))
            x[idx] = old
            g[idx] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def finite_difference_check(f, x, h=1e-5, coords=None):
    """Max relative error between tape gradients and central differences.

    ``f`` maps Tensors to a scalar Tensor. ``x`` is an array or a list of
    arrays. Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    xs = [np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for v in xs]
    params = [Tensor(v, requires_grad=True) for v in xs]
    with Tape() as tape:
        loss = f(*params)
    analytic = tape.gradient(loss, params)

    def plain(*arrs):
        return f(*[Tensor(a) for a in arrs]).item()

    numeric = central_difference(plain, xs, h, coords)
    err = 0.0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        if coords is not None:
            idx = tuple(np.array(coords[k]).T) if len(coords[k]) else None
            if idx is None:
                continue
            a, n = a[idx], n[idx]
        if a.size:
            err = max(err, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))))
    return err
