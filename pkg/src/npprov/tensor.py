"""Dense arrays with a reverse-mode differentiation graph.

A :class:`Tensor` wraps a numpy array. Every primitive in this module returns
a new tensor that remembers its inputs and a closure mapping the upstream
gradient onto gradients for those inputs. :func:`backward` walks the graph in
reverse topological order and returns gradients for a named parameter set.

Convolutions use channel-first layout with an optional leading batch axis:
``conv1d`` takes ``[C_in, L]`` or ``[B, C_in, L]`` and filters
``[C_out, C_in, K]``; transposed convolutions take filters
``[C_in, C_out, K]`` so that ``conv_transpose1d(., w)`` is the exact adjoint
of ``conv1d(., w)``.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "ShapeError", "NumericFault", "as_tensor", "param",
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "sum", "mean",
    "exp", "log", "relu", "softplus", "sigmoid", "reshape", "transpose",
    "pad", "getitem", "conv1d", "conv_transpose1d", "conv2d",
    "conv_transpose2d", "affine_pointwise", "backward", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericFault(ArithmeticError):
    """A primitive produced NaN or infinite values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def exp(self): return exp(self)
    def log(self): return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def param(data, name: str | None = None) -> Tensor:
    """Leaf tensor that participates in differentiation."""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericFault(f"{op} produced non-finite values (shape {data.shape})")
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Constants adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("subtract", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "subtract")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("multiply", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), grad_fn, "multiply")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("divide", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "divide")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0), (a,),
                 lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0, a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * expit(a.data),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and structure

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = sum(a, axis, keepdims)
    return mul(total, 1.0 / (a.data.size // max(total.data.size, 1)))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, grad_fn, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def pad(a, widths) -> Tensor:
    """Zero-pad; ``widths`` follows :func:`numpy.pad`."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


def getitem(a, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _make(np.array(a.data[idx]), (a,), grad_fn, "getitem")


# ---------------------------------------------------------------------------
# convolutions

def _spatial(x: np.ndarray, nd: int) -> tuple[np.ndarray, bool]:
    if x.ndim == nd + 1:
        return x[None], True
    if x.ndim == nd + 2:
        return x, False
    raise ShapeError(f"conv{nd}d: expected input rank {nd + 1} or {nd + 2}, got shape {x.shape}")


def _windows(shape_in, kshape, stride):
    """Slices selecting, for each kernel offset, the strided input samples."""
    out = tuple((n - k) // stride + 1 for n, k in zip(shape_in, kshape))
    sls = []
    for offs in itertools.product(*(range(k) for k in kshape)):
        sls.append(tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offs, out)))
    return out, sls


def _im2col(xp: np.ndarray, kshape, stride):
    nd = len(kshape)
    out, sls = _windows(xp.shape[-nd:], kshape, stride)
    cols = np.stack([xp[(Ellipsis,) + s] for s in sls], axis=2)  # [B, C, Kp, *out]
    b, c = xp.shape[:2]
    return cols.reshape(b, c * len(sls), -1), out


def _col2im(cols: np.ndarray, c: int, padded_shape, kshape, stride):
    out, sls = _windows(padded_shape, kshape, stride)
    b = cols.shape[0]
    cols = cols.reshape((b, c, len(sls)) + out)
    xp = np.zeros((b, c) + tuple(padded_shape), dtype=cols.dtype)
    for i, s in enumerate(sls):
        xp[(Ellipsis,) + s] += cols[:, :, i]
    return xp


def _crop(xp: np.ndarray, padding: int, shape) -> np.ndarray:
    return xp[(Ellipsis,) + tuple(slice(padding, padding + n) for n in shape)]


def _corr(x, w, stride, padding):
    """Cross-correlation of batched ``x`` [B,Ci,*S] with ``w`` [Co,Ci,*K]."""
    nd = w.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * nd) if padding else x
    cols, out = _im2col(xp, w.shape[2:], stride)
    y = w.reshape(w.shape[0], -1) @ cols
    return y.reshape((x.shape[0], w.shape[0]) + out), cols


def _corr_weight_grad(x, g, stride, padding, kshape):
    nd = len(kshape)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * nd) if padding else x
    cols, _ = _im2col(xp, kshape, stride)
    b, co = g.shape[:2]
    gw = np.einsum("bop,bqp->oq", g.reshape(b, co, -1), cols, optimize=True)
    return gw.reshape((co, x.shape[1]) + tuple(kshape))


def _conv(x, w, stride: int, padding: int, nd: int, op: str) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    if w.ndim != nd + 2:
        raise ShapeError(f"{op}: filters must have rank {nd + 2}, got shape {w.shape}")
    xb, squeeze = _spatial(x.data, nd)
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"{op}: input {x.shape} has {xb.shape[1]} channels, filters {w.shape} expect {w.shape[1]}")
    for n, k in zip(xb.shape[2:], w.shape[2:]):
        if k > n + 2 * padding:
            raise ShapeError(f"{op}: kernel {w.shape} longer than padded input {x.shape}")
    y, _ = _corr(xb, w.data, stride, padding)
    in_shape = xb.shape[2:]

    def grad_fn(g):
        gb = g[None] if squeeze else g
        gx = gw = None
        if x.requires_grad:
            gx = _corr_input_adjoint(gb, w.data, stride, padding, in_shape)
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = _corr_weight_grad(xb, gb, stride, padding, w.shape[2:])
        return gx, gw

    return _make(y[0] if squeeze else y, (x, w), grad_fn, op)


def _conv_transpose(x, w, stride: int, padding: int, output_padding: int, nd: int, op: str) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    if w.ndim != nd + 2:
        raise ShapeError(f"{op}: filters must have rank {nd + 2}, got shape {w.shape}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"{op}: output_padding must lie in [0, stride), got {output_padding}")
    xb, squeeze = _spatial(x.data, nd)
    if xb.shape[1] != w.shape[0]:
        raise ShapeError(f"{op}: input {x.shape} has {xb.shape[1]} channels, filters {w.shape} expect {w.shape[0]}")
    out_shape = tuple(
        (n - 1) * stride - 2 * padding + k + output_padding for n, k in zip(xb.shape[2:], w.shape[2:])
    )
    if min(out_shape) < 1:
        raise ShapeError(f"{op}: empty output for input {x.shape} and filters {w.shape}")
    y = _corr_input_adjoint(xb, w.data, stride, padding, out_shape)

    def grad_fn(g):
        gb = g[None] if squeeze else g
        gx = gw = None
        if x.requires_grad:
            gx, _ = _corr(gb, w.data, stride, padding)
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = _corr_weight_grad(gb, xb, stride, padding, w.shape[2:])
        return gx, gw

    return _make(y[0] if squeeze else y, (x, w), grad_fn, op)


def _corr_input_adjoint(g, w, stride, padding, in_shape):
    """Adjoint of :func:`_corr` with respect to its input.

    Trailing input samples never reached by a window (possible when the
    padded length exceeds what the strided windows cover) get zeros.
    """
    padded = tuple(n + 2 * padding for n in in_shape)
    kshape = w.shape[2:]
    covered = tuple(stride * (m - 1) + k for m, k in zip(g.shape[2:], kshape))
    b = g.shape[0]
    cols = w.reshape(w.shape[0], -1).T @ g.reshape(b, w.shape[0], -1)
    xp = _col2im(cols, w.shape[1], covered, kshape, stride)
    if covered != padded:
        xp = np.pad(xp, [(0, 0), (0, 0)] + [(0, p - c) for p, c in zip(padded, covered)])
    return _crop(xp, padding, in_shape)


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv(x, w, stride, padding, 1, "conv1d")


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv(x, w, stride, padding, 2, "conv2d")


def conv_transpose1d(x, w, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    return _conv_transpose(x, w, stride, padding, output_padding, 1, "conv_transpose1d")


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    return _conv_transpose(x, w, stride, padding, output_padding, 2, "conv_transpose2d")


def affine_pointwise(x, w, b=None, batched: bool = False) -> Tensor:
    """Channel-mixing affine map at every position (a 1x1 convolution).

    ``x`` is ``[C_in, *S]``, or ``[B, C_in, *S]`` when ``batched``; ``w`` is
    ``[C_out, C_in]`` and ``b`` is ``[C_out]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"affine_pointwise: weights must be [C_out, C_in], got {w.shape}")
    xb = x.data if batched else x.data[None]
    if xb.ndim < 2 or xb.shape[1] != w.shape[1]:
        raise ShapeError(f"affine_pointwise: input {x.shape} does not have {w.shape[1]} channels")
    flat = xb.reshape(xb.shape[0], xb.shape[1], -1)
    y = (w.data @ flat).reshape((xb.shape[0], w.shape[0]) + xb.shape[2:])
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"affine_pointwise: bias {b.shape} does not match weights {w.shape}")
        y = y + b.data.reshape((1, -1) + (1,) * (xb.ndim - 2))
        parents.append(b)

    def grad_fn(g):
        gb_ = g if batched else g[None]
        gflat = gb_.reshape(gb_.shape[0], gb_.shape[1], -1)
        gx = None
        if x.requires_grad:
            gx = (w.data.T @ gflat).reshape(xb.shape)
            gx = gx if batched else gx[0]
        gw = np.einsum("bop,bip->oi", gflat, flat, optimize=True) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=(0, 2))

    return _make(y if batched else y[0], parents, grad_fn, "affine_pointwise")


# ---------------------------------------------------------------------------
# differentiation

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tensor in ``params``.

    ``params`` is a name->tensor mapping or an iterable of named tensors.
    Parameters that do not influence ``loss`` get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not isinstance(params, Mapping):
        params = {p.name: p for p in params}
    leaf_grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaf_grads[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for name, p in params.items():
        g = leaf_grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Largest relative disagreement between backward and central differences.

    Errors are normalised by ``max(1, |analytic|, |numeric|)`` per element.
    """
    x0 = np.array(point, dtype=np.float64, copy=True)
    p = param(x0, name="x")
    analytic = backward(fn(p), {"x": p})["x"]
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = float(fn(Tensor(hi.reshape(x0.shape))).data)
        f_lo = float(fn(Tensor(lo.reshape(x0.shape))).data)
        numeric[i] = (f_hi - f_lo) / (2 * eps)
    analytic = analytic.reshape(-1)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if flat.size else 0.0
