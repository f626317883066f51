"""Dense n-d arrays with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 or float64). Operations
executed while a Tape is active record a backward rule; ``backward(loss)``
replays the tape in reverse, accumulating gradients additively into every
tensor that requires them. Without an active tape the same operations are
plain array math, which is what inference uses.

Conventions fixed here and relied on elsewhere:
  * only trailing-dimension and scalar broadcasting
  * reductions run in a deterministic order (sequential on the numba path)
  * reduce-max routes gradient to the first maximum in row-major order
"""

import os
from itertools import zip_longest

import numpy as np

from . import backend
from .errors import DetachedTape, InvalidAxis, NonFinite, NotScalar, ShapeMismatch

DTYPES = {"f32": np.float32, "f64": np.float64}

# debug builds verify finiteness after every op; flip via env or set_debug_checks()
_debug_checks = os.environ.get("LEAFNET_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled):
    global _debug_checks
    prev = _debug_checks
    _debug_checks = bool(enabled)
    return prev


def _as_dtype(dtype):
    if dtype is None:
        return np.float32
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
        return DTYPES[dtype]
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    return d.type


class Tensor:
    """n-d real array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_as_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        if _debug_checks:
            _check_finite(self.data, "tensor init")

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of operations for one forward pass.

    Entries are appended in execution order, so inputs always precede the
    ops that consume them; a single reverse sweep visits each op exactly
    once.
    """

    def __init__(self):
        self._entries = []
        self._prev = None

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, output, backward_fn):
        self._entries.append((output, backward_fn))
        output._tape = self


_active_tape = None


def active_tape():
    return _active_tape


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values in {where}")


def _accumulate(tensor, grad):
    if grad.dtype != tensor.data.dtype:
        grad = grad.astype(tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


def record_op(inputs, out_data, backward_fn, name="op"):
    """Wrap out_data in a Tensor, recording backward_fn if the tape is live.

    backward_fn(g) receives the upstream gradient and must call
    accumulate_grad / _accumulate for each input it serves. Layer
    primitives use this to register bespoke backward rules.
    """
    recorded = _active_tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(out_data, requires_grad=recorded)
    if _debug_checks:
        _check_finite(out.data, name)
    if recorded:
        _active_tape._record(out, backward_fn)
    return out


accumulate_grad = _accumulate  # public alias for layer backward rules


def broadcast_shape(sa, sb):
    """Broadcast result shape (trailing-dimension rule); ShapeMismatch otherwise."""
    out = []
    for da, db in zip_longest(reversed(sa), reversed(sb), fillvalue=1):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeMismatch(f"cannot broadcast {tuple(sa)} with {tuple(sb)}")
    return tuple(reversed(out))


def unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _coerce_pair(a, b):
    if not isinstance(a, Tensor):
        raise TypeError("first operand must be a Tensor")
    if isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise ShapeMismatch(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b, True
    return a, float(b), False


def add(a, b):
    a, b, is_t = _coerce_pair(a, b)
    if is_t:
        broadcast_shape(a.shape, b.shape)
        out_data = a.data + b.data

        def bwd(g):
            if a.requires_grad:
                _accumulate(a, unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(g, b.shape))

        return record_op((a, b), out_data, bwd, "add")
    out_data = a.data + b

    def bwd(g):
        _accumulate(a, g)

    return record_op((a,), out_data, bwd, "add")


def sub(a, b):
    a, b, is_t = _coerce_pair(a, b)
    if is_t:
        broadcast_shape(a.shape, b.shape)
        out_data = a.data - b.data

        def bwd(g):
            if a.requires_grad:
                _accumulate(a, unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(-g, b.shape))

        return record_op((a, b), out_data, bwd, "sub")
    out_data = a.data - b

    def bwd(g):
        _accumulate(a, g)

    return record_op((a,), out_data, bwd, "sub")


def mul(a, b):
    a, b, is_t = _coerce_pair(a, b)
    if is_t:
        broadcast_shape(a.shape, b.shape)
        out_data = a.data * b.data
        a_data, b_data = a.data, b.data

        def bwd(g):
            if a.requires_grad:
                _accumulate(a, unbroadcast(g * b_data, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(g * a_data, b.shape))

        return record_op((a, b), out_data, bwd, "mul")
    return scale(a, b)


def scale(a, s):
    s = float(s)
    out_data = a.data * s

    def bwd(g):
        _accumulate(a, g * s)

    return record_op((a,), out_data, bwd, "scale")


def max_with_scalar(a, s):
    """Elementwise max(a, s); subgradient 0 at exact ties (documented)."""
    s = float(s)
    out_data = np.maximum(a.data, s)
    mask = a.data > s

    def bwd(g):
        _accumulate(a, g * mask.astype(g.dtype))

    return record_op((a,), out_data, bwd, "max_with_scalar")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "max_with_scalar": max_with_scalar, "scale": scale}


def elementwise(op, a, b):
    """Dispatch by op name: add | sub | mul | max_with_scalar | scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def matmul(a, b):
    """2-D matrix product [M,K]x[K,N] with fixed k-order accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch("matmul requires 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dims disagree: {a.shape} x {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeMismatch(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    out_data = backend.matmul_nn(a.data, b.data)
    a_data, b_data = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, backend.matmul_nt(g, b_data))
        if b.requires_grad:
            _accumulate(b, backend.matmul_tn(a_data, g))

    return record_op((a, b), out_data, bwd, "matmul")


def _normalize_axes(axes, ndim, size):
    if size == 0:
        raise InvalidAxis("reduce over an empty tensor")
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        a = ax + ndim if ax < 0 else ax
        if not 0 <= a < ndim:
            raise InvalidAxis(f"axis {ax} invalid for ndim {ndim}")
        norm.append(a)
    if len(set(norm)) != len(norm):
        raise InvalidAxis(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _fold_for_reduce(data, axes):
    """Move reduced axes last and flatten them: returns (2-D view, kept shape, perm)."""
    kept = tuple(i for i in range(data.ndim) if i not in axes)
    perm = kept + axes
    moved = np.ascontiguousarray(np.transpose(data, perm))
    kept_shape = tuple(data.shape[i] for i in kept)
    m = int(np.prod(kept_shape)) if kept_shape else 1
    r = int(np.prod([data.shape[i] for i in axes]))
    return moved.reshape(m, r), kept_shape, perm


def _scatter_back(grad2d, data_shape, axes, perm):
    kept_shape = tuple(data_shape[i] for i in range(len(data_shape)) if i not in axes)
    red_shape = tuple(data_shape[i] for i in axes)
    g = grad2d.reshape(kept_shape + red_shape)
    inv = np.argsort(perm)
    return np.ascontiguousarray(np.transpose(g, inv))


def reduce_sum(t, axes=None):
    axes = _normalize_axes(axes, t.ndim, t.size)
    a2d, kept_shape, perm = _fold_for_reduce(t.data, axes)
    out_data = backend.reduce_sum_2d(a2d).reshape(kept_shape)
    shape = t.shape

    def bwd(g):
        g2d = np.broadcast_to(g.reshape(-1, 1), a2d.shape)
        _accumulate(t, _scatter_back(np.ascontiguousarray(g2d), shape, axes, perm))

    return record_op((t,), out_data, bwd, "sum")


def reduce_mean(t, axes=None):
    axes = _normalize_axes(axes, t.ndim, t.size)
    a2d, kept_shape, perm = _fold_for_reduce(t.data, axes)
    count = a2d.shape[1]
    out_data = backend.reduce_sum_2d(a2d).reshape(kept_shape) / count
    shape = t.shape

    def bwd(g):
        g2d = np.broadcast_to((g / count).reshape(-1, 1), a2d.shape)
        _accumulate(t, _scatter_back(np.ascontiguousarray(g2d), shape, axes, perm))

    return record_op((t,), out_data, bwd, "mean")


def reduce_max(t, axes=None):
    """Max over axes; gradient goes to the first maximum in row-major order."""
    axes = _normalize_axes(axes, t.ndim, t.size)
    a2d, kept_shape, perm = _fold_for_reduce(t.data, axes)
    vals, idx = backend.reduce_max_2d(a2d)
    out_data = vals.reshape(kept_shape)
    shape = t.shape

    def bwd(g):
        g2d = np.zeros(a2d.shape, dtype=g.dtype)
        g2d[np.arange(a2d.shape[0]), idx] = g.reshape(-1)
        _accumulate(t, _scatter_back(g2d, shape, axes, perm))

    return record_op((t,), out_data, bwd, "max")


_REDUCES = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op, t, axes=None):
    """Dispatch by op name: sum | mean | max."""
    try:
        fn = _REDUCES[op]
    except KeyError:
        raise ValueError(f"unknown reduce op {op!r}") from None
    return fn(t, axes)


def backward(loss):
    """Reverse sweep from a scalar loss; populates .grad on requiring tensors."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise DetachedTape("loss was not recorded on an active tape")
    loss.grad = np.ones_like(loss.data)
    for out, bwd_fn in reversed(tape._entries):
        if out.grad is None:
            continue  # not on any path to the loss
        bwd_fn(out.grad)


def grad_check(f, x, eps=1e-5, kink_radius=None):
    """Compare analytic gradients of scalar-valued f against central differences.

    Returns (max_rel_error, excluded) where excluded lists flat indices of
    elements skipped because |x_i| <= kink_radius (points where f is not
    differentiable, e.g. activation kinks at zero). Error metric per
    element: |analytic - numeric| / max(1, |analytic|). Requires f64.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires an f64 tensor")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype="f64")
    with Tape():
        out = f(probe)
        if out.size != 1:
            raise NotScalar("grad_check needs a scalar-valued function")
        if not np.all(np.isfinite(out.data)):
            raise NonFinite("function produced non-finite output")
        backward(out)
    analytic = (
        probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)
    )

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    excluded = []
    for i in range(flat.size):
        if kink_radius is not None and abs(flat[i]) <= kink_radius:
            excluded.append(i)
            continue
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(Tensor(flat.reshape(x.shape), dtype="f64")).item()
        flat[i] = orig - eps
        f_minus = f(Tensor(flat.reshape(x.shape), dtype="f64")).item()
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFinite("finite-difference evaluation produced non-finite value")
        numeric[i] = (f_plus - f_minus) / (2 * eps)

    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    if excluded:
        err[np.array(excluded)] = 0.0
    return float(err.max()) if err.size else 0.0, excluded
