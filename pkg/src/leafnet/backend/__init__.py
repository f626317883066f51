"""Kernel backend: numba-compiled loops by default, pure numpy on request.

Selection is driven by the LEAFNET_BACKEND environment variable ("numba" or
"numpy", read once at import) or programmatically via set_backend(). The
numba path keeps every accumulation in a fixed sequential order, which is
what makes training runs bit-reproducible; the numpy path is the dependency-
light fallback and the baseline for the benchmark in benchmarks/.
"""

import os

import numpy as np

from ..errors import ShapeMismatch

_impl = None
_requested = os.environ.get("LEAFNET_BACKEND", "").strip().lower()


def _load(name):
    if name == "numpy":
        from . import numpy_kernels

        return numpy_kernels
    if name == "numba":
        from . import numba_kernels

        return numba_kernels
    raise ValueError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")


def set_backend(name):
    """Switch the active kernel backend. Returns the previous backend name."""
    global _impl
    prev = _impl.NAME if _impl is not None else None
    _impl = _load(name)
    return prev


def active_backend():
    return _impl.NAME


if _requested:
    set_backend(_requested)
else:
    try:
        set_backend("numba")
    except ImportError:  # pragma: no cover - exercised only without numba
        set_backend("numpy")


def _c(a):
    return np.ascontiguousarray(a)


def matmul_nn(a, b):
    """a[M,K] @ b[K,N], fixed k-order accumulation on the numba path."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    return _impl.mm_nn(_c(a), _c(b))


def matmul_nt(a, b):
    """a[M,K] @ b[N,K]^T -> [M,N]."""
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"matmul_nt: {a.shape} x {b.shape}")
    return _impl.mm_nt(_c(a), _c(b))


def matmul_tn(a, b):
    """a[K,M]^T @ b[K,N] -> [M,N]."""
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"matmul_tn: {a.shape} x {b.shape}")
    return _impl.mm_tn(_c(a), _c(b))


def conv2d_forward(xp, w, stride):
    """Valid cross-correlation on an already-padded input xp[N,C,Hp,Wp]."""
    return _impl.conv_fwd(_c(xp), _c(w), stride[0], stride[1])


def conv2d_input_grad(dy, w, stride, padded_shape):
    return _impl.conv_dx(
        _c(dy), _c(w), stride[0], stride[1], padded_shape[2], padded_shape[3]
    )


def conv2d_weight_grad(dy, xp, stride, kernel_shape):
    return _impl.conv_dw(
        _c(dy), _c(xp), stride[0], stride[1], kernel_shape[2], kernel_shape[3]
    )


def maxpool_forward(x, window, stride, padding):
    return _impl.maxpool_fwd(
        _c(x), window[0], window[1], stride[0], stride[1], padding[0], padding[1]
    )


def maxpool_backward(dy, idx, x_shape):
    return _impl.maxpool_bwd(_c(dy), idx, x_shape[2], x_shape[3])


def reduce_sum_2d(a):
    """Row sums of a 2-D array, sequential within each row on the numba path."""
    if a.shape[1] == 0:
        return np.zeros(a.shape[0], dtype=a.dtype)
    return _impl.reduce_sum_2d(_c(a))


def reduce_max_2d(a):
    """Row maxima plus the first (row-major) argmax per row."""
    return _impl.reduce_max_2d(_c(a))


def channel_stats(x):
    """Per-channel sum and sum of squares over (N, H, W) of x[N,C,H,W]."""
    return _impl.channel_stats(_c(x))
