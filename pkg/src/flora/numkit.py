"""Dense numeric core used by every kernel in the package.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32 or
float64. The helpers here add the shape discipline the adapter kernels rely
on: strict operand checks, a deliberately narrow broadcast rule, and a
per-slice batched matmul.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NonFiniteError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ACTIVATIONS = ("identity", "relu", "gelu")

_GELU_C = np.sqrt(2.0 / np.pi)


def tensor(data, dtype=np.float64) -> np.ndarray:
    """Build a C-contiguous tensor from external data, rejecting NaN/Inf."""
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
    arr = np.array(data, dtype=dtype, order="C", copy=True)
    if arr.ndim == 0:
        raise DimensionError("tensors need at least one axis")
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"all dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"non-finite value at index {tuple(int(i) for i in bad)}")
    return arr


def zeros(shape, dtype=np.float64) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def ones(shape, dtype=np.float64) -> np.ndarray:
    return np.ones(shape, dtype=dtype)


def eye(n, dtype=np.float64) -> np.ndarray:
    return np.eye(n, dtype=dtype)


def rng(seed) -> np.random.Generator:
    """Seeded generator; every random draw in the package goes through one."""
    return np.random.default_rng(seed)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain 2-D matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def bmm(a: np.ndarray, bt: np.ndarray) -> np.ndarray:
    """Batched matmul: ``out[i] = matmul(a[i], bt[i])``.

    Each slice is dispatched as its own GEMM, so slice ``i`` is bitwise
    identical to the unbatched product and the per-slice dispatch cost is
    visible in timings, as it is for a batched kernel on an accelerator.
    """
    if a.ndim != 3 or bt.ndim != 3:
        raise DimensionError(f"bmm expects 3-D operands, got {a.shape} and {bt.shape}")
    if a.shape[0] != bt.shape[0]:
        raise DimensionError(f"batch sizes differ: {a.shape[0]} vs {bt.shape[0]}")
    if a.shape[2] != bt.shape[1]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {bt.shape}")
    out = np.empty((a.shape[0], a.shape[1], bt.shape[2]), dtype=np.result_type(a, bt))
    for i in range(a.shape[0]):
        np.matmul(a[i], bt[i], out=out[i])
    return out


def _aligned_shape(small, ndim, align):
    pad = (1,) * (ndim - len(small))
    return pad + tuple(small) if align == "trailing" else tuple(small) + pad


def ewise_mul(a: np.ndarray, b: np.ndarray, align: str = "trailing") -> np.ndarray:
    """Element-wise product with a one-sided broadcast.

    Shapes must be equal, or one operand must expand to the other's shape by
    repeating along size-1 axes. A lower-rank operand is first padded with
    size-1 axes: on the left for ``align="trailing"`` (its axes line up with
    the other operand's last axes) or on the right for ``align="leading"``.
    So a ``[d]`` vector against a ``[d, r]`` matrix needs ``align="leading"``
    and scales every column.
    """
    if align not in ("trailing", "leading"):
        raise ValueError(f"align must be 'trailing' or 'leading', got {align!r}")
    if a.shape == b.shape:
        return np.multiply(a, b)
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.ndim == small.ndim and a.size < b.size:
        big, small = b, a
    shaped = _aligned_shape(small.shape, big.ndim, align)
    if len(shaped) != big.ndim or any(s not in (1, n) for s, n in zip(shaped, big.shape)):
        raise DimensionError(f"cannot broadcast {small.shape} against {big.shape} ({align})")
    small = small.reshape(shaped)
    return np.multiply(a if a is big else small, b if b is big else small)


def reduce(a: np.ndarray, axis: int, mode: str = "sum") -> np.ndarray:
    """Sum or mean over one axis; the axis is removed. Mean is sum / length."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    if mode == "sum":
        return np.sum(a, axis=axis)
    if mode == "mean":
        return np.sum(a, axis=axis) / a.shape[axis]
    raise ValueError(f"unknown reduction mode {mode!r}")


def activation(a: np.ndarray, kind: str = "identity") -> np.ndarray:
    if kind == "identity":
        return a
    if kind == "relu":
        return np.maximum(a, 0)
    if kind == "gelu":
        # tanh approximation
        return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(a: np.ndarray, kind: str = "identity") -> np.ndarray:
    """Derivative of ``activation(a, kind)`` w.r.t. ``a``; relu'(0) is taken as 0."""
    if kind == "identity":
        return np.ones_like(a)
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    if kind == "gelu":
        inner = _GELU_C * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
        return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t**2) * dinner
    raise ValueError(f"unknown activation {kind!r}")
