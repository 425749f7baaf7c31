"""Adapter records and the per-example forward strategies.

Three adapter kinds share one base layer ``W0`` of shape ``[d, k]``:

* ``LoraAdapter``: additive, effective weight ``W0 + B @ A``.
* ``FloraAdapter``: multiplicative, effective weight ``W0 * (B @ A)``.
* ``Ia3Adapter``: per-output-column rescaling by a vector ``scale``.

Inputs are row-major activations: ``X`` has shape ``[b, l, d]`` and the layer
computes ``phi(X @ W + bias)``. Each ``*_kernel`` function takes adapters
already stacked along the batch axis; the record-level functions validate a
list of per-example adapters, stack them and call the kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import numkit
from .errors import (
    ArityError,
    ConfigurationError,
    DimensionError,
    HeterogeneousRankError,
    NonFiniteError,
)

KINDS = ("lora", "flora", "ia3")
REDUCTIONS = ("sum", "mean")


def _frozen(arr, name, ndim):
    arr = np.array(arr, order="C", copy=True)
    if arr.dtype not in numkit.FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"{name} has an empty dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def _check_factors(B, A):
    if B.shape[1] != A.shape[0]:
        raise DimensionError(f"factor ranks differ: B is {B.shape}, A is {A.shape}")


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    B: np.ndarray
    A: np.ndarray
    id: str = "lora"
    kind = "lora"

    def __post_init__(self):
        object.__setattr__(self, "B", _frozen(self.B, "B", 2))
        object.__setattr__(self, "A", _frozen(self.A, "A", 2))
        _check_factors(self.B, self.A)

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def shape(self):
        return self.B.shape[0], self.A.shape[1]


@dataclass(frozen=True, eq=False)
class FloraAdapter:
    B: np.ndarray
    A: np.ndarray
    id: str = "flora"
    reduction: str = "sum"
    kind = "flora"

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ConfigurationError(f"reduction must be one of {REDUCTIONS}")
        object.__setattr__(self, "B", _frozen(self.B, "B", 2))
        object.__setattr__(self, "A", _frozen(self.A, "A", 2))
        _check_factors(self.B, self.A)

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def shape(self):
        return self.B.shape[0], self.A.shape[1]


@dataclass(frozen=True, eq=False)
class Ia3Adapter:
    scale: np.ndarray
    id: str = "ia3"
    kind = "ia3"

    def __post_init__(self):
        object.__setattr__(self, "scale", _frozen(self.scale, "scale", 1))

    @property
    def rank(self) -> int:
        return 0


AdapterRecord = Union[LoraAdapter, FloraAdapter, Ia3Adapter]


@dataclass(frozen=True, eq=False)
class AdaptedLinear:
    """Frozen base layer ``phi(x @ W0 + bias)``."""

    W0: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: str = "identity"
    d: int = field(init=False)
    k: int = field(init=False)

    def __post_init__(self):
        if self.activation not in numkit.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        W0 = _frozen(self.W0, "W0", 2)
        object.__setattr__(self, "W0", W0)
        object.__setattr__(self, "d", W0.shape[0])
        object.__setattr__(self, "k", W0.shape[1])
        if self.bias is not None:
            bias = _frozen(self.bias, "bias", 1)
            if bias.shape[0] != self.k:
                raise DimensionError(f"bias length {bias.shape[0]} != output width {self.k}")
            object.__setattr__(self, "bias", bias)


def _finish(pre, layer):
    if layer.bias is not None:
        pre = pre + layer.bias
    return numkit.activation(pre, layer.activation)


def _check_input(X, layer, ndim=3):
    if X.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-D input, got shape {X.shape}")
    if X.shape[-1] != layer.d:
        raise DimensionError(f"input width {X.shape[-1]} != layer input width {layer.d}")


def _check_adapter_shape(ad, layer):
    if ad.kind == "ia3":
        if ad.scale.shape[0] != layer.k:
            raise DimensionError(f"scale length {ad.scale.shape[0]} != output width {layer.k}")
        return
    if ad.shape != (layer.d, layer.k):
        raise DimensionError(f"adapter {ad.id!r} targets {ad.shape}, layer is {(layer.d, layer.k)}")


def _check_batch(X, layer, ads, kind):
    _check_input(X, layer)
    if len(ads) != X.shape[0]:
        raise ArityError(f"{len(ads)} adapters for a batch of {X.shape[0]}")
    for ad in ads:
        if ad.kind != kind:
            raise ConfigurationError(f"expected {kind} adapters, got {ad.kind}")
        _check_adapter_shape(ad, layer)
    ranks = {ad.rank for ad in ads}
    if len(ranks) > 1:
        raise HeterogeneousRankError(f"adapters in one batch have ranks {sorted(ranks)}")


def dense_forward(X: np.ndarray, layer: AdaptedLinear, weight: Optional[np.ndarray] = None):
    """Unadapted layer, or the layer with ``W0`` swapped for ``weight``."""
    W = layer.W0 if weight is None else weight
    if X.shape[-1] != W.shape[0]:
        raise DimensionError(f"input width {X.shape[-1]} != weight rows {W.shape[0]}")
    flat = X.reshape(-1, W.shape[0])
    pre = numkit.matmul(flat, W).reshape(X.shape[:-1] + (W.shape[1],))
    return _finish(pre, layer)


# -- kernels on stacked adapters ---------------------------------------------


def lora_kernel(X, W0, Bs, As):
    """Pre-activation ``X @ W0 + bmm(bmm(X, Bs), As)``; ``Bs: [b,d,r]``, ``As: [b,r,k]``."""
    b, l, d = X.shape
    out = numkit.matmul(X.reshape(b * l, d), W0).reshape(b, l, W0.shape[1])
    out += numkit.bmm(numkit.bmm(X, Bs), As)
    return out


def flora_kernel(X, W0, Bs, As, reduction="sum"):
    """Pre-activation ``reduce_r(A * ((B * X) @ W0))`` for stacked adapters.

    For rank ``r`` every example's input is scaled by each of its ``r`` columns
    of ``B``, the ``b*r*l`` scaled rows go through one shared matmul with
    ``W0``, each copy is scaled by the matching row of ``A`` and the rank axis
    is reduced.
    """
    b, l, d = X.shape
    r, k = As.shape[1], As.shape[2]
    if r == 1:
        scaled = numkit.ewise_mul(X, Bs[:, None, :, 0])
        out = numkit.matmul(scaled.reshape(b * l, d), W0).reshape(b, l, k)
        out *= As[:, None, 0, :]
        return out
    Bt = np.swapaxes(Bs, 1, 2)[:, :, None, :]  # [b, r, 1, d]
    scaled = numkit.ewise_mul(np.broadcast_to(X[:, None], (b, r, l, d)), Bt)
    hidden = numkit.matmul(scaled.reshape(b * r * l, d), W0).reshape(b, r, l, k)
    hidden *= As[:, :, None, :]
    return numkit.reduce(hidden, 1, reduction)


def ia3_kernel(X, W0, scales):
    """Pre-activation ``scale * (X @ W0)``; ``scales: [b, k]``."""
    b, l, d = X.shape
    out = numkit.matmul(X.reshape(b * l, d), W0).reshape(b, l, W0.shape[1])
    return numkit.ewise_mul(out, scales[:, None, :])


def stack_factors(ads: Sequence[Union[LoraAdapter, FloraAdapter]]):
    return np.stack([ad.B for ad in ads]), np.stack([ad.A for ad in ads])


# -- record-level strategies -------------------------------------------------


def lora_forward_shared(X, layer: AdaptedLinear, ad: LoraAdapter):
    """One LoRA adapter shared by the whole batch."""
    _check_input(X, layer)
    if ad.kind != "lora":
        raise ConfigurationError(f"expected a lora adapter, got {ad.kind}")
    _check_adapter_shape(ad, layer)
    b, l, d = X.shape
    flat = X.reshape(b * l, d)
    pre = numkit.matmul(flat, layer.W0) + numkit.matmul(numkit.matmul(flat, ad.B), ad.A)
    return _finish(pre.reshape(b, l, layer.k), layer)


def bmm_lora_forward(X, layer: AdaptedLinear, ads: Sequence[LoraAdapter]):
    """Per-example LoRA through two batched matmuls, one slice per example."""
    _check_batch(X, layer, ads, "lora")
    Bs, As = stack_factors(ads)
    return _finish(lora_kernel(X, layer.W0, Bs, As), layer)


def flora_forward(x, layer: AdaptedLinear, ad: FloraAdapter):
    """Single example ``x: [l, d]`` through the factored multiplicative path."""
    _check_input(x, layer, ndim=2)
    if ad.kind != "flora":
        raise ConfigurationError(f"expected a flora adapter, got {ad.kind}")
    _check_adapter_shape(ad, layer)
    l, d = x.shape
    r = ad.rank
    # x scaled by every column of B: [r, l, d]
    scaled = numkit.ewise_mul(np.broadcast_to(x, (r, l, d)), ad.B.T[:, None, :])
    hidden = numkit.matmul(scaled.reshape(r * l, d), layer.W0).reshape(r, l, layer.k)
    hidden = numkit.ewise_mul(hidden, ad.A[:, None, :])
    pre = hidden[0] if r == 1 else numkit.reduce(hidden, 0, ad.reduction)
    return _finish(pre, layer)


def flora_forward_batched(X, layer: AdaptedLinear, ads: Sequence[FloraAdapter]):
    """Per-example flora adapters around one shared matmul with ``W0``."""
    _check_batch(X, layer, ads, "flora")
    modes = {ad.reduction for ad in ads}
    if len(modes) > 1:
        raise ConfigurationError(f"adapters in one batch mix reduction modes {sorted(modes)}")
    Bs, As = stack_factors(ads)
    return _finish(flora_kernel(X, layer.W0, Bs, As, modes.pop()), layer)


def ia3_forward(X, layer: AdaptedLinear, ads: Sequence[Ia3Adapter]):
    """Per-example IA3 in the commuted form ``phi(scale * (X @ W0))``."""
    _check_batch(X, layer, ads, "ia3")
    scales = np.stack([ad.scale for ad in ads])
    return _finish(ia3_kernel(X, layer.W0, scales), layer)


def materialize_weight(layer: AdaptedLinear, adapter) -> np.ndarray:
    """Full adapted weight: ``W0 + B@A`` (lora) or ``W0 * (B@A)`` (flora).

    A mean-reduction flora adapter materializes to ``W0 * (B@A) / r``.
    """
    if adapter.kind == "ia3":
        raise ConfigurationError("ia3 adapters scale columns; use materialize_ia3")
    _check_adapter_shape(adapter, layer)
    delta = numkit.matmul(adapter.B, adapter.A)
    if adapter.kind == "lora":
        return layer.W0 + delta
    if adapter.reduction == "mean":
        delta = delta / adapter.rank
    return numkit.ewise_mul(layer.W0, delta)


def materialize_ia3(layer: AdaptedLinear, adapter: Ia3Adapter) -> np.ndarray:
    _check_adapter_shape(adapter, layer)
    return numkit.ewise_mul(layer.W0, adapter.scale)


def init_adapter(
    kind: str,
    d: int,
    k: int,
    r: int = 1,
    seed=0,
    strategy: str = "noop",
    dtype=np.float64,
    adapter_id: Optional[str] = None,
    reduction: str = "sum",
) -> AdapterRecord:
    """Fresh adapter for a ``[d, k]`` layer.

    ``strategy="noop"`` starts exactly at the base model: lora gets ``B = 0``
    and a small gaussian ``A``; flora gets ``B = 1`` and an ``A`` whose first
    row is one (``r`` under mean reduction) and whose other rows are zero, so
    ``B@A`` is all ones and the rank components can drift apart in training;
    ia3 gets ``scale = 1``. ``strategy="random"`` draws every factor from a gaussian,
    which is what the oracle tests use.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown adapter kind {kind!r}")
    if d < 1 or k < 1:
        raise DimensionError(f"dimensions must be positive, got d={d}, k={k}")
    if kind != "ia3" and r < 1:
        raise DimensionError(f"rank must be >= 1, got {r}")
    if strategy not in ("noop", "random"):
        raise ConfigurationError(f"unknown init strategy {strategy!r}")
    g = numkit.rng(seed)
    aid = adapter_id or kind
    if kind == "ia3":
        scale = np.ones(k) if strategy == "noop" else 1.0 + 0.5 * g.standard_normal(k)
        return Ia3Adapter(scale.astype(dtype), aid)
    if kind == "lora":
        A = g.standard_normal((r, k)) / np.sqrt(k)
        B = np.zeros((d, r)) if strategy == "noop" else g.standard_normal((d, r))
        return LoraAdapter(B.astype(dtype), A.astype(dtype), aid)
    if strategy == "noop":
        B = np.ones((d, r))
        A = np.zeros((r, k))
        A[0] = 1.0 if reduction == "sum" else r
    else:
        B = g.standard_normal((d, r))
        A = g.standard_normal((r, k))
    return FloraAdapter(B.astype(dtype), A.astype(dtype), aid, reduction)
