"""A single pre-norm transformer block whose projections take adapters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import numkit
from .adapters import (
    AdaptedLinear,
    AdapterRecord,
    bmm_lora_forward,
    dense_forward,
    flora_forward_batched,
    ia3_forward,
    init_adapter,
    materialize_ia3,
    materialize_weight,
)
from .errors import ConfigurationError, DimensionError

PLACEMENTS = ("query", "key", "value", "output", "ff_in", "ff_out")
DEFAULT_PLACEMENTS = ("query", "key")
STRATEGIES = ("flora", "bmm_lora", "ia3", "none")
STRATEGY_KIND = {"flora": "flora", "bmm_lora": "lora", "ia3": "ia3"}

_STRATEGY_FN = {
    "flora": flora_forward_batched,
    "bmm_lora": bmm_lora_forward,
    "ia3": ia3_forward,
}


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    placements: Tuple[str, ...] = DEFAULT_PLACEMENTS

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(self.placements))
        if self.d_model < 1 or self.d_ff < 1 or self.n_heads < 1:
            raise ConfigurationError("block dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.placements:
            raise ConfigurationError("placement set is empty")
        unknown = set(self.placements) - set(PLACEMENTS)
        if unknown:
            raise ConfigurationError(f"unknown placements {sorted(unknown)}")

    def shape(self, placement: str) -> Tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"ff_in": (d, f), "ff_out": (f, d)}.get(placement, (d, d))


@dataclass(frozen=True, eq=False)
class Block:
    cfg: BlockConfig
    layers: Mapping[str, AdaptedLinear]


@dataclass(frozen=True, eq=False)
class AdapterBundle:
    """One tenant's adapters, one record per adapted placement."""

    id: str
    records: Mapping[str, AdapterRecord] = field(default_factory=dict)

    @property
    def kind(self) -> Optional[str]:
        kinds = {rec.kind for rec in self.records.values()}
        return kinds.pop() if len(kinds) == 1 else None


def make_block(cfg: BlockConfig, seed=0, dtype=np.float64) -> Block:
    g = numkit.rng(seed)
    layers = {}
    for name in PLACEMENTS:
        d_in, d_out = cfg.shape(name)
        W = (g.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(dtype)
        layers[name] = AdaptedLinear(W, activation="gelu" if name == "ff_in" else "identity")
    return Block(cfg, layers)


def make_bundle(
    cfg: BlockConfig, kind: str, r: int = 1, seed=0, strategy: str = "noop", bundle_id: str = "tenant", dtype=np.float64
) -> AdapterBundle:
    records = {}
    for i, name in enumerate(cfg.placements):
        d_in, d_out = cfg.shape(name)
        records[name] = init_adapter(
            kind, d_in, d_out, r, seed=(seed, i), strategy=strategy, dtype=dtype, adapter_id=f"{bundle_id}/{name}"
        )
    return AdapterBundle(bundle_id, records)


def layer_norm(X, eps=1e-5):
    mu = X.mean(axis=-1, keepdims=True)
    var = ((X - mu) ** 2).mean(axis=-1, keepdims=True)
    return (X - mu) / np.sqrt(var + eps)


def causal_attention(q, k, v, n_heads):
    b, l, d = q.shape
    dh = d // n_heads

    def heads(t):
        return t.reshape(b, l, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores = np.where(np.tril(np.ones((l, l), dtype=bool)), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return (w @ vh).transpose(0, 2, 1, 3).reshape(b, l, d)


def _check_bundles(block, bundles, strategy, batch):
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    if strategy == "none":
        return
    if len(bundles) != batch:
        raise ConfigurationError(f"{len(bundles)} bundles for a batch of {batch}")
    want = STRATEGY_KIND[strategy]
    for bundle in bundles:
        missing = set(block.cfg.placements) - set(bundle.records)
        if missing:
            raise ConfigurationError(f"bundle {bundle.id!r} lacks placements {sorted(missing)}")
        for name in block.cfg.placements:
            if bundle.records[name].kind != want:
                raise ConfigurationError(
                    f"strategy {strategy} needs {want} adapters, bundle {bundle.id!r} has {bundle.records[name].kind}"
                )


def block_forward(
    X: np.ndarray, block: Block, bundles: Sequence[AdapterBundle] = (), strategy: str = "none"
) -> np.ndarray:
    """Pre-norm attention + FFN block; adapted projections route through ``strategy``."""
    cfg = block.cfg
    if X.ndim != 3 or X.shape[-1] != cfg.d_model:
        raise DimensionError(f"expected [b, l, {cfg.d_model}] input, got {X.shape}")
    _check_bundles(block, bundles, strategy, X.shape[0])

    def project(name, H):
        layer = block.layers[name]
        if strategy == "none" or name not in cfg.placements:
            return dense_forward(H, layer)
        return _STRATEGY_FN[strategy](H, layer, [bundle.records[name] for bundle in bundles])

    h = layer_norm(X)
    attn = causal_attention(project("query", h), project("key", h), project("value", h), cfg.n_heads)
    X = X + project("output", attn)
    return X + project("ff_out", project("ff_in", layer_norm(X)))


def materialized_block(block: Block, bundle: AdapterBundle) -> Block:
    """The block with each adapted weight replaced by its materialized form."""
    layers: Dict[str, AdaptedLinear] = dict(block.layers)
    for name in block.cfg.placements:
        layer, rec = block.layers[name], bundle.records[name]
        W = materialize_ia3(layer, rec) if rec.kind == "ia3" else materialize_weight(layer, rec)
        layers[name] = AdaptedLinear(W, layer.bias, layer.activation)
    return Block(block.cfg, layers)


@dataclass(frozen=True)
class FlopCount:
    """Multiply-accumulate counts for one block forward."""

    adapted: int
    projections: int
    attention: int

    @property
    def total(self) -> int:
        return self.adapted + self.projections + self.attention


def count_flops(cfg: BlockConfig, b: int, l: int, r: int, strategy: str) -> FlopCount:
    """Analytic multiply-accumulate count per block forward.

    Adapted projections of shape ``[d_in, d_out]`` cost ``b*l*d_in*d_out``
    unadapted (and under ia3), ``r`` times that under flora, and that plus
    ``b*l*r*(d_in + d_out)`` batched-matmul work under bmm-LoRA; for a square
    layer these are the cost-model closed forms with unit coefficients.
    Element-wise work is not counted. Attention scores and the weighted sum of
    values add ``2*b*l*l*d_model`` whatever the strategy.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    adapted = projections = 0
    for name in PLACEMENTS:
        d_in, d_out = cfg.shape(name)
        base = b * l * d_in * d_out
        if strategy == "none" or name not in cfg.placements:
            projections += base
        elif strategy == "flora":
            adapted += r * base
        elif strategy == "bmm_lora":
            adapted += base + b * l * r * (d_in + d_out)
        else:
            adapted += base
    return FlopCount(adapted, projections, 2 * b * l * l * cfg.d_model)
