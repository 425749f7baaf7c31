"""Adapter-only training of one frozen linear layer.

Gradients are closed forms through the materialized effective weight. With
``G = dL/dpre`` (the upstream gradient times the activation derivative) and
``M = X^T G``:

* lora: ``dB = M A^T``, ``dA = B^T M``;
* flora: ``dB = (W0 * M) A^T``, ``dA = B^T (W0 * M)``, each divided by ``r``
  in mean mode;
* ia3: ``dscale = sum over rows of G * (X W0)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import numkit
from .adapters import (
    AdaptedLinear,
    FloraAdapter,
    Ia3Adapter,
    LoraAdapter,
    init_adapter,
    materialize_ia3,
    materialize_weight,
)
from .errors import ConfigurationError, DimensionError, DivergenceError

# desk-scale step sizes; only their order (flora > ia3 > lora) follows the full-scale recipe
DEFAULT_LR = {"flora": 0.5, "ia3": 0.2, "lora": 0.1}


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "flora"
    lr: Optional[float] = None
    steps: int = 5000
    batch_size: int = 256
    seed: int = 0
    rank: int = 1
    momentum: float = 0.0
    tol: float = 1e-12

    def __post_init__(self):
        if self.kind not in DEFAULT_LR:
            raise ConfigurationError(f"unknown adapter kind {self.kind!r}")
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_LR[self.kind])
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.rank < 1:
            raise ConfigurationError("steps must be >= 0, batch_size and rank >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")


def params_of(adapter) -> Dict[str, np.ndarray]:
    if adapter.kind == "ia3":
        return {"scale": adapter.scale}
    return {"B": adapter.B, "A": adapter.A}


def with_params(adapter, params: Dict[str, np.ndarray]):
    if adapter.kind == "ia3":
        return Ia3Adapter(params["scale"], adapter.id)
    if adapter.kind == "lora":
        return LoraAdapter(params["B"], params["A"], adapter.id)
    return FloraAdapter(params["B"], params["A"], adapter.id, adapter.reduction)


def effective_weight(layer: AdaptedLinear, adapter) -> np.ndarray:
    if adapter.kind == "ia3":
        return materialize_ia3(layer, adapter)
    return materialize_weight(layer, adapter)


def layer_output(X, layer, adapter):
    """``phi(X W_eff + bias)`` and the pre-activation, for ``X`` of shape [n, d]."""
    pre = numkit.matmul(X, effective_weight(layer, adapter))
    if layer.bias is not None:
        pre = pre + layer.bias
    return numkit.activation(pre, layer.activation), pre


def grad_adapter(X, layer: AdaptedLinear, adapter, upstream) -> Dict[str, np.ndarray]:
    """Gradients of the loss with respect to the adapter parameters (W0 frozen)."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != layer.d:
        raise DimensionError(f"expected [n, {layer.d}] inputs, got {X.shape}")
    if upstream.shape != (X.shape[0], layer.k):
        raise DimensionError(f"upstream gradient must be {(X.shape[0], layer.k)}, got {upstream.shape}")
    _, pre = layer_output(X, layer, adapter)
    G = upstream * numkit.activation_grad(pre, layer.activation)
    if adapter.kind == "ia3":
        return {"scale": (G * numkit.matmul(X, layer.W0)).sum(axis=0)}
    M = numkit.matmul(X.T, G)
    if adapter.kind == "flora":
        M = layer.W0 * M
        if adapter.reduction == "mean":
            M = M / adapter.rank
    return {"B": numkit.matmul(M, adapter.A.T), "A": numkit.matmul(adapter.B.T, M)}


def mse(pred, target) -> float:
    return float(np.mean((pred - target) ** 2))


def mse_grad(pred, target):
    return 2.0 * (pred - target) / pred.size


def finite_difference(X, layer, adapter, target, h=1e-5) -> Dict[str, np.ndarray]:
    """Central differences of the MSE loss in every adapter parameter."""
    params = {k: v.copy() for k, v in params_of(adapter).items()}
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = mse(layer_output(X, layer, with_params(adapter, params))[0], target)
            p[idx] = orig - h
            down = mse(layer_output(X, layer, with_params(adapter, params))[0], target)
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def gradient_check(X, layer, adapter, target, h=1e-5) -> float:
    """Largest relative error between analytic and finite-difference gradients."""
    pred, _ = layer_output(X, layer, adapter)
    analytic = grad_adapter(X, layer, adapter, mse_grad(pred, target))
    numeric = finite_difference(X, layer, adapter, target, h)
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        worst = max(worst, float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12)))
    return worst


# -- planted recovery tasks ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class Teacher:
    """A frozen student base plus the weight the student should reach."""

    base: AdaptedLinear
    target_weight: np.ndarray
    kind: str

    def __call__(self, X):
        pre = numkit.matmul(X, self.target_weight)
        if self.base.bias is not None:
            pre = pre + self.base.bias
        return numkit.activation(pre, self.base.activation)


def plant_teacher(kind: str, d: int = 16, k: int = 16, seed=0, activation: str = "identity") -> Teacher:
    """Rank-1 planted perturbation of a base whose entries are bounded away from 0.

    ``multiplicative`` gives ``W0 * (b a^T)``, ``additive`` gives ``W0 + c b a^T`` with ``c = 0.5/sqrt(d)``.
    The factors are not constant vectors, so the multiplicative teacher is not
    a column scaling.
    """
    g = numkit.rng(seed)
    W0 = g.choice([-1.0, 1.0], size=(d, k)) * g.uniform(0.5, 1.5, size=(d, k)) / np.sqrt(d)
    base = AdaptedLinear(W0, activation=activation)
    b, a = 1.0 + 0.5 * g.standard_normal(d), 1.0 + 0.5 * g.standard_normal(k)
    if kind == "multiplicative":
        target = W0 * np.outer(b, a)
    elif kind == "additive":
        target = W0 + 0.5 * np.outer(b, a) / np.sqrt(d)
    else:
        raise ConfigurationError(f"unknown teacher kind {kind!r}")
    return Teacher(base, target, kind)


@dataclass
class TrainResult:
    adapter: object
    losses: List[float]
    train_mse: float
    heldout_mse: float
    steps: int
    base_unchanged: bool = True


def train_recovery(teacher: Teacher, cfg: TrainConfig, adapter=None, heldout: int = 512) -> TrainResult:
    """Full-batch gradient descent on the adapter parameters only.

    The training inputs are one fixed Gaussian batch of ``cfg.batch_size``
    rows; the held-out MSE is measured on fresh inputs from the same seed.
    """
    layer = teacher.base
    w0_before = layer.W0.tobytes()
    g = numkit.rng(cfg.seed)
    X = g.standard_normal((cfg.batch_size, layer.d))
    Xh = g.standard_normal((heldout, layer.d))
    Y, Yh = teacher(X), teacher(Xh)
    if adapter is None:
        adapter = init_adapter(cfg.kind, layer.d, layer.k, cfg.rank, seed=cfg.seed)
    params = {k: v.copy() for k, v in params_of(adapter).items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    step = 0
    for step in range(cfg.steps + 1):
        current = with_params(adapter, params)
        pred, _ = layer_output(X, layer, current)
        loss = mse(pred, Y)
        losses.append(loss)
        if not np.isfinite(loss) or loss > 10 * losses[0] + 1e-300:
            raise DivergenceError(f"loss {loss:.3g} at step {step} exceeds 10x the initial {losses[0]:.3g}", losses)
        if loss < cfg.tol or step == cfg.steps:
            break
        grads = grad_adapter(X, layer, current, mse_grad(pred, Y))
        for name, grad in grads.items():
            velocity[name] = cfg.momentum * velocity[name] - cfg.lr * grad
            params[name] = params[name] + velocity[name]
    final = with_params(adapter, params)
    return TrainResult(
        adapter=final,
        losses=losses,
        train_mse=losses[-1],
        heldout_mse=mse(layer_output(Xh, layer, final)[0], Yh),
        steps=step,
        base_unchanged=layer.W0.tobytes() == w0_before,
    )


def write_losses(losses, fh) -> None:
    w = csv.writer(fh)
    w.writerow(("step", "loss"))
    for i, v in enumerate(losses):
        w.writerow((i, repr(float(v))))

