"""Continuous- and static-batching serving simulator.

Every step advances each running sequence by one token. A step's duration is
charged by a cost source: the calibrated closed forms (deterministic), a fixed
per-step time, or live timing of a toy block (smoke mode only). Newly admitted
requests add a prefill pass over their prompts, each costed with ``l`` equal
to its own prompt length.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import numkit
from .costmodel import CostParams, bmm_lora_cost, flora_cost
from .errors import ConfigurationError

THROUGHPUT_TOKENS = 8192
LATENCY_TOKENS = 2560
WORKLOAD_FIELDS = ("id", "adapter_id", "prompt_len", "output_len", "arrival_time")
METRIC_FIELDS = (
    "strategy", "rank", "rate", "throughput_tok_s",
    "latency_s_per_tok_mean", "latency_s_per_tok_p50", "latency_s_per_tok_p95",
    "completed", "rejected", "error",
)


@dataclass(frozen=True)
class Request:
    id: int
    adapter_id: str
    prompt_len: int
    output_len: int
    arrival_time: float = 0.0

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ConfigurationError(f"request {self.id}: prompt and output lengths must be >= 1")
        if not self.arrival_time >= 0:
            raise ConfigurationError(f"request {self.id}: arrival time must be >= 0")

    @property
    def tokens(self) -> int:
        """Batch-token budget this request occupies once admitted."""
        return self.prompt_len + self.output_len


def generate_workload(
    n: int,
    len_range: Tuple[int, int] = (50, 2000),
    rate: float = math.inf,
    seed=0,
    arrival: str = "poisson",
    lengths: Optional[Sequence[int]] = None,
    n_adapters: Optional[int] = None,
    prompt_frac: Tuple[float, float] = (0.2, 0.8),
) -> List[Request]:
    """``n`` requests with total lengths uniform over ``len_range``.

    ``lengths`` is an optional empirical histogram sample to draw from instead.
    Each total is split into a prompt and an output part, both at least one
    token. ``rate=inf`` puts every arrival at t=0; otherwise arrivals are a
    Poisson process (or evenly spaced with ``arrival="fixed"``). Every request
    gets its own adapter unless ``n_adapters`` caps the tenant count.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    lo, hi = len_range
    if lo < 2 or hi < lo:
        raise ConfigurationError(f"length range {len_range} is empty or below 2 tokens")
    if not rate > 0:
        raise ConfigurationError("rate must be positive")
    if arrival not in ("poisson", "fixed"):
        raise ConfigurationError(f"unknown arrival process {arrival!r}")
    g = numkit.rng(seed)
    if lengths is not None:
        pool = np.asarray([x for x in lengths if lo <= x <= hi], dtype=int)
        if pool.size == 0:
            raise ConfigurationError("no supplied lengths fall inside the range")
        totals = g.choice(pool, size=n)
    else:
        totals = g.integers(lo, hi + 1, size=n)
    fracs = g.uniform(*prompt_frac, size=n)
    prompts = np.clip(np.rint(totals * fracs).astype(int), 1, totals - 1)
    if math.isinf(rate):
        arrivals = np.zeros(n)
    elif arrival == "fixed":
        arrivals = np.arange(n) / rate
    else:
        arrivals = np.cumsum(g.exponential(1.0 / rate, size=n))
    tenants = n if n_adapters is None else n_adapters
    return [
        Request(i, f"adapter-{i % tenants}", int(p), int(t - p), float(a))
        for i, (p, t, a) in enumerate(zip(prompts, totals, arrivals))
    ]


def write_workload(reqs: Iterable[Request], fh) -> None:
    w = csv.writer(fh)
    w.writerow(WORKLOAD_FIELDS)
    for q in reqs:
        w.writerow([q.id, q.adapter_id, q.prompt_len, q.output_len, repr(q.arrival_time)])


def read_workload(fh) -> List[Request]:
    reader = csv.DictReader(line for line in fh if not line.startswith("#"))
    return [
        Request(int(r["id"]), r["adapter_id"], int(r["prompt_len"]), int(r["output_len"]), float(r["arrival_time"]))
        for r in reader
    ]


# -- step costs ----------------------------------------------------------------


@dataclass(frozen=True)
class ServeConfig:
    """One serving run. Model dimensions only matter for ``cost_source="model"``."""

    strategy: str = "flora"
    rank: int = 1
    max_batched_tokens: int = THROUGHPUT_TOKENS
    request_rate: float = math.inf
    cost_source: str = "model"
    seed: int = 0
    c1: float = 5e-9
    c2: float = 1e-9
    d_model: int = 1024
    n_layers: int = 1
    n_adapted: int = 2
    # multiply-accumulates per token spent outside the adapted projections
    unadapted_macs: int = 0
    step_overhead: float = 0.0
    m: int = 1

    def __post_init__(self):
        if self.strategy not in ("flora", "bmm_lora", "ia3", "none"):
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.rank < 1 or self.max_batched_tokens < 1:
            raise ConfigurationError("rank and max_batched_tokens must be >= 1")
        if self.cost_source not in ("model", "live"):
            raise ConfigurationError(f"unknown cost source {self.cost_source!r}")
        if not (self.c1 > 0 and self.c2 > 0 and self.step_overhead >= 0):
            raise ConfigurationError("c1, c2 must be positive and step_overhead non-negative")


def desk_config(d_model: int, c1: float, c2: float, n_layers: int = 4, **kw) -> ServeConfig:
    """A small decoder: query/key adapted, value/output and a 4x FFN unadapted."""
    kw.setdefault("unadapted_macs", 2 * d_model**2 + 2 * 4 * d_model**2)
    return ServeConfig(c1=c1, c2=c2, d_model=d_model, n_layers=n_layers, n_adapted=2, **kw)


class ModelCost:
    """Step time from the closed forms at the step's batch composition."""

    def __init__(self, cfg: ServeConfig):
        self.cfg = cfg

    def pass_seconds(self, b: int, l: int) -> float:
        cfg = self.cfg
        p = CostParams(cfg.c1, cfg.c2, cfg.d_model, b=b, l=l, r=cfg.rank, m=cfg.m)
        if cfg.strategy == "flora":
            adapted = flora_cost(p)
        elif cfg.strategy == "bmm_lora":
            adapted = bmm_lora_cost(p)
        else:
            adapted = cfg.c2 * b * l * cfg.d_model**2
        return cfg.n_layers * (cfg.n_adapted * adapted + cfg.c2 * cfg.unadapted_macs * b * l)

    def __call__(self, n_decode: int, prompts: Sequence[int] = ()) -> float:
        t = self.cfg.step_overhead
        if n_decode:
            t += self.pass_seconds(n_decode, 1)
        for p in prompts:
            t += self.pass_seconds(1, p)
        return t


class FixedStepCost:
    def __init__(self, seconds: float):
        self.seconds = seconds

    def __call__(self, n_decode, prompts=()):
        return self.seconds


class LiveBlockCost:
    """Wall-clock time of a toy block forward at the step's shape (smoke mode).

    Prefill lengths are capped at ``max_len`` and timings are cached by shape,
    so the simulation stays cheap; results are not reproducible bit-for-bit.
    """

    def __init__(self, cfg: ServeConfig, d_model: int = 64, max_len: int = 64):
        from .model import STRATEGY_KIND, BlockConfig, make_block, make_bundle

        self.cfg = cfg
        self.block_cfg = BlockConfig(d_model=d_model, n_heads=4, d_ff=4 * d_model)
        self.block = make_block(self.block_cfg, seed=cfg.seed, dtype=np.float32)
        kind = STRATEGY_KIND.get(cfg.strategy)
        self.bundle = None if kind is None else make_bundle(
            self.block_cfg, kind, 1 if kind == "ia3" else cfg.rank, seed=cfg.seed, strategy="random", dtype=np.float32
        )
        self.max_len = max_len
        self._cache: Dict[Tuple[int, int], float] = {}

    def _time(self, b, l):
        from .model import block_forward

        key = (b, min(l, self.max_len))
        if key not in self._cache:
            X = numkit.rng(0).standard_normal((b, key[1], self.block_cfg.d_model)).astype(np.float32)
            bundles = [] if self.bundle is None else [self.bundle] * b
            strategy = self.cfg.strategy if self.bundle is not None else "none"
            t0 = time.perf_counter()
            block_forward(X, self.block, bundles, strategy)
            self._cache[key] = time.perf_counter() - t0
        return self._cache[key]

    def __call__(self, n_decode, prompts=()):
        # a real batch pads prompts to the longest one
        t = self.cfg.step_overhead
        if n_decode:
            t += self._time(n_decode, 1)
        if prompts:
            t += self._time(len(prompts), max(prompts))
        return t


def cost_for(cfg: ServeConfig) -> Callable[[int, int, int], float]:
    return ModelCost(cfg) if cfg.cost_source == "model" else LiveBlockCost(cfg)


# -- simulation ----------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """A run of ``steps`` identical steps starting at ``start``."""

    start: float
    steps: int
    step_seconds: float
    running: Tuple[int, ...]
    tokens_in_use: int
    admitted: Tuple[int, ...] = ()
    # True if some arrived, waiting request would have fitted when this segment began
    fit_left_waiting: bool = False

    @property
    def end(self) -> float:
        return self.start + self.steps * self.step_seconds


@dataclass
class ServeMetrics:
    throughput: float
    latency_mean: float
    latency_p50: float
    latency_p95: float
    completion: Dict[int, float]
    generated: Dict[int, int]
    rejected: Dict[int, str]
    trace: List[Segment] = field(default_factory=list)
    first_arrival: float = 0.0

    @property
    def total_tokens(self) -> int:
        return sum(self.generated.values())


def _latency_stats(reqs: Dict[int, Request], completion: Dict[int, float]):
    if not completion:
        return 0.0, 0.0, 0.0
    lat = np.array([(completion[i] - reqs[i].arrival_time) / reqs[i].output_len for i in sorted(completion)])
    return float(lat.mean()), float(np.percentile(lat, 50)), float(np.percentile(lat, 95))


def throughput_from(reqs: Sequence[Request], completion: Dict[int, float], generated: Dict[int, int]) -> float:
    """Output tokens of completed requests over the first-arrival to last-completion span."""
    if not completion:
        return 0.0
    span = max(completion.values()) - min(q.arrival_time for q in reqs if q.id in completion)
    return sum(generated[i] for i in completion) / span if span > 0 else 0.0


def _simulate(cfg: ServeConfig, workload: Sequence[Request], continuous: bool, cost=None) -> ServeMetrics:
    cost = cost or cost_for(cfg)
    by_id = {q.id: q for q in workload}
    if len(by_id) != len(workload):
        raise ConfigurationError("request ids must be unique")
    rejected = {
        q.id: f"needs {q.tokens} tokens, budget is {cfg.max_batched_tokens}"
        for q in workload if q.tokens > cfg.max_batched_tokens
    }
    pending = sorted((q for q in workload if q.id not in rejected), key=lambda q: (q.arrival_time, q.id))
    remaining: Dict[int, int] = {}
    generated = {q.id: 0 for q in pending}
    completion: Dict[int, float] = {}
    trace: List[Segment] = []
    now, used, nxt = 0.0, 0, 0
    waiting: List[Request] = []

    def fits_any():
        return any(q.tokens <= cfg.max_batched_tokens - used for q in waiting)

    while nxt < len(pending) or waiting or remaining:
        while nxt < len(pending) and pending[nxt].arrival_time <= now:
            waiting.append(pending[nxt])
            nxt += 1
        admitted = []
        if continuous or not remaining:
            keep = []
            for q in waiting:
                if q.tokens <= cfg.max_batched_tokens - used:
                    admitted.append(q)
                    used += q.tokens
                    remaining[q.id] = q.output_len
                else:
                    keep.append(q)
            waiting = keep
        if not remaining:
            # idle until the next arrival
            now = max(now, pending[nxt].arrival_time)
            continue
        # the first step carries the prefill of this round's admissions
        n_pf = len(admitted)
        decode = [i for i in remaining if i not in {q.id for q in admitted}]
        first = cost(len(decode), [q.prompt_len for q in admitted]) if n_pf else None
        dt = cost(len(remaining))
        running = tuple(remaining)
        check = continuous and fits_any()
        admitted_ids = tuple(q.id for q in admitted)
        if first is not None:
            # prefill step also emits the first token of every running sequence
            trace.append(Segment(now, 1, first, running, used, admitted_ids, check))
            now += first
            k_done = 1
        else:
            k_done = 0
        k = min(remaining.values()) - k_done
        if k > 0 and continuous:
            k = min(k, _steps_to_fitting_arrival(pending, nxt, now, dt, k, cfg.max_batched_tokens - used))
        if k > 0:
            trace.append(Segment(now, k, dt, running, used, () if first is not None else admitted_ids,
                                 check if first is None else False))
            now += k * dt
        for i in running:
            remaining[i] -= k + k_done
            generated[i] += k + k_done
        for i in [i for i, left in remaining.items() if left == 0]:
            del remaining[i]
            completion[i] = now
            used -= by_id[i].tokens
    mean, p50, p95 = _latency_stats(by_id, completion)
    reqs = [by_id[i] for i in completion]
    return ServeMetrics(
        throughput=throughput_from(reqs, completion, generated),
        latency_mean=mean, latency_p50=p50, latency_p95=p95,
        completion=completion, generated={i: generated[i] for i in completion}, rejected=rejected, trace=trace,
        first_arrival=min((q.arrival_time for q in reqs), default=0.0),
    )


def _steps_to_fitting_arrival(pending, nxt, now, dt, k, free) -> int:
    """Steps until the first arrival inside the window that fits ``free`` tokens."""
    horizon = now + k * dt
    for q in pending[nxt:]:
        if q.arrival_time >= horizon:
            break
        if q.tokens <= free:
            return max(0, math.ceil((q.arrival_time - now) / dt))
    return k


def run_continuous(cfg: ServeConfig, workload: Sequence[Request], cost=None) -> ServeMetrics:
    """Admit waiting requests whenever budget frees up or a request arrives."""
    return _simulate(cfg, workload, continuous=True, cost=cost)


def run_static(cfg: ServeConfig, workload: Sequence[Request], cost=None) -> ServeMetrics:
    """Admit a new batch only once the whole running batch has finished."""
    return _simulate(cfg, workload, continuous=False, cost=cost)


# -- sweeps --------------------------------------------------------------------


def metrics_row(cfg: ServeConfig, m: ServeMetrics) -> dict:
    return {
        "strategy": cfg.strategy, "rank": cfg.rank, "rate": cfg.request_rate,
        "throughput_tok_s": m.throughput, "latency_s_per_tok_mean": m.latency_mean,
        "latency_s_per_tok_p50": m.latency_p50, "latency_s_per_tok_p95": m.latency_p95,
        "completed": len(m.completion), "rejected": len(m.rejected),
        "error": f"{len(m.rejected)} rejected" if m.rejected else "",
    }


def sweep(
    template: ServeConfig,
    ranks: Sequence[int],
    rates: Sequence[float],
    workload_fn: Callable[[float], List[Request]],
    strategies: Sequence[str] = ("flora", "bmm_lora"),
) -> List[dict]:
    """One metrics row per (strategy, rate, rank); the workload is shared per rate."""
    if not ranks or not rates or not strategies:
        raise ConfigurationError("ranks, rates and strategies must be non-empty")
    rows = []
    for rate in rates:
        workload = workload_fn(rate)
        for strategy in strategies:
            for r in ranks:
                cfg = replace(template, strategy=strategy, rank=r, request_rate=rate)
                rows.append(metrics_row(cfg, run_continuous(cfg, workload)))
    return rows


def write_metrics(rows: Iterable[dict], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def inflection_rank(rows: Sequence[dict], rate=None, metric: str = "throughput_tok_s") -> Optional[int]:
    """Smallest rank where bmm-LoRA matches or beats flora; ``None`` if it never does.

    For throughput "beats" means higher; for latency metrics it means lower.
    """
    pick = {}
    for row in rows:
        if rate is None or row["rate"] == rate:
            pick[(row["strategy"], row["rank"])] = row[metric]
    higher = metric == "throughput_tok_s"
    for r in sorted({r for s, r in pick if s == "flora"}):
        if ("bmm_lora", r) not in pick:
            continue
        f, b = pick[("flora", r)], pick[("bmm_lora", r)]
        if (b >= f) if higher else (b <= f):
            return r
    return None
