"""Host micro-benchmarks of the flora and bmm-LoRA kernel paths.

Timings feed :func:`flora.costmodel.calibrate`. Each cell times the real
kernels from :mod:`flora.adapters` on pre-stacked float32 adapters; the two
paths are interleaved within every repeat so slow drifts in machine load hit
both equally, and the minimum over repeats is kept. Sweeps revisit the whole
grid several times so each cell's repeats are spread out in time.
"""

from __future__ import annotations

import itertools
import timeit
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import numkit
from .adapters import flora_kernel, lora_kernel
from .costmodel import TimingRow

# one timed batch of calls should last about this long
TARGET_SECONDS = 2e-3


def _operands(g, b, l, d, r, dtype):
    X = g.standard_normal((b, l, d)).astype(dtype)
    W0 = (g.standard_normal((d, d)) / np.sqrt(d)).astype(dtype)
    Bs = g.standard_normal((b, d, r)).astype(dtype)
    As = g.standard_normal((b, r, d)).astype(dtype)
    return X, W0, Bs, As


def time_cell(b: int, l: int, d: int, r: int, repeat: int = 15, dtype=np.float32, seed=0) -> Dict[str, float]:
    """Best-of-``repeat`` seconds per call for both kernel paths at one shape."""
    X, W0, Bs, As = _operands(numkit.rng(seed), b, l, d, r, dtype)
    calls = {
        "flora": lambda: flora_kernel(X, W0, Bs, As),
        "bmm_lora": lambda: lora_kernel(X, W0, Bs, As),
    }
    timers = {k: timeit.Timer(f) for k, f in calls.items()}
    number = {}
    for k, t in timers.items():
        once = t.timeit(1)
        number[k] = max(1, int(TARGET_SECONDS / max(once, 1e-9)))
    best = {k: float("inf") for k in calls}
    for _ in range(repeat):
        for k, t in timers.items():
            best[k] = min(best[k], t.timeit(number[k]) / number[k])
    return best


def sweep(
    ds: Sequence[int],
    ranks: Sequence[int],
    bs: Sequence[int] = (8,),
    ls: Sequence[int] = (1,),
    repeat: int = 15,
    dtype=np.float32,
    seed=0,
    passes: int = 3,
) -> List[TimingRow]:
    """Time every grid cell; ``repeat`` repeats are spread over ``passes`` sweeps of the grid.

    Keeping the best time per cell across separate passes means a transient
    load spike can only spoil one pass of a cell, not all its repeats.
    """
    cells = list(itertools.product(ds, bs, ls, ranks))
    per_pass = max(1, -(-repeat // passes))
    best: Dict[tuple, Dict[str, float]] = {}
    for _ in range(passes):
        for cell in cells:
            d, b, l, r = cell
            t = time_cell(b, l, d, r, repeat=per_pass, dtype=dtype, seed=seed)
            prev = best.setdefault(cell, t)
            for k, s in t.items():
                prev[k] = min(prev[k], s)
    return [TimingRow(k, b, l, d, r, s) for (d, b, l, r), t in best.items() for k, s in t.items()]


def first_bmm_win(rows: Iterable[TimingRow], d: int, b: int, l: int) -> Optional[int]:
    """Smallest swept rank where the bmm path is strictly faster; ``None`` if never."""
    times: Dict[int, Dict[str, float]] = {}
    for t in rows:
        if (t.d, t.b, t.l) == (d, b, l):
            times.setdefault(t.r, {})[t.kernel] = t.seconds
    for r in sorted(times):
        if {"flora", "bmm_lora"} <= times[r].keys() and times[r]["bmm_lora"] < times[r]["flora"]:
            return r
    return None
