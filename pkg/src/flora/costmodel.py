"""Closed-form serving costs of an adapted linear layer and their calibration.

For a ``[b, l, d]`` batch through a ``d x d`` layer with rank-``r`` adapters:

* bmm-LoRA costs ``2 * m*c1 * d*b*l*r + c2 * b*l*d**2`` (two batched matmuls
  whose batch grows to ``b*m`` with ``m`` adapters per example, plus the base
  matmul);
* flora costs ``c2 * r*b*l*d**2`` (one matmul over ``r`` scaled copies;
  element-wise work is ignored).

``c1`` and ``c2`` are in seconds per multiply-accumulate of the batched and
plain matmul respectively.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .errors import CalibrationError, ConfigurationError

KERNELS = ("flora", "bmm_lora", "matmul", "bmm")
TIMING_FIELDS = ("kernel", "b", "l", "d", "r", "seconds")


@dataclass(frozen=True)
class CostParams:
    c1: float
    c2: float
    d: int
    b: int = 1
    l: int = 1
    r: int = 1
    m: int = 1

    def __post_init__(self):
        for name in ("c1", "c2", "d", "b", "l"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.r < 0:
            raise ConfigurationError(f"r must be non-negative, got {self.r}")
        if self.m < 1:
            raise ConfigurationError(f"m must be >= 1, got {self.m}")


def bmm_lora_cost(p: CostParams) -> float:
    return 2 * (p.m * p.c1) * (p.d * p.b * p.l * p.r) + p.c2 * (p.b * p.l * p.d**2)


def flora_cost(p: CostParams) -> float:
    return p.c2 * (p.r * p.b * p.l * p.d**2)


def flora_preferred(p: CostParams) -> bool:
    """Preference inequality ``2*m*c1/(d*c2) + 1/r >= 1`` (ties go to flora)."""
    if p.r < 1:
        raise ConfigurationError("the preference test needs r >= 1")
    return 2 * (p.m * p.c1) / (p.d * p.c2) + 1 / p.r >= 1


def crossover_rank(c1: float, c2: float, d: int, m: int = 1):
    """Largest rank at which flora is weakly preferred; ``math.inf`` if all are."""
    q = 2 * m * c1 / (d * c2)
    if q >= 1:
        return math.inf
    r = max(1, int(math.floor(1 / (1 - q))))

    def ok(rank):
        return flora_preferred(CostParams(c1, c2, d, r=rank, m=m))

    # settle float rounding around the integer boundary with the predicate itself
    while ok(r + 1):
        r += 1
    while r > 1 and not ok(r):
        r -= 1
    return r


def infer_coeff_ratio(d: int, r_star: float) -> float:
    """``c1/c2`` implied by an observed crossover ``r_star`` at width ``d``."""
    if r_star < 1:
        raise ConfigurationError("crossover rank must be >= 1")
    return d * (1 - 1 / r_star) / 2


# -- calibration ---------------------------------------------------------------


@dataclass(frozen=True)
class TimingRow:
    kernel: str
    b: int
    l: int
    d: int
    r: int
    seconds: float

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigurationError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")


def design_row(row: TimingRow):
    """Coefficients of ``(c1, c2)`` in the closed form for this measurement."""
    tokens = row.b * row.l
    bmm_units = 2 * row.d * tokens * row.r
    if row.kernel == "flora":
        return (0.0, row.r * tokens * row.d**2)
    if row.kernel == "bmm_lora":
        return (bmm_units, tokens * row.d**2)
    if row.kernel == "matmul":
        return (0.0, tokens * row.d**2)
    return (bmm_units, 0.0)


@dataclass
class CalibrationResult:
    c1: float
    c2: float
    n: int
    rms_rel_residual: float
    max_rel_residual: float
    condition: float
    flags: List[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.c1 / self.c2

    def crossover(self, d: int, m: int = 1):
        if self.c1 <= 0:
            return 1
        return crossover_rank(self.c1, self.c2, d, m)


def calibrate(timings: Iterable[TimingRow], c1_floor: float = 1e-3) -> CalibrationResult:
    """Non-negative least-squares fit of ``(c1, c2)`` to measured kernel times.

    Residuals are relative (each row is divided by its measured time), so a
    sweep spanning several orders of magnitude is fitted evenly. ``c1`` is
    flagged as unresolved when it explains less than ``c1_floor`` of the
    batched-matmul time in every bmm row.
    """
    rows = list(timings)
    if not rows:
        raise CalibrationError("no timings supplied")
    X = np.array([design_row(t) for t in rows], dtype=float)
    y = np.array([t.seconds for t in rows], dtype=float)
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise CalibrationError("timings must be positive and finite")
    if np.linalg.matrix_rank(X) < 2:
        raise CalibrationError(
            "design is rank deficient: the grid must include bmm-path rows and vary r or (b, l, d)"
        )
    Xw, yw = X / y[:, None], np.ones_like(y)
    scale = np.max(np.abs(Xw), axis=0)
    coef, _ = nnls(Xw / scale, yw)
    c1, c2 = coef / scale
    if c2 <= 0:
        raise CalibrationError("fitted c2 is zero; plain-matmul cost not identifiable from these timings")
    rel = (X @ np.array([c1, c2]) - y) / y
    flags = []
    bmm_rows = X[:, 0] > 0
    if c1 == 0 or np.max(c1 * X[bmm_rows, 0] / y[bmm_rows]) < c1_floor:
        flags.append("c1_unresolved")
    elif c1 < c2:
        flags.append("c1_below_c2")
    if np.sqrt(np.mean(rel**2)) > 0.25:
        flags.append("poor_fit")
    return CalibrationResult(
        c1=float(c1),
        c2=float(c2),
        n=len(rows),
        rms_rel_residual=float(np.sqrt(np.mean(rel**2))),
        max_rel_residual=float(np.max(np.abs(rel))),
        condition=float(np.linalg.cond(Xw / scale)),
        flags=flags,
    )


def synthetic_timings(
    c1: float,
    c2: float,
    grid: Sequence[tuple],
    kernels: Sequence[str] = ("flora", "bmm_lora"),
    noise: float = 0.0,
    seed=0,
) -> List[TimingRow]:
    """Timings generated from the closed forms over ``(b, l, d, r)`` points.

    ``noise`` is the standard deviation of a multiplicative gaussian factor.
    """
    g = np.random.default_rng(seed)
    rows = []
    for b, l, d, r in grid:
        for kernel in kernels:
            probe = TimingRow(kernel, b, l, d, r, 1.0)
            x1, x2 = design_row(probe)
            seconds = c1 * x1 + c2 * x2
            if noise:
                seconds *= max(1e-3, 1.0 + noise * g.standard_normal())
            rows.append(TimingRow(kernel, b, l, d, r, seconds))
    return rows


def write_timings(rows: Iterable[TimingRow], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(TIMING_FIELDS)
    for t in rows:
        writer.writerow([t.kernel, t.b, t.l, t.d, t.r, repr(t.seconds)])


def read_timings(fh) -> List[TimingRow]:
    reader = csv.DictReader(line for line in fh if not line.startswith("#"))
    return [
        TimingRow(row["kernel"], int(row["b"]), int(row["l"]), int(row["d"]), int(row["r"]), float(row["seconds"]))
        for row in reader
    ]


FIT_FIELDS = ("d", "c1", "c2", "ratio", "crossover", "n", "rms_rel_residual", "max_rel_residual", "flags")


def write_fit(fits: dict, fh) -> None:
    """One CSV row per width; ``fits`` maps d (or ``"all"``) to a result."""
    writer = csv.writer(fh)
    writer.writerow(FIT_FIELDS)
    for d, fit in fits.items():
        cross = fit.crossover(d) if isinstance(d, int) else ""
        writer.writerow([
            d, repr(fit.c1), repr(fit.c2), repr(fit.ratio),
            "inf" if cross == math.inf else cross, fit.n,
            f"{fit.rms_rel_residual:.6g}", f"{fit.max_rel_residual:.6g}", ";".join(fit.flags),
        ])


def read_fit(fh, d: Optional[int] = None) -> tuple:
    """``(c1, c2)`` for width ``d`` from a fit report (falls back to ``all``)."""
    rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise CalibrationError("fit report is empty")
    by_d = {row["d"]: row for row in rows}
    row = by_d.get(str(d)) or by_d.get("all")
    if row is None:
        if len(rows) == 1:
            row = rows[0]
        else:
            raise CalibrationError(f"fit report has no row for d={d}")
    return float(row["c1"]), float(row["c2"])
