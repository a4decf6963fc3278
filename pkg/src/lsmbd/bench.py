"""Timing of structured (FFT) versus dense application of the compression operator."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ops import CompressionFilter, build_toeplitz
from .synth import make_rng

#: Default ladder: M_y = 2^9 ... 2^14.
DEFAULT_LADDER = tuple(2 ** k for k in range(9, 15))
AGREEMENT_TOL = 1e-10


class AgreementError(ArithmeticError):
    """The two operator paths disagree on a timed instance."""


@dataclass
class BenchRow:
    M_y: int
    M_z: int
    M_h: int
    structured_ns: float
    dense_ns: float
    structured_coeffs: int
    dense_entries: int
    structured_bytes: int
    dense_bytes: int
    max_abs_diff: float


def _time_ns(fn, min_time: float = 0.05, repeats: int = 5) -> float:
    """Best-of-``repeats`` mean time per call, each sample running at least ``min_time`` seconds."""
    fn()
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        dt = time.perf_counter() - t0
        if dt >= min_time:
            break
        n *= 2
    best = dt / n
    for _ in range(repeats - 1):
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        best = min(best, (time.perf_counter() - t0) / n)
    return best * 1e9


def bench_point(M_y: int, M_z: int, seed: int = 0, min_time: float = 0.05) -> BenchRow:
    rng = make_rng(seed, 50, M_y, M_z)
    hf = CompressionFilter(rng.standard_normal(M_y + M_z - 1), M_y, M_z)
    y = rng.standard_normal(M_y)
    op = hf.operator()
    phi = build_toeplitz(hf)
    diff = float(np.max(np.abs(op.matvec(y) - phi @ y)))
    if not diff <= AGREEMENT_TOL * max(1.0, float(np.max(np.abs(phi @ y)))):
        raise AgreementError(f"structured and dense paths differ by {diff:.3g} at M_y={M_y}")
    t_s = _time_ns(lambda: op.matvec(y), min_time)
    t_d = _time_ns(lambda: phi @ y, min_time)
    del phi
    return BenchRow(M_y, M_z, hf.M_h, t_s, t_d, hf.M_h, M_y * M_z, 8 * hf.M_h, 8 * M_y * M_z, diff)


def run_bench(ladder=DEFAULT_LADDER, ratio: float = 0.25, seed: int = 0,
              min_time: float = 0.05) -> list:
    """One :class:`BenchRow` per ``M_y`` with ``M_z = round(ratio * M_y)``."""
    return [bench_point(int(m), max(1, int(round(ratio * m))), seed, min_time) for m in ladder]


def growth_exponent(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)[0])


def fit_exponents(rows) -> dict:
    sizes = [r.M_y for r in rows]
    return {"structured": growth_exponent(sizes, [r.structured_ns for r in rows]),
            "dense": growth_exponent(sizes, [r.dense_ns for r in rows])}


def write_bench(path, rows, fits: dict | None = None) -> tuple[Path, Path]:
    """Write the timing table and, next to it, ``<stem>_fit.csv`` with the growth exponents."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(BenchRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            d = asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols])
    fits = fit_exponents(rows) if fits is None else fits
    fit_path = path.with_name(path.stem + "_fit.csv")
    with open(fit_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "exponent", "min_M_y", "max_M_y", "points"])
        for name, e in fits.items():
            w.writerow([name, repr(e), rows[0].M_y, rows[-1].M_y, len(rows)])
    return path, fit_path
