"""Recovery metrics for sparse filters and the source."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Threshold below which a filter recovery counts as successful.
SUCCESS_DB = -50.0
#: Value reported in place of -inf for an exact match.
EXACT_MATCH_DB = -math.inf


class UndefinedMetricError(ValueError):
    pass


def nmse_db(X, X_hat) -> float:
    """``20 log10(||X - X_hat||_F / ||X||_F)``; ``-inf`` on an exact match."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {X_hat.shape}")
    ref = np.linalg.norm(X)
    if ref == 0:
        raise UndefinedMetricError("NMSE is undefined for an all-zero reference")
    err = np.linalg.norm(X - X_hat)
    if err == 0:
        return EXACT_MATCH_DB
    return 20.0 * math.log10(err / ref)


def per_example_nmse_db(X, X_hat, axis=0) -> np.ndarray:
    """NMSE of each example; examples run along ``1 - axis`` (columns by default)."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    ref = np.linalg.norm(X, axis=axis)
    err = np.linalg.norm(X - X_hat, axis=axis)
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(err / ref)


def format_db(value: float) -> str:
    return "< -300 dB" if value == EXACT_MATCH_DB else f"{value:.2f} dB"


def is_success(value: float) -> bool:
    return value < SUCCESS_DB


@dataclass(frozen=True)
class SourceErrorDetail:
    value: float
    clamped: bool
    shift: int = 0
    sign: int = 1


def _check_unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError(f"{name} must have unit norm (got {np.linalg.norm(v):.6g})")
    return v


def source_error_detail(s, s_hat, align: bool = False) -> SourceErrorDetail:
    """``sqrt(1 - <s, s_hat>)`` clamped to [0, 1].

    With ``align`` the inner product is maximised over a sign flip and the
    circular shifts of ``s_hat``; the winning shift and sign are reported.
    """
    s = _check_unit(s, "s")
    s_hat = _check_unit(s_hat, "s_hat")
    if s.shape != s_hat.shape:
        raise ValueError("sources must have equal length")
    shift, sign = 0, 1
    inner = float(s @ s_hat)
    if align:
        corr = np.array([s @ np.roll(s_hat, k) for k in range(s.shape[0])])
        k = int(np.argmax(np.abs(corr)))
        # ties resolve to the unshifted, unflipped candidate
        if abs(corr[k]) > abs(inner):
            shift, sign, inner = k, int(np.sign(corr[k]) or 1), float(abs(corr[k]))
        elif inner < 0:
            sign, inner = -1, -inner
    raw = 1.0 - inner
    clamped = raw < 0.0 or raw > 1.0
    return SourceErrorDetail(math.sqrt(min(max(raw, 0.0), 1.0)), clamped, shift, sign)


def source_error(s, s_hat, align: bool = False) -> float:
    return source_error_detail(s, s_hat, align).value


def mutual_coherence(phi) -> float:
    """Largest absolute normalized inner product between distinct columns."""
    phi = np.asarray(phi, dtype=np.float64)
    cols = phi / np.maximum(np.linalg.norm(phi, axis=0), 1e-300)
    g = np.abs(cols.T @ cols)
    np.fill_diagonal(g, 0.0)
    return float(g.max())


def mean_coherence(phi) -> float:
    """Average absolute normalized inner product over distinct column pairs."""
    phi = np.asarray(phi, dtype=np.float64)
    cols = phi / np.maximum(np.linalg.norm(phi, axis=0), 1e-300)
    g = np.abs(cols.T @ cols)
    n = g.shape[0]
    return float((g.sum() - np.trace(g)) / (n * (n - 1)))
