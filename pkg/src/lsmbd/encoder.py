"""Unrolled FISTA encoder with tied weights and its truncated backward pass."""

from __future__ import annotations

import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .ops import MeasurementOperator, apply_source, operator_spectral_norm

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """A non-finite value appeared inside an iterative solve."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class StabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Unrolling depth ``T``, step ``alpha``, sparsity ``lam``, decay ``c``,
    one-sided shrinkage flag and backprop window ``K``."""

    T: int = 15000
    alpha: float = 0.05
    lam: float = 0.1
    c: float = 0.99937
    nonneg: bool = True
    K: int = 100

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.c <= 1:
            raise ValueError("c must lie in (0, 1]")
        if not 1 <= self.K <= self.T:
            raise ValueError("K must satisfy 1 <= K <= T")

    def with_(self, **kw) -> "EncoderConfig":
        if "T" in kw and "K" not in kw:
            kw["K"] = min(self.K, kw["T"])
        return replace(self, **kw)


def shrink(v, b, nonneg=False):
    """Soft threshold ``sign(v) max(|v| - b, 0)``; with ``nonneg`` the one-sided ``max(v - b, 0)``."""
    if b < 0:
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    if nonneg:
        return np.maximum(v - b, 0.0)
    return np.sign(v) * np.maximum(np.abs(v) - b, 0.0)


def shrink_mask(v, b, nonneg=False):
    """Derivative of :func:`shrink`; zero at the kink ``|v| = b``."""
    return (v > b) if nonneg else (np.abs(v) > b)


def bias_schedule(cfg: EncoderConfig, t: int) -> float:
    """Threshold ``alpha * c**t * lam`` used by layer ``t``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return cfg.alpha * cfg.c ** t * cfg.lam


def momentum(t: int) -> tuple[float, float]:
    """FISTA sequence ``(s_t, s_{t+1})`` with ``s_1 = 1``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    s = 1.0
    for _ in range(t - 1):
        s = (1.0 + math.sqrt(1.0 + 4.0 * s * s)) / 2.0
    return s, (1.0 + math.sqrt(1.0 + 4.0 * s * s)) / 2.0


def momentum_weights(T: int) -> np.ndarray:
    """Extrapolation weight used by layers ``1..T``.

    Layer ``t`` forms ``x_{t-1} + (s_{t-1} - 1)/s_t (x_{t-1} - x_{t-2})``; the
    first layer has no history and gets weight 0.
    """
    beta = np.zeros(T + 1)
    s = 1.0
    for t in range(2, T + 1):
        s_next = (1.0 + math.sqrt(1.0 + 4.0 * s * s)) / 2.0
        beta[t] = (s - 1.0) / s_next
        s = s_next
    return beta


def bias_values(cfg: EncoderConfig) -> np.ndarray:
    """``b_t`` for ``t = 0..T`` (index 0 unused by the layers)."""
    return cfg.alpha * cfg.lam * cfg.c ** np.arange(cfg.T + 1, dtype=np.float64)


@dataclass
class EncoderResult:
    x: np.ndarray
    #: iterates ``x_{T-K-1} .. x_T`` (fewer if ``T`` is small); ``tail[-1] is x``
    tail: list
    t_start: int


@dataclass
class EncoderGrads:
    s: np.ndarray
    h: np.ndarray | None
    z: np.ndarray


def encoder_forward(z, op, cfg: EncoderConfig, keep: int | None = None,
                    trace=None) -> EncoderResult:
    """Run ``T`` tied layers ``x_t = S_{b_t}(f(x_{t-1}, x_{t-2}) + alpha A^T z)``.

    ``op`` is any operator with ``forward``/``adjoint`` (``A = Phi C_s``);
    ``z`` may carry leading batch axes.  Only the last ``keep`` (default
    ``K + 2``) iterates are retained.  ``trace(t, x_t)`` is called per layer
    when given.
    """
    z = np.asarray(z, dtype=np.float64)
    keep = cfg.K + 2 if keep is None else keep
    atz = cfg.alpha * op.adjoint(z)
    x_prev = np.zeros_like(atz)
    x = np.zeros_like(atz)
    tail = deque([x_prev, x], maxlen=keep)
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_layers(z, op, cfg, atz, x_prev, x, tail, trace)


def _run_layers(z, op, cfg, atz, x_prev, x, tail, trace):
    alpha = cfg.alpha
    beta = momentum_weights(cfg.T)
    bias = bias_values(cfg)
    for t in range(1, cfg.T + 1):
        w = x + beta[t] * (x - x_prev) if beta[t] else x
        v = w - alpha * op.gram(w) + atz
        x_prev, x = x, shrink(v, bias[t], cfg.nonneg)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"encoder diverged at iteration {t}: non-finite iterate "
                f"(alpha={alpha} may exceed the stability bound)", iteration=t)
        tail.append(x)
        if trace is not None:
            trace(t, x)
    return EncoderResult(x=x, tail=list(tail), t_start=cfg.T - len(tail) + 1)


def encode(z, op, cfg: EncoderConfig) -> np.ndarray:
    return encoder_forward(z, op, cfg, keep=2).x


def encoder_backward(result: EncoderResult, z, op: MeasurementOperator,
                     cfg: EncoderConfig, grad_x):
    """Reverse-mode gradient through the last ``K`` layers.

    ``grad_x`` is dL/dx_T.  ``x_{T-K}`` (and earlier) are treated as
    constants.  Returns :class:`EncoderGrads` with the source and filter
    gradients summed over the batch (``h`` is None when the compression is
    the identity) and the per-example gradient w.r.t. the input ``z``, which
    callers chain through ``z = Phi y`` when the input depends on the filter.
    """
    if not result.tail:
        raise RuntimeError("forward tail is missing; rerun encoder_forward with keep >= K + 2")
    z = np.asarray(z, dtype=np.float64)
    alpha = cfg.alpha
    beta = momentum_weights(cfg.T)
    bias = bias_values(cfg)
    tail = result.tail
    # tail[j] holds x_{t_start + j}
    t_lo = cfg.T - cfg.K + 1
    if len(tail) < 2 or t_lo - 2 < result.t_start or tail[-1] is not result.x:
        raise RuntimeError(f"forward tail does not cover the last K={cfg.K} layers")

    def it(t):
        return tail[t - result.t_start]

    atz = alpha * op.adjoint(z)
    g_s = np.zeros_like(op.s)
    g_h = None if getattr(op, "hf", None) is None else np.zeros_like(op.hf.h)
    g_z = np.zeros_like(z)
    g_cur = np.array(grad_x, dtype=np.float64)
    g_prev = np.zeros_like(g_cur)
    for t in range(cfg.T, t_lo - 1, -1):
        xm1, xm2 = it(t - 1), it(t - 2)
        w = xm1 + beta[t] * (xm1 - xm2) if beta[t] else xm1
        aw = op.forward(w)
        v = w - alpha * op.adjoint(aw) + atz
        gv = g_cur * shrink_mask(v, bias[t], cfg.nonneg)
        agv = op.forward(gv)
        # d<gv, v> = alpha <dA gv, z - A w> - alpha <A gv, dA w>
        gs1, gh1 = op.param_grads(gv, alpha * (z - aw))
        gs2, gh2 = op.param_grads(w, -alpha * agv)
        g_s += gs1 + gs2
        if g_h is not None:
            g_h += gh1 + gh2
        g_z += alpha * agv
        gw = gv - alpha * op.adjoint(agv)
        g_cur, g_prev = g_prev + (1.0 + beta[t]) * gw, -beta[t] * gw
    return EncoderGrads(g_s, g_h, g_z)


def decoder(s, x_hat):
    """Reconstruct full measurements ``C_s x_hat``."""
    return apply_source(s, x_hat)


@dataclass
class StabilityReport:
    sigma_max: float
    inv_sigma: float
    inv_sigma_sq: float
    alpha: float
    ok: bool


def stability_check(op, alpha: float) -> StabilityReport:
    """Compare ``alpha`` with ``1/sigma_max`` and ``1/sigma_max**2`` of ``A``; warn when above the latter."""
    sigma = operator_spectral_norm(op)
    inv = 1.0 / sigma if sigma > 0 else math.inf
    inv2 = inv * inv
    ok = alpha <= inv2
    log.info("stability: sigma_max=%.6g 1/sigma=%.6g 1/sigma^2=%.6g alpha=%.6g",
             sigma, inv, inv2, alpha)
    if not ok:
        warnings.warn(f"step alpha={alpha:g} exceeds 1/sigma_max^2={inv2:.4g}; "
                      "the unrolled iteration may diverge", StabilityWarning, stacklevel=2)
    return StabilityReport(sigma, inv, inv2, alpha, ok)
