"""Losses, ADAM with unit-norm projection, and the two-stage training pipeline.

Stage 1 learns the source with the compression fixed to the identity and
produces code targets; stage 2 freezes the source and learns the Toeplitz
compression filter so that the encoder reproduces those targets from
compressed measurements.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .encoder import DivergenceError, EncoderConfig, encode, encoder_backward, encoder_forward, stability_check
from .metrics import nmse_db, source_error
from .ops import CompressionFilter, MeasurementOperator
from .synth import Dataset, make_rng

log = logging.getLogger(__name__)

NORM_TOL = 1e-12


class DegenerateParameterError(ValueError):
    """A parameter collapsed to zero and cannot be renormalized."""


class TrainingDiverged(ArithmeticError):
    """Training hit a non-finite value; ``history`` holds the epochs completed so far."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def loss_stage1(y, y_hat) -> float:
    """``0.5 * sum ||y - y_hat||^2`` over all examples."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return 0.5 * float(np.sum((y - y_hat) ** 2))


def loss_stage2(x_target, x_hat) -> float:
    return loss_stage1(x_target, x_hat)


def project_unit_norm(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0 or not math.isfinite(n):
        raise DegenerateParameterError("cannot normalize a zero or non-finite vector")
    return v / n


def lr_schedule(base: float, epoch: int, factor: float = 0.9, period: int = 100) -> float:
    if period < 1:
        raise ValueError("period must be >= 1")
    return base * factor ** (epoch // period)


@dataclass
class AdamState:
    """Moment accumulators for one parameter array."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


def adam_step(state: AdamState, grad, param) -> np.ndarray:
    """One bias-corrected ADAM update; mutates ``state`` and returns the new parameter."""
    grad = np.asarray(grad, dtype=np.float64)
    param = np.asarray(param, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class StageConfig:
    stage: int
    encoder: EncoderConfig
    epochs: int = 1000
    batch_size: int | None = None
    lr: float = 0.03
    lr_decay: float = 0.9
    lr_period: int = 100
    eps: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def stage1_defaults(encoder: EncoderConfig | None = None, **kw) -> StageConfig:
    return StageConfig(1, encoder or EncoderConfig(), **{"lr": 0.03, "eps": 1e-2, **kw})


def stage2_defaults(encoder: EncoderConfig | None = None, **kw) -> StageConfig:
    return StageConfig(2, encoder or EncoderConfig(), **{"lr": 1e-3, "eps": 1e-8,
                                                         "batch_size": 100, **kw})


@dataclass
class HistoryRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float = math.nan
    source_error: float = math.nan
    source_error_aligned: float = math.nan
    nmse_db: float = math.nan

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Stage1Result:
    s: np.ndarray
    targets: np.ndarray
    history: list = field(default_factory=list)


@dataclass
class Stage2Result:
    hf: CompressionFilter
    history: list = field(default_factory=list)


def _batches(n, batch_size, rng):
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def compute_targets(Y, s, enc: EncoderConfig) -> np.ndarray:
    """Stage-1 encoder codes ``x~`` for full measurements ``Y`` (M_y x N), returned M_x x N."""
    Y = np.asarray(Y, dtype=np.float64)
    M_x = Y.shape[0] - len(s) + 1
    return encode(Y.T, MeasurementOperator(s, M_x), enc).T.copy()


def stage1_step_grad(Yb, s, enc: EncoderConfig, M_x: int):
    """Loss and gradient w.r.t. the source for one batch of full measurements (rows)."""
    op = MeasurementOperator(s, M_x)
    res = encoder_forward(Yb, op, enc)
    y_hat = op.forward(res.x)
    resid = y_hat - Yb
    loss = 0.5 * float(np.sum(resid ** 2))
    # decoder path plus the encoder path through dL/dx_T = C_s^T (y_hat - y)
    g_dec, _ = op.param_grads(res.x, resid)
    g_enc = encoder_backward(res, Yb, op, enc, op.adjoint(resid)).s
    return loss, g_dec + g_enc, res.x


def train_stage1(dataset: Dataset, cfg: StageConfig, s_init=None, s_true=None,
                 M_s: int | None = None, callback=None) -> Stage1Result:
    """Learn the source from full measurements with ``Phi = I``.

    Returns the learned unit-norm source, the codes it produces on
    ``dataset`` and one :class:`HistoryRecord` per epoch.  Each record holds
    the loss evaluated *before* that epoch's update.
    """
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    enc = cfg.encoder
    Y = dataset.Y.T
    if s_init is None:
        if M_s is None:
            raise ValueError("either s_init or M_s is required")
        s_init = make_rng(cfg.seed, 10).standard_normal(M_s)
    s = project_unit_norm(s_init)
    M_x = Y.shape[1] - s.shape[0] + 1
    stability_check(MeasurementOperator(s, M_x), enc.alpha)
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = make_rng(cfg.seed, 11)
    history = []
    for epoch in range(cfg.epochs):
        adam.lr = lr_schedule(cfg.lr, epoch, cfg.lr_decay, cfg.lr_period)
        total = 0.0
        codes = np.zeros((Y.shape[0], M_x))
        rec_s = s
        try:
            for idx in _batches(Y.shape[0], cfg.batch_size, rng):
                loss, g, xb = stage1_step_grad(Y[idx], s, enc, M_x)
                total += loss
                codes[idx] = xb
                s = project_unit_norm(adam_step(adam, g, s))
                assert abs(np.linalg.norm(s) - 1.0) <= NORM_TOL
        except (DivergenceError, FloatingPointError, DegenerateParameterError) as exc:
            raise TrainingDiverged(f"stage 1 diverged in epoch {epoch}: {exc}", history) from exc
        rec = HistoryRecord(epoch, adam.lr, total)
        if s_true is not None:
            rec.source_error = source_error(s_true, rec_s, align=False)
            rec.source_error_aligned = source_error(s_true, rec_s, align=True)
        if np.any(dataset.X):
            rec.nmse_db = nmse_db(dataset.X.T, codes)
        history.append(rec)
        if callback is not None:
            callback(rec, s)
        log.debug("stage1 epoch %d loss %.6g err %.4g", epoch, total, rec.source_error_aligned)
    targets = compute_targets(dataset.Y, s, enc)
    return Stage1Result(s, targets, history)


def stage2_step_grad(Yb, Xt, s, hf: CompressionFilter, enc: EncoderConfig, M_x: int):
    """Loss and filter gradient for full measurements ``Yb`` (rows) compressed by ``hf``.

    The filter enters both the encoder weights and its input ``z = Phi y``.
    """
    phi = hf.operator()
    Zb = phi.matvec(Yb)
    op = MeasurementOperator(s, M_x, hf)
    res = encoder_forward(Zb, op, enc)
    diff = res.x - Xt
    g = encoder_backward(res, Zb, op, enc, diff)
    return 0.5 * float(np.sum(diff ** 2)), g.h + phi.kernel_grad(Yb, g.z)


def init_filter(M_y: int, M_z: int, seed: int) -> CompressionFilter:
    h = make_rng(seed, 20).standard_normal(M_y + M_z - 1)
    return CompressionFilter(project_unit_norm(h), M_y, M_z)


def train_stage2(train: Dataset, s, targets, cfg: StageConfig, M_z: int | None = None,
                 warm: CompressionFilter | None = None, val: tuple | None = None,
                 test: Dataset | None = None, callback=None) -> Stage2Result:
    """Learn the compression filter with the source frozen.

    Compressed inputs are recomputed from ``train.Y`` with the current filter
    at every step.  ``val`` is ``(Dataset, targets)``; ``test`` is scored by NMSE against its
    ground-truth ``X``.
    """
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    enc = cfg.encoder
    s = np.array(s, dtype=np.float64)
    s.setflags(write=False)
    M_y = train.Y.shape[0]
    M_x = M_y - s.shape[0] + 1
    if warm is not None:
        hf = CompressionFilter(project_unit_norm(warm.h), warm.M_y, warm.M_z)
    else:
        if M_z is None:
            raise ValueError("M_z is required without a warm-start filter")
        hf = init_filter(M_y, M_z, cfg.seed)
    stability_check(MeasurementOperator(s, M_x, hf), enc.alpha)
    Y = train.Y.T
    Xt = np.asarray(targets, dtype=np.float64).T
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = make_rng(cfg.seed, 21)
    history = []
    for epoch in range(cfg.epochs):
        adam.lr = lr_schedule(cfg.lr, epoch, cfg.lr_decay, cfg.lr_period)
        total = 0.0
        try:
            for idx in _batches(Y.shape[0], cfg.batch_size, rng):
                loss, g_h = stage2_step_grad(Y[idx], Xt[idx], s, hf, enc, M_x)
                total += loss
                h = project_unit_norm(adam_step(adam, g_h, hf.h))
                assert abs(np.linalg.norm(h) - 1.0) <= NORM_TOL
                hf = CompressionFilter(h, hf.M_y, hf.M_z)
        except (DivergenceError, DegenerateParameterError) as exc:
            raise TrainingDiverged(f"stage 2 diverged in epoch {epoch}: {exc}", history) from exc
        rec = HistoryRecord(epoch, adam.lr, total)
        op = MeasurementOperator(s, M_x, hf)
        if val is not None:
            vds, vt = val
            rec.val_loss = loss_stage2(np.asarray(vt).T, encode(hf.operator().matvec(vds.Y.T), op, enc))
        if test is not None:
            rec.nmse_db = nmse_db(test.X.T, encode(hf.operator().matvec(test.Y.T), op, enc))
        history.append(rec)
        if callback is not None:
            callback(rec, hf)
        log.debug("stage2 M_z=%d epoch %d loss %.6g nmse %.2f", hf.M_z, epoch, total, rec.nmse_db)
    return Stage2Result(hf, history)


def warm_start_filter(hf: CompressionFilter, M_z: int) -> CompressionFilter:
    """Shorten ``hf`` to serve ``M_z`` rows by keeping its trailing taps, renormalized.

    The result's Toeplitz operator equals the last ``M_z`` rows of the
    original one.
    """
    m_h = hf.M_y + M_z - 1
    if m_h > hf.M_h or M_z < 1:
        raise ValueError(f"cannot warm-start M_h={m_h} from a filter of length {hf.M_h}")
    return CompressionFilter(project_unit_norm(hf.h[hf.M_h - m_h:]), hf.M_y, M_z)
