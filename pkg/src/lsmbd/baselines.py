"""Comparison compressors, the 20-layer learned encoder, and method evaluation.

Method tags follow the usual naming: ``ls-mbd`` (learned structured filter),
``gs-mbd`` (random Gaussian filter), ``g-mbd`` (dense Gaussian matrix),
``ls-mbd-l`` (learned filter with a shallow learned encoder) and ``fs-mbd``
(fixed Fourier filter, ingested from an external results file only).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import DivergenceError, EncoderConfig, encode, shrink, shrink_mask
from .metrics import nmse_db, per_example_nmse_db, is_success
from .ops import (CompressionFilter, DenseMeasurementOperator, MeasurementOperator,
                  SlicedConvolution, operator_spectral_norm)
from .synth import Dataset, make_rng
from .training import (AdamState, DegenerateParameterError, HistoryRecord, TrainingDiverged,
                       StageConfig, adam_step, init_filter, loss_stage2, lr_schedule,
                       project_unit_norm, _batches)

log = logging.getLogger(__name__)

METHODS = ("g-mbd", "gs-mbd", "fs-mbd", "ls-mbd", "ls-mbd-l")
#: Fraction of the stable step 1/sigma_max^2 used when a random operator's norm exceeds 1/sqrt(alpha).
STEP_SAFETY = 0.99


def make_gaussian_compressor(M_y: int, M_z: int, structured: bool, rng: np.random.Generator):
    """Random compression: a unit-norm Gaussian filter, or a dense i.i.d. N(0, 1) matrix."""
    if structured:
        h = rng.standard_normal(M_y + M_z - 1)
        return CompressionFilter(project_unit_norm(h), M_y, M_z)
    return rng.standard_normal((M_z, M_y))


def dense_operator(s, M_x: int, phi) -> DenseMeasurementOperator:
    """Dense-Phi operator on the unscaled matrix; pair it with :func:`safe_encoder`."""
    return DenseMeasurementOperator(s, M_x, np.asarray(phi, dtype=np.float64))


def safe_encoder(op, enc: EncoderConfig) -> EncoderConfig:
    """Shrink the step when ``alpha`` exceeds ``1/sigma_max(A)^2`` for this operator."""
    sigma = operator_spectral_norm(op)
    limit = STEP_SAFETY / sigma ** 2
    if enc.alpha <= limit:
        return enc
    log.info("step %.4g exceeds 1/sigma^2=%.4g; using %.4g", enc.alpha, 1 / sigma ** 2, limit)
    return replace(enc, alpha=limit)


# -- shallow learned encoder -------------------------------------------------

@dataclass(eq=False)
class ListaParams:
    """Kernels for ``x_t = S_b((I - W_e Phi^T Phi W_d) x_{t-1} + P Phi^T z)``.

    ``W_d`` is a convolution with ``w_d`` (codes to measurements); ``W_e`` and
    ``P`` are correlations with ``w_e`` and ``p`` (measurements to codes).
    The shared bias is ``|b|``.
    """

    w_d: np.ndarray
    w_e: np.ndarray
    p: np.ndarray
    h: np.ndarray
    b: float
    M_y: int
    M_z: int
    T: int = 20
    nonneg: bool = True

    def __post_init__(self):
        for name in ("w_d", "w_e", "p", "h"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def M_x(self) -> int:
        return self.M_y - self.w_d.shape[0] + 1

    @property
    def hf(self) -> CompressionFilter:
        return CompressionFilter(self.h, self.M_y, self.M_z)

    @classmethod
    def from_model(cls, s, hf: CompressionFilter, alpha: float, lam: float, T: int = 20,
                   nonneg: bool = True):
        """Initialise so that one layer equals an unaccelerated step of the main encoder."""
        s = np.asarray(s, dtype=np.float64)
        r = math.sqrt(alpha)
        return cls(r * s, r * s, alpha * s, hf.h.copy(), alpha * lam, hf.M_y, hf.M_z, T, nonneg)

    def arrays(self) -> dict:
        return {"w_d": self.w_d, "w_e": self.w_e, "p": self.p, "h": self.h,
                "b": np.array([self.b])}

    def replace(self, **kw) -> "ListaParams":
        d = dict(w_d=self.w_d, w_e=self.w_e, p=self.p, h=self.h, b=self.b, M_y=self.M_y,
                 M_z=self.M_z, T=self.T, nonneg=self.nonneg)
        d.update(kw)
        return ListaParams(**d)


def lista_init(s, hf: CompressionFilter, enc: EncoderConfig, T: int = 20) -> ListaParams:
    """Shallow-encoder start at the ISTA step ``0.99/sigma_max^2`` of ``Phi C_s``.

    With the deep encoder's small step, ``T`` layers barely move off zero. If every code
    stays under the threshold the shrink masks are all zero and no gradient flows.
    """
    M_x = hf.M_y - len(s) + 1
    alpha = STEP_SAFETY / operator_spectral_norm(MeasurementOperator(s, M_x, hf)) ** 2
    return ListaParams.from_model(s, hf, alpha, enc.lam, T, enc.nonneg)


class _ListaOps:
    def __init__(self, prm: ListaParams):
        m_x, m_y = prm.M_x, prm.M_y
        self.wd = SlicedConvolution(prm.w_d, m_x, 0, m_y)
        self.we = SlicedConvolution(prm.w_e, m_x, 0, m_y)
        self.p = SlicedConvolution(prm.p, m_x, 0, m_y)
        self.phi = prm.hf.operator()
        self.b = abs(prm.b)


def lista_forward(z, prm: ListaParams, keep_all: bool = False):
    """Run the shallow encoder from ``x_0 = 0``; returns ``x_T`` (and all iterates with ``keep_all``)."""
    o = _ListaOps(prm)
    z = np.asarray(z, dtype=np.float64)
    c = o.p.rmatvec(o.phi.rmatvec(z))
    x = np.zeros_like(c)
    xs = [x]
    for t in range(1, prm.T + 1):
        r = o.phi.rmatvec(o.phi.matvec(o.wd.matvec(x)))
        x = shrink(x - o.we.rmatvec(r) + c, o.b, prm.nonneg)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"shallow encoder diverged at iteration {t}", iteration=t)
        if keep_all:
            xs.append(x)
    return (x, xs) if keep_all else x


def lista_loss_grad(Y, Xt, prm: ListaParams):
    """Stage-2 loss of the shallow encoder on full measurements ``Y`` (rows) and its gradients.

    ``z = Phi Y`` is formed inside, so the filter gradient includes the input path.
    Returns ``(loss, grads)`` with the keys of :meth:`ListaParams.arrays`.
    """
    o = _ListaOps(prm)
    Y = np.asarray(Y, dtype=np.float64)
    z = o.phi.matvec(Y)
    ptz = o.phi.rmatvec(z)
    c = o.p.rmatvec(ptz)
    x = np.zeros_like(c)
    xs, vs = [x], []
    for _ in range(prm.T):
        r = o.phi.rmatvec(o.phi.matvec(o.wd.matvec(x)))
        v = x - o.we.rmatvec(r) + c
        vs.append(v)
        x = shrink(v, o.b, prm.nonneg)
        xs.append(x)
    diff = x - np.asarray(Xt, dtype=np.float64)
    loss = 0.5 * float(np.sum(diff ** 2))

    g = {k: np.zeros_like(a) for k, a in prm.arrays().items()}
    gc = np.zeros_like(c)
    gb = 0.0
    gx = diff
    for t in range(prm.T, 0, -1):
        v, xm1 = vs[t - 1], xs[t - 1]
        mask = shrink_mask(v, o.b, prm.nonneg)
        gv = gx * mask
        gb -= float(np.sum(gv)) if prm.nonneg else float(np.sum(gv * np.sign(v)))
        gc += gv
        u = o.wd.matvec(xm1)
        pu = o.phi.matvec(u)
        r = o.phi.rmatvec(pu)
        # v = x - W_e^T r + c
        g["w_e"] -= o.we.kernel_grad(gv, r)
        gr = -o.we.matvec(gv)
        pgr = o.phi.matvec(gr)
        g["h"] += o.phi.kernel_grad(gr, pu) + o.phi.kernel_grad(u, pgr)
        gu = o.phi.rmatvec(pgr)
        g["w_d"] += o.wd.kernel_grad(xm1, gu)
        gx = gv + o.wd.rmatvec(gu)
    # c = P^T Phi^T Phi y
    g["p"] += o.p.kernel_grad(gc, ptz)
    pgc = o.p.matvec(gc)
    g["h"] += o.phi.kernel_grad(pgc, z) + o.phi.kernel_grad(Y, o.phi.matvec(pgc))
    g["b"][0] = gb * (1.0 if prm.b >= 0 else -1.0)
    return loss, g


def train_lista(train: Dataset, targets, init: ListaParams, cfg: StageConfig,
                val: tuple | None = None, test: Dataset | None = None) -> tuple:
    """Jointly learn ``W_d, W_e, P, b`` and the filter with ADAM; returns ``(params, history)``."""
    prm = init
    states = {k: AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) for k in prm.arrays()}
    prm = prm.replace(h=project_unit_norm(prm.h))
    Y = train.Y.T
    Xt = np.asarray(targets, dtype=np.float64).T
    rng = make_rng(cfg.seed, 31)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr, epoch, cfg.lr_decay, cfg.lr_period)
        total = 0.0
        try:
            for idx in _batches(Y.shape[0], cfg.batch_size, rng):
                loss, g = lista_loss_grad(Y[idx], Xt[idx], prm)
                total += loss
                new = {}
                for k, a in prm.arrays().items():
                    states[k].lr = lr
                    new[k] = adam_step(states[k], g[k], a)
                prm = prm.replace(w_d=new["w_d"], w_e=new["w_e"], p=new["p"],
                                  h=project_unit_norm(new["h"]), b=float(new["b"][0]))
                assert abs(np.linalg.norm(prm.h) - 1.0) <= 1e-12
        except (DivergenceError, DegenerateParameterError, ValueError) as exc:
            raise TrainingDiverged(f"shallow encoder diverged in epoch {epoch}: {exc}",
                                   history) from exc
        rec = HistoryRecord(epoch, lr, total)
        if val is not None:
            vds, vt = val
            rec.val_loss = loss_stage2(np.asarray(vt).T,
                                       lista_forward(prm.hf.operator().matvec(vds.Y.T), prm))
        if test is not None:
            rec.nmse_db = nmse_db(test.X.T, lista_forward(prm.hf.operator().matvec(test.Y.T), prm))
        history.append(rec)
    return prm, history


# -- evaluation ----------------------------------------------------------------

@dataclass
class MetricReport:
    method: str
    cr: float
    M_z: int
    nmse_db: float
    success: bool
    trial: int = 0
    runtime_s: float = math.nan
    nmse_p50: float = math.nan
    nmse_p90: float = math.nan
    source_error: float = math.nan
    kind: str = "trial"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")
        self.success = bool(self.nmse_db < -50.0)


@dataclass
class Method:
    """What :func:`evaluate_method` needs to run one method on compressed data."""

    tag: str
    s: np.ndarray
    hf: CompressionFilter | None = None
    phi: np.ndarray | None = None
    lista: ListaParams | None = None
    encoder: EncoderConfig | None = None
    extra: dict = field(default_factory=dict)


def method_inference(m: Method, M_x: int):
    """Return ``(compress, infer)``: full measurements to ``z``, and ``z`` to codes."""
    if m.tag in ("ls-mbd", "gs-mbd"):
        op = MeasurementOperator(m.s, M_x, m.hf)
        enc = m.encoder if m.tag == "ls-mbd" else safe_encoder(op, m.encoder)
        return m.hf.operator().matvec, lambda z: encode(z, op, enc)
    if m.tag == "g-mbd":
        op = dense_operator(m.s, M_x, m.phi)
        enc = safe_encoder(op, m.encoder)
        return (lambda y: np.asarray(y) @ op.phi.T), (lambda z: encode(z, op, enc))
    if m.tag == "ls-mbd-l":
        return m.lista.hf.operator().matvec, (lambda z: lista_forward(z, m.lista))
    raise ValueError(f"method {m.tag!r} cannot be run in-process")


def evaluate_method(m: Method, test: Dataset, trial: int = 0, repeats: int = 1) -> MetricReport:
    """Encode the test set's compressed measurements and score against ground truth ``X``.

    Runtime is the mean wall time of ``repeats`` inference passes.
    """
    M_x = test.X.shape[0]
    compress, infer = method_inference(m, M_x)
    Z = compress(test.Y.T)
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        X_hat = infer(Z)
        times.append(time.perf_counter() - t0)
    per = per_example_nmse_db(test.X.T, X_hat, axis=1)
    value = nmse_db(test.X.T, X_hat)
    M_z = Z.shape[-1]
    return MetricReport(m.tag, M_z / test.Y.shape[0], M_z, value, is_success(value), trial,
                        float(np.mean(times)), float(np.percentile(per, 50)),
                        float(np.percentile(per, 90)))


def aggregate(reports: list) -> list:
    """Mean/std rows per (method, M_z) for methods with several trials."""
    out = []
    keys = sorted({(r.method, r.M_z) for r in reports})
    for method, mz in keys:
        rows = [r for r in reports if r.method == method and r.M_z == mz and r.kind == "trial"]
        if len(rows) < 2:
            continue
        vals = np.array([r.nmse_db for r in rows])
        mean = float(np.mean(vals))
        agg = MetricReport(method, rows[0].cr, mz, mean, is_success(mean), -1,
                           float(np.mean([r.runtime_s for r in rows])), kind="mean")
        std = MetricReport(method, rows[0].cr, mz, float(np.std(vals)), False, -1, kind="std")
        out += [agg, std]
    return out
