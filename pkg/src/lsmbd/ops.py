"""Convolution, source-dictionary and Toeplitz-compression operators.

Every operator here is a *sliced convolution*

    out[i] = sum_l x[l] * k[offset + i - l],    0 <= i < out_len

applied along the last axis of ``x`` (leading axes are a batch).  The source
dictionary ``C_s`` is the slice ``offset=0, out_len=M_x + M_s - 1`` of a full
convolution with ``s``; the Toeplitz compression ``Phi`` is the slice
``offset=M_y - 1, out_len=M_z`` of a convolution with ``h`` (the samples where
``h`` and ``y`` overlap completely).  Their composition ``Phi C_s`` is again a
sliced convolution, with kernel ``s * h``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

#: Output length at which the FFT path replaces direct summation.
FFT_THRESHOLD = 128
#: Batch size from which operators use the FFT path regardless of length.
FFT_BATCH_THRESHOLD = 8


class DimensionError(ValueError):
    """Raised for empty signals or inconsistent operator dimensions."""


class NumericError(ArithmeticError):
    """Raised when an iterative numeric routine fails to converge."""


def fft_workers() -> int:
    """Worker count for scipy.fft, capped by ``LSMBD_WORKERS``."""
    try:
        return max(1, int(os.environ.get("LSMBD_WORKERS", "1")))
    except ValueError:
        return 1


def _as_signal(a, name="signal"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"{name} must be a non-empty sequence")
    return a


def _window(a, start, length):
    """``a[..., start:start+length]`` with zero fill outside the valid range."""
    n = a.shape[-1]
    lo, hi = max(start, 0), min(start + length, n)
    if lo == start and hi == start + length:
        return a[..., lo:hi]
    out = np.zeros(a.shape[:-1] + (length,))
    if hi > lo:
        out[..., lo - start:hi - start] = a[..., lo:hi]
    return out


def _direct_convolve(x, k):
    # shift-and-add over the taps of the shorter operand
    if x.shape[-1] < k.shape[-1] and x.ndim == 1:
        x, k = k, x
    p, q = x.shape[-1], k.shape[-1]
    out = np.zeros(np.broadcast_shapes(x.shape[:-1], k.shape[:-1]) + (p + q - 1,))
    if k.ndim == 1:
        for j in range(q):
            out[..., j:j + p] += k[j] * x
    else:
        for j in range(q):
            out[..., j:j + p] += k[..., j:j + 1] * x
    return out


def _fft_convolve(x, k):
    n = x.shape[-1] + k.shape[-1] - 1
    nfft = sp_fft.next_fast_len(n, real=True)
    w = fft_workers()
    spec = sp_fft.rfft(x, nfft, workers=w) * sp_fft.rfft(k, nfft, workers=w)
    return sp_fft.irfft(spec, nfft, workers=w)[..., :n]


def convolve(x, k):
    """Full linear convolution along the last axis (batched over leading axes)."""
    x = _as_signal(x, "x")
    k = _as_signal(k, "k")
    if x.shape[-1] + k.shape[-1] - 1 >= FFT_THRESHOLD:
        return _fft_convolve(x, k)
    return _direct_convolve(x, k)


def linear_convolve(a, b):
    """Full linear convolution of two 1-D signals; output length ``P + Q - 1``."""
    a = _as_signal(a, "a")
    b = _as_signal(b, "b")
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError("linear_convolve expects 1-D signals")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("inputs must be finite")
    return convolve(a, b)


class SlicedConvolution:
    """Linear map ``x -> (x * kernel)[offset : offset + out_len]``.

    Spectra of the kernel are cached, so repeated application inside an
    unrolled encoder costs one forward and one inverse real FFT per call.
    """

    def __init__(self, kernel, in_len: int, offset: int, out_len: int):
        self.kernel = _as_signal(kernel, "kernel")
        if self.kernel.ndim != 1:
            raise DimensionError("kernel must be 1-D")
        if in_len < 1 or out_len < 1:
            raise DimensionError("operator lengths must be positive")
        self.in_len = int(in_len)
        self.offset = int(offset)
        self.out_len = int(out_len)
        k = self.kernel.shape[0]
        self._long = self.in_len + k - 1 >= FFT_THRESHOLD
        self._kf = self._kr = None

    def _use_fft(self, x):
        if not (self._long or (x.ndim > 1 and x.size // x.shape[-1] >= FFT_BATCH_THRESHOLD)):
            return False
        if self._kf is None:
            k = self.kernel.shape[0]
            w = fft_workers()
            self._nfwd = sp_fft.next_fast_len(self.in_len + k - 1, real=True)
            self._kf = sp_fft.rfft(self.kernel, self._nfwd, workers=w)
            self._nadj = sp_fft.next_fast_len(self.out_len + k - 1, real=True)
            self._kr = sp_fft.rfft(self.kernel[::-1], self._nadj, workers=w)
        return True

    @property
    def shape(self):
        return (self.out_len, self.in_len)

    def _check(self, x, n, what):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != n:
            raise DimensionError(f"{what} must have length {n}, got shape {x.shape}")
        return x

    def __call__(self, x):
        return self.matvec(x)

    def matvec(self, x):
        x = self._check(x, self.in_len, "input")
        if self._use_fft(x):
            w = fft_workers()
            full = sp_fft.irfft(sp_fft.rfft(x, self._nfwd, workers=w) * self._kf,
                                self._nfwd, workers=w)
            full = full[..., :self.in_len + self.kernel.shape[0] - 1]
        else:
            full = _direct_convolve(x, self.kernel)
        return _window(full, self.offset, self.out_len)

    def rmatvec(self, v):
        """Adjoint: ``(A^T v)[l] = sum_i v[i] kernel[offset + i - l]``."""
        v = self._check(v, self.out_len, "adjoint input")
        k = self.kernel.shape[0]
        if self._use_fft(v):
            w = fft_workers()
            full = sp_fft.irfft(sp_fft.rfft(v, self._nadj, workers=w) * self._kr,
                                self._nadj, workers=w)
            full = full[..., :self.out_len + k - 1]
        else:
            full = _direct_convolve(v, self.kernel[::-1])
        return _window(full, k - 1 - self.offset, self.in_len)

    def kernel_grad(self, x, v):
        """Gradient of ``sum_batch <A x, v>`` with respect to the kernel."""
        x = self._check(x, self.in_len, "input")
        v = self._check(v, self.out_len, "adjoint input")
        k = self.kernel.shape[0]
        n = self.out_len + self.in_len - 1
        if n >= FFT_THRESHOLD or x.size // x.shape[-1] >= FFT_BATCH_THRESHOLD:
            w = fft_workers()
            nfft = sp_fft.next_fast_len(n, real=True)
            spec = sp_fft.rfft(v, nfft, workers=w) * sp_fft.rfft(x[..., ::-1], nfft, workers=w)
            if spec.ndim > 1:
                spec = spec.reshape(-1, spec.shape[-1]).sum(axis=0)
            full = sp_fft.irfft(spec, nfft, workers=w)[:n]
        else:
            full = _direct_convolve(v, x[..., ::-1])
            if full.ndim > 1:
                full = full.reshape(-1, n).sum(axis=0)
        return _window(full, self.in_len - 1 - self.offset, k)

    def todense(self):
        cols = np.eye(self.in_len)
        return self.matvec(cols).T


@dataclass(frozen=True)
class ProblemDims:
    """Sizes of one compressive blind-deconvolution problem."""

    M_s: int
    M_x: int
    L: int
    N: int = 1
    M_z: int | None = None

    def __post_init__(self):
        for name in ("M_s", "M_x", "L", "N"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be a positive integer")
        if self.L > self.M_x:
            raise ValueError(f"L must not exceed M_x (L={self.L}, M_x={self.M_x})")
        if self.M_z is not None and not 1 <= self.M_z <= self.M_y:
            raise DimensionError(f"M_z must lie in [1, M_y={self.M_y}]")

    @property
    def M_y(self) -> int:
        return self.M_x + self.M_s - 1

    @property
    def cr(self) -> float:
        return 1.0 if self.M_z is None else self.M_z / self.M_y

    @property
    def M_h(self) -> int | None:
        return None if self.M_z is None else self.M_y + self.M_z - 1


@dataclass(frozen=True, eq=False)
class CompressionFilter:
    """Filter ``h`` of length ``M_y + M_z - 1`` inducing the M_z x M_y Toeplitz Phi."""

    h: np.ndarray
    M_y: int
    M_z: int

    def __post_init__(self):
        h = _as_signal(self.h, "h")
        if h.ndim != 1:
            raise DimensionError("h must be 1-D")
        if self.M_y < 1 or self.M_z < 1:
            raise DimensionError("M_y and M_z must be positive")
        if h.shape[0] != self.M_y + self.M_z - 1:
            raise DimensionError(
                f"filter length {h.shape[0]} != M_y + M_z - 1 = {self.M_y + self.M_z - 1}")
        if not np.all(np.isfinite(h)):
            raise ValueError("filter taps must be finite")
        h = h.copy()
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def M_h(self) -> int:
        return self.h.shape[0]

    @property
    def cr(self) -> float:
        return self.M_z / self.M_y

    @classmethod
    def delta(cls, M_y: int, M_z: int, index: int | None = None):
        """Filter with a single unit tap, by default at ``M_y - 1`` (Phi = row selection)."""
        h = np.zeros(M_y + M_z - 1)
        h[M_y - 1 if index is None else index] = 1.0
        return cls(h, M_y, M_z)

    def operator(self) -> SlicedConvolution:
        return SlicedConvolution(self.h, self.M_y, self.M_y - 1, self.M_z)


def apply_source(s, x):
    """``C_s x``: full convolution of each row of ``x`` with the source."""
    s = _as_signal(s, "s")
    x = _as_signal(x, "x")
    return SlicedConvolution(s, x.shape[-1], 0, x.shape[-1] + s.shape[0] - 1).matvec(x)


def apply_source_adjoint(s, v, M_x: int | None = None):
    """``C_s^T v``: valid-mode correlation of ``v`` with the source."""
    s = _as_signal(s, "s")
    v = _as_signal(v, "v")
    m_y = v.shape[-1]
    if M_x is None:
        M_x = m_y - s.shape[0] + 1
    if M_x < 1 or M_x + s.shape[0] - 1 != m_y:
        raise DimensionError(f"length {m_y} is inconsistent with M_s={s.shape[0]}, M_x={M_x}")
    return SlicedConvolution(s, M_x, 0, m_y).rmatvec(v)


def _check_filter_input(hf: CompressionFilter, y, n, what):
    y = _as_signal(y, what)
    if y.shape[-1] != n:
        raise DimensionError(f"{what} length {y.shape[-1]} != {n}")
    return y


def apply_compression(hf: CompressionFilter, y):
    """``Phi y``: the M_z complete-overlap samples of ``y * h``."""
    y = _check_filter_input(hf, y, hf.M_y, "y")
    return hf.operator().matvec(y)


def apply_compression_adjoint(hf: CompressionFilter, z):
    """``Phi^T z``: ``(Phi^T z)[j] = sum_i h[M_y - 1 + i - j] z[i]``."""
    z = _check_filter_input(hf, z, hf.M_z, "z")
    return hf.operator().rmatvec(z)


def build_toeplitz(hf: CompressionFilter) -> np.ndarray:
    """Dense M_z x M_y matrix with entry (i, j) = h[M_y - 1 + i - j]."""
    i = np.arange(hf.M_z)[:, None]
    j = np.arange(hf.M_y)[None, :]
    return hf.h[hf.M_y - 1 + i - j]


def convolution_matrix(s, M_x: int) -> np.ndarray:
    """Dense M_y x M_x matrix of ``C_s``."""
    s = _as_signal(s, "s")
    m_y = M_x + s.shape[0] - 1
    i = np.arange(m_y)[:, None]
    j = np.arange(M_x)[None, :]
    d = i - j
    ok = (d >= 0) & (d < s.shape[0])
    return np.where(ok, s[np.clip(d, 0, s.shape[0] - 1)], 0.0)


class MeasurementOperator:
    """The composed map ``A = Phi C_s`` from sparse codes to measurements.

    With ``hf=None`` the compression is the identity and ``A = C_s``.
    Besides application and adjoint, it returns gradients of bilinear forms
    ``<A x, v>`` with respect to the source and the compression filter, which
    is all that backpropagation through the unrolled encoder needs.
    """

    def __init__(self, s, M_x: int, hf: CompressionFilter | None = None):
        self.s = _as_signal(s, "s")
        if self.s.ndim != 1:
            raise DimensionError("source must be 1-D")
        self.M_x = int(M_x)
        self.M_y = self.M_x + self.s.shape[0] - 1
        self.hf = hf
        if hf is None:
            self._op = SlicedConvolution(self.s, self.M_x, 0, self.M_y)
            # full convolution makes C_s^T C_s Toeplitz: one convolution with the autocorrelation
            acf = convolve(self.s, self.s[::-1])
            self._gram = SlicedConvolution(acf, self.M_x, self.s.shape[0] - 1, self.M_x)
        else:
            if hf.M_y != self.M_y:
                raise DimensionError(f"filter expects M_y={hf.M_y}, source gives {self.M_y}")
            g = convolve(self.s, hf.h)
            self._op = SlicedConvolution(g, self.M_x, self.M_y - 1, hf.M_z)
            self._gram = None

    @property
    def out_len(self) -> int:
        return self._op.out_len

    @property
    def shape(self):
        return self._op.shape

    def forward(self, x):
        return self._op.matvec(x)

    def adjoint(self, v):
        return self._op.rmatvec(v)

    def gram(self, x):
        if self._gram is not None:
            return self._gram.matvec(x)
        return self._op.rmatvec(self._op.matvec(x))

    def param_grads(self, x, v):
        """Gradients of ``sum_batch <A x, v>`` w.r.t. ``(s, h)``; ``h`` part is None for Phi = I."""
        gk = self._op.kernel_grad(x, v)
        if self.hf is None:
            return gk, None
        h = self.hf.h
        # g = s * h, so dg/ds and dg/dh are correlations with the other factor
        grad_s = _window(convolve(gk, h[::-1]), h.shape[0] - 1, self.s.shape[0])
        grad_h = _window(convolve(gk, self.s[::-1]), self.s.shape[0] - 1, h.shape[0])
        return grad_s, grad_h

    def todense(self):
        return self._op.todense()


class DenseMeasurementOperator:
    """``A = Phi C_s`` with an unstructured dense ``Phi`` (the G-MBD baseline)."""

    def __init__(self, s, M_x: int, phi):
        self.s = _as_signal(s, "s")
        self.M_x = int(M_x)
        self.M_y = self.M_x + self.s.shape[0] - 1
        self.phi = np.asarray(phi, dtype=np.float64)
        if self.phi.ndim != 2 or self.phi.shape[1] != self.M_y:
            raise DimensionError(f"dense Phi must have {self.M_y} columns")
        self._src = SlicedConvolution(self.s, self.M_x, 0, self.M_y)

    @property
    def out_len(self) -> int:
        return self.phi.shape[0]

    @property
    def shape(self):
        return (self.phi.shape[0], self.M_x)

    def forward(self, x):
        return self._src.matvec(x) @ self.phi.T

    def adjoint(self, v):
        return self._src.rmatvec(np.asarray(v, dtype=np.float64) @ self.phi)

    def gram(self, x):
        return self.adjoint(self.forward(x))

    def todense(self):
        return self.phi @ convolution_matrix(self.s, self.M_x)


def operator_spectral_norm(op, max_iter: int = 500, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value of ``op`` by power iteration on ``A^T A``.

    ``op`` needs ``forward``/``adjoint`` (or ``matvec``/``rmatvec``) and a
    ``shape``.  Stops when the Rayleigh quotient changes by less than ``tol``
    relative.  Clustered top spectra (a near-delta source gives
    ``C_s^T C_s`` eigenvalues within a fraction of a percent of each other)
    stall power iteration, so after ``max_iter`` steps the same maps are
    handed to a Lanczos solver; NumericError if that fails as well.
    """
    fwd = getattr(op, "forward", None) or op.matvec
    adj = getattr(op, "adjoint", None) or op.rmatvec
    n = op.shape[1]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(max_iter):
        w = adj(fwd(v))
        rq = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(rq - prev) <= tol * max(abs(rq), 1e-300):
            return float(np.sqrt(max(rq, 0.0)))
        prev = rq
    return _lanczos_norm(lambda u: adj(fwd(u)), n, v, max_iter)


def _lanczos_norm(gram, n, v0, max_iter):
    from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

    if n <= 2:
        dense = np.column_stack([gram(e) for e in np.eye(n)])
        return float(np.sqrt(max(np.linalg.eigvalsh(dense)[-1], 0.0)))
    lin = LinearOperator((n, n), matvec=gram, dtype=np.float64)
    try:
        vals = eigsh(lin, k=1, which="LA", v0=v0, tol=1e-12, maxiter=max(10 * max_iter, 1000),
                     return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        raise NumericError("spectral norm estimate did not converge") from exc
    return float(np.sqrt(max(vals[0], 0.0)))
