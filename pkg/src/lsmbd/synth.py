"""Synthetic sources, sparse filters and measurements with reproducible randomness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import CompressionFilter, DimensionError, ProblemDims, apply_compression, apply_source

#: Bit generator behind every random draw; recorded in manifests and checkpoints.
RNG_ALGORITHM = "numpy.Philox4x64-10"

SPLITS = {"stage1": 0, "train": 1, "val": 2, "test": 3}


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``seed``; ``key`` selects an independent stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def gen_source(M_s: int) -> np.ndarray:
    """Unit-norm Gaussian pulse ``exp(-6 (k - floor(M_s/2))**2)``, ``k = 0..M_s-1``."""
    if M_s < 1:
        raise ValueError("M_s must be >= 1")
    k = np.arange(M_s, dtype=np.float64)
    s = np.exp(-6.0 * (k - M_s // 2) ** 2)
    return s / np.linalg.norm(s)


def gen_sparse_filters(dims: ProblemDims, count: int, rng: np.random.Generator) -> np.ndarray:
    """``M_x x count`` array; each column has exactly ``L`` Unif(0,1) entries on a uniform random support."""
    if dims.L > dims.M_x:
        raise ValueError(f"L={dims.L} exceeds M_x={dims.M_x}")
    # the first L positions of a uniform random permutation form a uniform L-subset
    support = np.argsort(rng.random((count, dims.M_x)), axis=1, kind="stable")[:, :dims.L]
    amps = rng.random((count, dims.L))
    X = np.zeros((count, dims.M_x))
    np.put_along_axis(X, support, amps, axis=1)
    return X.T.copy()


@dataclass(frozen=True)
class DataGenSpec:
    dims: ProblemDims
    seed: int
    split: str = "stage1"
    amplitude_law: str = "uniform(0,1)"


@dataclass(eq=False)
class Dataset:
    """Columns are examples: ``X`` is M_x x N, ``Y`` is M_y x N, ``Z`` is M_z x N."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.X.shape[1]

    def arrays(self) -> dict:
        out = {"X": self.X, "Y": self.Y}
        if self.Z is not None:
            out["Z"] = self.Z
        return out

    def compress(self, hf: CompressionFilter) -> "Dataset":
        return Dataset(self.X, self.Y, apply_compression(hf, self.Y.T).T.copy())


def gen_dataset(spec: DataGenSpec, s, hf: CompressionFilter | None = None) -> Dataset:
    """Noiseless measurements ``Y = C_s X`` (and ``Z = Phi Y`` when a filter is given)."""
    dims = spec.dims
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (dims.M_s,):
        raise DimensionError(f"source length {s.shape} does not match M_s={dims.M_s}")
    if hf is not None and hf.M_y != dims.M_y:
        raise DimensionError(f"filter M_y={hf.M_y} does not match M_y={dims.M_y}")
    rng = make_rng(spec.seed, SPLITS.get(spec.split, 99))
    X = gen_sparse_filters(dims, dims.N, rng)
    Y = apply_source(s, X.T).T.copy()
    ds = Dataset(X, Y)
    return ds.compress(hf) if hf is not None else ds
