"""Plot data as whitespace-delimited text columns, plus optional PNG rendering.

Every ``.dat`` file starts with one ``#`` header line naming its columns, so
any plotting tool can read it.  Rendering needs matplotlib, which is imported
only when :func:`render_plots` is called.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .baselines import Method, method_inference
from .config import RunConfig
from .experiment import (DependencyError, downstream_source, load_dataset, load_filter,
                         load_source, load_stage1, read_csv)
from .metrics import source_error_detail


def write_columns(path, header, *cols) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.column_stack([np.asarray(c, dtype=np.float64) for c in cols])
    np.savetxt(path, data, fmt="%.17g", header=" ".join(header), comments="# ")
    return path


def read_columns(path) -> tuple[list, np.ndarray]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().lstrip("#").split()
    return header, np.atleast_2d(np.loadtxt(path, ndmin=2))


def dft_magnitude(v) -> np.ndarray:
    return np.abs(np.fft.fft(np.asarray(v, dtype=np.float64)))


def _history_columns(path, names):
    rows = read_csv(path)
    return [np.array([float(r[n]) for r in rows]) for n in names]


def emit_plots(cfg: RunConfig, out, example: int = 0, spectrum_cr: float | None = None) -> list:
    """Write every plot-data file under ``out/plots``; returns the written paths.

    ``spectrum_cr`` picks the CR used for the spectrum triplet and the
    recovered-code stem data (default: the smallest configured CR).
    """
    out = Path(out)
    pdir = out / "plots"
    ck = load_stage1(out, cfg)
    s = ck.params["s"]
    s_down = downstream_source(ck)
    test = load_dataset(out, "test", cfg.dims)
    table = cfg.cr_table()
    filters = {mz: load_filter(out, cfg, mz) for _, mz in table}
    written = []

    for cr, mz in table:
        h = filters[mz].h
        written.append(write_columns(pdir / f"filter_time_mz{mz}.dat", ["tap", "h"],
                                     np.arange(h.size), h))

    cr_pick = min(c for c, _ in table) if spectrum_cr is None else spectrum_cr
    mz_pick = dict(table).get(cr_pick)
    if mz_pick is None:
        raise DependencyError(f"CR {cr_pick} is not in the configured sweep")
    hf = filters[mz_pick]
    z = hf.operator().matvec(test.Y[:, example])
    for name, v in (("s", s), (f"h_mz{mz_pick}", hf.h), (f"z_mz{mz_pick}", z)):
        written.append(write_columns(pdir / f"spectrum_{name}.dat", ["bin", "magnitude"],
                                     np.arange(v.size), dft_magnitude(v)))

    hist = out / "history" / "stage1.csv"
    if not hist.exists():
        raise DependencyError(f"missing stage-1 history: {hist}")
    ep, loss, err, err_al = _history_columns(
        hist, ["epoch", "train_loss", "source_error", "source_error_aligned"])
    written.append(write_columns(pdir / "stage1_curves.dat",
                                 ["epoch", "train_loss", "source_error", "source_error_aligned"],
                                 ep, loss, err, err_al))
    hist2 = out / "history" / f"stage2_mz{mz_pick}.csv"
    if not hist2.exists():
        raise DependencyError(f"missing stage-2 history: {hist2}")
    ep2, fe = _history_columns(hist2, ["epoch", "nmse_db"])
    written.append(write_columns(pdir / f"filter_error_mz{mz_pick}.dat", ["epoch", "nmse_db"],
                                 ep2, fe))

    s_true = load_source(out)
    det = source_error_detail(s_true, s, align=True)
    aligned = det.sign * np.roll(s, det.shift)
    written.append(write_columns(pdir / "source.dat", ["k", "true", "learned", "learned_aligned"],
                                 np.arange(s.size), s_true, s, aligned))

    _, enc = load_filter(out, cfg, mz_pick, with_encoder=True)
    compress, infer = method_inference(Method("ls-mbd", s_down, hf=hf, encoder=enc), cfg.dims.M_x)
    x_hat = infer(compress(test.Y[:, example:example + 1].T))[0]
    written.append(write_columns(pdir / f"recovered_x_mz{mz_pick}.dat", ["index", "true", "recovered"],
                                 np.arange(cfg.dims.M_x), test.X[:, example], x_hat))
    return written


def render_plots(pdir) -> list:
    """Render the ``.dat`` files in ``pdir`` to PNG figures next to them."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pdir = Path(pdir)
    made = []

    fig, ax = plt.subplots(2, 2, figsize=(8, 6))
    _, c = read_columns(pdir / "stage1_curves.dat")
    ax[0, 0].semilogy(c[:, 0], c[:, 1], label="loss")
    ax[0, 0].semilogy(c[:, 0], np.maximum(c[:, 3], 1e-16), label="source error")
    ax[0, 0].set_xlabel("epoch")
    ax[0, 0].legend()
    fe = sorted(pdir.glob("filter_error_mz*.dat"))
    _, c = read_columns(fe[0])
    ax[0, 1].plot(c[:, 0], c[:, 1])
    ax[0, 1].set_xlabel("epoch")
    ax[0, 1].set_ylabel("filter NMSE [dB]")
    _, c = read_columns(pdir / "source.dat")
    ax[1, 0].plot(c[:, 0], c[:, 1], "k", label="true")
    ax[1, 0].plot(c[:, 0], c[:, 3], "r--", label="learned")
    ax[1, 0].legend()
    stems = sorted(pdir.glob("recovered_x_mz*.dat"))
    if stems:
        _, c = read_columns(stems[0])
        ax[1, 1].stem(c[:, 0], c[:, 1], linefmt="k-", markerfmt="ko", basefmt=" ")
        ax[1, 1].stem(c[:, 0], c[:, 2], linefmt="r--", markerfmt="rx", basefmt=" ")
    fig.tight_layout()
    made.append(pdir / "stage1.png")
    fig.savefig(made[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for f in sorted(pdir.glob("filter_time_mz*.dat"), key=lambda p: -int(p.stem.split("mz")[1])):
        _, c = read_columns(f)
        ax.plot(c[:, 0], c[:, 1], lw=0.8, label=f.stem.split("_")[-1])
    ax.set_xlabel("tap")
    ax.legend(fontsize="small")
    fig.tight_layout()
    made.append(pdir / "filters.png")
    fig.savefig(made[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for f, color in zip(sorted(pdir.glob("spectrum_*.dat")), ("b", "k", "r")):
        _, c = read_columns(f)
        n = c.shape[0]
        ax.plot(c[:, 0] / n, c[:, 1] / max(c[:, 1].max(), 1e-300), color, lw=0.8,
                label=f.stem.split("_", 1)[1])
    ax.set_xlabel("normalized frequency")
    ax.legend(fontsize="small")
    fig.tight_layout()
    made.append(pdir / "spectra.png")
    fig.savefig(made[-1], dpi=120)
    plt.close(fig)
    return made
