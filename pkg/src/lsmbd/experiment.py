"""Experiment flow behind the CLI: data generation, both training stages, evaluation.

Output directory layout::

    data/       stage1.lsa train.lsa val.lsa test.lsa source.lsa manifest.json
    ckpt/       stage1.lsa stage2_mz<M_z>.lsa lista_mz<M_z>.lsa
    history/    stage1.csv stage2_mz<M_z>.csv lista_mz<M_z>.csv
    results/    results.csv runtime.csv

``results.csv`` holds only deterministic columns so reruns match bitwise;
wall-clock timings go to ``runtime.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import store
from .baselines import (ListaParams, Method, MetricReport, aggregate, evaluate_method,
                        lista_init, make_gaussian_compressor, train_lista)
from .config import RunConfig
from .ops import CompressionFilter, ProblemDims
from .synth import RNG_ALGORITHM, DataGenSpec, Dataset, gen_dataset, gen_source, make_rng
from .metrics import source_error_detail
from .training import (HistoryRecord, StageConfig, compute_targets, train_stage1, train_stage2,
                       warm_start_filter)

log = logging.getLogger(__name__)

SPLIT_SIZES = {"stage1": "n_stage1", "train": "n_train", "val": "n_val", "test": "n_test"}
RESULT_COLUMNS = ["method", "cr_percent", "M_z", "trial", "kind", "nmse_db", "success",
                  "nmse_p50", "nmse_p90"]
RUNTIME_COLUMNS = ["method", "cr_percent", "M_z", "trial", "kind", "runtime_s"]


class DependencyError(RuntimeError):
    """A required input file (dataset or checkpoint) is missing."""


def _dims_meta(dims: ProblemDims) -> dict:
    return {"M_s": dims.M_s, "M_x": dims.M_x, "M_y": dims.M_y, "L": dims.L}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {what}: {path}")
    return path


def _check_free(paths, overwrite):
    existing = [str(p) for p in paths if p.exists()]
    if existing and not overwrite:
        raise FileExistsError(f"outputs exist (use --overwrite): {', '.join(existing)}")


def generate(cfg: RunConfig, out, overwrite: bool = False) -> dict:
    """Write the four dataset splits, the true source and a manifest; returns the manifest."""
    out = Path(out) / "data"
    _check_free([out / "manifest.json"], overwrite)
    dims = cfg.dims
    s = gen_source(dims.M_s)
    seed = cfg.data["seed"]
    manifest = {"rng": RNG_ALGORITHM, "seed": seed, "dims": _dims_meta(dims), "files": {},
                "sizes": {}}
    out.mkdir(parents=True, exist_ok=True)
    manifest["files"]["source.lsa"] = store.save(out / "source.lsa", {"s": s},
                                                 {"kind": "source", "dims": _dims_meta(dims)})
    for split, key in SPLIT_SIZES.items():
        n = cfg.data[key]
        if n < 1:
            continue
        d = ProblemDims(dims.M_s, dims.M_x, dims.L, N=n)
        ds = gen_dataset(DataGenSpec(d, seed, split), s)
        meta = {"kind": "dataset", "split": split, "rng": RNG_ALGORITHM, "seed": seed,
                "dims": _dims_meta(dims), "N": n}
        manifest["files"][f"{split}.lsa"] = store.save(out / f"{split}.lsa", ds.arrays(), meta)
        manifest["sizes"][split] = n
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(out, split: str, dims: ProblemDims | None = None) -> Dataset:
    path = _require(Path(out) / "data" / f"{split}.lsa", f"{split} dataset")
    arrays, meta = store.load(path)
    if dims is not None and meta.get("dims") != _dims_meta(dims):
        raise store.FormatError(f"{path}: dims {meta.get('dims')} != config {_dims_meta(dims)}")
    return Dataset(arrays["X"], arrays["Y"], arrays.get("Z"))


def load_source(out) -> np.ndarray:
    arrays, _ = store.load(_require(Path(out) / "data" / "source.lsa", "true source"))
    return arrays["s"]


def write_history(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = HistoryRecord.columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in history:
            w.writerow([_fmt(getattr(rec, c)) for c in cols])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "-inf" if v < 0 else "inf"
        return repr(v)
    return str(v)


def _history_summary(history) -> dict:
    if not history:
        return {"epochs": 0}
    last = history[-1]
    return {"epochs": len(history), "final_train_loss": last.train_loss,
            "final_val_loss": last.val_loss, "final_nmse_db": last.nmse_db,
            "final_source_error_aligned": last.source_error_aligned}


def run_stage1(cfg: RunConfig, out, overwrite: bool = False):
    out = Path(out)
    ckpt_path = out / "ckpt" / "stage1.lsa"
    hist_path = out / "history" / "stage1.csv"
    _check_free([ckpt_path, hist_path], overwrite)
    ds = load_dataset(out, "stage1", cfg.dims)
    s_true = load_source(out)
    res = train_stage1(ds, cfg.stage1, s_true=s_true, M_s=cfg.dims.M_s)
    # the shift/sign ambiguity is resolved against the true source before anything
    # downstream is scored against the true codes
    det = source_error_detail(s_true, res.s, align=True)
    s_down = det.sign * np.roll(res.s, det.shift)
    # targets feed stage 2, so they come from the encoder stage 2 runs with
    enc = cfg.stage2.encoder
    params = {"s": res.s, "s_aligned": s_down,
              "targets_stage1": compute_targets(ds.Y, s_down, enc)}
    for split in ("train", "val"):
        p = out / "data" / f"{split}.lsa"
        if p.exists():
            params[f"targets_{split}"] = compute_targets(load_dataset(out, split).Y, s_down, enc)
    ck = store.Checkpoint("stage1", _dims_meta(cfg.dims), params, RNG_ALGORITHM,
                          cfg.stage1.seed, _history_summary(res.history),
                          {"encoder": cfg.stage1.encoder.__dict__, "target_encoder": enc.__dict__,
                           "align_shift": det.shift, "align_sign": det.sign})
    ck.save(ckpt_path)
    write_history(hist_path, res.history)
    return res


def load_stage1(out, cfg: RunConfig) -> store.Checkpoint:
    path = Path(out) / "ckpt" / "stage1.lsa"
    if not path.exists():
        raise DependencyError(f"stage 2 needs a stage-1 checkpoint; run train-stage1 first ({path})")
    return store.Checkpoint.load(path, "stage1", _dims_meta(cfg.dims))


def downstream_source(ck: store.Checkpoint) -> np.ndarray:
    """The learned source with its shift and sign ambiguity resolved."""
    return ck.params.get("s_aligned", ck.params["s"])


def _stage2_order(cfg: RunConfig):
    """CRs in descending order so a warm-start source filter is trained before its users."""
    return sorted(cfg.cr_table(), key=lambda p: -p[0])


def _train_filter(cfg: RunConfig, train, s, targets, mz, warm, val, test, grid: bool):
    """Stage 2 at one CR; with ``grid`` every (lam, c) pair is tried and the lowest final
    validation loss wins. Returns ``(result, stage config used)``."""
    if not grid:
        return train_stage2(train, s, targets, cfg.stage2, M_z=mz, warm=warm, val=val,
                            test=test), cfg.stage2
    best = None
    for lam in cfg.raw_grid("lam"):
        for c in cfg.raw_grid("c"):
            sc = replace(cfg.stage2, encoder=cfg.stage2.encoder.with_(lam=lam, c=c))
            res = train_stage2(train, s, targets, sc, M_z=mz, warm=warm, val=val, test=test)
            score = res.history[-1].val_loss if res.history else math.inf
            log.info("M_z=%d lam=%g c=%g val_loss=%.6g", mz, lam, c, score)
            if best is None or score < best[0]:
                best = (score, res, sc)
    return best[1], best[2]


def run_stage2(cfg: RunConfig, out, overwrite: bool = False, lista: bool | None = None,
               grid: bool = False) -> dict:
    """Train one filter per CR (and the shallow encoder when requested); returns {M_z: filter}."""
    out = Path(out)
    ck = load_stage1(out, cfg)
    s = downstream_source(ck)
    if "targets_train" not in ck.params:
        raise DependencyError("stage-1 checkpoint has no training targets; regenerate data")
    train = load_dataset(out, "train", cfg.dims)
    val_ds = load_dataset(out, "val", cfg.dims)
    test = load_dataset(out, "test", cfg.dims)
    val = (val_ds, ck.params["targets_val"])
    lista = ("ls-mbd-l" in cfg.methods) if lista is None else lista
    filters = {}
    warm_src = None
    for cr, mz in _stage2_order(cfg):
        ckpt_path = out / "ckpt" / f"stage2_mz{mz}.lsa"
        hist_path = out / "history" / f"stage2_mz{mz}.csv"
        _check_free([ckpt_path, hist_path], overwrite)
        warm = None
        if cfg.stage2_warm_cr is not None and cr < cfg.stage2_warm_cr and warm_src is not None:
            warm = warm_start_filter(warm_src, mz)
        res, used = _train_filter(cfg, train, s, ck.params["targets_train"], mz, warm, val, test,
                                  grid)
        if cfg.stage2_warm_cr is not None and abs(cr - cfg.stage2_warm_cr) < 1e-9:
            warm_src = res.hf
        filters[mz] = res.hf
        store.Checkpoint("stage2", {**_dims_meta(cfg.dims), "M_z": mz}, {"h": res.hf.h},
                         RNG_ALGORITHM, cfg.stage2.seed, _history_summary(res.history),
                         {"cr_percent": cr, "warm_start": warm is not None, "grid": grid,
                          "encoder": used.encoder.__dict__}).save(ckpt_path)
        write_history(hist_path, res.history)
        if lista:
            run_lista(cfg, out, s, mz, train, ck.params["targets_train"], val, test, overwrite)
    return filters


def lista_stage_config(cfg: RunConfig) -> StageConfig:
    lc = cfg.lista
    return StageConfig(2, cfg.stage2.encoder, lc["epochs"], lc["batch_size"], lc["lr"],
                       cfg.stage2.lr_decay, cfg.stage2.lr_period, lc["eps"], seed=cfg.stage2.seed)


def run_lista(cfg, out, s, mz, train, targets, val, test, overwrite=False):
    out = Path(out)
    ckpt_path = out / "ckpt" / f"lista_mz{mz}.lsa"
    hist_path = out / "history" / f"lista_mz{mz}.csv"
    _check_free([ckpt_path, hist_path], overwrite)
    from .training import init_filter
    enc = cfg.stage2.encoder
    init = lista_init(s, init_filter(cfg.dims.M_y, mz, cfg.stage2.seed), enc, cfg.lista["T"])
    prm, hist = train_lista(train, targets, init, lista_stage_config(cfg), val=val, test=test)
    arrays = prm.arrays()
    store.Checkpoint("lista", {**_dims_meta(cfg.dims), "M_z": mz}, arrays, RNG_ALGORITHM,
                     cfg.stage2.seed, _history_summary(hist), {"T": prm.T, "nonneg": prm.nonneg}
                     ).save(ckpt_path)
    write_history(hist_path, hist)
    return prm


def load_lista(path, cfg: RunConfig, mz: int) -> ListaParams:
    ck = store.Checkpoint.load(path, "lista", {**_dims_meta(cfg.dims), "M_z": mz})
    p = ck.params
    return ListaParams(p["w_d"], p["w_e"], p["p"], p["h"], float(p["b"][0]), cfg.dims.M_y, mz,
                       int(ck.extra.get("T", 20)), bool(ck.extra.get("nonneg", True)))


def load_filter(out, cfg: RunConfig, mz: int, with_encoder: bool = False):
    path = _require(Path(out) / "ckpt" / f"stage2_mz{mz}.lsa", f"stage-2 checkpoint for M_z={mz}")
    ck = store.Checkpoint.load(path, "stage2", {**_dims_meta(cfg.dims), "M_z": mz})
    hf = CompressionFilter(ck.params["h"], cfg.dims.M_y, mz)
    if not with_encoder:
        return hf
    # the filter is scored with the lam and c it was trained with (they differ under --grid)
    e = ck.extra.get("encoder", {})
    enc = cfg.stage2.encoder.with_(lam=e.get("lam", cfg.stage2.encoder.lam),
                                   c=e.get("c", cfg.stage2.encoder.c))
    return hf, enc


def baseline_seed(cfg: RunConfig, trial: int) -> np.random.Generator:
    return make_rng(cfg.data["seed"], 40, trial)


def evaluate(cfg: RunConfig, out, overwrite: bool = False, external=None,
             repeats: int | None = None) -> list:
    """Score every configured method at every CR; writes ``results/results.csv``."""
    out = Path(out)
    res_path = out / "results" / "results.csv"
    _check_free([res_path, res_path.with_name("runtime.csv")], overwrite)
    ck = load_stage1(out, cfg)
    s = downstream_source(ck)
    test = load_dataset(out, "test", cfg.dims)
    repeats = cfg.runtime_repeats if repeats is None else repeats
    missing = []
    for _, mz in cfg.cr_table():
        if "ls-mbd" in cfg.methods and not (out / "ckpt" / f"stage2_mz{mz}.lsa").exists():
            missing.append(str(out / "ckpt" / f"stage2_mz{mz}.lsa"))
        if "ls-mbd-l" in cfg.methods and not (out / "ckpt" / f"lista_mz{mz}.lsa").exists():
            missing.append(str(out / "ckpt" / f"lista_mz{mz}.lsa"))
    if missing:
        raise DependencyError("missing checkpoints: " + ", ".join(missing))
    reports = []
    for cr, mz in cfg.cr_table():
        for method in cfg.methods:
            for r in _evaluate_one(cfg, out, method, s, mz, test, repeats):
                r.cr = cr / 100.0
                reports.append(r)
    reports += aggregate(reports)
    if external is not None:
        reports += read_external(external)
    reports.sort(key=lambda r: (r.method, -r.cr, r.kind != "trial", r.kind, r.trial))
    write_results(res_path, reports)
    return reports


def _evaluate_one(cfg, out, method, s, mz, test, repeats):
    enc = cfg.stage2.encoder
    if method == "ls-mbd":
        hf, enc_mz = load_filter(out, cfg, mz, with_encoder=True)
        m = Method("ls-mbd", s, hf=hf, encoder=enc_mz)
        return [evaluate_method(m, test, 0, repeats)]
    if method == "ls-mbd-l":
        prm = load_lista(Path(out) / "ckpt" / f"lista_mz{mz}.lsa", cfg, mz)
        return [evaluate_method(Method("ls-mbd-l", s, lista=prm), test, 0, repeats)]
    rows = []
    for trial in range(cfg.trials):
        op = make_gaussian_compressor(cfg.dims.M_y, mz, method == "gs-mbd", baseline_seed(cfg, trial))
        m = (Method(method, s, hf=op, encoder=enc) if method == "gs-mbd"
             else Method(method, s, phi=op, encoder=enc))
        rows.append(evaluate_method(m, test, trial, repeats))
    return rows


def write_results(path, reports) -> None:
    """Write ``results.csv`` at ``path`` and the timings to ``runtime.csv`` beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in reports:
            w.writerow([r.method, _fmt(round(r.cr * 100.0, 6)), r.M_z, r.trial, r.kind,
                        _fmt(r.nmse_db), _fmt(r.success), _fmt(r.nmse_p50), _fmt(r.nmse_p90)])
    with open(path.with_name("runtime.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUNTIME_COLUMNS)
        for r in reports:
            if r.kind != "std":
                w.writerow([r.method, _fmt(round(r.cr * 100.0, 6)), r.M_z, r.trial, r.kind,
                            _fmt(r.runtime_s)])


def read_external(path) -> list:
    """Ingest externally produced rows (e.g. FS-MBD) in the results schema."""
    rows = read_csv(path)
    if rows and set(RESULT_COLUMNS) - set(rows[0]):
        raise ValueError(f"{path}: missing columns {sorted(set(RESULT_COLUMNS) - set(rows[0]))}")
    out = []
    for i, row in enumerate(rows):
        try:
            r = MetricReport(row["method"], float(row["cr_percent"]) / 100.0, int(row["M_z"]),
                             float(row["nmse_db"]), False, int(row["trial"]),
                             float(row.get("runtime_s") or "nan"), float(row["nmse_p50"]),
                             float(row["nmse_p90"]), kind=row["kind"] or "trial")
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: row {i + 2}: {exc}") from exc
        if row["success"] not in ("0", "1"):
            raise ValueError(f"{path}: row {i + 2}: success must be 0 or 1")
        if r.kind == "trial" and (row["success"] == "1") != r.success:
            raise ValueError(f"{path}: row {i + 2}: success flag disagrees with nmse_db")
        out.append(r)
    return out
