"""``lsmbd`` command-line entry point.

Exit codes: 0 success, 2 configuration or usage error (including outputs that
exist without ``--overwrite``), 3 missing dependency (input file
or checkpoint), 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .config import PRESETS, ConfigError, load_config
from .encoder import DivergenceError
from .store import FormatError
from .training import TrainingDiverged

log = logging.getLogger("lsmbd")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_DIVERGED = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file overlaid on the preset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsmbd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/val/test datasets and a manifest")
    _common(p)
    p = sub.add_parser("train-stage1", help="learn the source with Phi = I")
    _common(p)
    p = sub.add_parser("train-stage2", help="learn one compression filter per CR")
    _common(p)
    p.add_argument("--no-lista", action="store_true", help="skip the shallow learned encoder")
    p.add_argument("--grid", action="store_true",
                   help="pick lam and c per CR from the stage-2 grid by validation loss")
    p = sub.add_parser("evaluate", help="score every method and CR into results/results.csv")
    _common(p)
    p.add_argument("--external", type=Path, help="CSV of extra rows (e.g. fs-mbd) to merge")
    p = sub.add_parser("emit-plots", help="write plot-data text files")
    _common(p)
    p.add_argument("--example", type=int, default=0, help="test example for z and x plots")
    p.add_argument("--cr", type=float, help="CR for the spectrum and recovery files")
    p.add_argument("--render", action="store_true", help="also render PNGs (needs matplotlib)")
    p = sub.add_parser("bench-operator", help="time structured vs dense compression")
    p.add_argument("--out", type=Path, default=Path("run"))
    p.add_argument("--sizes", type=int, nargs="+", help="M_y ladder (default 2^9..2^14)")
    p.add_argument("--ratio", type=float, default=0.25, help="M_z / M_y")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-time", type=float, default=0.05, help="seconds per timing sample")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p = sub.add_parser("sweep", help="train-stage2 then evaluate across the CR list")
    _common(p)
    p.add_argument("--no-lista", action="store_true")
    p.add_argument("--grid", action="store_true")
    p.add_argument("--external", type=Path)
    return parser


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r.method:9s} cr={100 * r.cr:6.2f} M_z={r.M_z:4d} {r.kind:5s} trial={r.trial:3d} "
              f"nmse_db={r.nmse_db:9.3f} success={int(r.success)}")


def _cmd_generate(cfg, args):
    manifest = experiment.generate(cfg, args.out, args.overwrite)
    print(json.dumps(manifest["sizes"], sort_keys=True))


def _refuse(path):
    raise FileExistsError(f"outputs exist in {path} (use --overwrite)")


def _cmd_stage1(cfg, args):
    res = experiment.run_stage1(cfg, args.out, args.overwrite)
    last = res.history[-1] if res.history else None
    if last is not None:
        print(f"epochs={len(res.history)} loss={last.train_loss:.6g} "
              f"source_error={last.source_error:.4g} aligned={last.source_error_aligned:.4g}")


def _cmd_stage2(cfg, args):
    filters = experiment.run_stage2(cfg, args.out, args.overwrite,
                                    lista=False if args.no_lista else None, grid=args.grid)
    print("trained M_z:", " ".join(str(m) for m in sorted(filters, reverse=True)))


def _cmd_evaluate(cfg, args):
    _print_rows(experiment.evaluate(cfg, args.out, args.overwrite, args.external))


def _cmd_plots(cfg, args):
    from .reports import emit_plots, render_plots
    written = emit_plots(cfg, args.out, args.example, args.cr)
    if args.render:
        try:
            written += render_plots(args.out / "plots")
        except ImportError as exc:
            raise experiment.DependencyError(f"--render needs matplotlib: {exc}") from exc
    for p in written:
        print(p)


def _cmd_bench(args):
    from .bench import DEFAULT_LADDER, run_bench, write_bench, fit_exponents
    path = args.out / "bench" / "bench.csv"
    if path.exists() and not args.overwrite:
        _refuse(path)
    rows = run_bench(args.sizes or DEFAULT_LADDER, args.ratio, args.seed, args.min_time)
    fits = fit_exponents(rows)
    write_bench(path, rows, fits)
    for r in rows:
        print(f"M_y={r.M_y:6d} M_z={r.M_z:5d} structured={r.structured_ns:12.0f} ns "
              f"dense={r.dense_ns:12.0f} ns diff={r.max_abs_diff:.2e}")
    print(" ".join(f"{k}_exponent={v:.3f}" for k, v in fits.items()))


def _cmd_sweep(cfg, args):
    _cmd_stage2(cfg, args)
    _cmd_evaluate(cfg, args)


COMMANDS = {"generate": _cmd_generate, "train-stage1": _cmd_stage1, "train-stage2": _cmd_stage2,
            "evaluate": _cmd_evaluate, "emit-plots": _cmd_plots, "sweep": _cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "bench-operator":
            _cmd_bench(args)
            return EXIT_OK
        cfg = load_config(args.config, args.preset, args.seed)
        COMMANDS[args.command](cfg, args)
        (args.out / f"config_{args.command}.ini").write_text(cfg.to_ini())
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (experiment.DependencyError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (TrainingDiverged, DivergenceError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
