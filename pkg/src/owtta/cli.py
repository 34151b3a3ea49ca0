"""Command line: ``owtta run | gradcheck | sweep | oracle``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .checks import gradient_suite, oracle_suite
from .config import ConfigError, RunConfig, config_dict, load_config
from .experiment import SWEEP_AXES, Workbench, sweep
from .report import emit_reports, summary_document

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-12
DEFAULT_GRID = {"alpha": (0.0, 0.3, 0.5, 0.7, 1.0), "lambda1": (0.0, 0.01, 0.1, 1.0, 10.0), "lambda2": (0.0, 0.001, 0.01, 0.1, 1.0)}

log = logging.getLogger("owtta")


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "batches", None) is not None:
        cfg = cfg.with_batches(args.batches)
    if getattr(args, "alpha", None) is not None:
        cfg = cfg.with_adapt(fusion=replace(cfg.adapt.fusion, alpha=args.alpha))
    if getattr(args, "threshold", None) is not None:
        cfg = cfg.with_adapt(fusion=replace(cfg.adapt.fusion, threshold=args.threshold))
    for k in ("lambda1", "lambda2", "beta1", "beta2"):
        v = getattr(args, k, None)
        if v is not None:
            cfg = cfg.with_adapt(weights=replace(cfg.adapt.weights, **{k: v}))
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    bench = Workbench(cfg)
    result = bench.run(adapt=not args.frozen)
    frozen = bench.frozen().summary if args.with_baseline else None
    extra = {"adapted": not args.frozen}
    if frozen is not None:
        extra["frozen_metrics"] = frozen.to_dict()
    doc = summary_document(result.summary, cfg.stream.seed, config_dict(cfg), **extra)
    csv_path, json_path = emit_reports(result.reports, result.stream, doc, args.out, stem=args.stem)
    s = result.summary
    print(f"acc={_fmt(s.acc)} auroc={_fmt(s.auroc)} h_score={_fmt(s.h_score)}")
    if frozen is not None:
        print(f"frozen: acc={_fmt(frozen.acc)} auroc={_fmt(frozen.auroc)} h_score={_fmt(frozen.h_score)}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_suite(h=args.h)
    ok = True
    for r in results:
        good = r.max_rel_err < GRAD_TOL
        ok &= good
        print(f"{r.term:8s} max_rel_err={r.max_rel_err:.3e} params={r.n_params} {'ok' if good else 'FAIL'}")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    cfg = _load(args)
    bench = Workbench(cfg)
    values = args.values if args.values else DEFAULT_GRID[args.axis]
    print(f"{args.axis:>8s}  {'ACC':>7s}  {'AUROC':>7s}  {'H-score':>7s}")
    for v, s in sweep(bench, args.axis, values):
        print(f"{v:8.4g}  {_fmt(s.acc):>7s}  {_fmt(s.auroc):>7s}  {_fmt(s.h_score):>7s}")
    return 0


def cmd_oracle(args) -> int:
    ok = True
    for r in oracle_suite(seed=args.seed):
        good = r.max_abs_diff < ORACLE_TOL
        ok &= good
        print(f"{r.name:8s} instances={r.instances} max_abs_diff={r.max_abs_diff:.3e} {'ok' if good else 'FAIL'}")
    return 0 if ok else 1


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="seed for the backbone and the stream")
    p.add_argument("--batches", type=int, help="override the stream length T")
    p.add_argument("--alpha", type=float, help="fusion coefficient")
    p.add_argument("--threshold", type=float, help="entropy threshold of the OOD mask")
    for k in ("lambda1", "lambda2", "beta1", "beta2"):
        p.add_argument(f"--{k}", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="owtta", description="Open-world test-time adaptation on synthetic streams.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="adapt over one stream and write CSV + JSON reports")
    p.add_argument("config", nargs="?", help="INI config file (defaults apply when omitted)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--stem", default="run", help="file name stem for the reports")
    p.add_argument("--frozen", action="store_true", help="no updates: report the source model")
    p.add_argument("--with-baseline", action="store_true", help="also record the frozen model's metrics")
    _config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--h", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="ACC / AUROC / H-score over a grid of one hyperparameter")
    p.add_argument("config", nargs="?")
    p.add_argument("--axis", choices=SWEEP_AXES, default="alpha")
    p.add_argument("--values", type=float, nargs="+")
    _config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="fast AUROC and similarity loss against brute force")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse reports unknown flags itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError, FloatingPointError) as err:
        print(f"owtta: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
