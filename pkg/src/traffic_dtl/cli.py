"""Command-line entry point: ``traffic-dtl <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .autodiff import NumericalError
from .pipeline import DataError
from .svr import SvrConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NAN, EXIT_SVR = 0, 2, 3, 4


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its fields")
    common.add_argument("--site", type=_strs, help="site name(s) PS,EB,LC or CSV path(s)")
    common.add_argument("--arch", type=_strs, help="rnn, cnn and/or svr")
    common.add_argument("--p", type=_ints, help="window length(s), e.g. 10,15,20")
    common.add_argument("--dn", type=_ints, help="horizon offset(s), e.g. 0,4,9,14")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--seeds", type=_ints, help="replicate ids, e.g. 1,2,3")
    common.add_argument("--teacher", help="teacher weight container (transfer)")
    common.add_argument("--teacher-site", help="site a teacher is trained on when --teacher is absent")
    common.add_argument("--model", help="weight container to explain")
    common.add_argument("--masks", type=_strs, help="freeze masks to sweep, e.g. FFT,TTT")
    common.add_argument("--epochs", type=int, help="epoch cap")
    common.add_argument("--out", help="output directory (ledger, models, reports)")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="traffic-dtl", description="Mobile traffic forecasting with transfer learning.")
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write synthetic site CSVs")
    g.add_argument("--days", type=int, help="override the profile length in days")
    sub.add_parser("train", parents=[common], help="stand-alone training grid")
    sub.add_parser("transfer", parents=[common], help="teacher -> student freeze-mask sweep")
    sub.add_parser("svr", parents=[common], help="SVR baseline grid")
    sub.add_parser("explain", parents=[common], help="SmoothGrad / LRP heatmaps")
    sub.add_parser("energy", parents=[common], help="energy comparison from the run ledger")
    sub.add_parser("report", parents=[common], help="MSE grids from the run ledger")
    return ap


def _config(args: argparse.Namespace) -> ex.ExperimentConfig:
    return ex.load_config(
        args.config,
        sites=args.site,
        arch=args.arch,
        p_grid=args.p,
        dn_grid=args.dn,
        seed=args.seed,
        seeds=args.seeds,
        teacher=args.teacher,
        teacher_site=args.teacher_site,
        model=args.model,
        masks=args.masks,
        epochs=args.epochs,
        out=args.out,
        jobs=args.jobs,
    )


def _dispatch(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cmd = args.command
    if cmd == "generate":
        for site in cfg.sites:
            path = ex.generate_site(site, cfg.seed, Path(cfg.out) / "data", days=args.days)
            print(path)
    elif cmd == "train":
        recs = ex.run_standalone(cfg)
        if "svr" in cfg.arch:
            recs += ex.run_svr(cfg)
        for r in recs:
            print(f"{r['run_id']} {r['arch']} {r['site']} p={r['p']} dn={r['dn']} "
                  f"mse={r['mse']:.5f} params={r['param_count']} epochs={r['epochs_used']}")
        print(f"{len(recs)} new run(s) in {Path(cfg.out) / 'runs.jsonl'}")
    elif cmd == "transfer":
        recs = ex.run_transfer(cfg)
        for r in recs:
            print(f"{r['run_id']} {r['arch']} {r['site']} p={r['p']} dn={r['dn']} mask={r['mask']} mse={r['mse']:.5f}")
        print(f"{len(recs)} new run(s) in {Path(cfg.out) / 'runs.jsonl'}")
    elif cmd == "svr":
        cfg.arch = ["svr"]
        recs = ex.run_svr(cfg)
        for r in recs:
            print(f"{r['run_id']} svr {r['site']} p={r['p']} dn={r['dn']} mse={r['mse']:.5f}")
    elif cmd == "explain":
        for path in ex.run_explain(cfg):
            print(path)
    elif cmd == "energy":
        path = ex.run_energy(cfg)
        print(path.read_text(), end="")
    elif cmd == "report":
        path = ex.run_report(cfg)
        print(path.read_text(), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NAN
    except SvrConvergenceError as exc:
        print(f"svr did not converge: {exc}", file=sys.stderr)
        return EXIT_SVR


if __name__ == "__main__":
    sys.exit(main())
