"""Command line entry point: simulate, odometry, eval, batch and selftest."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config
from .evaluation import AlignmentError, TrajectoryFormatError, compute_ate, histogram_csv, read_tum, run_batch, write_tum
from .simulator import DatasetError, Dataset, generate_sequence, generate_twins, parse_sim_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("rsdso")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _odometry_config(path) -> Config:
    return load_config(path) if path else Config()


def cmd_simulate(args) -> int:
    cfg = parse_sim_config(Path(args.config).read_text())
    if args.twins:
        rs, gs = generate_twins(cfg, args.out)
        print(f"wrote {rs} and {gs}")
    else:
        out = generate_sequence(cfg, args.out)
        print(f"wrote {out}")
    return EXIT_OK


def cmd_odometry(args) -> int:
    from .frontend import run_odometry

    ds = Dataset.open(args.data)
    traj = run_odometry(ds, shutter=args.shutter, seed=args.seed, config=_odometry_config(args.config),
                        max_frames=args.max_frames)
    write_tum(args.out, traj)
    print(f"wrote {len(traj)} keyframe poses to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = read_tum(args.gt)
    est = read_tum(args.est)
    res = compute_ate(est, gt, args.max_dt, args.alignment)
    print(f"ate {res.e_ate!r}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["timestamp", "error"])
            for t, e in zip(res.matched_timestamps, res.errors):
                w.writerow([repr(float(t)), repr(float(e))])
    return EXIT_OK


def cmd_batch(args) -> int:
    seeds = list(range(args.first_seed, args.first_seed + args.runs))
    results = run_batch(args.data, args.runs, seeds, args.shutter, _odometry_config(args.config), args.max_dt)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "ate", "error"])
        for r in results:
            w.writerow([r.seed, repr(float(r.ate)), r.error])
    if args.histogram:
        Path(args.histogram).write_text(histogram_csv(r.ate for r in results))
    ates = np.array([r.ate for r in results])
    if len(ates):
        print(f"median ate {float(np.median(ates))!r} over {len(ates)} runs, {int(np.sum(~np.isfinite(ates)))} failed")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    if args.check == "jacobians":
        ok = True
        for rolling in (True, False):
            res = selftest.check_jacobians(n_obs=args.n or 1000, seed=args.seed, rolling=rolling)
            name = "rs" if rolling else "gs"
            print(f"jacobians[{name}] n={res.n_obs} max_normalized_error={res.max_error:.3g} "
                  f"{'PASS' if res.passed else 'FAIL'}")
            ok &= res.passed
    elif args.check == "rsc":
        res = selftest.check_rsc(n=args.n or 10000, seed=args.seed)
        print(f"rsc n={res.n} converged={res.converged_fraction:.5f} max_residual={res.max_residual:.3g} "
              f"max_oracle_diff={res.max_oracle_diff:.3g} {'PASS' if res.passed else 'FAIL'}")
        ok = res.passed
    else:
        err = selftest.check_schur(n_systems=args.n or 100, seed=args.seed)
        ok = err < 1e-8
        print(f"schur max_relative_error={err:.3g} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsdso", description="Rolling shutter direct sparse odometry on simulated sequences.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a synthetic sequence")
    s.add_argument("--config", required=True, help="simulator key = value file")
    s.add_argument("--out", required=True)
    s.add_argument("--twins", action="store_true", help="write rolling (rs/) and global (gs/) renders")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("odometry", help="run odometry on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--shutter", choices=("rs", "gs"), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--max-frames", type=int)
    s.set_defaults(func=cmd_odometry)

    s = sub.add_parser("eval", help="absolute trajectory error of an estimate")
    s.add_argument("--gt", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--max-dt", type=float, default=0.01)
    s.add_argument("--alignment", choices=("sim3", "se3"), default="sim3")
    s.add_argument("--csv", help="write per-pose errors here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("batch", help="repeated odometry runs with different seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--runs", type=int, required=True)
    s.add_argument("--shutter", choices=("rs", "gs"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--first-seed", type=int, default=0)
    s.add_argument("--max-dt", type=float, default=0.01)
    s.add_argument("--histogram", help="write cumulative histogram CSV here")
    s.set_defaults(func=cmd_batch)

    s = sub.add_parser("selftest", help="built-in derivative and solver checks")
    s.add_argument("check", choices=("jacobians", "schur", "rsc"))
    s.add_argument("--n", type=int, help="sample count")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    from .windowed_ba import NumericalFailure, SingularSystemError
    from .frontend import TrackingFailure
    from .lie_groups import RotationDegeneracyError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, SingularSystemError, TrackingFailure, RotationDegeneracyError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, TrajectoryFormatError, AlignmentError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
