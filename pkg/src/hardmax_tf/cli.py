"""Command-line entry point: ``hardmax-tf <subcommand> [--config cfg.json] ...``.

Exit codes: 0 all checks pass, 1 a check failed, 2 invalid configuration,
3 a construction precondition (margin B) was violated.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .construct import CapacityError
from .experiments import (
    KINDS,
    ConfigError,
    ExperimentConfig,
    run_approx_rate,
    run_audit,
    run_class_rate,
    run_construct_verify,
)

log = logging.getLogger("hardmax_tf")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PRECONDITION = 0, 1, 2, 3


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if cfg.kind != args.command:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.command!r}")
    else:
        cfg = ExperimentConfig(args.command).validate()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _construct_verify(cfg, out: Path, jobs: int) -> int:
    rep = run_construct_verify(cfg, jobs)
    _write_json(out / "construct_verify.json", rep)
    for r in rep["builders"]:
        flag = "PASS" if r["pass"] else ("VIOLATED" if not r["precondition_ok"] else "FAIL")
        print(f"{flag:8s} {r['builder']:28s} max rel dev {r['max_rel_dev']:.3e}")
    if rep["pass"]:
        return EXIT_OK
    return EXIT_PRECONDITION if rep["violations"] else EXIT_FAIL


def _approx_rate(cfg, out: Path, jobs: int) -> int:
    rep, res = run_approx_rate(cfg, jobs)
    res.write_csv(out / f"approx_rate_{cfg.hcm}.csv")
    _write_json(out / f"approx_rate_{cfg.hcm}.json", rep)
    for h, e in zip(res.x, res.y):
        print(f"h={int(h):6d}  sup_error={e:.6e}")
    print(f"slope {res.slope:.4f} +- {res.halfwidth:.4f} (target {res.target:.4f})")
    return EXIT_OK if rep["within_25pct"] in (True, None) else EXIT_FAIL


def _class_rate(cfg, out: Path, jobs: int) -> int:
    rep, results = run_class_rate(cfg, jobs)
    for name, res in results.items():
        res.write_csv(out / f"class_rate_{name}.csv")
        print(f"{name}: slope {res.slope:.4f} +- {res.halfwidth:.4f} (target {res.target:.4f}), "
              f"inversions {res.extra['inversions']}")
    _write_json(out / f"class_rate_{cfg.hcm}.json", rep)
    if "slope_difference" in rep:
        print(f"slope difference {rep['slope_difference']:.4f} (common random numbers), "
              f"{rep['slope_difference_independent']:.4f} (independent draws, not checked)")
    if "decrease" in rep:
        print(f"first / last median excess risk {rep['decrease']:.2f}")
    for name, ok in rep["checks"].items():
        print(f"{'PASS' if ok else 'FAIL':8s} {name}")
    return EXIT_OK if rep["pass"] else EXIT_FAIL


def _audit(cfg, out: Path, jobs: int) -> int:
    rep = run_audit(cfg, jobs)
    _write_json(out / "audit.json", rep)
    print(f"nonzero {rep['nonzero']} <= {rep['nonzero_bound']}: {rep['nonzero_pass']}")
    print(f"total {rep['total_parameters']} <= {rep['total_bound']}: {rep['total_pass']}")
    return EXIT_OK if rep["pass"] else EXIT_FAIL


COMMANDS = {
    "construct-verify": _construct_verify,
    "approx-rate": _approx_rate,
    "class-rate": _class_rate,
    "audit": _audit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hardmax-tf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        print("config error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, out, max(args.jobs, 1))
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
