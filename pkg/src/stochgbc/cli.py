"""Command-line entry point: ``stochgbc {run,suite,list-experiments}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    builtin_experiments,
    run,
    write_report,
)


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "samples", "workers", "resolution"):
        value = getattr(args, key)
        if value is not None:
            out[key] = value
    return out


def _load(source: str) -> ExperimentConfig:
    builtins = builtin_experiments()
    if source in builtins and not Path(source).exists():
        return builtins[source]
    return ExperimentConfig.load(source)


def _run_one(config: ExperimentConfig, out: Path | None, density_grid: bool) -> bool:
    report = run(config)
    print(report.summary())
    if out is not None:
        write_report(report, out, density_grid=density_grid)
    return report.passed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochgbc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--samples", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--resolution", type=int, help="quadrature nodes per axis")
    common.add_argument("--out", type=Path, help="directory for report.txt and CSV files")
    common.add_argument("--no-density-grid", action="store_true",
                        help="skip writing density_grid.csv")

    p = sub.add_parser("run", parents=[common], help="run one experiment")
    p.add_argument("config", help="config file or builtin experiment name")
    p = sub.add_parser("suite", parents=[common], help="run every *.cfg file in a directory")
    p.add_argument("directory", type=Path)
    sub.add_parser("list-experiments", help="list builtin experiments")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-experiments":
        for name, cfg in builtin_experiments().items():
            print(f"{name:22s} {cfg.ensemble:16s} form={cfg.test_form} N={cfg.samples}")
        return 0
    try:
        if args.command == "run":
            config = _load(args.config).replace(**_overrides(args))
            return 0 if _run_one(config, args.out, not args.no_density_grid) else 1
        paths = sorted(args.directory.glob("*.cfg"))
        ok = True
        for path in paths:
            config = ExperimentConfig.load(path).replace(**_overrides(args))
            out = None if args.out is None else args.out / config.experiment
            ok &= _run_one(config, out, not args.no_density_grid)
        print(f"suite: {'PASS' if ok else 'FAIL'} ({len(paths)} experiments)")
        return 0 if ok else 1
    except (ConfigError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
