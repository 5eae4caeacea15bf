"""``uhm-lab <suite> --config <path> --out <path> [--seeds 1,2,3] [--jobs N]``.

Exit status: 0 when the suite ran and every invariant held, 1 when an
invariant failed or a cell raised, 2 when the configuration, command line
or output path is unusable.
"""

from __future__ import annotations

import argparse
import sys

from .config import SUITES, ConfigError, load_config, validate
from .harness import SuiteError, run_suite, write_csv

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uhm-lab", description="Run a verification or learning suite and write its metrics as CSV.")
    p.add_argument("suite", choices=SUITES)
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("--out", help="CSV destination (overrides the config's 'out')")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds overriding the config")
    p.add_argument("--jobs", type=int, default=1, help="parallel (method, seed) cells")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.suite != args.suite:
            raise ConfigError("suite", f"config is for {cfg.suite!r} but {args.suite!r} was requested")
        if args.seeds is not None:
            cfg = validate(cfg.with_seeds(args.seeds))
        out = args.out or cfg.out
        if not out:
            raise ConfigError("out", "no output path given")
        if args.jobs < 1:
            raise ConfigError("jobs", f"must be >= 1, got {args.jobs}")
    except ConfigError as exc:
        print(f"uhm-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"uhm-lab: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = run_suite(cfg, args.jobs)
    except SuiteError as exc:
        print(f"uhm-lab: {exc}", file=sys.stderr)
        return EXIT_FAILED
    try:
        write_csv(result.rows, out)
    except OSError as exc:
        print(f"uhm-lab: cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name in result.failures:
        print(f"uhm-lab: check failed: {name}", file=sys.stderr)
    print(f"uhm-lab: {len(result.rows)} rows -> {out}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
