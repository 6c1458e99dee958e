"""``ressfl <mode> --config <path> [--seed N] [--out DIR] [--threads K]``

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import MODES, load_config
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ressfl", description="Split federated learning with MI-attack resistance.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="JSON experiment file")
    p.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: RESSFL_THREADS or the config value)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("RESSFL_THREADS")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"RESSFL_THREADS must be an integer, got {env!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = {"mode": args.mode, "seed": args.seed, "output_dir": args.out,
                     "threads": resolve_threads(args.threads)}
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .pipeline import run_experiment

    try:
        report = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported via exit code and error.txt
        print(f"run failed: {type(exc).__name__}: {exc} (details in {cfg.output_dir}/error.txt)", file=sys.stderr)
        return EXIT_RUNTIME
    for row in report.summary_rows():
        name, acc, l0, best, verdict = row
        print(f"{name}: accuracy {acc:.2f}  mse_L0 {l0:.4f}  mse_best {best:.4f}  "
              f"{'resistant' if verdict else 'not resistant'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
