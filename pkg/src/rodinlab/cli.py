"""``rodinlab <stage> --config <path> [key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 numerical failure (NaN/inf during fitting, training or sampling).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .fitting import FittingDivergence
from .numerics import NonFiniteError, set_precision
from .pipeline.config import ConfigError, PipelineConfig, documented_defaults
from .pipeline.stages import STAGES, MissingArtifactError, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
SCHEDULE_KEYS = {"base": "base.T", "sr": "sr.T", "latent": "prior.T"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rodinlab", description="Tri-plane fitting and diffusion pipeline.")
    p.add_argument("stage", choices=STAGES + ("defaults",), help="stage to run ('defaults' prints a config)")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--steps", type=int, help="diffusion steps T of the schedule chosen by --schedule")
    p.add_argument("--schedule", choices=sorted(SCHEDULE_KEYS), default="base",
                   help="which model --steps applies to")
    p.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale")
    p.add_argument("--ema", dest="ema", action="store_true", default=None, help="sample with EMA weights")
    p.add_argument("--no-ema", dest="ema", action="store_false", help="sample with raw weights")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32",
                   help="default floating-point precision of the run")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.stage == "defaults":
        sys.stdout.write(documented_defaults())
        return EXIT_OK
    set_precision(args.precision)
    try:
        if args.config is None:
            raise ConfigError("--config is required")
        cfg = PipelineConfig.from_file(args.config, args.overrides)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        if args.steps is not None:
            cfg.set(SCHEDULE_KEYS[args.schedule], args.steps)
        if args.cfg_scale is not None:
            cfg.set("sample.cfg_scale", args.cfg_scale)
        if args.ema is not None:
            cfg.set("sample.ema", args.ema)
    except ConfigError as exc:
        print(f"rodinlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_stage(args.stage, cfg)
    except MissingArtifactError as exc:
        print(f"rodinlab: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FittingDivergence, NonFiniteError, FloatingPointError) as exc:
        print(f"rodinlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"rodinlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = {"stage": args.stage, "config_hash": report["config_hash"], "out_dir": str(cfg.out_dir)}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
