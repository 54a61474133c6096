#!/usr/bin/env python3
"""
Command-line entry point for the lab.

    lab data|pretrain|train|attack|evaluate|lnsr|all [--config FILE] [--out DIR]
        [--seed N] [--force] [--arm mel|mock|rand|scratch] [--log-level LEVEL]

Exit codes: 0 success, 1 configuration, IO or other lab error, 2 missing upstream
artifacts, 3 numerical failure.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from config import Config, load_experiment_config
from exceptions import LabError
from harness import TRAIN_ARMS, ExperimentRunner, OutputLock

logger = logging.getLogger(__name__)

COMMANDS = ("data", "pretrain", "train", "attack", "evaluate", "lnsr", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="Adversarial robustness lab for spoofing countermeasures")
    parser.add_argument("command", choices=COMMANDS, help="Stage to run")
    parser.add_argument("--config", default=None, help="Experiment config JSON (defaults when omitted)")
    parser.add_argument("--out", default=None, help="Output directory (overrides the config and LAB_OUTPUT_DIR)")
    parser.add_argument("--seed", type=int, default=None, help="Global seed (overrides the config)")
    parser.add_argument("--force", action="store_true", help="Re-run stages that are already done")
    parser.add_argument("--arm", choices=TRAIN_ARMS, default=None, help="Train a single arm (train only)")
    parser.add_argument("--log-level", default=None, help="Log level (defaults to LAB_LOG_LEVEL)")
    return parser


def run(args: argparse.Namespace) -> None:
    config = load_experiment_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out_dir = Path(args.out or config.output_dir or Config.OUTPUT_DIR)

    logger.info(f"Runtime settings: {Config.get_runtime_info()}")
    logger.info(f"Running `{args.command}` into {out_dir} (seed {config.seed})")

    with OutputLock(out_dir):
        runner = ExperimentRunner(config, out_dir, force=args.force)
        if args.command == "all":
            ran = runner.run_all()
            logger.info(f"Stages run: {', '.join(ran) if ran else 'none (all up to date)'}")
        elif args.command == "train":
            runner.run_train(args.arm)
        else:
            runner.run_stage(args.command, force=args.force)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)

    level = (args.log_level or Config.LOG_LEVEL).upper()
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, level, logging.INFO)
    )

    if not Config.validate():
        logger.error("Invalid runtime settings (check LAB_THREADS and LAB_LOG_LEVEL)")
        return 1
    if args.arm is not None and args.command != "train":
        logger.error("--arm only applies to `lab train`")
        return 1

    try:
        run(args)
    except LabError as e:
        logger.error(str(e))
        return e.exit_code
    except (OSError, ValueError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
