"""
Command-line front-end for the MABE Laboratory
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import LOG_DIR, LOG_LEVEL, LOG_LEVEL_ENV
from experiment_config import ConfigError, config_schema, load_config
from experiment_pipeline import COMMANDS, MabeLaboratory


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON file")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--lambda", dest="lam", type=float, help="MABE perturbation coefficient")
    common.add_argument("--beam", type=int, help="beam size for the beam rule")
    common.add_argument("--beta", type=float, help="sampling temperature")
    common.add_argument("--scorer", choices=["softmax", "dual"], help="per-token scorer")
    common.add_argument("--rule", choices=["greedy", "sample", "beam", "map"], help="decision rule")
    common.add_argument("--checkpoint", help="checkpoint to decode or evaluate")
    common.add_argument("--log-level", help="logging level (default from MABE_LAB_LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(prog="mabe-lab", description="MABE(lambda) laboratory")
    subparsers = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a model with MABE(lambda)",
        "decode": "decode task instances from a checkpoint",
        "sweep": "train across lambda values on a shared data order",
        "theorem": "tabular fixed points, objective landscapes and utility oracles",
        "gradcheck": "check the log-likelihood / J_MABE / covariance gradient identity",
        "evaluate": "evaluate decision rules under both scorers",
        "report": "render charts and the summary table of a run directory",
    }
    for command in COMMANDS:
        subparsers.add_parser(command, parents=[common], help=helps[command])
    subparsers.add_parser("schema", help="print the experiment config JSON schema")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "output_dir": args.out,
        "train.lambda": args.lam,
        "decode.beam_sizes": [args.beam] if args.beam is not None else None,
        "decode.betas": [args.beta] if args.beta is not None else None,
        "decode.scorers": [args.scorer] if args.scorer else None,
        "decode.rules": [args.rule] if args.rule else None,
        "checkpoint": args.checkpoint,
    }


def configure_logging(level: Optional[str], output_dir: Optional[str]) -> None:
    level = (level or os.environ.get(LOG_LEVEL_ENV) or LOG_LEVEL).upper()
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir:
        log_dir = Path(output_dir) / LOG_DIR
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / "run.log", encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def cli(argv: Optional[List[str]] = None) -> int:
    """Exit status: 0 success, 1 command failure, 2 invalid configuration"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return 0

    try:
        config = load_config(args.config, overrides_from_args(args))
    except ConfigError as exc:
        configure_logging(args.log_level, None)
        logger.error(str(exc))
        return 2

    configure_logging(args.log_level, config.output_dir)
    laboratory = MabeLaboratory(config)
    result = laboratory.run(args.command)
    print(result['message'])
    if not result.get('success'):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(cli())
