"""Command-line entry point: train, eval, predict and split-snips.

Exit codes: 0 ok, 2 configuration or usage, 3 numeric failure,
4 checkpoint/data incompatibility, 5 data error.
"""

import argparse
import logging
import sys
from typing import List, Optional, Sequence

from groupnlu.config import EnvConfig, load_run_config, parse_override, read_config_file
from groupnlu.errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    RegistryError,
)
from groupnlu.evaluation import render_table
from groupnlu.mtl_model import ArchitectureKind
from groupnlu.presets import load_preset, preset_names
from groupnlu.services import EvaluationService, PredictionService, SnipsSplitService, TrainingService

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_COMPATIBILITY = 4
EXIT_DATA = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupnlu", description="Multi-task slot filling and intent classification")
    parser.add_argument("--log-level", default=None, help="overrides MTL_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model from a run config or preset")
    source = train.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="JSON run config (config.resolved files work too)")
    source.add_argument("--preset", choices=preset_names())
    train.add_argument("--seed", type=int)
    train.add_argument("--arch", choices=[kind.value for kind in ArchitectureKind])
    train.add_argument("--output", help="output directory")
    train.add_argument("--resume", help="continue from a last.ckpt")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")

    evaluate = commands.add_parser("eval", help="score a checkpoint on its dev or test split")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--split", choices=["dev", "test"], default="dev")
    evaluate.add_argument("--gold-as-prediction", action="store_true", help="score gold labels against themselves")

    predict = commands.add_parser("predict", help="tag an utterance")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--text", help="utterance; read from stdin when omitted")
    predict.add_argument("--task", help="decoder to use; defaults to the first registered task")

    split = commands.add_parser("split-snips", help="split Snips into creative / music / location")
    split.add_argument("--in", dest="in_dir", required=True)
    split.add_argument("--out", dest="out_dir", required=True)
    return parser


def cmd_train(args: argparse.Namespace, env: EnvConfig) -> int:
    payload = read_config_file(args.config) if args.config else load_preset(args.preset, env.data_dir)
    overrides = [parse_override(text) for text in args.overrides]
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.arch is not None:
        overrides.append(("architecture", args.arch))
    if args.output is not None:
        overrides.append(("output_dir", args.output))
    config = load_run_config(payload, overrides, env)
    logger.info("Training %s on %s into %s", config.architecture, [t.name for t in config.tasks], config.output_dir)
    result = TrainingService(env).train(config, resume=args.resume)
    print(f"best epoch {result.best_epoch} of {result.epochs_run} ({result.stop_reason})")
    print(f"checkpoints and logs in {config.output_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, env: EnvConfig) -> int:
    report = EvaluationService(env).evaluate(args.checkpoint, args.split, args.gold_as_prediction)
    print(render_table(report))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, env: EnvConfig) -> int:
    text = args.text if args.text is not None else sys.stdin.read()
    if not text.strip():
        print("error: predict needs a non-empty utterance", file=sys.stderr)
        return EXIT_CONFIG
    service = PredictionService.from_path(args.checkpoint)
    for line in text.splitlines() if args.text is None else [text]:
        if not line.strip():
            continue
        view = service.predict(line, task_id=args.task)
        print(view.frame)
        print(view.table())
        print()
    return EXIT_OK


def cmd_split_snips(args: argparse.Namespace, env: EnvConfig) -> int:
    summary = SnipsSplitService().split(args.in_dir, args.out_dir)
    print(summary.table())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "split-snips": cmd_split_snips,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        env = EnvConfig.load()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=(args.log_level or env.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args, env)
    except ConfigError as exc:
        for field_name, message in exc.problems:
            print(f"config error: {field_name}: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CompatibilityError, RegistryError) as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        return EXIT_COMPATIBILITY
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc} does not exist", file=sys.stderr)
        return EXIT_CONFIG


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
