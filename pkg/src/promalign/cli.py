"""Command-line entry point: ``promalign <stage> --config FILE [--seed N] [--freeze-pseudo-labels] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import ConfigError, InputError, PromalignError
from .training import run_eval, run_finetune, run_gen_pseudo_labels, run_pretrain

COMMANDS = {
    "gen-pseudo-labels": "gen_pseudo_labels",
    "pretrain": "pretrain",
    "finetune-ner": "finetune_ner",
    "finetune-re": "finetune_re",
    "eval": "eval",
}

EXIT_CONFIG, EXIT_INPUT, EXIT_OTHER = 2, 3, 1

log = logging.getLogger("promalign")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promalign", description="Multimodal alignment pre-training and NER/RE fine-tuning.")
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--freeze-pseudo-labels", action="store_true",
                        help="compute pseudo-labels once instead of every epoch")
    parser.add_argument("--out", default=None, help="override paths.out_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(args: argparse.Namespace) -> dict:
    config = load_config(args.config)
    changes: dict = {"stage": COMMANDS[args.command]}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.freeze_pseudo_labels:
        changes["pseudo"] = {"freeze": True}
    if args.out:
        changes["paths"] = {"out_dir": args.out}
    config = config.replace(**changes)

    if config.stage == "gen_pseudo_labels":
        return {"cache": str(run_gen_pseudo_labels(config))}
    if config.stage == "pretrain":
        res = run_pretrain(config)
        last = res.log[-1] if res.log else {}
        return {"checkpoint": str(res.checkpoint), "final": last}
    if config.stage in ("finetune_ner", "finetune_re"):
        res = run_finetune(config, config.stage.split("_")[1])
        return {"final_checkpoint": str(res.final_checkpoint),
                "best_checkpoint": str(res.best_checkpoint) if res.best_checkpoint else None,
                "final": res.log[-1] if res.log else {}}
    summary = run_eval(config)
    return {k: v for k, v in summary.items() if k != "per_label"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except InputError as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except PromalignError as exc:
        log.error("%s", exc)
        return EXIT_OTHER
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
