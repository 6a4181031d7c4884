"""Toy-scale experiments shared by the acceptance suite and scripts/."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .synthetic import write_toy_suite
from .training import run_finetune, run_pretrain


@dataclass
class TransferOutcome:
    seed: int
    pretrained_f1: float
    random_f1: float


def _final_dev_f1(result) -> float:
    return [r for r in result.log if "dev_f1" in r][-1]["dev_f1"]


def compare_transfer(seed: int, root, n_pairs: int = 256, pretrain_steps: int = 1000,
                     finetune_steps: int = 200) -> TransferOutcome:
    """Held-out NER dev span-F1 after fine-tuning from a pre-trained vs a random encoder.

    Both arms share the seed, data, head initialization and step budget; only
    the encoder's starting weights differ. Scores are taken at the last step.
    """
    root = Path(root) / f"seed{seed}"
    config = write_toy_suite(root, seed=seed, n_pairs=n_pairs)
    pre = run_pretrain(config.replace(max_steps=pretrain_steps, paths={"out_dir": str(root / "pretrain")}))
    ft = config.replace(max_steps=finetune_steps)
    warm = run_finetune(ft.replace(paths={"init_checkpoint": str(pre.checkpoint), "out_dir": str(root / "warm")}), "ner")
    cold = run_finetune(ft.replace(paths={"out_dir": str(root / "cold")}), "ner")
    return TransferOutcome(seed, _final_dev_f1(warm), _final_dev_f1(cold))
