"""Held-out toy NER dev span-F1: pre-trained vs random encoder init, averaged over seeds."""

from __future__ import annotations

import argparse
import json
import logging
import tempfile
from pathlib import Path

import numpy as np

from promalign.experiments import compare_transfer


def main(argv=None) -> dict:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--pairs", type=int, default=256, help="pre-training corpus size")
    parser.add_argument("--pretrain-steps", type=int, default=1000)
    parser.add_argument("--finetune-steps", type=int, default=200)
    parser.add_argument("--out", type=Path, default=None, help="keep run artifacts here")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR)

    with tempfile.TemporaryDirectory() as tmp:
        root = args.out or Path(tmp)
        outcomes = [compare_transfer(s, root, args.pairs, args.pretrain_steps, args.finetune_steps) for s in args.seeds]
    warm = np.array([o.pretrained_f1 for o in outcomes])
    cold = np.array([o.random_f1 for o in outcomes])
    summary = {
        "seeds": args.seeds,
        "pretrained": warm.round(4).tolist(),
        "random": cold.round(4).tolist(),
        "pretrained_mean": round(float(warm.mean()), 4),
        "random_mean": round(float(cold.mean()), 4),
    }
    print(json.dumps(summary, indent=2))
    return summary


if __name__ == "__main__":
    main()
