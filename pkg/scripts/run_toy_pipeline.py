"""Pre-train on the toy corpus, fine-tune NER and RE from the checkpoint, and print a summary."""

import argparse
import json
import logging
import time
from pathlib import Path

from promalign.synthetic import write_toy_suite
from promalign.training import itm_accuracy, run_finetune, run_pretrain

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("out", type=Path)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--pretrain-steps", type=int, default=500)
parser.add_argument("--finetune-steps", type=int, default=200)
args = parser.parse_args()
logging.basicConfig(level=logging.WARNING)

config = write_toy_suite(args.out / "data", seed=args.seed)
t0 = time.perf_counter()
pre = run_pretrain(config.replace(max_steps=args.pretrain_steps, paths={"out_dir": str(args.out / "pretrain")}))
summary = {
    "pretrain": {
        "first_total": pre.log[0]["total"],
        "last_total": pre.log[-1]["total"],
        "itm_accuracy_full_set": itm_accuracy(pre.model, pre.data),
        "seconds": round(time.perf_counter() - t0, 1),
    }
}
for task in ("ner", "re"):
    ft = run_finetune(config.replace(max_steps=args.finetune_steps, eval_train=True, paths={
        "init_checkpoint": str(pre.checkpoint), "out_dir": str(args.out / task)}), task)
    last = [r for r in ft.log if "train_f1" in r][-1]
    summary[task] = {k: last[k] for k in ("train_f1", "dev_f1")}
print(json.dumps(summary, indent=2))
