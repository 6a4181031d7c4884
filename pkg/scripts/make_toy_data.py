"""Write the synthetic toy corpora, vocabulary, lexicon, relation tags and a config.yaml."""

import argparse

from promalign.synthetic import write_toy_suite

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("out", help="output directory")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--pairs", type=int, default=64, help="number of image-caption pairs")
args = parser.parse_args()

config = write_toy_suite(args.out, seed=args.seed, n_pairs=args.pairs)
print(f"wrote toy suite to {args.out}; run e.g. `promalign pretrain --config {args.out}/config.yaml`")
