"""Compare the three reconstruction modes on one synthetic dataset.

    python demos/transition_ablation.py [--epochs 30] [--seed 0]

``ae`` reconstructs the whole token sequence, ``smae`` encodes two random
halves separately and puts them back in place, ``stmae`` puts each half at
the other half's positions so every token must be predicted from context.
The three runs share one feature extraction pass.
"""
import argparse
import json

from stmae import cli
from stmae import config as cfgmod
from stmae.evaluation import ablation_run

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=30)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

cfg = cfgmod.load_config(None, [f"{k}={json.dumps(v)}" for k, v in cli.SYNTH_BENCH_OVERRIDES]
                         + [f"training.epochs={args.epochs}"])
for section in ("synth", "training", "eval"):
    cfg[section]["seed"] = args.seed
dataset = cli.load_dataset(cfg)
for row in ablation_run(dataset, cfg, ["mode"]):
    print(f"{row['mode']:6s} image AUROC {row['image_auroc']:.3f}  pixel AUROC {row['pixel_auroc']:.3f}")
