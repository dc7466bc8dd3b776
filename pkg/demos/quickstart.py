"""Train on the synthetic textures and localise the defects in a couple of minutes.

    python demos/quickstart.py [--epochs 20] [--out quickstart-out]

Writes heatmaps next to a metrics summary so the result can be eyeballed.
"""
import argparse
from pathlib import Path

from stmae import config as cfgmod
from stmae.data import SynthSpec, synth_generate
from stmae.evaluation import evaluate_category, write_heatmaps
from stmae.lpsr import FeatureExtractor
from stmae.training import restore, train

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--out", default="quickstart-out")
args = parser.parse_args()

# a smaller version of the synthetic benchmark
cfg = cfgmod.load_config(None, ["image.size=64", "fptd.patch_size=2", "model.variant='nano'",
                                f"training.epochs={args.epochs}", "training.lr=1e-3"])
dataset = synth_generate(SynthSpec(n_train=60, n_test_normal=20, n_test_anomalous=20, seed=1))

extractor = FeatureExtractor(cfgmod.extractor_config(cfg))
print(f"fused features: {extractor.out_channels} channels at {cfgmod.pfdf_size(cfg)}x{cfgmod.pfdf_size(cfg)}")
ckpt = train(dataset, cfgmod.model_config(cfg, extractor.out_channels), cfgmod.train_config(cfg), extractor,
             progress=lambda e, loss: print(f"epoch {e:3d}  loss {loss:10.2f}"))
_, model = restore(ckpt, with_extractor=False)

report, maps = evaluate_category((extractor, model), dataset)
print(report.summary())
out = Path(args.out)
write_heatmaps(dataset, maps, out / "heatmaps")
(out / "summary.txt").write_text(report.summary() + "\n")
print(f"heatmaps in {out / 'heatmaps'}")
