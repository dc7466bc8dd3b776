"""Anomaly scoring of test sets, metric reports, exports and ablations."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .data import Dataset, read_mask
from .fptd import decouple_indices
from .lpsr import FeatureExtractor
from .metrics import auroc, average_precision, f1_accuracy
from .model import STMAE
from .residuals import AnomalyMap, fuse_maps, postprocess, residual_maps
from .training import Checkpoint, restore, train

log = logging.getLogger(__name__)

METRIC_FIELDS = ("image_auroc", "pixel_auroc", "image_ap", "pixel_ap", "f1", "accuracy")


@dataclass
class MetricsReport:
    image_auroc: float
    image_ap: float
    f1: float
    accuracy: float
    threshold: float
    pixel_auroc: float | None = None
    pixel_ap: float | None = None
    n_images: int = 0
    n_anomalous: int = 0
    n_pixels: int = 0
    fingerprint: str = ""

    def row(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        pix = "n/a" if self.pixel_auroc is None else f"{100 * self.pixel_auroc:.1f}"
        return (f"image AUROC {100 * self.image_auroc:.1f} | pixel AUROC {pix} | "
                f"image AP {100 * self.image_ap:.1f} | F1 {100 * self.f1:.1f} | "
                f"acc {100 * self.accuracy:.1f} ({self.n_images} images, {self.n_anomalous} anomalous)")


def image_seed(eval_seed: int, index: int, round_: int = 0) -> int:
    return int(np.random.SeedSequence([eval_seed, index, round_]).generate_state(1)[0])


@torch.no_grad()
def score_features(model: STMAE, pfdf: torch.Tensor, image_size: int, seeds, sigma=4.0,
                   fusion="multiply", tta_rounds=1, image_stat="std") -> list[AnomalyMap]:
    """Anomaly maps for a batch of fused feature maps.

    ``seeds[i][r]`` is the decoupling seed of image ``i`` in round ``r``; maps
    at feature resolution are averaged over rounds before post-processing.
    """
    model.eval()
    n = model.config.n_tokens
    fused = []
    a_ints, a_oris = [], []
    for r in range(tta_rounds):
        indices = None
        if model.config.mode != "ae":
            pairs = [decouple_indices(n, s[r]) for s in seeds]
            indices = (torch.from_numpy(np.stack([p[0] for p in pairs])),
                       torch.from_numpy(np.stack([p[1] for p in pairs])))
        carf = model(pfdf, indices=indices)
        a_int, a_ori = residual_maps(carf.double(), pfdf.double())
        fused.append(fuse_maps(a_int, a_ori, fusion))
        a_ints.append(a_int)
        a_oris.append(a_ori)
    fused = torch.stack(fused).mean(0).numpy()
    a_int = torch.stack(a_ints).mean(0).numpy()
    a_ori = torch.stack(a_oris).mean(0).numpy()
    out = []
    for i in range(len(fused)):
        amap = postprocess(fused[i], image_size, sigma, a_int[i], a_ori[i])
        if image_stat == "max":
            amap.image_score = float(amap.map.max())
        out.append(amap)
    return out


def score_images(extractor: FeatureExtractor, model: STMAE, refs, eval_seed=0, tta_rounds=1,
                 sigma=4.0, fusion="multiply", image_stat="std", batch_size=16, start_index=0):
    refs = list(refs)
    maps = []
    for i in range(0, len(refs), batch_size):
        chunk = refs[i:i + batch_size]
        pfdf = extractor(chunk)
        seeds = [[image_seed(eval_seed, start_index + i + j, r) for r in range(tta_rounds)]
                 for j in range(len(chunk))]
        maps += score_features(model, pfdf, extractor.config.image_size, seeds, sigma, fusion,
                               tta_rounds, image_stat)
    return maps


def evaluate_category(checkpoint: Checkpoint | tuple, dataset: Dataset, eval_seed=0, tta_rounds=1,
                      sigma=4.0, fusion="multiply", image_stat="std", fingerprint=""):
    """Score every test item and aggregate metrics.

    ``checkpoint`` is a :class:`Checkpoint` or an ``(extractor, model)`` pair.
    Returns ``(report, maps)`` with one :class:`AnomalyMap` per test item.
    Pixel metrics pool all pixels of all test images; they are skipped when
    no anomalous item carries a mask.
    """
    if isinstance(checkpoint, Checkpoint):
        extractor, model = restore(checkpoint)
    else:
        extractor, model = checkpoint
    items = dataset.test_items
    maps = score_images(extractor, model, [t.image for t in items], eval_seed, tta_rounds,
                        sigma, fusion, image_stat)
    labels = np.array([t.label for t in items])
    scores = np.array([m.image_score for m in maps])
    f1, acc, thr = f1_accuracy(scores, labels)
    report = MetricsReport(auroc(scores, labels), average_precision(scores, labels), f1, acc, thr,
                           n_images=len(items), n_anomalous=int(labels.sum()), fingerprint=fingerprint)
    if dataset.has_masks:
        size = extractor.config.image_size
        pix_scores = np.concatenate([m.map.ravel() for m in maps])
        pix_labels = np.concatenate([_resized_mask(t, size).ravel() for t in items])
        report.pixel_auroc = auroc(pix_scores, pix_labels)
        report.pixel_ap = average_precision(pix_scores, pix_labels)
        report.n_pixels = int(pix_labels.size)
    else:
        warnings.warn("no ground-truth masks; pixel metrics skipped", stacklevel=2)
    return report, maps


def _resized_mask(item, size) -> np.ndarray:
    if item.mask is None:
        return np.zeros((size, size), dtype=bool)
    mask = read_mask(item.mask)
    if mask.shape != (size, size):
        img = Image.fromarray(mask.astype(np.uint8) * 255)
        mask = np.asarray(img.resize((size, size), Image.NEAREST)) > 127
    return mask


# --------------------------------------------------------------------------
# exports

def write_metrics_csv(report: MetricsReport, path, extra: dict | None = None) -> None:
    row = dict(extra or {})
    row.update(report.row())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)


def write_scores_csv(dataset: Dataset, maps, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "name", "label", "score"])
        for i, (t, m) in enumerate(zip(dataset.test_items, maps)):
            w.writerow([i, t.name, t.label, repr(m.image_score)])


def write_score_curve(dataset: Dataset, maps, path) -> None:
    """One row per test frame: ``clip,frame_index,label,score``."""
    keys = dataset.frame_keys or [("", i) for i in range(len(dataset.test_items))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "frame_index", "label", "score"])
        for (clip, idx), t, m in zip(keys, dataset.test_items, maps):
            w.writerow([clip, idx, t.label, repr(m.image_score)])


def write_heatmaps(dataset: Dataset, maps, out_dir) -> None:
    """8-bit grayscale PNGs normalised per image; raw min/max go to ``heatmaps.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {}
    for i, (t, m) in enumerate(zip(dataset.test_items, maps)):
        lo, hi = float(m.map.min()), float(m.map.max())
        scaled = np.zeros_like(m.map) if hi <= lo else (m.map - lo) / (hi - lo)
        name = f"{i:05d}.png"
        Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(out_dir / name)
        sidecar[name] = {"item": t.name, "min": lo, "max": hi}
    (out_dir / "heatmaps.json").write_text(json.dumps(sidecar, indent=1))


# --------------------------------------------------------------------------
# experiments and ablations

def run_experiment(cfg: dict, dataset: Dataset, features=None, log_path=None, extractor=None):
    """Train and evaluate one configuration; returns ``(checkpoint, report)``."""
    extractor = extractor or FeatureExtractor(cfgmod.extractor_config(cfg))
    mc = cfgmod.model_config(cfg, extractor.out_channels)
    tc = cfgmod.train_config(cfg)
    ckpt = train(dataset, mc, tc, extractor, features=features, log_path=log_path)
    ckpt.extra["run_config"] = copy.deepcopy(cfg)
    _, model = restore(ckpt, with_extractor=False)
    s = cfg["score"]
    report, _ = evaluate_category((extractor, model), dataset, cfg["eval"]["seed"],
                                  cfg["eval"]["tta_rounds"], s["sigma"], s["fusion"],
                                  s["image_stat"], cfgmod.fingerprint(cfg))
    return ckpt, report


# axis -> (default sweep, config keys it sets)
ABLATION_AXES = {
    "mode": (["ae", "smae", "stmae"], ("model.mode",)),
    "K": ([2, 4, 8, 16], ("fptd.patch_size",)),
    "hierarchy": (["pixel", "s-feature", "d-feature", "pfdf"], ("pfdf.hierarchy",)),
    "backbone": (["mobilenet_v2", "resnet34", "resnet50", "vgg19"], ("backbone.name",)),
    "variant": (["nano", "tiny", "base", "huge"], ("model.variant",)),
    "loss_modality": (["intensity", "orientation", "dual"], ("loss.modality", "score.fusion")),
}
_MODALITY_FUSION = {"intensity": "intensity", "orientation": "orientation", "dual": "multiply"}


def _apply_axis(cfg, axis, value):
    if axis not in ABLATION_AXES:
        raise cfgmod.ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    if axis == "loss_modality":
        if value not in _MODALITY_FUSION:
            raise cfgmod.ConfigError(f"invalid loss_modality {value!r}")
        cfg["loss"]["modality"] = value
        cfg["score"]["fusion"] = _MODALITY_FUSION[value]
    else:
        key = ABLATION_AXES[axis][1][0]
        cfgmod.set_key(cfg, key, value)
        if axis == "backbone":
            cfg["backbone"]["taps"] = []
    cfgmod.validate(cfg)


def ablation_grid(base_cfg: dict, axes) -> list[dict]:
    """Expand ``axes`` (names, or a mapping name -> values) into a list of grid points."""
    if not isinstance(axes, dict):
        axes = {a: None for a in axes}
    names, values = [], []
    for axis, vals in axes.items():
        if axis not in ABLATION_AXES:
            raise cfgmod.ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
        names.append(axis)
        values.append(list(vals) if vals is not None else ABLATION_AXES[axis][0])
    points = []
    for combo in itertools.product(*values):
        cfg = copy.deepcopy(base_cfg)
        for axis, value in zip(names, combo):
            _apply_axis(cfg, axis, value)
        points.append({"point": dict(zip(names, combo)), "config": cfg})
    return points


def ablation_run(dataset: Dataset, base_cfg: dict, axes, out_csv=None, runner=run_experiment):
    """One training + evaluation per grid point; returns a list of row dicts."""
    rows = []
    cache = {}
    for p in ablation_grid(base_cfg, axes):
        cfg = p["config"]
        # features depend only on the extractor settings
        ekey = json.dumps(cfgmod.extractor_config(cfg).to_dict(), sort_keys=True)
        if runner is run_experiment:
            if ekey not in cache:
                ext = FeatureExtractor(cfgmod.extractor_config(cfg))
                cache = {ekey: (ext, ext(dataset.train_items))}
            ext, feats = cache[ekey]
            _, report = run_experiment(cfg, dataset, features=feats, extractor=ext)
        else:
            _, report = runner(cfg, dataset)
        log.info("ablation %s: %s", p["point"], report.summary())
        rows.append({**p["point"], **{k: getattr(report, k) for k in METRIC_FIELDS}})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
