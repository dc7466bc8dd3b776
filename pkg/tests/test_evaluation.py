import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import small_config
from stmae import config as cfgmod
from stmae.data import Dataset, TestItem
from stmae.errors import ConfigError
from stmae.evaluation import (ABLATION_AXES, MetricsReport, ablation_grid, ablation_run, evaluate_category,
                              image_seed, score_features, write_heatmaps, write_metrics_csv,
                              write_score_curve, write_scores_csv)
from stmae.fptd import decouple_indices
from stmae.lpsr import ExtractorConfig, FeatureExtractor
from stmae.residuals import fuse_maps, residual_maps
from stmae.training import build_model


@pytest.fixture(scope="module")
def pair():
    ext = FeatureExtractor(ExtractorConfig(image_size=32, hierarchy="pixel"))
    return ext, build_model(small_config(), 0).eval()


def test_evaluate_deterministic_and_bounded(pair, tiny_synth):
    r1, m1 = evaluate_category(pair, tiny_synth, eval_seed=3)
    r2, m2 = evaluate_category(pair, tiny_synth, eval_seed=3)
    assert r1 == r2
    assert all(np.array_equal(a.map, b.map) for a, b in zip(m1, m2))
    for k in ("image_auroc", "image_ap", "f1", "accuracy", "pixel_auroc", "pixel_ap"):
        assert 0 <= getattr(r1, k) <= 1
    assert r1.n_images == 6 and r1.n_anomalous == 3
    assert r1.n_pixels == 6 * 32 * 32
    assert m1[0].map.shape == (32, 32)


def test_evaluate_without_masks_warns(pair, tiny_synth):
    ds = Dataset(tiny_synth.train_items, [TestItem(t.image, t.label, None, t.name) for t in tiny_synth.test_items])
    with pytest.warns(UserWarning, match="pixel metrics skipped"):
        report, _ = evaluate_category(pair, ds)
    assert report.pixel_auroc is None and report.pixel_ap is None
    assert "n/a" in report.summary()


def test_tta_averages_rounds(pair):
    ext, model = pair
    pfdf = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    seeds = [[image_seed(0, i, r) for r in range(4)] for i in range(2)]
    maps = score_features(model, pfdf, 8, seeds, sigma=0, tta_rounds=4)
    manual = []
    for r in range(4):
        pairs = [decouple_indices(16, s[r]) for s in seeds]
        idx = tuple(torch.from_numpy(np.stack([p[k] for p in pairs])) for k in (0, 1))
        with torch.no_grad():
            carf = model(pfdf, indices=idx)
        manual.append(fuse_maps(*residual_maps(carf.double(), pfdf.double())))
    expected = torch.stack(manual).mean(0).numpy()
    for i in range(2):
        np.testing.assert_allclose(maps[i].map, np.clip(expected[i], 0, None), rtol=1e-12)
    single = score_features(model, pfdf, 8, [s[:1] for s in seeds], sigma=0, tta_rounds=1)
    assert not np.allclose(single[0].map, maps[0].map)


def test_image_seed_distinct():
    seeds = {image_seed(0, i, r) for i in range(50) for r in range(3)}
    assert len(seeds) == 150
    assert image_seed(1, 0) != image_seed(0, 0)


def test_max_image_stat(pair, tiny_synth):
    _, maps = evaluate_category(pair, tiny_synth, image_stat="max")
    assert all(m.image_score == pytest.approx(m.map.max()) for m in maps)


def test_exports(tmp_path, pair, tiny_synth):
    report, maps = evaluate_category(pair, tiny_synth)
    write_metrics_csv(report, tmp_path / "m.csv", {"category": "synthetic"})
    row = next(csv.DictReader(open(tmp_path / "m.csv")))
    assert float(row["pixel_auroc"]) == pytest.approx(report.pixel_auroc)
    assert row["category"] == "synthetic"
    write_scores_csv(tiny_synth, maps, tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 6 and float(rows[0]["score"]) == maps[0].image_score
    write_heatmaps(tiny_synth, maps, tmp_path / "h")
    side = json.loads((tmp_path / "h" / "heatmaps.json").read_text())
    assert len(side) == 6
    img = Image.open(tmp_path / "h" / "00000.png")
    assert img.mode == "L" and img.size == (32, 32)
    arr = np.asarray(img).astype(float)
    lo, hi = side["00000.png"]["min"], side["00000.png"]["max"]
    recovered = lo + arr / 255 * (hi - lo)
    np.testing.assert_allclose(recovered, maps[0].map, atol=(hi - lo) / 255)


def test_score_curve_rows(tmp_path, pair, tiny_synth):
    ds = Dataset(tiny_synth.train_items, tiny_synth.test_items, layout="frames",
                 frame_keys=[("c0", i) for i in range(6)])
    _, maps = evaluate_category(pair, ds)
    write_score_curve(ds, maps, tmp_path / "curve.csv")
    rows = list(csv.DictReader(open(tmp_path / "curve.csv")))
    assert len(rows) == 6 and rows[2]["frame_index"] == "2"


def _base_cfg():
    return cfgmod.load_config(None, ["image.size=32", "data.layout='synthetic'"])


def test_ablation_grid_axes():
    base = _base_cfg()
    modes = ablation_grid(base, ["mode"])
    assert sorted(p["point"]["mode"] for p in modes) == ["ae", "smae", "stmae"]
    ks = ablation_grid(cfgmod.load_config(None, ["image.size=64"]), ["K"])
    assert [p["config"]["fptd"]["patch_size"] for p in ks] == [2, 4, 8, 16]
    hier = ablation_grid(base, ["hierarchy"])
    assert [p["config"]["pfdf"]["hierarchy"] for p in hier] == ["pixel", "s-feature", "d-feature", "pfdf"]
    lm = ablation_grid(base, {"loss_modality": ["orientation"]})
    assert lm[0]["config"]["score"]["fusion"] == "orientation"
    assert len(ablation_grid(base, {"mode": ["ae", "stmae"], "variant": ["nano", "tiny"]})) == 4
    assert set(ABLATION_AXES) == {"mode", "K", "hierarchy", "backbone", "variant", "loss_modality"}


@pytest.mark.parametrize("axes", [["depth"], {"mode": ["vae"]}, {"K": [3]}])
def test_ablation_invalid(axes):
    with pytest.raises(ConfigError):
        ablation_grid(_base_cfg(), axes)


def test_ablation_run_table(tmp_path, tiny_synth):
    calls = []

    def runner(cfg, ds):
        calls.append(cfg["model"]["mode"])
        return None, MetricsReport(0.5, 0.5, 0.5, 0.5, 0.0, 0.6, 0.6)

    ablation_run(tiny_synth, _base_cfg(), ["mode"], out_csv=tmp_path / "a.csv", runner=runner)
    assert calls == ["ae", "smae", "stmae"]
    table = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert [r["mode"] for r in table] == ["ae", "smae", "stmae"]
    assert float(table[0]["pixel_auroc"]) == 0.6
