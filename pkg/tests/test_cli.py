import csv
import json

import numpy as np
import pytest
from PIL import Image

from stmae import __version__
from stmae import config as cfgmod
from stmae import cli
from stmae.errors import ConfigError

# a few-second synthetic run: 32 px images, raw-pixel features and a tiny model
FAST = ["--set", "data.layout='synthetic'", "--set", "image.size=32", "--set", "pfdf.hierarchy='pixel'",
        "--set", "fptd.patch_size=2", "--set", "model.variant='custom'", "--set", "model.dim=16",
        "--set", "model.enc_depth=1", "--set", "model.dec_depth=1", "--set", "model.heads=2",
        "--set", "training.epochs=1", "--set", "synth.resolution=32", "--set", "synth.n_train=4",
        "--set", "synth.n_test_normal=2", "--set", "synth.n_test_anomalous=2"]


def test_load_config_layers(tmp_path):
    cfg = cfgmod.load_config()
    assert cfg["training"]["lr"] == 1e-4 and cfg["loss"]["lambda"] == 5.0
    toml = tmp_path / "c.toml"
    toml.write_text('[training]\nepochs = 3\n[model]\nvariant = "nano"\n')
    cfg = cfgmod.load_config(toml, ["training.epochs=5", "score.sigma=2"])
    assert cfg["training"]["epochs"] == 5 and cfg["model"]["variant"] == "nano"
    assert cfg["score"]["sigma"] == 2


@pytest.mark.parametrize("override", ["training.epochz=1", "training.epochs='x'", "model.mode='vae'",
                                      "fptd.patch_size=3", "nodot=1", "eval.tta_rounds=0"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        cfgmod.load_config(None, [override])


def test_bad_toml(tmp_path):
    (tmp_path / "bad.toml").write_text("[training\n")
    with pytest.raises(ConfigError):
        cfgmod.load_config(tmp_path / "bad.toml")
    with pytest.raises(ConfigError):
        cfgmod.load_config(tmp_path / "none.toml")


def test_model_config_from_defaults():
    mc = cfgmod.model_config(cfgmod.load_config(), 960)
    assert (mc.feature_size, mc.patch_size, mc.variant, mc.n_tokens) == (64, 4, "base", 256)


def _run(argv, capsys=None):
    return cli.main(argv)


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "train"
    assert cli.main(["train", "--out", str(out), *FAST]) == 0
    return out


def test_train_outputs(trained):
    assert (trained / "checkpoint.pt").exists()
    rows = list(csv.DictReader(open(trained / "loss.csv")))
    assert rows and set(rows[0]) == {"step", "epoch", "l_int", "l_ori", "total"}
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["training"]["epochs"] == 1
    run = json.loads((trained / "run.json").read_text())
    assert run["version"] == __version__ and run["command"] == "train" and "seed" in run


def test_eval_outputs(tmp_path, trained):
    out = tmp_path / "eval"
    ck = str(trained / "checkpoint.pt")
    assert cli.main(["eval", "--checkpoint", ck, "--out", str(out), "--tta-rounds", "4"]) == 0
    row = next(csv.DictReader(open(out / "metrics.csv")))
    assert 0 <= float(row["pixel_auroc"]) <= 1
    assert json.loads((out / "config.json").read_text())["eval"]["tta_rounds"] == 4
    assert len(list((out / "heatmaps").glob("*.png"))) == 4
    assert len(list(csv.DictReader(open(out / "scores.csv")))) == 4
    out2 = tmp_path / "eval2"
    assert cli.main(["eval", "--checkpoint", ck, "--out", str(out2), "--no-heatmaps"]) == 0
    assert not (out2 / "heatmaps").exists()


def test_eval_seed_deterministic(tmp_path, trained):
    ck = str(trained / "checkpoint.pt")
    for name in ("a", "b"):
        assert cli.main(["eval", "--checkpoint", ck, "--out", str(tmp_path / name), "--seed", "3",
                         "--no-heatmaps"]) == 0
    assert (tmp_path / "a" / "scores.csv").read_text() == (tmp_path / "b" / "scores.csv").read_text()


def test_eval_mismatch_is_user_error(tmp_path, trained, capsys):
    ck = str(trained / "checkpoint.pt")
    code = cli.main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e"), "--set", "image.size=64"])
    assert code == 2
    assert "differ" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--out", str(tmp_path)]) == 2


def test_infer(tmp_path, trained):
    img = tmp_path / "x.png"
    Image.fromarray(np.full((32, 32, 3), 120, np.uint8)).save(img)
    out = tmp_path / "inf"
    assert cli.main(["infer", "--checkpoint", str(trained / "checkpoint.pt"), "--out", str(out), str(img)]) == 0
    rows = list(csv.DictReader(open(out / "scores.csv")))
    assert len(rows) == 1 and float(rows[0]["score"]) >= 0
    assert (out / "heatmaps" / "00000.png").exists()
    assert cli.main(["infer", "--checkpoint", str(trained / "checkpoint.pt"), "--out", str(out),
                     str(tmp_path / "missing.png")]) == 2


def test_missing_dataset_root(tmp_path, capsys):
    code = cli.main(["train", "--out", str(tmp_path), "--set", "data.root='/no/such/dir'",
                     "--set", "data.category='bottle'"])
    assert code == 2
    assert "data.root" in capsys.readouterr().err


def test_unknown_key_and_bad_args(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path), "--set", "model.size=3"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2


def test_runtime_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--out", str(tmp_path), *FAST]) == 1


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert cli.main(["train", *FAST]) == 0
    runs = list((tmp_path / "root").iterdir())
    assert len(runs) == 1 and runs[0].name.startswith("train-")


def test_ablate_mode_axis(tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--axis", "mode", "--out", str(out), *FAST]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["mode"] for r in rows] == ["ae", "smae", "stmae"]


def test_ablate_k_axis(tmp_path):
    out = tmp_path / "abl"
    argv = ["ablate", "--axis", "K", "--out", str(out), *FAST, "--set", "pfdf.size=32"]
    assert cli.main(argv) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [int(r["K"]) for r in rows] == [2, 4, 8, 16]


def test_ablate_bad_axis(tmp_path):
    assert cli.main(["ablate", "--axis", "depth", "--out", str(tmp_path), *FAST]) == 2


def test_synth_bench_repeatable(tmp_path):
    fast = FAST + ["--set", "training.epochs=2"]
    for name in ("a", "b"):
        assert cli.main(["synth-bench", "--seed", "7", "--out", str(tmp_path / name), "--no-heatmaps", *fast]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text()
    assert "pixel_auroc" in a
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["synth"]["seed"] == 7 and cfg["model"]["variant"] == "custom"
