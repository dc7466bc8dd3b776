"""Run configuration: defaults, TOML loading, ``--set`` overrides and validation."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import tomli

from .errors import ConfigError
from .lpsr import BACKBONE_INITS, BackboneSpec, ExtractorConfig, HIERARCHY_MODES
from .model import MODES, VARIANTS, ModelConfig
from .residuals import FUSIONS
from .training import SEED_POLICIES, TrainConfig

DEFAULTS = {
    "backbone": {"name": "vgg19", "weights": "", "taps": [], "seed": 0, "init": "default"},
    "image": {"size": 256},
    "pfdf": {"size": 0, "hierarchy": "pfdf", "antialias": True},
    "normalize": {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]},
    "fptd": {"patch_size": 4, "seed_policy": "fresh-per-step"},
    "model": {"variant": "base", "mode": "stmae", "siamese_shared": True, "ffb_mult": 4,
              "dim": 0, "enc_depth": -1, "dec_depth": -1, "heads": 0},
    "loss": {"lambda": 5.0, "modality": "dual"},
    "score": {"sigma": 4.0, "fusion": "multiply", "image_stat": "std"},
    "training": {"lr": 1e-4, "batch_size": 8, "epochs": 400, "optimizer": "adamw",
                 "weight_decay": 0.05, "seed": 0, "shots": 0, "shots_seed": 0},
    "eval": {"seed": 0, "tta_rounds": 1, "heatmaps": True},
    "data": {"layout": "mvtec", "root": "", "category": "", "normal_class": "", "labels": ""},
    "synth": {"resolution": 64, "n_train": 200, "n_test_normal": 50, "n_test_anomalous": 50,
              "anomaly_types": ["blob-intensity", "patch-swap", "semantic-swap"], "seed": 0,
              "frequency": 1.5, "noise_level": 0.1},
}

CHOICES = {
    "backbone.name": ("vgg19", "resnet34", "resnet50", "mobilenet_v2"),
    "backbone.init": BACKBONE_INITS,
    "pfdf.hierarchy": HIERARCHY_MODES,
    "fptd.seed_policy": SEED_POLICIES,
    "model.variant": tuple(VARIANTS) + ("custom",),
    "model.mode": MODES,
    "loss.modality": ("dual", "intensity", "orientation"),
    "score.fusion": FUSIONS,
    "score.image_stat": ("std", "max"),
    "training.optimizer": ("adamw", "adam", "sgd"),
    "data.layout": ("mvtec", "folder", "frames", "synthetic"),
}


def _walk(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _walk(v, key + ".")
        else:
            yield key, v


def get(cfg: dict, key: str):
    section, name = key.split(".", 1)
    return cfg[section][name]


def set_key(cfg: dict, key: str, value) -> None:
    if "." not in key:
        raise ConfigError(f"override key {key!r} must look like section.key")
    section, name = key.split(".", 1)
    if section not in DEFAULTS or name not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[section][name] = value


def parse_value(text: str):
    """Parse a ``--set`` value as a TOML literal, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, text = item.split("=", 1)
    return key.strip(), parse_value(text.strip())


def load_config(path=None, overrides=()) -> dict:
    """Defaults, updated by the TOML file at ``path``, then by ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                user = tomli.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        for key, value in _walk(user):
            set_key(cfg, key, value)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_key(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    for key, default in _walk(DEFAULTS):
        value = get(cfg, key)
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise ConfigError(f"{key} must be of type {type(default).__name__}, got {value!r}")
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    if cfg["image"]["size"] <= 0:
        raise ConfigError("image.size must be positive")
    if cfg["pfdf"]["size"] < 0:
        raise ConfigError("pfdf.size must be non-negative (0 means image.size / 4)")
    if cfg["fptd"]["patch_size"] <= 0:
        raise ConfigError("fptd.patch_size must be positive")
    if cfg["score"]["sigma"] < 0:
        raise ConfigError("score.sigma must be non-negative")
    if cfg["eval"]["tta_rounds"] < 1:
        raise ConfigError("eval.tta_rounds must be >= 1")
    if len(cfg["normalize"]["mean"]) != 3 or len(cfg["normalize"]["std"]) != 3:
        raise ConfigError("normalize.mean and normalize.std need three values")
    size = pfdf_size(cfg)
    if size % cfg["fptd"]["patch_size"]:
        raise ConfigError(f"pfdf size {size} is not divisible by fptd.patch_size {cfg['fptd']['patch_size']}")
    train_config(cfg)


def check_data(cfg: dict) -> None:
    """Dataset keys required by the selected layout."""
    layout = cfg["data"]["layout"]
    if layout == "synthetic":
        return
    root = cfg["data"]["root"]
    if not root:
        raise ConfigError("data.root is required")
    if not Path(root).exists():
        raise ConfigError(f"data.root does not exist: {root}")
    if layout == "mvtec" and not cfg["data"]["category"]:
        raise ConfigError("data.category is required for the mvtec layout")
    if layout == "folder" and cfg["data"]["normal_class"] == "":
        raise ConfigError("data.normal_class is required for the folder layout")


def pfdf_size(cfg: dict) -> int:
    return cfg["pfdf"]["size"] or cfg["image"]["size"] // 4


def extractor_config(cfg: dict) -> ExtractorConfig:
    b = cfg["backbone"]
    # a "{name}" placeholder lets one path template serve a backbone sweep
    weights = b["weights"].format(name=b["name"]) if b["weights"] else None
    spec = BackboneSpec(name=b["name"], weights=weights, taps=b["taps"] or None, seed=b["seed"],
                        init=b["init"])
    return ExtractorConfig(image_size=cfg["image"]["size"], pfdf_size=pfdf_size(cfg),
                           hierarchy=cfg["pfdf"]["hierarchy"], backbone=spec,
                           mean=tuple(cfg["normalize"]["mean"]), std=tuple(cfg["normalize"]["std"]),
                           antialias=cfg["pfdf"]["antialias"])


def model_config(cfg: dict, feature_channels: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        feature_channels=feature_channels, feature_size=pfdf_size(cfg),
        patch_size=cfg["fptd"]["patch_size"], variant=m["variant"],
        dim=m["dim"] or None, enc_depth=None if m["enc_depth"] < 0 else m["enc_depth"],
        dec_depth=None if m["dec_depth"] < 0 else m["dec_depth"], heads=m["heads"] or None,
        ffb_mult=m["ffb_mult"], mode=m["mode"], siamese_shared=m["siamese_shared"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(lr=float(t["lr"]), batch_size=t["batch_size"], epochs=t["epochs"],
                       optimizer=t["optimizer"], weight_decay=float(t["weight_decay"]), seed=t["seed"],
                       lam=float(cfg["loss"]["lambda"]), loss_modality=cfg["loss"]["modality"],
                       seed_policy=cfg["fptd"]["seed_policy"])


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True))


def fingerprint(cfg: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]
