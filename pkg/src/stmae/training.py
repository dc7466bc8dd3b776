"""Optimisation loop, per-step decoupling seeds and checkpoint archives."""
from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import (CheckpointError, CheckpointVersionError, ConfigError,
                     InvalidInputError, TrainingDivergedError)
from .lpsr import ExtractorConfig, FeatureExtractor
from .model import STMAE, ModelConfig
from .residuals import LossReport, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SEED_POLICIES = ("fresh-per-step", "fixed")
LOG_FIELDS = ("step", "epoch", "l_int", "l_ori", "total")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 400
    optimizer: str = "adamw"
    weight_decay: float = 0.05
    seed: int = 0
    mode: str | None = None
    lam: float = 5.0
    loss_modality: str = "dual"
    seed_policy: str = "fresh-per-step"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("training.lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("training.epochs must be >= 1")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.seed_policy not in SEED_POLICIES:
            raise ConfigError(f"unknown seed policy {self.seed_policy!r}; choose from {SEED_POLICIES}")
        if self.lam < 0:
            raise ConfigError("loss.lambda must be non-negative")


@dataclass
class Checkpoint:
    model_config: dict
    extractor_config: dict
    train_config: dict
    model_state: dict
    optimizer_state: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @property
    def seed(self) -> int:
        return self.train_config["seed"]

    @property
    def rng_policy(self) -> str:
        return self.train_config["seed_policy"]


def step_seed(base_seed: int, step: int, policy: str = "fresh-per-step") -> int:
    """Decoupling seed for a training step, a pure function of ``(base_seed, step)``."""
    if policy == "fixed":
        step = 0
    return int(np.random.SeedSequence([base_seed, step, 0x5EED]).generate_state(1)[0])


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.lr, weight_decay=config.weight_decay)


def training_step(batch: torch.Tensor, model: STMAE, optimizer, seed: int, lam: float = 5.0,
                  modality: str = "dual") -> LossReport:
    """One gradient update on a batch of fused feature maps.

    The returned report holds the loss at the pre-update weights.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    carf = model(batch, seed=seed)
    report = total_loss(carf, batch, lam, model.config.patch_size, modality)
    if not torch.isfinite(report.total):
        raise TrainingDivergedError(
            f"non-finite loss (l_int={report.l_int.item()}, l_ori={report.l_ori.item()}) "
            f"with seed {seed}; try a lower learning rate")
    report.total.backward()
    optimizer.step()
    return LossReport(report.l_int.detach(), report.l_ori.detach(), report.total.detach(), lam)


def build_model(model_config: ModelConfig, seed: int) -> STMAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return STMAE(model_config)


def train(dataset, model_config: ModelConfig, train_config: TrainConfig,
          extractor: FeatureExtractor | None = None, features: torch.Tensor | None = None,
          log_path=None, progress=None) -> Checkpoint:
    """Fit the model on the (normal-only) training images of ``dataset``.

    ``features`` may hold precomputed fused feature maps of the training
    images; they are extracted with ``extractor`` otherwise.
    """
    if not dataset.train_items:
        raise InvalidInputError("the dataset has no training images")
    extractor = extractor or FeatureExtractor()
    if features is None:
        features = extractor(dataset.train_items)
    if train_config.mode is not None:
        model_config = replace(model_config, mode=train_config.mode)
    if model_config.feature_channels != features.shape[1] or model_config.feature_size != features.shape[-1]:
        raise ConfigError(
            f"model expects {model_config.feature_channels}x{model_config.feature_size}^2 features, "
            f"extractor produces {tuple(features.shape[1:])}")

    model = build_model(model_config, train_config.seed)
    optimizer = make_optimizer(model, train_config)
    shuffle = np.random.default_rng([train_config.seed, 1])
    writer, fh = None, None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)

    n, bs, step = len(features), train_config.batch_size, 0
    history = []
    try:
        for epoch in range(train_config.epochs):
            order = shuffle.permutation(n)
            for i in range(0, n, bs):
                batch = features[torch.from_numpy(order[i:i + bs])]
                seed = step_seed(train_config.seed, step, train_config.seed_policy)
                rep = training_step(batch, model, optimizer, seed, train_config.lam,
                                    train_config.loss_modality)
                row = rep.as_floats()
                history.append(row["total"])
                if writer is not None:
                    writer.writerow([step, epoch, row["l_int"], row["l_ori"], row["total"]])
                step += 1
            if progress is not None:
                progress(epoch, float(np.mean(history[-math.ceil(n / bs):])))
            log.debug("epoch %d loss %.4f", epoch, history[-1])
    finally:
        if fh is not None:
            fh.close()

    return Checkpoint(
        model_config=model_config.to_dict(),
        extractor_config=extractor.config.to_dict(),
        train_config=asdict(train_config),
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=optimizer.state_dict(),
        step=step,
        extra={"loss_history": history},
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Atomically write the checkpoint as a single torch archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "stmae-checkpoint",
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config,
        "extractor_config": ckpt.extractor_config,
        "train_config": ckpt.train_config,
        "rng_policy": ckpt.train_config.get("seed_policy"),
        "seed": ckpt.train_config.get("seed"),
        "step": ckpt.step,
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "extra": ckpt.extra,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_checkpoint(path, expected_model_config: ModelConfig | dict | None = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "stmae-checkpoint":
        raise CheckpointError(f"{path} is not an stmae checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(payload.get("format_version"), CHECKPOINT_VERSION)
    ckpt = Checkpoint(
        model_config=payload["model_config"],
        extractor_config=payload["extractor_config"],
        train_config=payload["train_config"],
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        step=payload["step"],
        extra=payload.get("extra", {}),
    )
    if expected_model_config is not None:
        expected = expected_model_config
        if isinstance(expected, ModelConfig):
            expected = expected.to_dict()
        diff = {k for k in set(expected) | set(ckpt.model_config)
                if expected.get(k) != ckpt.model_config.get(k)}
        if diff:
            raise ConfigError(f"checkpoint model config differs in {sorted(diff)}")
    return ckpt


def restore(ckpt: Checkpoint, with_extractor: bool = True):
    """Rebuild ``(extractor, model)`` from a checkpoint; the model is in eval mode."""
    model = STMAE(ModelConfig(**ckpt.model_config))
    model.load_state_dict(ckpt.model_state)
    model.eval()
    extractor = None
    if with_extractor:
        extractor = FeatureExtractor(ExtractorConfig(**ckpt.extractor_config))
    return extractor, model
