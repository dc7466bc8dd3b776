"""Frozen CNN feature extraction and multi-level fusion (PFDF).

Tensors follow the torch NCHW convention: an image batch is ``(B, 3, H, W)``
and a fused feature map is ``(B, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .errors import ConfigError, InvalidInputError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Node names understood by torchvision's feature-extraction utility, shallow to deep.
# VGG19 taps are the last ReLU of conv blocks 1-4; the others use the stem
# activation followed by the next three stages.
BACKBONE_TAPS = {
    "vgg19": ["features.3", "features.8", "features.17", "features.26"],
    "resnet34": ["relu", "layer1", "layer2", "layer3"],
    "resnet50": ["relu", "layer1", "layer2", "layer3"],
    "mobilenet_v2": ["features.1", "features.3", "features.6", "features.13"],
}

BACKBONE_WIDTHS = {
    "vgg19": [64, 128, 256, 512],
    "resnet34": [64, 64, 128, 256],
    "resnet50": [64, 256, 512, 1024],
    "mobilenet_v2": [16, 24, 32, 96],
}

# Level subsets used by the feature-hierarchy ablation.
HIERARCHY_LEVELS = {
    "pfdf": (0, 1, 2, 3),
    "s-feature": (0, 1),
    "d-feature": (2, 3),
}
HIERARCHY_MODES = ("pixel",) + tuple(HIERARCHY_LEVELS)


def normalize_image(raw, size=None, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """Resize an ``H x W x 3`` uint8 image and apply ``(x/255 - mean) / std``.

    Returns a float32 tensor of shape ``(3, size, size)``.
    """
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if size is not None:
        hw = (size, size) if isinstance(size, int) else tuple(size)
        if arr.shape[:2] != hw:
            img = Image.fromarray(arr.astype(np.uint8))
            arr = np.asarray(img.resize((hw[1], hw[0]), Image.BILINEAR))
    x = arr.astype(np.float32) / 255.0
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


@dataclass
class BackboneSpec:
    name: str = "vgg19"
    weights: str | None = None
    taps: list[str] | None = None
    # seeds the random initialisation when no weights file is given
    seed: int = 0
    # random-init filter style when no weights file is given: "default" keeps
    # torchvision's init, "smooth" draws low-pass 3x3 kernels
    init: str = "default"

    def resolved_taps(self) -> list[str]:
        if self.taps:
            return list(self.taps)
        if self.name not in BACKBONE_TAPS:
            raise ConfigError(f"unknown backbone {self.name!r}; choose from {sorted(BACKBONE_TAPS)}")
        return list(BACKBONE_TAPS[self.name])


def _build_torchvision(name: str) -> nn.Module:
    from torchvision import models

    if name == "vgg19":
        net = models.vgg19()
        # the classifier is never used and holds most of the parameters
        net.classifier = nn.Identity()
        return net
    if name == "resnet34":
        return models.resnet34()
    if name == "resnet50":
        return models.resnet50()
    if name == "mobilenet_v2":
        return models.mobilenet_v2()
    raise ConfigError(f"unknown backbone {name!r}; choose from {sorted(BACKBONE_TAPS)}")


BACKBONE_INITS = ("default", "smooth")


def smooth_init_(net: nn.Module, noise: float = 1.0) -> nn.Module:
    """Re-draw every 3x3 conv as a random gain times a binomial blur plus a
    little white noise, rescaled to the usual fan-out variance.

    Untrained white-noise filters act as high-pass detectors, so their deep
    activations vary from pixel to pixel much like noise. Low-pass filters keep
    the features spatially coherent, closer to what trained filters give.
    Each conv is then rescaled so its output has unit standard deviation on a
    smooth random probe batch; blurred filters otherwise compound gain with
    depth. Draws come from the global torch RNG, so seed it beforehand.
    """
    b = torch.tensor([1.0, 2.0, 1.0])
    blur = torch.outer(b, b)
    blur = blur / blur.norm()
    for m in net.modules():
        if isinstance(m, nn.Conv2d) and m.kernel_size == (3, 3):
            o, i = m.weight.shape[:2]
            w = torch.randn(o, i, 1, 1) * blur + noise / 3 * torch.randn(o, i, 3, 3)
            w = w * (2.0 / (o * 9)) ** 0.5 / w.pow(2).mean().sqrt()
            with torch.no_grad():
                m.weight.copy_(w)
                if m.bias is not None:
                    m.bias.zero_()
    _calibrate_(net, torch.randn(4, 3, 96, 96))
    return net


@torch.no_grad()
def _calibrate_(net: nn.Module, probe: torch.Tensor) -> None:
    probe = F.avg_pool2d(probe, 5, stride=1, padding=2)

    def rescale(m, _inp, out):
        s = out.std().clamp_min(1e-12)
        m.weight.div_(s)
        return out / s

    hooks = [m.register_forward_hook(rescale) for m in net.modules() if isinstance(m, nn.Conv2d)]
    try:
        net.eval()(probe)
    finally:
        for h in hooks:
            h.remove()


class Backbone(nn.Module):
    """A frozen CNN that returns the activations at its tap points."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        from torchvision.models.feature_extraction import create_feature_extractor

        self.spec = spec
        self.tap_points = spec.resolved_taps()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            net = _build_torchvision(spec.name)
            if spec.weights is None and spec.init == "smooth":
                smooth_init_(net)
            elif spec.init not in BACKBONE_INITS:
                raise ConfigError(f"unknown backbone init {spec.init!r}; choose from {BACKBONE_INITS}")
        if spec.weights is not None:
            try:
                state = torch.load(spec.weights, map_location="cpu", weights_only=True)
            except FileNotFoundError:
                raise
            except Exception as exc:
                raise InvalidInputError(f"could not read backbone weights {spec.weights}: {exc}") from exc
            if isinstance(state, dict) and "state_dict" in state:
                state = state["state_dict"]
            net.load_state_dict(state, strict=False)
        try:
            self.body = create_feature_extractor(net, {t: t for t in self.tap_points})
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"tap point not found in {spec.name}: {exc}") from exc
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.channel_widths = self._probe_widths()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def train(self, mode: bool = True):
        # batch-norm statistics must never update
        return super().train(False)

    def _probe_widths(self) -> list[int]:
        with torch.no_grad():
            out = self.body(torch.zeros(1, 3, 64, 64))
        return [out[t].shape[1] for t in self.tap_points]

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        out = self.body(images)
        return [out[t].clone() for t in self.tap_points]


def extract_hierarchy(images: torch.Tensor, backbone: Backbone) -> list[torch.Tensor]:
    """Feature maps at every tap point, ordered shallow to deep."""
    if images.ndim == 3:
        images = images.unsqueeze(0)
    if images.ndim != 4 or images.shape[1] != 3:
        raise InvalidInputError(f"expected a (B, 3, H, W) batch, got {tuple(images.shape)}")
    return backbone(images)


def fuse_pfdf(levels: Sequence[torch.Tensor], target_size, antialias: bool = True) -> torch.Tensor:
    """Resize every level to ``target_size`` (bilinear) and concatenate channels.

    With ``antialias`` the bilinear kernel is widened when shrinking a level,
    so fine levels are averaged instead of point-sampled.
    """
    h, w = (target_size, target_size) if isinstance(target_size, int) else tuple(target_size)
    if h <= 0 or w <= 0:
        raise ConfigError(f"fusion size must be positive, got {(h, w)}")
    resized = []
    for f in levels:
        if f.shape[-2:] != (h, w):
            f = F.interpolate(f, size=(h, w), mode="bilinear", align_corners=False,
                              antialias=antialias and (f.shape[-2] > h or f.shape[-1] > w))
        resized.append(f)
    return torch.cat(resized, dim=1)


class LPSR(nn.Module):
    """Image batch -> fused feature map, with a selectable level subset."""

    def __init__(self, spec: BackboneSpec | None = None, pfdf_size: int = 64,
                 hierarchy: str = "pfdf", antialias: bool = True):
        super().__init__()
        self.antialias = antialias
        if hierarchy not in HIERARCHY_MODES:
            raise ConfigError(f"unknown hierarchy mode {hierarchy!r}; choose from {HIERARCHY_MODES}")
        self.pfdf_size = pfdf_size
        self.hierarchy = hierarchy
        self.backbone = None if hierarchy == "pixel" else Backbone(spec or BackboneSpec())
        if self.backbone is not None and len(self.backbone.tap_points) < 4 and hierarchy != "pfdf":
            raise ConfigError(f"hierarchy {hierarchy!r} needs four tap points")

    @property
    def levels(self) -> tuple[int, ...]:
        if self.backbone is None:
            return ()
        if self.hierarchy == "pfdf":
            return tuple(range(len(self.backbone.tap_points)))
        return HIERARCHY_LEVELS[self.hierarchy]

    @property
    def out_channels(self) -> int:
        if self.backbone is None:
            return 3
        return sum(self.backbone.channel_widths[i] for i in self.levels)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if self.backbone is None:
            return fuse_pfdf([images], self.pfdf_size, self.antialias)
        feats = extract_hierarchy(images, self.backbone)
        pfdf = fuse_pfdf([feats[i] for i in self.levels], self.pfdf_size, self.antialias)
        assert pfdf.shape[1] == self.out_channels
        return pfdf

    def train(self, mode: bool = True):
        return super().train(False)


@dataclass
class ExtractorConfig:
    image_size: int = 256
    pfdf_size: int | None = None
    hierarchy: str = "pfdf"
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    antialias: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        if self.pfdf_size is None:
            self.pfdf_size = self.image_size // 4
        if self.image_size <= 0 or self.pfdf_size <= 0:
            raise ConfigError("image and fusion sizes must be positive")

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "pfdf_size": self.pfdf_size,
                "hierarchy": self.hierarchy, "backbone": vars(self.backbone).copy(),
                "mean": list(self.mean), "std": list(self.std), "antialias": self.antialias}


class FeatureExtractor:
    """Raw images (paths or uint8 arrays) -> batched fused feature maps."""

    def __init__(self, config: ExtractorConfig | None = None):
        self.config = config or ExtractorConfig()
        c = self.config
        self.lpsr = LPSR(c.backbone, c.pfdf_size, c.hierarchy, c.antialias)

    @property
    def out_channels(self) -> int:
        return self.lpsr.out_channels

    def images(self, refs) -> torch.Tensor:
        from .data import read_image

        c = self.config
        return torch.stack([normalize_image(read_image(r), c.image_size, c.mean, c.std) for r in refs])

    def __call__(self, refs, batch_size: int = 32) -> torch.Tensor:
        refs = list(refs)
        out = [self.lpsr(self.images(refs[i:i + batch_size])) for i in range(0, len(refs), batch_size)]
        return torch.cat(out) if out else torch.empty(0)
