"""Training losses and anomaly scoring from feature residuals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import InvalidInputError
from .fptd import grid_shape

COS_EPS = 1e-8
GAUSS_TRUNCATE = 4.0
FUSIONS = ("multiply", "intensity", "orientation")


def _check_pair(carf, pfdf):
    if carf.shape != pfdf.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(carf.shape)} vs {tuple(pfdf.shape)}")
    if carf.ndim == 3:
        return carf.unsqueeze(0), pfdf.unsqueeze(0), True
    if carf.ndim != 4:
        raise InvalidInputError(f"expected (B, C, H, W) or (C, H, W), got {tuple(carf.shape)}")
    return carf, pfdf, False


def _cosine_distance(u, v, dim=-1):
    denom = (u.norm(dim=dim) * v.norm(dim=dim)).clamp_min(COS_EPS)
    return 1.0 - (u * v).sum(dim=dim) / denom


def intensity_loss(carf, pfdf, patch_size=1):
    """Sum over patches of the squared L2 distance; one value per sample."""
    carf, pfdf, single = _check_pair(carf, pfdf)
    grid_shape(carf.shape[-2], carf.shape[-1], patch_size)
    # patches tile the map, so the patch sum is the sum over every element
    out = (carf - pfdf).pow(2).sum(dim=(1, 2, 3))
    return out[0] if single else out


def _block_sum(x, k):
    """Sum ``(B, H, W)`` over non-overlapping ``k x k`` blocks -> ``(B, N)`` in patch order."""
    b, h, w = x.shape
    gh, gw = grid_shape(h, w, k)
    return x.reshape(b, gh, k, gw, k).sum(dim=(2, 4)).reshape(b, gh * gw)


def orientation_patch_terms(carf, pfdf, patch_size=1):
    """Per-patch ``1 - cos`` terms, shape ``(B, N)``."""
    carf, pfdf, single = _check_pair(carf, pfdf)
    # channel reductions first, then per-patch block sums: avoids materialising the patches
    k = patch_size
    dot = _block_sum((carf * pfdf).sum(dim=1), k)
    norms = _block_sum(carf.pow(2).sum(dim=1), k).sqrt() * _block_sum(pfdf.pow(2).sum(dim=1), k).sqrt()
    terms = 1.0 - dot / norms.clamp_min(COS_EPS)
    return terms[0] if single else terms


def orientation_loss(carf, pfdf, patch_size=1):
    return orientation_patch_terms(carf, pfdf, patch_size).sum(dim=-1)


@dataclass
class LossReport:
    l_int: torch.Tensor
    l_ori: torch.Tensor
    total: torch.Tensor
    lam: float

    def as_floats(self) -> dict:
        return {"l_int": float(self.l_int), "l_ori": float(self.l_ori), "total": float(self.total)}


def total_loss(carf, pfdf, lam=5.0, patch_size=1, modality="dual") -> LossReport:
    """``l_int + lam * l_ori`` averaged over the batch.

    ``modality`` selects single-residual objectives for ablations:
    ``"intensity"`` drops the orientation term, ``"orientation"`` drops the
    intensity term.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l_int = intensity_loss(carf, pfdf, patch_size).mean()
    l_ori = orientation_loss(carf, pfdf, patch_size).mean()
    if modality == "dual":
        total = l_int + lam * l_ori
    elif modality == "intensity":
        total = l_int
    elif modality == "orientation":
        total = lam * l_ori
    else:
        raise ValueError(f"unknown loss modality {modality!r}")
    return LossReport(l_int, l_ori, total, lam)


def residual_maps(carf, pfdf):
    """Per-location squared distance and cosine distance over channels, each ``(B, H, W)``."""
    carf, pfdf, single = _check_pair(carf, pfdf)
    a_int = (carf - pfdf).pow(2).sum(dim=1)
    a_ori = _cosine_distance(carf, pfdf, dim=1)
    if single:
        return a_int[0], a_ori[0]
    return a_int, a_ori


def fuse_maps(a_int, a_ori, fusion="multiply"):
    if a_int.shape != a_ori.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a_int.shape)} vs {tuple(a_ori.shape)}")
    if fusion == "multiply":
        return a_int * a_ori
    if fusion == "intensity":
        return a_int
    if fusion == "orientation":
        return a_ori
    raise ValueError(f"unknown fusion {fusion!r}; choose from {FUSIONS}")


def gaussian_kernel1d(sigma: float, truncate: float = GAUSS_TRUNCATE) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def upsample_map(a, image_size) -> np.ndarray:
    """Bilinear resize of ``(H, W)`` or ``(B, H, W)`` maps to ``image_size``."""
    t = torch.as_tensor(a, dtype=torch.float64)
    single = t.ndim == 2
    t = t.reshape(-1, 1, *t.shape[-2:])
    size = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    if tuple(t.shape[-2:]) != size:
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    out = t[:, 0].numpy()
    return out[0] if single else out


def smooth_map(a: np.ndarray, sigma: float = 4.0) -> np.ndarray:
    """Gaussian smoothing of a single 2-D map, reflect boundary, radius ``4*sigma``."""
    if sigma <= 0:
        return np.asarray(a, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(a, dtype=np.float64), sigma, mode="reflect",
                                   truncate=GAUSS_TRUNCATE)


def image_score(amap) -> float:
    """Population standard deviation of the map."""
    amap = np.asarray(amap, dtype=np.float64)
    if amap.size == 0:
        raise InvalidInputError("empty anomaly map")
    return float(amap.std())


@dataclass
class AnomalyMap:
    map: np.ndarray
    image_score: float
    a_int: np.ndarray | None = None
    a_ori: np.ndarray | None = None


def postprocess(a, image_size, sigma=4.0, a_int=None, a_ori=None) -> AnomalyMap:
    """Upsample a fused feature-resolution map, smooth it and score the image."""
    up = upsample_map(a, image_size)
    if up.ndim != 2:
        raise InvalidInputError("postprocess takes one map at a time")
    smoothed = np.clip(smooth_map(up, sigma), 0.0, None)
    return AnomalyMap(smoothed, image_score(smoothed),
                      None if a_int is None else np.asarray(a_int),
                      None if a_ori is None else np.asarray(a_ori))
