"""Feature patch tokenisation and random decoupling into two disjoint halves.

A patch of size ``K`` is flattened row-major over its ``K x K`` spatial cells
with channels varying fastest, i.e. element ``(r, c, ch)`` of a patch lands at
index ``(r * K + c) * C + ch``. Patches themselves are numbered row-major over
the patch grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InvalidInputError


def grid_shape(height: int, width: int, patch_size: int) -> tuple[int, int]:
    if patch_size <= 0 or height % patch_size or width % patch_size:
        raise ConfigError(
            f"feature map {height}x{width} is not divisible by patch size {patch_size}")
    return height // patch_size, width // patch_size


def partition_patches(pfdf: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N, K*K*C)`` flattened patches."""
    b, c, h, w = pfdf.shape
    gh, gw = grid_shape(h, w, patch_size)
    k = patch_size
    x = pfdf.permute(0, 2, 3, 1).reshape(b, gh, k, gw, k, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, k * k * c)


def fold_patches(patches: torch.Tensor, patch_size: int, channels: int,
                 height: int, width: int) -> torch.Tensor:
    """Exact inverse of :func:`partition_patches`."""
    b, n, length = patches.shape
    gh, gw = grid_shape(height, width, patch_size)
    k = patch_size
    if n != gh * gw or length != k * k * channels:
        raise ConfigError(
            f"cannot fold {n} patches of length {length} into {channels}x{height}x{width} "
            f"with patch size {k}")
    x = patches.reshape(b, gh, gw, k, k, channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, height, width, channels).permute(0, 3, 1, 2).contiguous()


def embed_tokens(patches: torch.Tensor, projection: torch.Tensor, pos_embed: torch.Tensor) -> torch.Tensor:
    """``patches @ projection + pos_embed``; projection is ``(K*K*C, D)``, pos_embed ``(N, D)``."""
    n, length = patches.shape[-2:]
    if projection.shape[0] != length or pos_embed.shape != (n, projection.shape[1]):
        raise ConfigError(
            f"shape mismatch: patches (.., {n}, {length}), projection {tuple(projection.shape)}, "
            f"pos_embed {tuple(pos_embed.shape)}")
    return patches @ projection + pos_embed


@dataclass
class DecoupledPair:
    indices1: np.ndarray
    indices2: np.ndarray
    seed: int | None = None
    subset1: torch.Tensor | None = None
    subset2: torch.Tensor | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.indices1) + len(self.indices2)


def decouple_indices(n_tokens: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Split ``0..n_tokens-1`` into two sorted, disjoint halves uniformly at random.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if n_tokens < 2 or n_tokens % 2:
        raise ConfigError(f"decoupling needs an even token count >= 2, got {n_tokens}")
    rng = np.random.default_rng(rng)
    perm = rng.permutation(n_tokens)
    half = n_tokens // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def decouple(tokens: torch.Tensor | int, seed) -> DecoupledPair:
    """Randomly decouple a token sequence ``(N, D)`` (or just a count ``N``)."""
    if isinstance(tokens, int):
        i1, i2 = decouple_indices(tokens, seed)
        return DecoupledPair(i1, i2, seed)
    if tokens.ndim != 2:
        raise InvalidInputError(f"expected an (N, D) token sequence, got {tuple(tokens.shape)}")
    i1, i2 = decouple_indices(tokens.shape[0], seed)
    return DecoupledPair(i1, i2, seed, tokens[torch.from_numpy(i1)], tokens[torch.from_numpy(i2)])


def batch_decouple(batch_size: int, n_tokens: int, seed) -> tuple[torch.Tensor, torch.Tensor]:
    """Independent decoupling per sample, all drawn from one seeded stream.

    Returns two ``(B, N/2)`` long tensors.
    """
    rng = np.random.default_rng(seed)
    pairs = [decouple_indices(n_tokens, rng) for _ in range(batch_size)]
    idx1 = torch.from_numpy(np.stack([p[0] for p in pairs]))
    idx2 = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return idx1, idx2
