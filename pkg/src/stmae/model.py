"""Siamese transition masked autoencoder over fused feature maps."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from . import fptd
from .errors import ConfigError

# Embedding width / encoder depth / decoder depth / heads. Implementer defaults.
VARIANTS = {
    "nano": dict(dim=128, enc_depth=2, dec_depth=1, heads=4),
    "tiny": dict(dim=256, enc_depth=4, dec_depth=1, heads=8),
    "base": dict(dim=512, enc_depth=6, dec_depth=2, heads=8),
    "huge": dict(dim=768, enc_depth=12, dec_depth=4, heads=12),
}
MODES = ("stmae", "smae", "ae")


@dataclass
class ModelConfig:
    feature_channels: int = 960
    feature_size: int = 64
    patch_size: int = 4
    variant: str = "base"
    dim: int | None = None
    enc_depth: int | None = None
    dec_depth: int | None = None
    heads: int | None = None
    ffb_mult: int = 4
    mode: str = "stmae"
    siamese_shared: bool = True
    # "sincos" starts both learnable position tables from the same 2-D sin-cos
    # pattern; "trunc_normal" draws them independently
    pos_init: str = "sincos"

    def __post_init__(self):
        if self.variant not in VARIANTS and self.variant != "custom":
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)} or 'custom'")
        defaults = VARIANTS.get(self.variant, {})
        for key in ("dim", "enc_depth", "dec_depth", "heads"):
            if getattr(self, key) is None:
                if key not in defaults:
                    raise ConfigError(f"custom variant needs an explicit {key}")
                setattr(self, key, defaults[key])
        if self.pos_init not in ("sincos", "trunc_normal"):
            raise ConfigError(f"unknown pos_init {self.pos_init!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ConfigError("depths must be non-negative")
        fptd.grid_shape(self.feature_size, self.feature_size, self.patch_size)
        if self.mode != "ae" and self.n_tokens % 2:
            raise ConfigError(f"decoupling needs an even token count, got N={self.n_tokens}")

    @property
    def n_tokens(self) -> int:
        return (self.feature_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.feature_channels

    def to_dict(self) -> dict:
        return asdict(self)

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, mode=mode)


def sincos_pos_embed(dim: int, side: int) -> torch.Tensor:
    """``(side*side, dim)`` table: half the channels encode the row, half the column."""
    if dim % 4:
        raise ConfigError(f"sin-cos position table needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    rows, cols = torch.meshgrid(torch.arange(side, dtype=torch.float64),
                                torch.arange(side, dtype=torch.float64), indexing="ij")

    def enc(pos):
        out = pos.reshape(-1, 1) * omega
        return torch.cat([out.sin(), out.cos()], dim=1)

    return torch.cat([enc(rows), enc(cols)], dim=1).float()


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        x = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(x)


class FeedForward(nn.Module):
    def __init__(self, dim, mult):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm attention + feed-forward, each with a residual connection."""

    def __init__(self, dim, heads, ffb_mult=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffb = FeedForward(dim, ffb_mult)

    def forward(self, x):
        if x.shape[-1] != self.norm1.normalized_shape[0]:
            raise ConfigError(f"token dim {x.shape[-1]} != block dim {self.norm1.normalized_shape[0]}")
        x = x + self.attn(self.norm1(x))
        return x + self.ffb(self.norm2(x))


class TransformerStack(nn.Module):
    """Entry LayerNorm followed by ``depth`` blocks; no final norm."""

    def __init__(self, dim, depth, heads, ffb_mult=4):
        super().__init__()
        self.entry_norm = nn.LayerNorm(dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, ffb_mult) for _ in range(depth))

    def forward(self, x):
        x = self.entry_norm(x)
        for blk in self.blocks:
            x = blk(x)
        return x


def transition_reassemble(lat1: torch.Tensor, lat2: torch.Tensor,
                          idx1: torch.Tensor, idx2: torch.Tensor) -> torch.Tensor:
    """Place subset-1 latents at subset-2 positions and vice versa.

    ``lat*`` are ``(B, N/2, D)``, ``idx*`` the sorted ``(B, N/2)`` position lists.
    The j-th latent of one subset goes to the j-th position of the other list.
    """
    return _place(lat1, idx2, lat2, idx1)


def identity_reassemble(lat1, lat2, idx1, idx2):
    """Put every latent back at its own position (no transition)."""
    return _place(lat1, idx1, lat2, idx2)


def _place(a, a_pos, b, b_pos):
    bsz, half, d = a.shape
    out = a.new_zeros(bsz, 2 * half, d)
    out = out.scatter(1, a_pos.unsqueeze(-1).expand(-1, -1, d), a)
    return out.scatter(1, b_pos.unsqueeze(-1).expand(-1, -1, d), b)


def check_partition(idx1: torch.Tensor, idx2: torch.Tensor) -> None:
    n = idx1.shape[-1] + idx2.shape[-1]
    full = torch.cat([idx1, idx2], dim=-1).sort(dim=-1).values
    expected = torch.arange(n).expand_as(full)
    if not torch.equal(full, expected):
        raise AssertionError("decoupled index lists do not partition 0..N-1")


class STMAE(nn.Module):
    """Tokenise -> decouple -> Siamese encode -> transition -> decode -> fold.

    ``mode='smae'`` keeps the Siamese encoding but reassembles each latent at
    its own position; ``mode='ae'`` encodes the full sequence without
    decoupling. The parameter set is the same in all three modes.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, n = config.dim, config.n_tokens
        self.patch_embed = nn.Linear(config.patch_dim, d, bias=False)
        self.pos_embed = nn.Parameter(torch.zeros(n, d))
        self.encoder = TransformerStack(d, config.enc_depth, config.heads, config.ffb_mult)
        self.encoder2 = None
        if not config.siamese_shared:
            self.encoder2 = TransformerStack(d, config.enc_depth, config.heads, config.ffb_mult)
        self.decoder_pos_embed = nn.Parameter(torch.zeros(n, d))
        self.decoder = TransformerStack(d, config.dec_depth, config.heads, config.ffb_mult)
        self.head = nn.Linear(d, config.patch_dim)
        self.check_invariants = False
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        if self.config.pos_init == "sincos":
            side = self.config.feature_size // self.config.patch_size
            table = sincos_pos_embed(self.config.dim, side)
            with torch.no_grad():
                self.pos_embed.copy_(table)
                self.decoder_pos_embed.copy_(table)
        else:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            nn.init.trunc_normal_(self.decoder_pos_embed, std=0.02)

    def embed(self, pfdf):
        patches = fptd.partition_patches(pfdf, self.config.patch_size)
        return fptd.embed_tokens(patches, self.patch_embed.weight.t(), self.pos_embed)

    def encode_subset(self, tokens, second=False):
        enc = self.encoder2 if (second and self.encoder2 is not None) else self.encoder
        return enc(tokens)

    def decode(self, full_latent):
        return self.decoder(full_latent + self.decoder_pos_embed)

    def project_and_fold(self, decoded):
        c = self.config
        return fptd.fold_patches(self.head(decoded), c.patch_size, c.feature_channels,
                                 c.feature_size, c.feature_size)

    def latent(self, tokens, seed=None, indices=None):
        """Full reassembled latent sequence ``(B, N, D)`` for the configured mode."""
        if self.config.mode == "ae":
            return self.encode_subset(tokens)
        b, n, d = tokens.shape
        if indices is None:
            if seed is None:
                raise ValueError("a decoupling seed is required")
            idx1, idx2 = fptd.batch_decouple(b, n, seed)
        else:
            idx1, idx2 = indices
        idx1, idx2 = idx1.to(tokens.device), idx2.to(tokens.device)
        sub1 = tokens.gather(1, idx1.unsqueeze(-1).expand(-1, -1, d))
        sub2 = tokens.gather(1, idx2.unsqueeze(-1).expand(-1, -1, d))
        if self.encoder2 is None:
            lat = self.encoder(torch.cat([sub1, sub2], dim=0))
            lat1, lat2 = lat[:b], lat[b:]
        else:
            lat1, lat2 = self.encoder(sub1), self.encoder2(sub2)
        if self.check_invariants:
            check_partition(idx1, idx2)
        if self.config.mode == "stmae":
            return transition_reassemble(lat1, lat2, idx1, idx2)
        return identity_reassemble(lat1, lat2, idx1, idx2)

    def forward(self, pfdf, seed=None, indices=None):
        """Reconstruct ``(B, C, H, W)`` features; deterministic given weights and seed."""
        c = self.config
        if pfdf.shape[1:] != (c.feature_channels, c.feature_size, c.feature_size):
            raise ConfigError(
                f"model expects features of shape {(c.feature_channels, c.feature_size, c.feature_size)}, "
                f"got {tuple(pfdf.shape[1:])}")
        tokens = self.embed(pfdf)
        return self.project_and_fold(self.decode(self.latent(tokens, seed, indices)))
