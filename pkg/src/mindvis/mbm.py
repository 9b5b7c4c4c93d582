"""Sparse-coded masked brain modeling on 1D voxel vectors.

Patches of ``patch_size`` voxels are embedded by a strided 1D convolution into
a much wider token (the embedding-to-patch ratio is the representation's
over-completeness), a large fraction of patches is hidden, and an asymmetric
transformer encoder/decoder pair regresses the hidden voxel values.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .data import floor_count

__all__ = [
    "MbmConfig", "MaskPlan", "CapacityReport", "sincos_pos_embed", "embed_patches",
    "make_mask_plan", "SelfAttention", "Block", "FmriEncoder", "MbmDecoder",
    "MaskedBrainModel", "encode_visible", "decode_with_mask_tokens", "mbm_loss",
    "recovery_correlation", "info_capacity_ratio", "primary_region_labels",
]


@dataclass(frozen=True)
class MbmConfig:
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_embed_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 1.0
    mask_ratio: float = 0.75
    mask_strategy: str = "random"
    # fraction of leading patches treated as the primary region by the focus strategy
    primary_fraction: float = 0.25
    loss_on_all_patches: bool = False

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.embed_dim % self.encoder_heads:
            raise ValueError("embed_dim must be divisible by encoder_heads")
        if self.decoder_embed_dim % self.decoder_heads:
            raise ValueError("decoder_embed_dim must be divisible by decoder_heads")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("depths must be >= 1")
        if self.mask_strategy not in ("random", "focus"):
            raise ValueError(f"unknown mask_strategy {self.mask_strategy!r}")
        if not 0 < self.primary_fraction < 1:
            raise ValueError("primary_fraction must be in (0, 1)")

    @classmethod
    def full_scale(cls) -> "MbmConfig":
        """The large pretraining profile (ViT-Large-sized encoder)."""
        return cls(patch_size=16, embed_dim=1024, encoder_depth=24, encoder_heads=16,
                   decoder_embed_dim=512, decoder_depth=8, decoder_heads=16,
                   mlp_ratio=1.0, mask_ratio=0.75)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray

    def __post_init__(self):
        vis = np.asarray(self.visible_idx, dtype=np.int64)
        msk = np.asarray(self.masked_idx, dtype=np.int64)
        if np.intersect1d(vis, msk).size:
            raise ValueError("visible and masked patch sets overlap")
        object.__setattr__(self, "visible_idx", vis)
        object.__setattr__(self, "masked_idx", msk)

    def __eq__(self, other):
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (np.array_equal(self.visible_idx, other.visible_idx)
                and np.array_equal(self.masked_idx, other.masked_idx))

    __hash__ = None

    @property
    def num_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    def mask(self) -> np.ndarray:
        """Boolean vector, True where the patch is hidden."""
        m = np.zeros(self.num_patches, dtype=bool)
        m[self.masked_idx] = True
        return m

    @classmethod
    def from_mask(cls, mask) -> "MaskPlan":
        mask = np.asarray(mask, dtype=bool)
        return cls(np.flatnonzero(~mask), np.flatnonzero(mask))


@dataclass(frozen=True)
class CapacityReport:
    data_size: int           # values per patch in data space
    representation_size: int  # values per patch token
    ratio: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "ratio", self.representation_size / self.data_size)

    def capacity_bits(self, bits_per_value: int = 32) -> tuple:
        """log2 of the number of distinct patches / tokens at a fixed value precision."""
        return self.data_size * bits_per_value, self.representation_size * bits_per_value


def info_capacity_ratio(config=None, *, embed_dim: Optional[int] = None,
                        patch_numel: Optional[int] = None) -> CapacityReport:
    if config is not None:
        embed_dim, patch_numel = config.embed_dim, config.patch_size
    if embed_dim is None or patch_numel is None:
        raise ValueError("need a config or both embed_dim and patch_numel")
    return CapacityReport(patch_numel, embed_dim)


def sincos_pos_embed(num_positions: int, dim: int) -> torch.Tensor:
    """Fixed 1D sine/cosine table of shape (num_positions, dim)."""
    pos = torch.arange(num_positions, dtype=torch.float64)[:, None]
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = pos * freqs[None]
    table = torch.zeros(num_positions, dim, dtype=torch.float64)
    table[:, 0:2 * half:2] = torch.sin(angles)
    table[:, 1:2 * half:2] = torch.cos(angles)
    return table.float()


def embed_patches(patches: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                  pos_embed: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-patch affine map ``W p_i + b`` plus an optional positional table.

    ``patches`` is (..., num_patches, patch_size) and ``weight`` is
    (embed_dim, patch_size).
    """
    if patches.shape[-1] != weight.shape[1]:
        raise ValueError(f"patch width {patches.shape[-1]} != weight input width {weight.shape[1]}")
    tokens = patches @ weight.T + bias
    if pos_embed is not None:
        tokens = tokens + pos_embed
    return tokens


def primary_region_labels(num_patches: int, primary_fraction: float) -> np.ndarray:
    labels = np.zeros(num_patches, dtype=bool)
    labels[:max(1, int(round(primary_fraction * num_patches)))] = True
    return labels


def _inclusion_probs(weights: np.ndarray, m: int) -> np.ndarray:
    """Inclusion probabilities proportional to ``weights``, capped at 1, summing to ``m``."""
    pi = np.zeros(len(weights))
    fixed = np.zeros(len(weights), dtype=bool)
    while True:
        free = ~fixed
        remaining = m - fixed.sum()
        pi[free] = remaining * weights[free] / weights[free].sum()
        pi[fixed] = 1.0
        over = free & (pi > 1.0)
        if not over.any():
            return pi
        fixed |= over


def make_mask_plan(num_patches: int, mask_ratio: float, strategy: str = "random",
                   region_labels=None, rng: Optional[np.random.Generator] = None) -> MaskPlan:
    """Partition patches into visible and masked sets with exactly ``floor(ratio * n)`` masked.

    ``focus`` masks patches flagged in ``region_labels`` with twice the
    marginal probability of the others. It uses systematic sampling over a
    random ordering so both the count and the marginals are exact.
    """
    if num_patches < 1:
        raise ValueError("num_patches must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    m = floor_count(mask_ratio, num_patches)
    if strategy == "random":
        masked = rng.permutation(num_patches)[:m]
    elif strategy == "focus":
        if region_labels is None:
            raise ValueError("focus masking needs region_labels")
        labels = np.asarray(region_labels, dtype=bool)
        if labels.shape != (num_patches,):
            raise ValueError("region_labels must have one entry per patch")
        pi = _inclusion_probs(np.where(labels, 2.0, 1.0), m)
        order = rng.permutation(num_patches)
        edges = np.concatenate([[0.0], np.cumsum(pi[order])])
        points = rng.uniform() + np.arange(m)
        # each point lands in exactly one interval; intervals are at most 1 wide
        slots = np.searchsorted(edges, points, side="right") - 1
        masked = order[np.clip(slots, 0, num_patches - 1)]
        if len(np.unique(masked)) != m:  # float edge case at an interval boundary
            masked = np.unique(masked)
            rest = np.setdiff1d(order, masked, assume_unique=True)
            masked = np.concatenate([masked, rest[:m - len(masked)]])
    else:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    masked = np.sort(masked)
    visible = np.setdiff1d(np.arange(num_patches), masked)
    return MaskPlan(visible, masked)


# ---------------------------------------------------------------------------
# transformer parts

class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attn: Optional[torch.Tensor] = None
        self.keep_attn = False

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 1.0):
        super().__init__()
        hidden = max(1, int(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations in {where}")
    return x


def _index_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))


def _as_index(plans, attr: str, batch: int) -> torch.Tensor:
    if isinstance(plans, MaskPlan):
        plans = [plans] * batch
    return torch.as_tensor(np.stack([getattr(p, attr) for p in plans]), dtype=torch.long)


class FmriEncoder(nn.Module):
    """Patch embedder + transformer encoder. No class token: every patch keeps its token."""

    def __init__(self, num_voxels: int, config: MbmConfig):
        super().__init__()
        if num_voxels % config.patch_size:
            raise ValueError(f"{num_voxels} voxels is not a multiple of patch_size {config.patch_size}")
        self.config = config
        self.num_voxels = num_voxels
        self.num_patches = num_voxels // config.patch_size
        self.patch_embed = nn.Conv1d(1, config.embed_dim, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        self.register_buffer("pos_embed", sincos_pos_embed(self.num_patches, config.embed_dim),
                             persistent=False)
        self.blocks = nn.ModuleList(Block(config.embed_dim, config.encoder_heads, config.mlp_ratio)
                                    for _ in range(config.encoder_depth))
        self.norm = nn.LayerNorm(config.embed_dim)

    def patchify(self, voxels: torch.Tensor) -> torch.Tensor:
        return voxels.reshape(voxels.shape[0], self.num_patches, self.config.patch_size)

    def tokens(self, voxels: torch.Tensor) -> torch.Tensor:
        """(B, V) voxels -> (B, N, D) patch tokens with positions added."""
        return self.patch_embed(voxels[:, None, :]).transpose(1, 2) + self.pos_embed

    def run_blocks(self, x: torch.Tensor) -> torch.Tensor:
        for i, blk in enumerate(self.blocks):
            x = _check_finite(blk(x), f"encoder block {i}")
        return self.norm(x)

    def forward(self, voxels: torch.Tensor, plans=None) -> torch.Tensor:
        x = self.tokens(voxels)
        if plans is not None:
            x = _index_rows(x, _as_index(plans, "visible_idx", x.shape[0]))
        return self.run_blocks(x)


class MbmDecoder(nn.Module):
    def __init__(self, num_patches: int, config: MbmConfig):
        super().__init__()
        d = config.decoder_embed_dim
        self.num_patches = num_patches
        self.embed = nn.Linear(config.embed_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_buffer("pos_embed", sincos_pos_embed(num_patches, d), persistent=False)
        self.blocks = nn.ModuleList(Block(d, config.decoder_heads, config.mlp_ratio)
                                    for _ in range(config.decoder_depth))
        self.norm = nn.LayerNorm(d)
        self.pred = nn.Linear(d, config.patch_size)

    def forward(self, latents: torch.Tensor, plans) -> torch.Tensor:
        b = latents.shape[0]
        vis = _as_index(plans, "visible_idx", b)
        x = self.mask_token.expand(b, self.num_patches, -1).clone()
        if vis.shape[1]:
            x = x.scatter(1, vis[..., None].expand(-1, -1, x.shape[-1]), self.embed(latents))
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


class MaskedBrainModel(nn.Module):
    def __init__(self, num_voxels: int, config: MbmConfig = MbmConfig()):
        super().__init__()
        self.config = config
        self.encoder = FmriEncoder(num_voxels, config)
        self.decoder = MbmDecoder(self.encoder.num_patches, config)
        self.apply(_init_weights)
        nn.init.normal_(self.decoder.mask_token, std=0.02)

    @property
    def num_patches(self) -> int:
        return self.encoder.num_patches

    def forward(self, voxels: torch.Tensor, plans):
        """Return (predicted patches, target patches, boolean mask)."""
        latents = self.encoder(voxels, plans)
        pred = self.decoder(latents, plans)
        target = self.encoder.patchify(voxels)
        if isinstance(plans, MaskPlan):
            plans = [plans] * voxels.shape[0]
        mask = torch.as_tensor(np.stack([p.mask() for p in plans]))
        return pred, target, mask

    def loss(self, voxels: torch.Tensor, plans) -> torch.Tensor:
        pred, target, mask = self(voxels, plans)
        if self.config.loss_on_all_patches:
            mask = torch.ones_like(mask)
        return mbm_loss(pred, target, mask)

    def reconstruct(self, voxels: torch.Tensor, plans) -> torch.Tensor:
        """Voxel vector with masked patches replaced by the decoder's prediction."""
        pred, target, mask = self(voxels, plans)
        out = torch.where(mask[..., None], pred, target)
        return out.reshape(voxels.shape)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv1d):
        nn.init.xavier_uniform_(m.weight.view(m.weight.shape[0], -1))
        nn.init.zeros_(m.bias)


def encode_visible(tokens: torch.Tensor, plan: MaskPlan, encoder: FmriEncoder) -> torch.Tensor:
    """Run the encoder blocks on the visible rows of already-embedded ``tokens``."""
    if tokens.dim() == 2:
        return encode_visible(tokens[None], plan, encoder)[0]
    if plan.num_patches != tokens.shape[1]:
        raise ValueError(f"plan covers {plan.num_patches} patches, tokens have {tokens.shape[1]}")
    return encoder.run_blocks(_index_rows(tokens, _as_index(plan, "visible_idx", tokens.shape[0])))


def decode_with_mask_tokens(latents: torch.Tensor, plan: MaskPlan, decoder: MbmDecoder) -> torch.Tensor:
    if latents.dim() == 2:
        return decode_with_mask_tokens(latents[None], plan, decoder)[0]
    if latents.shape[1] != len(plan.visible_idx):
        raise ValueError(f"{latents.shape[1]} latents for {len(plan.visible_idx)} visible patches")
    return decoder(latents, plan)


def mbm_loss(pred, target, plan_or_mask) -> torch.Tensor:
    """Mean squared error over the masked patches only."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = plan_or_mask.mask() if isinstance(plan_or_mask, MaskPlan) else plan_or_mask
    mask = torch.as_tensor(mask, dtype=torch.bool)
    mask = mask.expand(pred.shape[:-1]) if mask.dim() < pred.dim() - 1 else mask
    if not mask.any():
        raise ValueError("no masked patches; masked reconstruction loss is undefined")
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    return per_patch[mask].mean()


def recovery_correlation(original, recovered) -> float:
    """Pearson correlation between two equal-length vectors."""
    a = np.asarray(original, dtype=np.float64).ravel()
    b = np.asarray(recovered, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors must have equal lengths")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise ValueError("correlation undefined for a constant vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
