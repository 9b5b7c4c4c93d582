"""Double conditioning of a toy UNet denoiser on fMRI encoder tokens.

The encoder tokens are pooled to ``M`` rows (``tau``) that serve as keys and
values of cross-attention sites inside the UNet; a second projection of
``tau`` (``sigma``) is added to the sinusoidal time embedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ConditionBundle", "UNetConfig", "ConditionProjector", "LabelConditioner", "CrossAttention", "cross_attention",
    "timestep_embedding", "ResBlock", "ToyUNet", "denoise_unet", "ConditionalDenoiser",
]


@dataclass
class ConditionBundle:
    """tau: (B, M, d_tau) cross-attention payload; sigma: (B, d_t) time payload."""
    tau: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.tau.dim() == 2:
            self.tau = self.tau[None]
        if self.sigma.dim() == 1:
            self.sigma = self.sigma[None]
        if self.tau.dim() != 3 or self.tau.shape[1] < 1:
            raise ValueError("tau must be (B, M, d_tau) with M >= 1")
        if self.sigma.dim() != 2 or self.sigma.shape[0] != self.tau.shape[0]:
            raise ValueError("sigma must be (B, d_t) with the same batch as tau")

    @property
    def M(self) -> int:
        return self.tau.shape[1]

    def index(self, idx) -> "ConditionBundle":
        return ConditionBundle(self.tau[idx], self.sigma[idx])

    def repeat(self, n: int) -> "ConditionBundle":
        return ConditionBundle(self.tau.repeat_interleave(n, 0), self.sigma.repeat_interleave(n, 0))


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    channels: tuple = (32, 64)
    time_dim: int = 64
    context_dim: int = 64
    heads: int = 1
    cond_mode: str = "ct"
    M: int = 8
    groups: int = 8

    def __post_init__(self):
        if self.cond_mode not in ("c", "ct"):
            raise ValueError(f"cond_mode must be 'c' or 'ct', got {self.cond_mode!r}")
        if len(self.channels) != 2:
            raise ValueError("the toy UNet has exactly two resolutions")
        if any(c % self.groups or c % self.heads for c in self.channels):
            raise ValueError("channel widths must be divisible by groups and heads")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        object.__setattr__(self, "channels", tuple(self.channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def full_scale(cls) -> "UNetConfig":
        """Condition rows and conditioning width of the large profile (77 x 768)."""
        return cls(context_dim=768, M=77, time_dim=320, channels=(320, 640), heads=8, groups=32)


class ConditionProjector(nn.Module):
    """tau: kernel-1 conv across the token axis (N -> M rows) then linear to d_tau.
    sigma: linear map of the row-mean of tau to d_t."""

    def __init__(self, num_tokens: int, token_dim: int, M: int, context_dim: int, time_dim: int):
        super().__init__()
        if num_tokens < M:
            raise ValueError(f"cannot pool {num_tokens} tokens into M={M} rows")
        self.num_tokens = num_tokens
        self.pool = nn.Conv1d(num_tokens, M, kernel_size=1)
        self.to_tau = nn.Linear(token_dim, context_dim)
        self.to_sigma = nn.Linear(context_dim, time_dim)
        # sigma starts at zero so finetuning begins from the unconditional time embedding
        nn.init.zeros_(self.to_sigma.weight)
        nn.init.zeros_(self.to_sigma.bias)

    def forward(self, tokens: torch.Tensor) -> ConditionBundle:
        if tokens.shape[1] != self.num_tokens:
            raise ValueError(f"expected {self.num_tokens} tokens, got {tokens.shape[1]}")
        tau = self.to_tau(self.pool(tokens))
        sigma = self.to_sigma(tau.mean(dim=1))
        return ConditionBundle(tau, sigma)


class LabelConditioner(nn.Module):
    """Learned class-label embeddings as tau, with a zero sigma.

    Used to pretrain the denoiser label-to-image before the fMRI encoder exists.
    """

    def __init__(self, num_labels: int, M: int, context_dim: int, time_dim: int):
        super().__init__()
        self.M, self.context_dim, self.time_dim = M, context_dim, time_dim
        self.embed = nn.Embedding(num_labels, M * context_dim)
        nn.init.normal_(self.embed.weight, std=1.0)

    def forward(self, labels: torch.Tensor) -> ConditionBundle:
        tau = self.embed(labels).reshape(len(labels), self.M, self.context_dim)
        return ConditionBundle(tau, tau.new_zeros(len(labels), self.time_dim))


class CrossAttention(nn.Module):
    """Q from UNet features, K and V from tau; zero-initialised output projection."""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 1, head_dim: Optional[int] = None):
        super().__init__()
        head_dim = head_dim or query_dim // heads
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.norm = nn.GroupNorm(1, query_dim)
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)
        self.keep_attn = False
        self.last_attn: Optional[torch.Tensor] = None

    def attention(self, q_tokens: torch.Tensor, tau: torch.Tensor):
        """Return (softmax(QK^T / sqrt(d)), V) with heads split out."""
        b, n, _ = q_tokens.shape
        m = tau.shape[1]
        q = self.to_q(q_tokens).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(tau).reshape(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(tau).reshape(b, m, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        return attn, v

    def forward(self, features: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        b, c, h, w = features.shape
        tokens = self.norm(features).reshape(b, c, h * w).transpose(1, 2)
        attn, v = self.attention(tokens, tau)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, self.heads * self.head_dim)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return features + out


def cross_attention(features: torch.Tensor, tau: torch.Tensor, weights: CrossAttention) -> torch.Tensor:
    return weights(features, tau)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ToyUNet(nn.Module):
    """Two-resolution UNet with one cross-attention site per resolution.

    Cross-attention sites are skipped when no condition is given, which is how
    the unconditional pretraining runs.
    """

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        c0, c1 = config.channels
        td, g = config.time_dim, config.groups
        emb_dim = 2 * td
        self.time_mlp = nn.Sequential(nn.Linear(td, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(config.in_channels, c0, 3, padding=1)
        self.down_res = ResBlock(c0, c0, emb_dim, g)
        self.cross_attn_0 = CrossAttention(c0, config.context_dim, config.heads)
        self.downsample = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(c0, c1, emb_dim, g)
        self.cross_attn_1 = CrossAttention(c1, config.context_dim, config.heads)
        self.mid_res2 = ResBlock(c1, c1, emb_dim, g)
        self.upsample = nn.Conv2d(c1, c0, 3, padding=1)
        self.up_res = ResBlock(2 * c0, c0, emb_dim, g)
        self.norm_out = nn.GroupNorm(g, c0)
        self.conv_out = nn.Conv2d(c0, config.in_channels, 3, padding=1)

    def cross_attention_sites(self):
        return [self.cross_attn_0, self.cross_attn_1]

    def time_embedding(self, t: torch.Tensor, cond: Optional[ConditionBundle]) -> torch.Tensor:
        e = timestep_embedding(t, self.config.time_dim).to(self.time_mlp[0].weight.dtype)
        if cond is not None and self.config.cond_mode == "ct":
            e = e + cond.sigma
        return self.time_mlp(e)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Optional[ConditionBundle] = None):
        emb = self.time_embedding(t, cond)
        h0 = self.down_res(self.conv_in(x), emb)
        if cond is not None:
            h0 = self.cross_attn_0(h0, cond.tau)
        h = self.mid_res1(self.downsample(h0), emb)
        if cond is not None:
            h = self.cross_attn_1(h, cond.tau)
        h = self.mid_res2(h, emb)
        h = self.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up_res(torch.cat([h, h0], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


def denoise_unet(x_t: torch.Tensor, t: torch.Tensor, cond: Optional[ConditionBundle],
                 config: UNetConfig, weights: ToyUNet) -> torch.Tensor:
    if weights.config != config:
        raise ValueError("UNet weights were built for a different config")
    if x_t.shape[1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} latent channels, got {x_t.shape[1]}")
    out = weights(x_t, t, cond)
    if not torch.isfinite(out).all():
        raise FloatingPointError("denoiser produced non-finite output")
    return out


class ConditionalDenoiser(nn.Module):
    """fMRI encoder + condition projector + UNet, trained jointly in the finetuning stage.

    ``encoder`` maps (B, V) voxels to (B, N, D) tokens without masking.
    """

    def __init__(self, encoder: nn.Module, projector: ConditionProjector, unet: ToyUNet):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.unet = unet

    def condition(self, voxels: torch.Tensor) -> ConditionBundle:
        return self.projector(self.encoder(voxels))

    def forward(self, x_t, t, cond):
        return self.unet(x_t, t, cond)
