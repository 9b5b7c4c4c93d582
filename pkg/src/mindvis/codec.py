"""Image <-> latent codecs the diffusion model operates in.

Images are H x W x 3 arrays in [0, 1]; latents are channel-first tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "CodecConfig", "ImageLatent", "CodecNotTrainedError", "Codec", "IdentityCodec",
    "DownsampleCodec", "TinyAutoencoderCodec", "make_codec", "encode_image", "decode_latent",
    "images_to_tensor", "tensor_to_images",
]


class CodecNotTrainedError(RuntimeError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    kind: str = "identity"
    image_size: int = 32
    latent_channels: int = 3
    # latents are (raw - shift) * scale so the diffusion sees roughly unit variance
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "downsample", "tiny-autoencoder"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.kind != "tiny-autoencoder" and self.latent_channels != 3:
            raise ValueError(f"{self.kind} codec keeps the 3 image channels")
        if self.kind != "identity" and self.image_size % 2:
            raise ValueError("downsampling codecs need an even image size")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")

    @property
    def latent_shape(self) -> tuple:
        """(channels, height, width)"""
        s = self.image_size if self.kind == "identity" else self.image_size // 2
        return (self.latent_channels, s, s)


@dataclass(frozen=True)
class ImageLatent:
    values: np.ndarray  # h x w x c
    codec_id: str


def images_to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) array -> (N, 3, H, W) float32 tensor."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.dim() == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous()


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).contiguous().numpy()


class Codec(nn.Module):
    codec_id = "codec"

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) images -> (N, c, h, w) latents."""
        z = self._encode(x)
        if self.config.shift == 0 and self.config.scale == 1:
            return z
        return (z - self.config.shift) * self.config.scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if self.config.shift != 0 or self.config.scale != 1:
            z = z / self.config.scale + self.config.shift
        return self._decode(z)

    def _encode(self, x):
        raise NotImplementedError

    def _decode(self, z):
        raise NotImplementedError


class IdentityCodec(Codec):
    codec_id = "identity"

    def _encode(self, x):
        return x

    def _decode(self, z):
        return z


class DownsampleCodec(Codec):
    """2x average-pool down, nearest-neighbour up."""
    codec_id = "downsample"

    def _encode(self, x):
        return F.avg_pool2d(x, 2)

    def _decode(self, z):
        return F.interpolate(z, scale_factor=2, mode="nearest")


class TinyAutoencoderCodec(Codec):
    codec_id = "tiny-autoencoder"

    def __init__(self, config: CodecConfig, width: int = 32):
        super().__init__(config)
        c = config.latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, c, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )
        self.register_buffer("trained", torch.zeros((), dtype=torch.float32))

    def _encode(self, x):
        return self.enc(x)

    def _decode(self, z):
        if not self.trained.item():
            raise CodecNotTrainedError("tiny autoencoder codec has not been trained")
        return self.dec(z)

    def fit(self, images, epochs: int = 300, lr: float = 3e-3, batch_size: int = 32,
            seed: int = 0) -> list:
        """Train on (N, H, W, 3) images; returns the per-epoch reconstruction MSE."""
        x = images_to_tensor(images)
        g = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        history = []
        for _ in range(epochs):
            perm = torch.randperm(len(x), generator=g)
            total = 0.0
            for i in range(0, len(x), batch_size):
                xb = x[perm[i:i + batch_size]]
                loss = F.mse_loss(self.dec(self.enc(xb)), xb)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(xb)
            history.append(total / len(x))
        self.trained.fill_(1.0)
        return history


def make_codec(config: CodecConfig) -> Codec:
    return {"identity": IdentityCodec, "downsample": DownsampleCodec,
            "tiny-autoencoder": TinyAutoencoderCodec}[config.kind](config)


def encode_image(image, codec: Codec) -> ImageLatent:
    with torch.no_grad():
        z = codec.encode(images_to_tensor(image))
    if not torch.isfinite(z).all():
        raise FloatingPointError("codec produced non-finite latent")
    return ImageLatent(tensor_to_images(z)[0], codec.codec_id)


def decode_latent(latent: ImageLatent, codec: Codec) -> np.ndarray:
    if latent.codec_id != codec.codec_id:
        raise ValueError(f"latent from codec {latent.codec_id!r} given to {codec.codec_id!r}")
    expected = codec.config.latent_shape
    if latent.values.shape != (expected[1], expected[2], expected[0]):
        raise ValueError(f"latent shape {latent.values.shape} does not match codec {expected}")
    with torch.no_grad():
        x = codec.decode(images_to_tensor(latent.values))
    return tensor_to_images(x)[0]
