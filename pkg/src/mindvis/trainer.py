"""Training loops for both stages, the optimizer schedule, and checkpoints.

Every epoch draws its randomness from a generator derived from
``(seed, epoch)``, so stopping after any epoch and resuming from a checkpoint
reproduces the uninterrupted run exactly.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .codec import Codec, images_to_tensor
from .conditioning import (ConditionalDenoiser, ConditionProjector, LabelConditioner, ToyUNet,
                           UNetConfig)
from .data import random_crop_image, random_sparsify
from .diffusion import NoiseSchedule, cond_loss, simple_loss
from .mbm import MaskedBrainModel, MbmConfig, make_mask_plan, primary_region_labels

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerConfig", "FreezePolicy", "Checkpoint", "CheckpointError", "CheckpointVersionError",
    "CheckpointMismatchError", "TrainingDivergedError", "FreezeViolationError",
    "lr_at_step", "clip_grad_norm", "config_hash", "epoch_rng", "save_checkpoint",
    "load_checkpoint", "module_checkpoint", "load_module_state", "StageATrainer",
    "DenoiserPretrainer", "StageBTrainer", "build_conditional_denoiser", "pretrain_stage_a",
    "finetune_stage_b",
    "write_loss_csv",
]


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class FreezeViolationError(AssertionError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 20
    max_epochs: int = 200
    batch_size: int = 32
    grad_clip_norm: float = 0.8

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if not 0 <= self.warmup_epochs <= self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs <= max_epochs")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    @classmethod
    def pretraining_full_scale(cls) -> "OptimizerConfig":
        return cls(peak_lr=2.5e-4, weight_decay=0.05, warmup_epochs=40, max_epochs=500,
                   batch_size=500, grad_clip_norm=0.8)

    @classmethod
    def finetuning_full_scale(cls) -> "OptimizerConfig":
        return cls(peak_lr=5.3e-5, weight_decay=0.0, warmup_epochs=0, max_epochs=500,
                   batch_size=5, grad_clip_norm=0.8)


def lr_at_step(step: int, steps_per_epoch: int, cfg: OptimizerConfig) -> float:
    """Linear warm-up reaching ``peak_lr`` on the last warm-up step, then cosine to 0."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.max_epochs * steps_per_epoch
    if step < warm:
        return cfg.peak_lr * (step + 1) / warm
    start = warm - 1 if warm else 0
    progress = min(1.0, (step - start) / max(1, total - start))
    return 0.5 * cfg.peak_lr * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float(torch.sum(g.double() ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def config_hash(config) -> str:
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    elif hasattr(config, "__dataclass_fields__"):
        config = asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def epoch_rng(seed: int, epoch: int, stream: int = 0):
    """numpy and torch generators for one epoch, derived from (seed, stream, epoch)."""
    ss = np.random.SeedSequence([seed, stream, epoch])
    np_rng = np.random.default_rng(ss)
    torch_gen = torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))
    return np_rng, torch_gen


# ---------------------------------------------------------------------------
# checkpoints
#
#   "MVCK" u16 version
#   u32 metadata_len, metadata (utf-8 JSON)
#   u32 n_tensors, then per tensor:
#       u16 name_len, name, u8 ndim, u32[ndim] dims, f32[prod(dims)] little-endian

_CK_MAGIC = b"MVCK"
_CK_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    metadata: dict = field(default_factory=dict)
    version: int = _CK_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.version == other.version and self.metadata == other.metadata
                and self.tensors.keys() == other.tensors.keys()
                and all(self.tensors[k].dtype == other.tensors[k].dtype
                        and np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))

    def check_config(self, expected_hash: str) -> None:
        got = self.metadata.get("config_hash")
        if got != expected_hash:
            raise CheckpointMismatchError(f"checkpoint config hash {got} != current {expected_hash}")

    def subset(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode()
    buf = bytearray(_CK_MAGIC + struct.pack("<H", ckpt.version))
    buf += struct.pack("<I", len(meta)) + meta
    buf += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("checkpoint file truncated")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != _CK_MAGIC:
        raise CheckpointError("bad magic bytes; not an MVCK checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != _CK_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {_CK_VERSION})")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(data):
        raise CheckpointError("trailing bytes after the tensor table")
    return Checkpoint(tensors, metadata, version)


def module_checkpoint(module: nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32).copy()
            for k, v in module.state_dict().items()}


def load_module_state(module: nn.Module, tensors: dict, strict: bool = True) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if strict and (missing or extra):
        raise CheckpointMismatchError(f"tensor names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in tensors.items():
        if k in own and tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointMismatchError(f"{k}: shape {tuple(v.shape)} != {tuple(own[k].shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v)).to(own[k].dtype)
                            for k, v in tensors.items() if k in own}, strict=strict)


def _optimizer_tensors(opt: torch.optim.Optimizer, names: dict) -> dict:
    out = {}
    for p, state in opt.state.items():
        name = names[p]
        for key, value in state.items():
            out[f"optim.{name}.{key}"] = np.asarray(value.detach().cpu().numpy(), dtype=np.float32).copy()
    return out


def _load_optimizer_tensors(opt: torch.optim.Optimizer, params: dict, tensors: dict) -> None:
    for name, p in params.items():
        keys = [k for k in tensors if k.startswith(f"optim.{name}.")]
        if keys:
            opt.state[p] = {k.rsplit(".", 1)[1]: torch.from_numpy(np.array(tensors[k])) for k in keys}


def write_loss_csv(history: list, path, stage: str) -> None:
    new = not Path(path).exists()
    with open(path, "a") as fh:
        if new:
            fh.write("stage,epoch,loss\n")
        for i, loss in enumerate(history, start=1):
            fh.write(f"{stage},{i},{loss!r}\n")


# ---------------------------------------------------------------------------
# shared loop machinery

class _Trainer:
    stage = "base"
    stream = 0

    def __init__(self, opt_config: OptimizerConfig, seed: int):
        self.opt_config = opt_config
        self.seed = seed
        self.epoch = 0
        self.history: list = []
        self.optimizer: Optional[torch.optim.Optimizer] = None

    # subclasses provide these
    def trainable(self) -> dict:
        raise NotImplementedError

    def n_items(self) -> int:
        raise NotImplementedError

    def batch_loss(self, idx: np.ndarray, np_rng, torch_gen) -> torch.Tensor:
        raise NotImplementedError

    def _make_optimizer(self):
        params = list(self.trainable().values())
        self.optimizer = torch.optim.AdamW(params, lr=self.opt_config.peak_lr,
                                           weight_decay=self.opt_config.weight_decay)

    def steps_per_epoch(self) -> int:
        return -(-self.n_items() // self.opt_config.batch_size)

    def run(self, until_epoch: Optional[int] = None, callback: Optional[Callable] = None) -> list:
        """Train up to ``until_epoch`` (default: max_epochs); returns per-epoch mean losses."""
        until = self.opt_config.max_epochs if until_epoch is None else until_epoch
        if self.optimizer is None:
            self._make_optimizer()
        params = list(self.trainable().values())
        spe = self.steps_per_epoch()
        bs = self.opt_config.batch_size
        while self.epoch < until:
            np_rng, torch_gen = epoch_rng(self.seed, self.epoch, self.stream)
            order = np_rng.permutation(self.n_items())
            total, count = 0.0, 0
            for s in range(spe):
                idx = order[s * bs:(s + 1) * bs]
                lr = lr_at_step(self.epoch * spe + s, spe, self.opt_config)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                loss = self.batch_loss(idx, np_rng, torch_gen)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"{self.stage}: loss became {loss.item()} at epoch {self.epoch + 1}, step {s} "
                        f"(lr {lr:.3g}); last epoch losses {self.history[-3:]}")
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                clip_grad_norm(params, self.opt_config.grad_clip_norm)
                self.optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)
            self.epoch += 1
            self.history.append(total / count)
            if callback is not None:
                callback(self.epoch, self.history[-1])
        return self.history

    def _state_metadata(self, extra: dict) -> dict:
        meta = {"stage": self.stage, "epoch": self.epoch, "seed": self.seed,
                "history": self.history, "optimizer": asdict(self.opt_config),
                "rng": {"kind": "derived", "seed": self.seed, "stream": self.stream,
                        "next_epoch": self.epoch}}
        meta.update(extra)
        return meta

    def _restore_common(self, ckpt: Checkpoint) -> None:
        meta = ckpt.metadata
        if meta.get("stage") != self.stage:
            raise CheckpointMismatchError(f"checkpoint is for stage {meta.get('stage')!r}, not {self.stage!r}")
        self.epoch = int(meta["epoch"])
        self.history = list(meta["history"])
        self._make_optimizer()
        _load_optimizer_tensors(self.optimizer, self.trainable(), ckpt.tensors)


# ---------------------------------------------------------------------------
# stage A

class StageATrainer(_Trainer):
    """Masked-reconstruction pretraining with random sparsification."""
    stage = "stage_a"
    stream = 1

    def __init__(self, voxels: np.ndarray, mbm_config: MbmConfig, opt_config: OptimizerConfig,
                 seed: int = 0, sparsify_fraction: float = 0.2):
        super().__init__(opt_config, seed)
        voxels = np.asarray(voxels, dtype=np.float32)
        if voxels.ndim != 2 or len(voxels) == 0:
            raise ValueError("need a non-empty (n_samples, n_voxels) array")
        self.voxels = voxels
        self.mbm_config = mbm_config
        self.sparsify_fraction = sparsify_fraction
        torch.manual_seed(seed)
        self.model = MaskedBrainModel(voxels.shape[1], mbm_config)
        self.region_labels = primary_region_labels(self.model.num_patches, mbm_config.primary_fraction)

    def trainable(self) -> dict:
        return dict(self.model.named_parameters())

    def n_items(self) -> int:
        return len(self.voxels)

    def batch_loss(self, idx, np_rng, torch_gen):
        cfg = self.mbm_config
        batch = np.stack([random_sparsify(self.voxels[i], self.sparsify_fraction, np_rng) for i in idx])
        plans = [make_mask_plan(self.model.num_patches, cfg.mask_ratio, cfg.mask_strategy,
                                self.region_labels, np_rng) for _ in idx]
        return self.model.loss(torch.from_numpy(batch), plans)

    def config_hash(self) -> str:
        return config_hash({"mbm": self.mbm_config.to_dict(), "num_voxels": int(self.voxels.shape[1])})

    def checkpoint(self) -> Checkpoint:
        tensors = module_checkpoint(self.model, "model.")
        tensors.update(_optimizer_tensors(self.optimizer, _names(self.trainable()))
                       if self.optimizer else {})
        return Checkpoint(tensors, self._state_metadata({
            "config_hash": self.config_hash(), "mbm": self.mbm_config.to_dict(),
            "num_voxels": int(self.voxels.shape[1]), "sparsify_fraction": self.sparsify_fraction}))

    def restore(self, ckpt: Checkpoint) -> "StageATrainer":
        ckpt.check_config(self.config_hash())
        load_module_state(self.model, ckpt.subset("model."))
        self._restore_common(ckpt)
        return self


def _names(params: dict) -> dict:
    return {p: n for n, p in params.items()}


def pretrain_stage_a(voxels, mbm_config: MbmConfig, opt_config: OptimizerConfig, seed: int = 0,
                     sparsify_fraction: float = 0.2):
    """Run Stage A to completion; returns (trained model, checkpoint)."""
    trainer = StageATrainer(voxels, mbm_config, opt_config, seed, sparsify_fraction)
    trainer.run()
    return trainer.model, trainer.checkpoint()


# ---------------------------------------------------------------------------
# denoiser pretraining (stand-in for a pretrained latent diffusion model)

class DenoiserPretrainer(_Trainer):
    """Eps-prediction training of the whole UNet on image latents.

    With ``labels`` the UNet is trained label-to-image: learned label
    embeddings enter through the cross-attention sites. Without labels the
    cross-attention sites are bypassed and training is unconditional.
    """
    stage = "denoiser"
    stream = 2

    def __init__(self, images: np.ndarray, unet_config: UNetConfig, codec: Codec,
                 schedule: NoiseSchedule, opt_config: OptimizerConfig, seed: int = 0,
                 labels: Optional[np.ndarray] = None, num_labels: Optional[int] = None,
                 crop_ratio: float = 0.0):
        super().__init__(opt_config, seed)
        self.images = np.asarray(images, dtype=np.float32)
        self.codec = codec
        self.schedule = schedule
        self.crop_ratio = crop_ratio
        torch.manual_seed(seed)
        self.unet = ToyUNet(unet_config)
        self.labels = None if labels is None else torch.as_tensor(np.asarray(labels), dtype=torch.long)
        self.conditioner = None
        if self.labels is not None:
            n = num_labels if num_labels is not None else int(self.labels.max()) + 1
            self.conditioner = LabelConditioner(n, unet_config.M, unet_config.context_dim,
                                                unet_config.time_dim)

    def trainable(self) -> dict:
        if self.conditioner is None:
            # cross-attention sites are unused without a condition and stay at init
            return {n: p for n, p in self.unet.named_parameters() if not n.startswith("cross_attn")}
        params = {"unet." + n: p for n, p in self.unet.named_parameters()}
        params.update({"labels." + n: p for n, p in self.conditioner.named_parameters()})
        return params

    def n_items(self) -> int:
        return len(self.images)

    def batch_loss(self, idx, np_rng, torch_gen):
        imgs = np.stack([random_crop_image(self.images[i], self.crop_ratio, np_rng) for i in idx])
        with torch.no_grad():
            x0 = self.codec.encode(images_to_tensor(imgs))
        t = torch.randint(1, self.schedule.T + 1, (len(idx),), generator=torch_gen)
        eps = torch.randn(x0.shape, generator=torch_gen)
        if self.conditioner is None:
            return simple_loss(self.unet, x0, t, eps, self.schedule)
        cond = self.conditioner(self.labels[torch.as_tensor(idx)])
        return cond_loss(self.unet, x0, t, eps, cond, self.schedule)

    def checkpoint(self) -> Checkpoint:
        tensors = module_checkpoint(self.unet, "unet.")
        if self.conditioner is not None:
            tensors.update(module_checkpoint(self.conditioner, "labels."))
        return Checkpoint(tensors, self._state_metadata({
            "unet": self.unet.config.to_dict(), "config_hash": config_hash(self.unet.config),
            "label_conditioned": self.conditioner is not None}))


# ---------------------------------------------------------------------------
# stage B

@dataclass(frozen=True)
class FreezePolicy:
    """Trainable: fMRI encoder, condition projector, UNet cross-attention. Everything else frozen."""
    trainable_prefixes: tuple = ("encoder.", "projector.", "unet.cross_attn_")

    def classify(self, model: nn.Module) -> dict:
        return {name: ("trainable" if name.startswith(self.trainable_prefixes) else "frozen")
                for name, _ in model.named_parameters()}

    def report(self, model: nn.Module) -> str:
        return "\n".join(f"{kind:9s} {name}" for name, kind in self.classify(model).items())


class StageBTrainer(_Trainer):
    """Joint finetuning of encoder, projectors and cross-attention on the conditional loss."""
    stage = "stage_b"
    stream = 3

    def __init__(self, model: ConditionalDenoiser, codec: Codec, voxels: np.ndarray, images: np.ndarray,
                 schedule: NoiseSchedule, opt_config: OptimizerConfig, seed: int = 0,
                 crop_ratio: float = 0.2, policy: FreezePolicy = FreezePolicy()):
        super().__init__(opt_config, seed)
        if len(voxels) != len(images) or len(voxels) == 0:
            raise ValueError("need equally many (non-zero) voxel vectors and images")
        self.model = model
        self.codec = codec
        self.voxels = torch.from_numpy(np.asarray(voxels, dtype=np.float32))
        self.images = np.asarray(images, dtype=np.float32)
        self.schedule = schedule
        self.crop_ratio = crop_ratio
        self.policy = policy
        kinds = policy.classify(model)
        for name, p in model.named_parameters():
            p.requires_grad_(kinds[name] == "trainable")
        for p in codec.parameters():
            p.requires_grad_(False)
        self._frozen_snapshot = {n: p.detach().clone() for n, p in model.named_parameters()
                                 if kinds[n] == "frozen"}

    def trainable(self) -> dict:
        kinds = self.policy.classify(self.model)
        return {n: p for n, p in self.model.named_parameters() if kinds[n] == "trainable"}

    def n_items(self) -> int:
        return len(self.images)

    def batch_loss(self, idx, np_rng, torch_gen):
        imgs = np.stack([random_crop_image(self.images[i], self.crop_ratio, np_rng) for i in idx])
        with torch.no_grad():
            x0 = self.codec.encode(images_to_tensor(imgs))
        t = torch.randint(1, self.schedule.T + 1, (len(idx),), generator=torch_gen)
        eps = torch.randn(x0.shape, generator=torch_gen)
        cond = self.model.condition(self.voxels[torch.as_tensor(idx)])
        return cond_loss(self.model.unet, x0, t, eps, cond, self.schedule)

    def verify_frozen(self) -> None:
        for name, p in self.model.named_parameters():
            if name in self._frozen_snapshot and not torch.equal(p.detach(), self._frozen_snapshot[name]):
                raise FreezeViolationError(f"frozen parameter {name} changed during finetuning")
        if any(p.requires_grad for p in self.codec.parameters()):
            raise FreezeViolationError("codec parameters must stay frozen")

    def run(self, until_epoch=None, callback=None):
        history = super().run(until_epoch, callback)
        self.verify_frozen()
        return history

    def config_hash(self) -> str:
        return config_hash({"unet": self.model.unet.config.to_dict(),
                            "mbm": self.model.encoder.config.to_dict(),
                            "num_voxels": int(self.voxels.shape[1]), "crop_ratio": self.crop_ratio})

    def checkpoint(self) -> Checkpoint:
        tensors = module_checkpoint(self.model, "model.")
        tensors.update(module_checkpoint(self.codec, "codec."))
        if self.optimizer is not None:
            tensors.update(_optimizer_tensors(self.optimizer, _names(self.trainable())))
        return Checkpoint(tensors, self._state_metadata({
            "config_hash": self.config_hash(), "unet": self.model.unet.config.to_dict(),
            "mbm": self.model.encoder.config.to_dict(), "num_voxels": int(self.voxels.shape[1]),
            "codec": self.codec.config.kind, "crop_ratio": self.crop_ratio}))

    def restore(self, ckpt: Checkpoint) -> "StageBTrainer":
        ckpt.check_config(self.config_hash())
        load_module_state(self.model, ckpt.subset("model."))
        self._frozen_snapshot = {n: p.detach().clone() for n, p in self.model.named_parameters()
                                 if n in self._frozen_snapshot}
        self._restore_common(ckpt)
        return self


def build_conditional_denoiser(num_voxels: int, mbm_config: MbmConfig, unet: ToyUNet,
                               encoder_state: Optional[dict] = None, seed: int = 0,
                               reset_cross_attention: bool = False) -> ConditionalDenoiser:
    """Assemble encoder + projector around a copy of a pretrained UNet.

    ``encoder_state`` holds Stage A encoder tensors; ``None`` keeps a random
    initialisation (the no-pretraining ablation). The pretrained
    cross-attention heads are kept unless ``reset_cross_attention``.
    """
    unet = copy.deepcopy(unet)
    torch.manual_seed(seed)
    mbm = MaskedBrainModel(num_voxels, mbm_config)
    encoder = mbm.encoder
    if encoder_state is not None:
        load_module_state(encoder, encoder_state)
    cfg = unet.config
    projector = ConditionProjector(encoder.num_patches, mbm_config.embed_dim, cfg.M,
                                   cfg.context_dim, cfg.time_dim)
    if reset_cross_attention:
        for site in unet.cross_attention_sites():
            # output projection back at zero
            fresh = type(site)(site.to_q.in_features, cfg.context_dim, site.heads, site.head_dim)
            site.load_state_dict(fresh.state_dict())
    return ConditionalDenoiser(encoder, projector, unet)


def finetune_stage_b(encoder_ckpt: Optional[Checkpoint], unet: ToyUNet, codec: Codec, voxels, images,
                     schedule: NoiseSchedule, opt_config: OptimizerConfig, mbm_config: MbmConfig,
                     seed: int = 0, crop_ratio: float = 0.2):
    """Run Stage B to completion; returns (trained ConditionalDenoiser, checkpoint)."""
    state = encoder_ckpt.subset("model.encoder.") if encoder_ckpt is not None else None
    model = build_conditional_denoiser(np.asarray(voxels).shape[1], mbm_config, unet, state, seed)
    trainer = StageBTrainer(model, codec, voxels, images, schedule, opt_config, seed, crop_ratio)
    trainer.run()
    return model, trainer.checkpoint()
