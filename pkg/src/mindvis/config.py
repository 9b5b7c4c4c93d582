"""JSON run configuration with strict schema checking.

A run config has six sections (data, mbm, diffusion, conditioning, trainer,
eval) plus a global seed and an output directory. Unknown keys are rejected;
omitted keys take the desk defaults, and the fully resolved document is what
gets hashed and written into every manifest.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional

from .codec import CodecConfig
from .conditioning import UNetConfig
from .data import SynthSpec
from .diffusion import DEFAULT_PLMS_STEPS
from .mbm import MbmConfig
from .trainer import OptimizerConfig

__all__ = [
    "ConfigError", "DataSection", "DiffusionSection", "DenoiserPretrainSection", "TrainerSection",
    "EvalSection", "RunConfig", "load_config", "ABLATION_AXES",
]


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 1)."""


def _from_dict(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        nested = _NESTED.get((cls, name))
        if nested:
            kwargs[name] = _from_dict(nested, value, f"{where}.{name}")
            continue
        _check_type(fields[name].default, value, f"{where}.{name}")
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_type(default, value, where: str) -> None:
    # the default's type is the schema; ints are accepted where floats are expected
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
    else:
        ok = value is None or isinstance(value, str)
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {json.dumps(value)}")


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = _to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


@dataclass(frozen=True)
class DataSection:
    class_count: int = 10
    samples_per_class: int = 20
    voxel_count: int = 256
    image_size: int = 32
    snr: float = 0.5
    test_fraction: float = 0.2
    subject_count: int = 1
    length_jitter: int = 0
    unpaired_per_class: int = 40
    pad_strategy: str = "wrap"
    sparsify_fraction: float = 0.2
    # dataset content is fixed by its own seed so every run seed sees the same task
    seed: int = 0

    def __post_init__(self):
        if self.pad_strategy not in ("wrap", "constant", "cut"):
            raise ValueError(f"pad_strategy must be wrap, constant or cut, got {self.pad_strategy!r}")
        if not 0 <= self.sparsify_fraction < 1:
            raise ValueError("sparsify_fraction must be in [0, 1)")
        self.synth_spec()

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.class_count, self.samples_per_class, self.voxel_count, self.image_size,
                         self.snr, self.seed, self.test_fraction, self.subject_count,
                         self.length_jitter, self.unpaired_per_class)


@dataclass(frozen=True)
class DenoiserPretrainSection:
    """Label-to-image pretraining of the UNet on renders of every renderable class."""
    label_conditioned: bool = True
    corpus_classes: int = 48
    corpus_repeats: int = 4
    crop_ratio: float = 0.2
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig(peak_lr=2e-3, weight_decay=0.0, warmup_epochs=5,
                                                 max_epochs=400, batch_size=32, grad_clip_norm=0.8)

    def __post_init__(self):
        if self.corpus_classes < 1 or self.corpus_repeats < 1:
            raise ValueError("corpus_classes and corpus_repeats must be >= 1")


@dataclass(frozen=True)
class DiffusionSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"
    sampler: str = "plms"
    steps: int = 50
    codec: CodecConfig = CodecConfig(kind="downsample", shift=0.485, scale=5.26)
    pretrain: DenoiserPretrainSection = DenoiserPretrainSection()

    def __post_init__(self):
        if self.sampler not in ("ddpm", "plms"):
            raise ValueError(f"sampler must be ddpm or plms, got {self.sampler!r}")
        if not 1 <= self.steps <= self.T:
            raise ValueError(f"steps must be in [1, T={self.T}]")
        if self.schedule not in ("linear", "quadratic"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class TrainerSection:
    use_pretraining: bool = True
    stage_a: OptimizerConfig = OptimizerConfig(peak_lr=1e-3, weight_decay=0.05, warmup_epochs=20,
                                               max_epochs=200, batch_size=32, grad_clip_norm=0.8)
    stage_b: OptimizerConfig = OptimizerConfig(peak_lr=1e-3, weight_decay=0.0, warmup_epochs=10,
                                               max_epochs=200, batch_size=32, grad_clip_norm=0.8)
    crop_ratio: float = 0.2

    def __post_init__(self):
        if not 0 <= self.crop_ratio < 1:
            raise ValueError("crop_ratio must be in [0, 1)")


@dataclass(frozen=True)
class EvalSection:
    n_way: int = 10
    top_k: int = 1
    trials: int = 1000
    samplings: int = 5
    oracle_epochs: int = 60
    oracle_seed: int = 0

    def __post_init__(self):
        if self.n_way < 1 or not 1 <= self.top_k <= self.n_way:
            raise ValueError("need n_way >= 1 and 1 <= top_k <= n_way")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.samplings < 2:
            raise ValueError("samplings must be >= 2 for the consistency statistic")


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = DataSection()
    mbm: MbmConfig = MbmConfig()
    diffusion: DiffusionSection = DiffusionSection()
    conditioning: UNetConfig = UNetConfig()
    trainer: TrainerSection = TrainerSection()
    eval: EvalSection = EvalSection()
    seed: int = 0
    out: Optional[str] = None

    def __post_init__(self):
        if self.eval.n_way > self.data.class_count:
            raise ValueError(f"eval.n_way={self.eval.n_way} exceeds data.class_count={self.data.class_count}")
        if self.conditioning.in_channels != self.diffusion.codec.latent_channels:
            raise ValueError("conditioning.in_channels must equal the codec latent channels")
        if self.diffusion.codec.image_size != self.data.image_size:
            raise ValueError("diffusion.codec.image_size must equal data.image_size")

    @classmethod
    def full_scale(cls) -> "RunConfig":
        """Large-profile hyperparameters; expressible but far beyond desk runtime."""
        base = cls()
        return cls(mbm=MbmConfig.full_scale(), conditioning=UNetConfig.full_scale(),
                   diffusion=replace(base.diffusion, steps=DEFAULT_PLMS_STEPS),
                   trainer=replace(base.trainer, stage_a=OptimizerConfig.pretraining_full_scale(),
                                   stage_b=OptimizerConfig.finetuning_full_scale()))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _from_dict(cls, raw, "config")

    def to_dict(self) -> dict:
        return _to_dict(self)

    def hash(self) -> str:
        """sha256 prefix of the resolved config, output directory excluded."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        """Override dotted keys, e.g. ``replace(**{"conditioning.cond_mode": "c"})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *head, last = key.split(".")
            for part in head:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[part]
            if last not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[last] = value
        return RunConfig.from_dict(d)


_NESTED = {
    (RunConfig, "data"): DataSection,
    (RunConfig, "mbm"): MbmConfig,
    (RunConfig, "diffusion"): DiffusionSection,
    (RunConfig, "conditioning"): UNetConfig,
    (RunConfig, "trainer"): TrainerSection,
    (RunConfig, "eval"): EvalSection,
    (DiffusionSection, "codec"): CodecConfig,
    (DiffusionSection, "pretrain"): DenoiserPretrainSection,
    (DenoiserPretrainSection, "optimizer"): OptimizerConfig,
    (TrainerSection, "stage_a"): OptimizerConfig,
    (TrainerSection, "stage_b"): OptimizerConfig,
}

# ablation axis -> dotted config key
ABLATION_AXES = {
    "embed_dim": "mbm.embed_dim",
    "mask_ratio": "mbm.mask_ratio",
    "patch_size": "mbm.patch_size",
    "encoder_depth": "mbm.encoder_depth",
    "mask_strategy": "mbm.mask_strategy",
    "cond_mode": "conditioning.cond_mode",
    "pad_strategy": "data.pad_strategy",
    "crop_ratio": "trainer.crop_ratio",
    "use_pretraining": "trainer.use_pretraining",
}


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)
