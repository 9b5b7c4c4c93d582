"""End-to-end desk pipeline: data, Stage A, denoiser pretraining, Stage B, sampling, evaluation.

The pretrained denoiser and the evaluation oracle do not depend on the run
seed; they are cached by content hash when a cache directory is given, so
ablation grids and repeated seeds train them once.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .codec import Codec, make_codec, tensor_to_images
from .conditioning import ConditionalDenoiser, ToyUNet
from .config import RunConfig
from .data import PairedDataset, generate_synthetic_dataset, preprocess_dataset, render_class_image
from .diffusion import NoiseSchedule, ddpm_sample, make_schedule, plms_sample
from .metrics import (MetricReport, RenderClassifier, across_input_agreement, fid,
                      nway_topk_accuracy, pixel_mse, sampling_consistency)
from .trainer import (Checkpoint, DenoiserPretrainer, StageATrainer, StageBTrainer,
                      build_conditional_denoiser, load_checkpoint, load_module_state, module_checkpoint,
                      save_checkpoint)

log = logging.getLogger(__name__)

__all__ = [
    "PipelineResult", "build_dataset", "build_codec", "make_noise_schedule", "pretrain_denoiser", "train_oracle",
    "run_stage_a", "run_stage_b", "sample_images", "evaluate_samples", "run_pipeline",
]


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(cfg: RunConfig) -> PairedDataset:
    raw = generate_synthetic_dataset(cfg.data.synth_spec())
    return preprocess_dataset(raw, cfg.mbm.patch_size, cfg.data.pad_strategy)


def make_noise_schedule(cfg: RunConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end, d.schedule)


def _cached(cache_dir, name: str, key: str, build):
    """Load ``name-key.mvck`` from the cache or build and store it."""
    if cache_dir is None:
        return build()
    path = Path(cache_dir) / f"{name}-{key}.mvck"
    if path.exists():
        return load_checkpoint(path)
    ckpt = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(ckpt, tmp)
    tmp.replace(path)
    return ckpt


def _render_corpus(cfg: RunConfig) -> tuple:
    p = cfg.diffusion.pretrain
    size = cfg.data.image_size
    images = np.stack([render_class_image(c, size) for c in range(p.corpus_classes)] * p.corpus_repeats)
    return images, np.tile(np.arange(p.corpus_classes), p.corpus_repeats)


def build_codec(cfg: RunConfig, cache_dir=None) -> Codec:
    """The configured codec; a tiny autoencoder is first trained on the render corpus."""
    codec = make_codec(cfg.diffusion.codec)
    if cfg.diffusion.codec.kind != "tiny-autoencoder":
        return codec
    key = _digest({"codec": asdict(cfg.diffusion.codec), "pretrain": cfg.to_dict()["diffusion"]["pretrain"]})

    def build() -> Checkpoint:
        images, _ = _render_corpus(cfg)
        codec.fit(images, seed=cfg.diffusion.pretrain.seed)
        return Checkpoint(module_checkpoint(codec), {"stage": "codec", "kind": codec.codec_id})

    load_module_state(codec, _cached(cache_dir, "codec", key, build).tensors)
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec


def pretrain_denoiser(cfg: RunConfig, cache_dir=None) -> ToyUNet:
    """Label-to-image (or unconditional) UNet pretraining on renders of every corpus class."""
    p = cfg.diffusion.pretrain
    # the conditioning mode only matters once sigma exists, so both modes share one denoiser
    unet_cfg = replace(cfg.conditioning, cond_mode="ct")
    d = cfg.to_dict()["diffusion"]
    for sampling_only in ("sampler", "steps"):
        d.pop(sampling_only)
    key = _digest({"pretrain": d, "unet": unet_cfg.to_dict(), "image_size": cfg.data.image_size})

    def build() -> Checkpoint:
        images, labels = _render_corpus(cfg)
        trainer = DenoiserPretrainer(images, unet_cfg, build_codec(cfg, cache_dir),
                                     make_noise_schedule(cfg), p.optimizer, p.seed,
                                     labels=labels if p.label_conditioned else None,
                                     num_labels=p.corpus_classes, crop_ratio=p.crop_ratio)
        t0 = time.time()
        trainer.run()
        log.info("denoiser pretraining: loss %.4f -> %.4f in %.0fs",
                 trainer.history[0], trainer.history[-1], time.time() - t0)
        return trainer.checkpoint()

    ckpt = _cached(cache_dir, "denoiser", key, build)
    unet = ToyUNet(cfg.conditioning)
    load_module_state(unet, ckpt.subset("unet."))
    return unet


def train_oracle(cfg: RunConfig, dataset: PairedDataset, cache_dir=None) -> RenderClassifier:
    e = cfg.eval
    images, labels = dataset.images("train"), dataset.labels("train")
    key = _digest({"epochs": e.oracle_epochs, "seed": e.oracle_seed, "classes": dataset.class_count,
                   "images": hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest(),
                   "labels": labels.tolist()})

    def build() -> Checkpoint:
        oracle = RenderClassifier(dataset.class_count, e.oracle_seed).fit(images, labels, epochs=e.oracle_epochs)
        return Checkpoint(oracle.state(), {"stage": "oracle", "n_classes": dataset.class_count})

    ckpt = _cached(cache_dir, "oracle", key, build)
    return RenderClassifier(dataset.class_count, e.oracle_seed).load_state(ckpt.tensors)


def run_stage_a(cfg: RunConfig, dataset: PairedDataset, callback=None) -> StageATrainer:
    trainer = StageATrainer(dataset.voxels("pretrain"), cfg.mbm, cfg.trainer.stage_a, cfg.seed,
                            cfg.data.sparsify_fraction)
    trainer.run(callback=callback)
    return trainer


def run_stage_b(cfg: RunConfig, dataset: PairedDataset, encoder_ckpt: Optional[Checkpoint],
                unet: ToyUNet, callback=None, cache_dir=None) -> StageBTrainer:
    """``encoder_ckpt=None`` finetunes a randomly initialised encoder."""
    voxels = dataset.voxels("train")
    state = encoder_ckpt.subset("model.encoder.") if encoder_ckpt is not None else None
    model = build_conditional_denoiser(voxels.shape[1], cfg.mbm, unet, state, cfg.seed)
    trainer = StageBTrainer(model, build_codec(cfg, cache_dir), voxels, dataset.images("train"),
                            make_noise_schedule(cfg), cfg.trainer.stage_b, cfg.seed, cfg.trainer.crop_ratio)
    trainer.run(callback=callback)
    return trainer


@torch.no_grad()
def sample_images(model: ConditionalDenoiser, codec: Codec, schedule: NoiseSchedule, voxels,
                  samplings: int, sampler: str = "plms", steps: int = 50, seed: int = 0) -> np.ndarray:
    """Decode ``samplings`` images per voxel vector; returns (N, samplings, H, W, 3) in [0, 1]."""
    voxels = torch.from_numpy(np.asarray(voxels, dtype=np.float32))
    cond = model.condition(voxels).repeat(samplings)
    shape = (len(voxels) * samplings, *codec.config.latent_shape)
    g = torch.Generator().manual_seed(seed)
    if sampler == "plms":
        z = plms_sample(model.unet, cond, schedule, steps, shape, g)
    elif sampler == "ddpm":
        z = ddpm_sample(model.unet, cond, schedule, shape, g)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    images = tensor_to_images(codec.decode(z)).clip(0.0, 1.0)
    return images.reshape(len(voxels), samplings, *images.shape[1:])


def evaluate_samples(samples: np.ndarray, ground_truth: np.ndarray, oracle: RenderClassifier,
                     n: int, k: int, trials: int, seed: int) -> MetricReport:
    """Identification accuracy over every (sample, ground truth) pair plus FID, MSE and consistency."""
    n_in, n_s = samples.shape[:2]
    flat = samples.reshape(-1, *samples.shape[2:])
    gt = np.repeat(ground_truth, n_s, axis=0)
    rate = nway_topk_accuracy(flat, gt, oracle, n, k, trials, np.random.default_rng(seed))
    c_mean, c_std = sampling_consistency(samples, oracle)
    across, n_pairs = across_input_agreement(samples, oracle)
    return MetricReport(
        n=n, k=k, trials=trials, success_rate=rate,
        fid=fid(oracle.features(ground_truth), oracle.features(flat)),
        mse=pixel_mse(flat, gt), consistency_mean=c_mean, consistency_std=c_std, seed=seed,
        extra={"across_input_agreement": across, "across_input_pairs": n_pairs,
               "n_inputs": int(n_in), "samplings": int(n_s)})


@dataclass
class PipelineResult:
    config: RunConfig
    dataset: PairedDataset
    encoder_checkpoint: Optional[Checkpoint]
    finetune_checkpoint: Checkpoint
    model: ConditionalDenoiser
    samples: np.ndarray
    report: MetricReport
    histories: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, cache_dir=None) -> PipelineResult:
    """Everything from synthetic data to a MetricReport for one seed."""
    timings = {}
    t0 = time.time()
    dataset = build_dataset(cfg)
    histories = {}
    enc_ckpt = None
    if cfg.trainer.use_pretraining:
        trainer_a = run_stage_a(cfg, dataset)
        enc_ckpt = trainer_a.checkpoint()
        histories["stage_a"] = trainer_a.history
    timings["stage_a"] = time.time() - t0

    t0 = time.time()
    unet = pretrain_denoiser(cfg, cache_dir)
    oracle = train_oracle(cfg, dataset, cache_dir)
    timings["pretrained_components"] = time.time() - t0

    t0 = time.time()
    trainer_b = run_stage_b(cfg, dataset, enc_ckpt, unet, cache_dir=cache_dir)
    histories["stage_b"] = trainer_b.history
    timings["stage_b"] = time.time() - t0

    t0 = time.time()
    samples = sample_images(trainer_b.model, trainer_b.codec, trainer_b.schedule, dataset.voxels("test"),
                            cfg.eval.samplings, cfg.diffusion.sampler, cfg.diffusion.steps, cfg.seed)
    timings["sampling"] = time.time() - t0

    t0 = time.time()
    report = evaluate_samples(samples, dataset.images("test"), oracle, cfg.eval.n_way, cfg.eval.top_k,
                              cfg.eval.trials, cfg.seed)
    report.extra["config_hash"] = cfg.hash()
    timings["evaluate"] = time.time() - t0
    log.info("seed %d: %d-way top-%d %.3f", cfg.seed, cfg.eval.n_way, cfg.eval.top_k, report.success_rate)
    return PipelineResult(cfg, dataset, enc_ckpt, trainer_b.checkpoint(), trainer_b.model, samples, report,
                          histories, timings)
