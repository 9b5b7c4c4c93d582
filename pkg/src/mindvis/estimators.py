"""scikit-learn style front end.

``MbmEncoder`` is a transformer: ``fit`` runs masked-brain-model pretraining
on voxel vectors, ``transform`` returns the encoder tokens. ``FmriImageDecoder``
is a regressor-shaped estimator: ``fit(voxels, images)`` finetunes the
conditional denoiser and ``predict(voxels)`` samples images.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .conditioning import ToyUNet
from .config import RunConfig
from .diffusion import make_schedule
from .mbm import MbmConfig, make_mask_plan, primary_region_labels, recovery_correlation
from .pipeline import build_codec, pretrain_denoiser, sample_images
from .trainer import OptimizerConfig, StageATrainer, StageBTrainer, build_conditional_denoiser

__all__ = ["check_voxels", "check_images", "MbmEncoder", "FmriImageDecoder"]


def check_voxels(X, n_voxels=None) -> np.ndarray:
    """Validate a (n_samples, n_voxels) array of finite values; returns float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 1:
        raise ValueError("expected a 2D (n_samples, n_voxels) array; reshape a single sample with X[None]")
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2D array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("voxel array contains NaN or inf")
    if n_voxels is not None and X.shape[1] != n_voxels:
        raise ValueError(f"X has {X.shape[1]} voxels, estimator was fitted with {n_voxels}")
    return X


def check_images(Y, size=None) -> np.ndarray:
    """Validate (n, H, W, 3) images with values in [0, 1]; returns float32."""
    Y = np.asarray(Y, dtype=np.float32)
    if Y.ndim != 4 or Y.shape[-1] != 3 or Y.shape[1] != Y.shape[2] or Y.shape[0] == 0:
        raise ValueError(f"expected (n, H, H, 3) images, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)) or Y.min() < 0 or Y.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    if size is not None and Y.shape[1] != size:
        raise ValueError(f"images are {Y.shape[1]}px, expected {size}px")
    return Y


class MbmEncoder(TransformerMixin, BaseEstimator):
    def __init__(self, patch_size=16, embed_dim=64, encoder_depth=4, encoder_heads=4,
                 decoder_embed_dim=32, decoder_depth=2, decoder_heads=4, mlp_ratio=1.0,
                 mask_ratio=0.75, mask_strategy="random", peak_lr=1e-3, weight_decay=0.05,
                 warmup_epochs=20, max_epochs=200, batch_size=32, grad_clip_norm=0.8,
                 sparsify_fraction=0.2, random_state=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder_depth = encoder_depth
        self.encoder_heads = encoder_heads
        self.decoder_embed_dim = decoder_embed_dim
        self.decoder_depth = decoder_depth
        self.decoder_heads = decoder_heads
        self.mlp_ratio = mlp_ratio
        self.mask_ratio = mask_ratio
        self.mask_strategy = mask_strategy
        self.peak_lr = peak_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.grad_clip_norm = grad_clip_norm
        self.sparsify_fraction = sparsify_fraction
        self.random_state = random_state

    def mbm_config(self) -> MbmConfig:
        return MbmConfig(self.patch_size, self.embed_dim, self.encoder_depth, self.encoder_heads,
                         self.decoder_embed_dim, self.decoder_depth, self.decoder_heads, self.mlp_ratio,
                         self.mask_ratio, self.mask_strategy)

    def fit(self, X, y=None):
        X = check_voxels(X)
        if X.shape[1] % self.patch_size:
            raise ValueError(f"{X.shape[1]} voxels is not a multiple of patch_size={self.patch_size}; "
                             "pad first")
        opt = OptimizerConfig(self.peak_lr, self.weight_decay, self.warmup_epochs, self.max_epochs,
                              self.batch_size, self.grad_clip_norm)
        trainer = StageATrainer(X, self.mbm_config(), opt, self.random_state, self.sparsify_fraction)
        trainer.run()
        self.model_ = trainer.model
        self.loss_curve_ = list(trainer.history)
        self.checkpoint_ = trainer.checkpoint()
        self.n_features_in_ = X.shape[1]
        return self

    @torch.no_grad()
    def tokens(self, X) -> np.ndarray:
        """(n_samples, n_patches, embed_dim) encoder output without masking."""
        check_is_fitted(self, "model_")
        X = check_voxels(X, self.n_features_in_)
        return self.model_.encoder(torch.from_numpy(X)).numpy()

    def transform(self, X) -> np.ndarray:
        t = self.tokens(X)
        return t.reshape(len(t), -1)

    @torch.no_grad()
    def reconstruct(self, X, random_state=0) -> np.ndarray:
        """Masked reconstruction of every voxel under one random mask plan per sample."""
        check_is_fitted(self, "model_")
        X = check_voxels(X, self.n_features_in_)
        rng = np.random.default_rng(random_state)
        n = self.model_.num_patches
        labels = primary_region_labels(n, self.model_.config.primary_fraction)
        plans = [make_mask_plan(n, self.mask_ratio, self.mask_strategy, labels, rng) for _ in X]
        return self.model_.reconstruct(torch.from_numpy(X), plans).numpy()

    def score(self, X, y=None) -> float:
        """Mean Pearson correlation between voxels and their masked reconstruction."""
        X = check_voxels(X)
        rec = self.reconstruct(X)
        return float(np.mean([recovery_correlation(a, b) for a, b in zip(X, rec)]))


class FmriImageDecoder(BaseEstimator):
    """Finetunes encoder, condition projector and cross-attention against a pretrained denoiser.

    ``encoder`` is a fitted ``MbmEncoder`` or ``None`` for a randomly
    initialised one. ``denoiser`` is a pretrained ``ToyUNet``; ``None``
    pretrains one on class renders during ``fit``.
    """

    def __init__(self, encoder=None, denoiser=None, codec=None, cond_mode="ct", crop_ratio=0.2,
                 peak_lr=1e-3, weight_decay=0.0, warmup_epochs=10, max_epochs=200, batch_size=32,
                 grad_clip_norm=0.8, sampler="plms", steps=50, random_state=0):
        self.encoder = encoder
        self.denoiser = denoiser
        self.codec = codec
        self.cond_mode = cond_mode
        self.crop_ratio = crop_ratio
        self.peak_lr = peak_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.grad_clip_norm = grad_clip_norm
        self.sampler = sampler
        self.steps = steps
        self.random_state = random_state

    def _run_config(self, image_size: int) -> RunConfig:
        base = RunConfig()
        codec = self.codec or replace(base.diffusion.codec, image_size=image_size)
        return RunConfig(data=replace(base.data, image_size=image_size),
                         diffusion=replace(base.diffusion, codec=codec, sampler=self.sampler, steps=self.steps),
                         conditioning=replace(base.conditioning, cond_mode=self.cond_mode),
                         seed=self.random_state)

    def fit(self, X, Y):
        X = check_voxels(X)
        Y = check_images(Y)
        if len(X) != len(Y):
            raise ValueError(f"{len(X)} voxel vectors but {len(Y)} images")
        cfg = self._run_config(Y.shape[1])
        if self.encoder is not None:
            check_is_fitted(self.encoder, "model_")
            mbm_cfg = self.encoder.mbm_config()
            state = self.encoder.checkpoint_.subset("model.encoder.")
        else:
            mbm_cfg, state = MbmConfig(), None
        if isinstance(self.denoiser, ToyUNet):
            unet = ToyUNet(replace(self.denoiser.config, cond_mode=self.cond_mode))
            unet.load_state_dict(self.denoiser.state_dict())
        else:
            unet = pretrain_denoiser(cfg)
        model = build_conditional_denoiser(X.shape[1], mbm_cfg, unet, state, self.random_state)
        opt = OptimizerConfig(self.peak_lr, self.weight_decay, self.warmup_epochs, self.max_epochs,
                              self.batch_size, self.grad_clip_norm)
        d = cfg.diffusion
        trainer = StageBTrainer(model, build_codec(cfg), X, Y, make_schedule(d.T, d.beta_start, d.beta_end,
                                                                                 d.schedule),
                                opt, self.random_state, self.crop_ratio)
        trainer.run()
        self.model_ = model
        self.codec_ = trainer.codec
        self.schedule_ = trainer.schedule
        self.loss_curve_ = list(trainer.history)
        self.checkpoint_ = trainer.checkpoint()
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, X, samplings: int = 5, random_state=None) -> np.ndarray:
        """(n_samples, samplings, H, W, 3) decoded images."""
        check_is_fitted(self, "model_")
        X = check_voxels(X, self.n_features_in_)
        seed = self.random_state if random_state is None else random_state
        return sample_images(self.model_, self.codec_, self.schedule_, X, samplings, self.sampler,
                             self.steps, seed)

    def predict(self, X) -> np.ndarray:
        """One decoded image per voxel vector, (n_samples, H, W, 3)."""
        return self.sample(X, 1)[:, 0]
