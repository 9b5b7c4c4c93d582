"""Classifier-based identification accuracy, Frechet distance, pixel MSE and
sampling consistency.

An oracle is any callable mapping (N, H, W, 3) images to (N, C) class
probabilities.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import images_to_tensor

__all__ = [
    "MetricReport", "LookupOracle", "RenderClassifier", "check_probabilities", "candidate_rank_success",
    "nway_topk_accuracy", "fid", "pixel_mse", "sampling_consistency", "across_input_agreement",
]


def check_probabilities(probs: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > tol):
        raise ValueError("oracle output must be rows of non-negative probabilities summing to 1")
    return probs


@dataclass
class MetricReport:
    n: int
    k: int
    trials: int
    success_rate: float
    fid: Optional[float] = None
    mse: Optional[float] = None
    consistency_mean: Optional[float] = None
    consistency_std: Optional[float] = None
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.success_rate <= 1:
            raise ValueError("success_rate must be in [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    def csv_rows(self) -> list:
        rows = [("nway_top%d" % self.k, self.n, self.k, self.trials, self.success_rate, self.seed)]
        for name in ("fid", "mse", "consistency_mean", "consistency_std"):
            value = getattr(self, name)
            if value is not None:
                rows.append((name, self.n, self.k, self.trials, value, self.seed))
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "n", "k", "trials", "value", "seed"])
            for row in self.csv_rows():
                w.writerow([row[0], row[1], row[2], row[3], repr(float(row[4])), row[5]])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# oracles

class LookupOracle:
    """Exact-lookup oracle: nearest reference image by pixel distance, one-hot output."""

    def __init__(self, references: np.ndarray):
        self.references = np.asarray(references, dtype=np.float64)

    @property
    def n_classes(self) -> int:
        return len(self.references)

    def __call__(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        r = self.references.reshape(len(self.references), -1)
        d = ((x[:, None, :] - r[None]) ** 2).sum(-1)
        out = np.zeros((len(x), len(r)))
        out[np.arange(len(x)), d.argmin(1)] = 1.0
        return out


class _ConvNet(nn.Module):
    def __init__(self, n_classes: int, width: int = 16, feature_dim: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(), nn.AdaptiveAvgPool2d(2),
            nn.Flatten(), nn.Linear(8 * width, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, n_classes)

    def forward(self, x):
        return self.head(self.body(x))


class RenderClassifier:
    """Small conv net trained on class renders with crop, blur and noise augmentation.

    Stands in for a pretrained ImageNet classifier; ``features`` exposes the
    penultimate activations used for the Frechet distance.
    """

    def __init__(self, n_classes: int, seed: int = 0, width: int = 16):
        self.n_classes = n_classes
        self.seed = seed
        torch.manual_seed(seed)
        self.net = _ConvNet(n_classes, width)
        self.net.eval()

    def _augment(self, x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
        b, _, h, w = x.shape
        # random scale/translate via affine grid, then blur and pixel noise
        scale = 1.0 - 0.25 * torch.rand(b, generator=g)
        shift = (torch.rand(b, 2, generator=g) - 0.5) * 0.3
        theta = torch.zeros(b, 2, 3)
        theta[:, 0, 0] = scale
        theta[:, 1, 1] = scale
        theta[:, :, 2] = shift
        grid = F.affine_grid(theta, x.shape, align_corners=False)
        x = F.grid_sample(x, grid, padding_mode="border", align_corners=False)
        blur = torch.rand(b, generator=g) < 0.5
        if blur.any():
            down = F.interpolate(F.avg_pool2d(x[blur], 2), scale_factor=2, mode="nearest")
            x = x.clone()
            x[blur] = down
        x = x + torch.randn(x.shape, generator=g) * (0.15 * torch.rand(b, 1, 1, 1, generator=g))
        return x

    def fit(self, images, labels, epochs: int = 60, lr: float = 3e-3, batch_size: int = 64,
            copies: int = 8) -> "RenderClassifier":
        x = images_to_tensor(images).repeat(copies, 1, 1, 1)
        y = torch.as_tensor(np.asarray(labels), dtype=torch.long).repeat(copies)
        g = torch.Generator().manual_seed(self.seed)
        opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        self.net.train()
        for _ in range(epochs):
            perm = torch.randperm(len(x), generator=g)
            for i in range(0, len(x), batch_size):
                idx = perm[i:i + batch_size]
                loss = F.cross_entropy(self.net(self._augment(x[idx], g)), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.net.eval()
        return self

    @torch.no_grad()
    def logits(self, images) -> torch.Tensor:
        return torch.cat([self.net(images_to_tensor(images[i:i + 256]))
                          for i in range(0, len(images), 256)])

    def __call__(self, images) -> np.ndarray:
        p = torch.softmax(self.logits(images).double(), dim=1).numpy()
        return p / p.sum(axis=1, keepdims=True)

    @torch.no_grad()
    def features(self, images) -> np.ndarray:
        return torch.cat([self.net.body(images_to_tensor(images[i:i + 256]))
                          for i in range(0, len(images), 256)]).double().numpy()

    def state(self) -> dict:
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}

    def load_state(self, tensors: dict) -> "RenderClassifier":
        self.net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
        self.net.eval()
        return self


# ---------------------------------------------------------------------------
# identification accuracy

def candidate_rank_success(probs: np.ndarray, true_class: int, candidates: np.ndarray, k: int) -> bool:
    """Is ``true_class`` among the top-k of ``probs`` restricted to ``candidates``?

    Ties are broken towards the lower class index.
    """
    cand = np.asarray(candidates)
    order = np.lexsort((cand, -probs[cand]))
    return bool(true_class in cand[order[:k]])


def nway_topk_accuracy(generated, ground_truth, oracle: Callable, n: int, k: int = 1,
                       trials: int = 1000, rng: Optional[np.random.Generator] = None) -> float:
    """N-trial n-way top-k identification, averaged over all (generated, ground-truth) pairs.

    Each trial takes the oracle's top class of the ground truth, draws n - 1
    other classes without replacement, and succeeds if the true class ranks
    in the top k of the generated image's probabilities over those n classes.
    Accepts a single image pair or batches of pairs.
    """
    rng = rng if rng is not None else np.random.default_rng()
    gen = np.asarray(generated)
    gt = np.asarray(ground_truth)
    if gen.ndim == 3:
        gen, gt = gen[None], gt[None]
    if gen.shape != gt.shape:
        raise ValueError("generated and ground-truth batches differ in shape")
    p_gen = check_probabilities(oracle(gen))
    p_gt = check_probabilities(oracle(gt))
    n_classes = p_gen.shape[1]
    if not 1 <= n <= n_classes:
        raise ValueError(f"n={n} must be in [1, {n_classes}]")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, n]")
    successes = 0
    for i in range(len(gen)):
        y_hat = int(np.argmax(p_gt[i]))
        others = np.delete(np.arange(n_classes), y_hat)
        for _ in range(trials):
            cand = np.concatenate([[y_hat], rng.choice(others, size=n - 1, replace=False)])
            successes += candidate_rank_success(p_gen[i], y_hat, cand, k)
    return successes / (trials * len(gen))


# ---------------------------------------------------------------------------
# distribution / pixel metrics

def _sqrt_psd(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((c + c.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_real, features_gen) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Uses Tr((C1 C2)^1/2) = Tr((C1^1/2 C2 C1^1/2)^1/2), both roots by symmetric
    eigendecomposition with negative eigenvalues clamped to zero.
    """
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_gen, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2D with equal feature dimension")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 feature vectors per side")
    mu1, mu2 = a.mean(0), b.mean(0)
    c1 = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    c2 = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    s1 = _sqrt_psd(c1)
    w = np.linalg.eigvalsh(s1 @ c2 @ s1)
    tr_cross = float(np.sqrt(np.clip(w, 0, None)).sum())
    value = float(((mu1 - mu2) ** 2).sum() + np.trace(c1) + np.trace(c2) - 2 * tr_cross)
    return max(value, 0.0)


def pixel_mse(generated, ground_truth) -> float:
    a = np.asarray(generated, dtype=np.float64)
    b = np.asarray(ground_truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# consistency across samplings

def _top1(images, oracle) -> np.ndarray:
    flat = np.asarray(images)
    lead = flat.shape[:2]
    labels = check_probabilities(oracle(flat.reshape(-1, *flat.shape[2:]))).argmax(1)
    return labels.reshape(lead)


def sampling_consistency(samples_per_input, oracle: Callable):
    """Mean and std over inputs of the fraction of sampling pairs whose top-1 classes agree.

    ``samples_per_input`` is (n_inputs, n_samplings, H, W, 3).
    """
    s = np.asarray(samples_per_input)
    if s.ndim != 5 or s.shape[1] < 2:
        raise ValueError("need (n_inputs, n_samplings >= 2, H, W, 3) samples")
    labels = _top1(s, oracle)
    pairs = list(combinations(range(s.shape[1]), 2))
    per_input = np.array([np.mean([lab[i] == lab[j] for i, j in pairs]) for lab in labels])
    return float(per_input.mean()), float(per_input.std())


def across_input_agreement(samples_per_input, oracle: Callable) -> tuple:
    """Agreement rate of top-1 classes for sample pairs drawn from different inputs.

    Returns (rate, number of pairs).
    """
    s = np.asarray(samples_per_input)
    labels = _top1(s, oracle)
    n_in, n_s = labels.shape
    agree = total = 0
    for a in range(n_in):
        for b in range(a + 1, n_in):
            eq = labels[a][:, None] == labels[b][None, :]
            agree += int(eq.sum())
            total += n_s * n_s
    return agree / total, total
