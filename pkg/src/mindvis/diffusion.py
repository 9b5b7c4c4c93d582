"""Noise schedules, forward corruption, epsilon-prediction losses and samplers.

Timesteps are 1-based: ``t`` runs over 1..T and ``alpha_bar(0) == 1``.
A denoiser is any callable ``(x_t, t, cond) -> eps_hat`` taking a (B, C, H, W)
batch and a (B,) long tensor of timesteps.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

__all__ = [
    "NoiseSchedule", "make_schedule", "forward_sample", "simple_loss", "cond_loss",
    "ddpm_sample", "plms_sample", "plms_timesteps", "DEFAULT_PLMS_STEPS",
]

# step count of the full-resolution sampling protocol; the desk profile uses fewer
DEFAULT_PLMS_STEPS = 250


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # betas[t - 1] for t = 1..T, float64

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at 1-based step(s) ``t``; ``t == 0`` gives 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "quadratic":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas)


def _per_sample(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(values, dtype=like.dtype)
    return v.reshape(-1, *([1] * (like.dim() - 1))) if v.dim() else v


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with ``t`` scalar or per batch row."""
    t_np = t.cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    schedule.check_t(t_np)
    ab = schedule.alpha_bar(t_np)
    return _per_sample(np.sqrt(ab), x0) * x0 + _per_sample(np.sqrt(1.0 - ab), x0) * eps


def _as_t_tensor(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(batch) if t.dim() == 0 else t


def simple_loss(denoiser: Callable, x0: torch.Tensor, t, eps: torch.Tensor,
                schedule: NoiseSchedule) -> torch.Tensor:
    """|| eps - eps_theta(x_t, t) ||^2, averaged over all elements."""
    x_t = forward_sample(x0, t, eps, schedule)
    return torch.mean((eps - denoiser(x_t, _as_t_tensor(t, x0.shape[0]), None)) ** 2)


def cond_loss(denoiser: Callable, x0: torch.Tensor, t, eps: torch.Tensor, cond,
              schedule: NoiseSchedule) -> torch.Tensor:
    """|| eps - eps_theta(x_t, t, tau(z), sigma(tau(z))) ||^2 with both payloads in ``cond``."""
    if cond is None:
        raise ValueError("conditional loss needs a ConditionBundle")
    x_t = forward_sample(x0, t, eps, schedule)
    return torch.mean((eps - denoiser(x_t, _as_t_tensor(t, x0.shape[0]), cond)) ** 2)


@torch.no_grad()
def ddpm_sample(denoiser: Callable, cond, schedule: NoiseSchedule, shape: tuple,
                generator: torch.Generator) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I) with posterior variance beta-tilde."""
    x = torch.randn(shape, generator=generator)
    for t in range(schedule.T, 0, -1):
        beta, alpha = schedule.betas[t - 1], schedule.alphas[t - 1]
        ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
        eps = denoiser(x, torch.full((shape[0],), t, dtype=torch.long), cond)
        mean = (x - float(beta / np.sqrt(1.0 - ab)) * eps) / float(np.sqrt(alpha))
        if t > 1:
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            x = mean + float(np.sqrt(var)) * torch.randn(shape, generator=generator)
        else:
            x = mean
    return x


def plms_timesteps(T: int, steps: int) -> list:
    """Uniformly strided descending sub-schedule starting at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    stride = (T - 1) // (steps - 1) if steps > 1 else 0
    return [T - i * stride for i in range(steps)]


@torch.no_grad()
def plms_sample(denoiser: Callable, cond, schedule: NoiseSchedule, steps: int = DEFAULT_PLMS_STEPS,
                shape: tuple = (1, 3, 32, 32), generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Pseudo linear multistep sampling on the deterministic eps-ODE.

    The first step uses a pseudo improved-Euler (Heun) estimate, the next two
    Adams-Bashforth of order 2 and 3, then fourth-order Adams-Bashforth.
    """
    if steps < 4:
        warnings.warn(f"PLMS with {steps} < 4 steps never reaches the 4th-order window; "
                      "running lower-order updates only", RuntimeWarning, stacklevel=2)
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    ts = plms_timesteps(schedule.T, steps)
    prevs = ts[1:] + [0]
    x = torch.randn(shape, generator=generator)
    b = shape[0]

    def eps_at(x_, t_):
        return denoiser(x_, torch.full((b,), t_, dtype=torch.long), cond)

    def transfer(x_, eps, t_, t_prev):
        ab, ab_prev = schedule.alpha_bar(t_), schedule.alpha_bar(t_prev)
        x0 = (x_ - float(np.sqrt(1.0 - ab)) * eps) / float(np.sqrt(ab))
        return float(np.sqrt(ab_prev)) * x0 + float(np.sqrt(1.0 - ab_prev)) * eps

    history = []
    for t, t_prev in zip(ts, prevs):
        e = eps_at(x, t)
        if not history:
            if t_prev > 0:
                x_next = transfer(x, e, t, t_prev)
                e_prime = (e + eps_at(x_next, t_prev)) / 2
            else:
                e_prime = e
        elif len(history) == 1:
            e_prime = (3 * e - history[-1]) / 2
        elif len(history) == 2:
            e_prime = (23 * e - 16 * history[-1] + 5 * history[-2]) / 12
        else:
            e_prime = (55 * e - 59 * history[-1] + 37 * history[-2] - 9 * history[-3]) / 24
        x = transfer(x, e_prime, t, t_prev)
        history.append(e)
        if len(history) > 3:
            history.pop(0)
    return x
