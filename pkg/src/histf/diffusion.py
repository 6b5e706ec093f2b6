"""Gaussian diffusion with an x0-predicting denoiser.

Timesteps are 0-based: ``t = 0`` is the least noisy level and ``t = T - 1``
the noisiest. A reverse step goes from level ``t`` to level ``t_prev``;
``t_prev = -1`` means clean data (``alpha_bar = 1``) and injects no noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DomainError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray  # float64, length T

    @classmethod
    def make(cls, kind: str = "cosine", steps: int = 1000) -> "NoiseSchedule":
        if steps < 1:
            raise ConfigError(f"need at least one diffusion step, got {steps}")
        if kind == "cosine":
            s = 0.008
            f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2
            betas = np.array([
                min(1 - f((i + 1) / steps) / f(i / steps), 0.999) for i in range(steps)
            ])
        elif kind == "linear":
            scale = 1000.0 / steps
            betas = np.linspace(scale * 1e-4, scale * 0.02, steps, dtype=np.float64)
        else:
            raise ConfigError(f"unknown schedule kind {kind!r}")
        return cls(kind, betas)

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t < 0 else float(self.alphas_cumprod[t])


def _broadcast(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(values, dtype=torch.float64)[t.long()].to(like.dtype)
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is an int or ``(B,)``."""
    if eps.shape != x0.shape:
        raise ShapeError(f"noise {tuple(eps.shape)} does not match data {tuple(x0.shape)}")
    t = torch.as_tensor(t).reshape(-1).expand(x0.shape[0])
    if bool((t < 0).any()) or bool((t >= schedule.steps).any()):
        raise DomainError(f"timestep out of range [0, {schedule.steps})")
    ab = _broadcast(schedule.alphas_cumprod, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def posterior_coefficients(schedule: NoiseSchedule, t: int, t_prev: int | None = None):
    """``(coef_x0, coef_xt, variance)`` of ``q(x_{t_prev} | x_t, x0)``."""
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t < schedule.steps or not -1 <= t_prev < t:
        raise DomainError(f"invalid reverse step {t} -> {t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_s = schedule.alpha_bar(t_prev)
    beta = 1.0 - ab_t / ab_s  # equals beta_t for a unit step
    denom = 1.0 - ab_t
    coef_x0 = math.sqrt(ab_s) * beta / denom
    coef_xt = math.sqrt(ab_t / ab_s) * (1.0 - ab_s) / denom
    var = (1.0 - ab_s) / denom * beta
    return coef_x0, coef_xt, var


def p_sample_step(
    x_t: torch.Tensor,
    t: int,
    x0_hat: torch.Tensor,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
    t_prev: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One ancestral step from level ``t`` to ``t_prev`` (default ``t - 1``)."""
    coef_x0, coef_xt, var = posterior_coefficients(schedule, t, t_prev)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if (t_prev if t_prev is not None else t - 1) < 0:
        return mean
    if noise is None:
        noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(var) * noise


def timestep_subset(total: int, steps: int | None = None) -> list[int]:
    """Decreasing, uniformly strided timesteps from ``total - 1`` down to 0."""
    if steps is None or steps >= total:
        return list(range(total - 1, -1, -1))
    if steps < 1:
        raise ConfigError("need at least one sampling step")
    if steps == 1:
        return [total - 1]
    ts = np.round(np.linspace(total - 1, 0, steps)).astype(int)
    return sorted(set(ts.tolist()), reverse=True)


def guided(x0_uncond: torch.Tensor, x0_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance ``u + w (c - u)``, written so w=0 gives ``u`` and w=1 gives ``c`` exactly."""
    return (1.0 - w) * x0_uncond + w * x0_cond


def item_generators(seed: int, count: int) -> list[torch.Generator]:
    """Independent per-item random streams, so an item's draw ignores its batch."""
    children = np.random.SeedSequence(seed).spawn(count)
    gens = []
    for child in children:
        g = torch.Generator()
        g.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))
        gens.append(g)
    return gens


def _item_noise(gens, shape, dtype):
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens])


@torch.no_grad()
def sample(
    model,
    texts: Sequence[str],
    n_frames: int,
    schedule: NoiseSchedule,
    guidance: float = 2.5,
    steps: int | Sequence[int] | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    callback: Callable[[int, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Generate ``(len(texts), n_frames, F)`` motions in the model's (normalised) feature space.

    ``steps`` is a step count (uniform stride) or an explicit decreasing
    list of timesteps.
    """
    if isinstance(steps, int) or steps is None:
        subset = timestep_subset(schedule.steps, steps)
    else:
        subset = [int(s) for s in steps]
        if not subset:
            raise ConfigError("empty timestep subset")
        if any(b >= a for a, b in zip(subset, subset[1:])) or subset[0] >= schedule.steps or subset[-1] < 0:
            raise ConfigError("timestep subset must be strictly decreasing within [0, T)")
    batch = len(texts)
    width = model.cfg.feature_width
    gens = item_generators(seed, batch)
    x = _item_noise(gens, (n_frames, width), dtype)
    for i, t in enumerate(subset):
        t_prev = subset[i + 1] if i + 1 < len(subset) else -1
        tt = torch.full((batch,), t, dtype=torch.long)
        if guidance == 0.0:
            x0 = model.denoise(x, tt, texts, mask=True)
        elif guidance == 1.0:
            x0 = model.denoise(x, tt, texts, mask=False)
        else:
            x0 = guided(model.denoise(x, tt, texts, mask=True),
                        model.denoise(x, tt, texts, mask=False), guidance)
        noise = None if t_prev < 0 else _item_noise(gens, (n_frames, width), dtype)
        x = p_sample_step(x, t, x0, schedule, noise=noise, t_prev=t_prev)
        if callback is not None:
            callback(t, x)
    return x
