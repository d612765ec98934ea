"""Discrete noise schedules, forward noising and the reconstruction losses.

Convention: timestep 0 is the clean sample, ``num_steps - 1`` the noisiest.
Schedules are variance preserving, i.e. ``alpha_t**2 + sigma_t**2 == 1``.
The denoiser predicts the clean sample, so every loss here compares a
prediction against the clean target rather than against the noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import torch

from .errors import InvalidArgumentError, OutOfRangeError

Profile = Literal["linear", "cosine"]
PROFILES: tuple[str, ...] = ("linear", "cosine")

_COSINE_OFFSET = 0.008
_VARIANCE_TOL = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    alphas: tuple[float, ...]
    sigmas: tuple[float, ...]
    weights: tuple[float, ...]
    profile: str = "custom"

    def __post_init__(self):
        n = self.num_steps
        if n < 2:
            raise InvalidArgumentError(f"num_steps must be >= 2, got {n}")
        if not (len(self.alphas) == len(self.sigmas) == len(self.weights) == n):
            raise InvalidArgumentError("alphas, sigmas and weights must all have length num_steps")
        if self.alphas[0] != 1.0 or self.sigmas[0] != 0.0:
            raise InvalidArgumentError("timestep 0 must be the clean sample (alpha=1, sigma=0)")
        for t in range(n):
            a, s, w = self.alphas[t], self.sigmas[t], self.weights[t]
            if not (0.0 <= a <= 1.0 and 0.0 <= s <= 1.0):
                raise InvalidArgumentError(f"coefficients out of [0, 1] at t={t}")
            if not w > 0 or not math.isfinite(w):
                raise InvalidArgumentError(f"weight must be positive at t={t}")
            if abs(a * a + s * s - 1.0) > _VARIANCE_TOL:
                raise InvalidArgumentError(f"schedule is not variance preserving at t={t}")
            if t and (a > self.alphas[t - 1] or s < self.sigmas[t - 1]):
                raise InvalidArgumentError(f"schedule is not monotone at t={t}")

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise OutOfRangeError(f"timestep {t} outside [0, {self.num_steps})")
        return t

    def coefficients(self, t: int) -> tuple[float, float, float]:
        t = self.check_timestep(t)
        return self.alphas[t], self.sigmas[t], self.weights[t]


def _cosine_curve(v: float) -> float:
    return math.cos((v + _COSINE_OFFSET) / (1.0 + _COSINE_OFFSET) * math.pi / 2) ** 2


def _alpha_bar(profile: str, u: float) -> float:
    """Cumulative signal power at normalised time u in [0, 1]."""
    if profile == "linear":
        return 1.0 - u
    if profile == "cosine":
        return min(1.0, max(0.0, _cosine_curve(u) / _cosine_curve(0.0)))
    raise InvalidArgumentError(f"unknown schedule profile {profile!r}; expected one of {PROFILES}")


def build_schedule(num_steps: int, profile: Profile = "linear") -> NoiseSchedule:
    """Build a variance-preserving schedule with unit loss weights.

    ``linear`` interpolates the signal power ``alpha_t**2`` linearly from 1 to 0;
    ``cosine`` uses the shifted-cosine cumulative signal curve.
    """
    if not isinstance(num_steps, int) or num_steps < 2:
        raise InvalidArgumentError(f"num_steps must be an integer >= 2, got {num_steps!r}")
    if profile not in PROFILES:
        raise InvalidArgumentError(f"unknown schedule profile {profile!r}; expected one of {PROFILES}")
    alphas, sigmas = [], []
    for t in range(num_steps):
        abar = _alpha_bar(profile, t / (num_steps - 1))
        alphas.append(math.sqrt(abar))
        sigmas.append(math.sqrt(1.0 - abar))
    alphas[0], sigmas[0] = 1.0, 0.0
    return NoiseSchedule(
        num_steps=num_steps,
        alphas=tuple(alphas),
        sigmas=tuple(sigmas),
        weights=(1.0,) * num_steps,
        profile=profile,
    )


@dataclass(frozen=True)
class LatentSample:
    data: torch.Tensor
    timestep: int = 0

    def __post_init__(self):
        if self.data.dim() != 3:
            raise InvalidArgumentError(
                f"latent must have shape (channels, height, width), got {tuple(self.data.shape)}"
            )
        if self.timestep < 0:
            raise OutOfRangeError(f"negative timestep {self.timestep}")
        if not torch.isfinite(self.data).all():
            raise InvalidArgumentError("latent contains non-finite entries")


def add_noise(x0, epsilon: torch.Tensor, t: int, schedule: NoiseSchedule) -> LatentSample:
    """Return ``alpha_t * x0 + sigma_t * epsilon`` as a latent at timestep ``t``."""
    data = x0.data if isinstance(x0, LatentSample) else torch.as_tensor(x0)
    epsilon = torch.as_tensor(epsilon, dtype=data.dtype)
    if data.shape != epsilon.shape:
        raise InvalidArgumentError(
            f"shape mismatch: x0 {tuple(data.shape)} vs epsilon {tuple(epsilon.shape)}"
        )
    alpha, sigma, _ = schedule.coefficients(t)
    return LatentSample(alpha * data + sigma * epsilon, int(t))


def add_noise_batch(x0: torch.Tensor, epsilon: torch.Tensor, t: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Batched ``add_noise`` over a leading batch axis with per-item timesteps."""
    if x0.shape != epsilon.shape:
        raise InvalidArgumentError(
            f"shape mismatch: x0 {tuple(x0.shape)} vs epsilon {tuple(epsilon.shape)}"
        )
    if t.min() < 0 or t.max() >= schedule.num_steps:
        raise OutOfRangeError("timestep out of range")
    alphas = torch.tensor(schedule.alphas, dtype=x0.dtype)[t]
    sigmas = torch.tensor(schedule.sigmas, dtype=x0.dtype)[t]
    shape = (-1,) + (1,) * (x0.dim() - 1)
    return alphas.view(shape) * x0 + sigmas.view(shape) * epsilon


def _as_tensor_pair(prediction, target) -> tuple[torch.Tensor, torch.Tensor]:
    if not isinstance(prediction, torch.Tensor):
        prediction = torch.as_tensor(prediction, dtype=torch.float64)
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(target, dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise InvalidArgumentError(
            f"shape mismatch: prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}"
        )
    return prediction, target


def weighted_reconstruction_loss(prediction, target, w: float = 1.0) -> torch.Tensor:
    """``w * ||prediction - target||^2``, summed over every element.

    Returns a 0-d tensor so gradients flow when ``prediction`` requires them.
    """
    prediction, target = _as_tensor_pair(prediction, target)
    if not (w > 0 and math.isfinite(w)):
        raise InvalidArgumentError(f"loss weight must be positive and finite, got {w!r}")
    return w * (prediction - target).pow(2).sum()


def content_loss(prediction, content_reference, w: float = 1.0) -> torch.Tensor:
    """Content-preservation prior loss: same quadratic form, applied to a
    prediction of a frozen-model content reference under unstyled conditioning."""
    return weighted_reconstruction_loss(prediction, content_reference, w)


def batch_reconstruction_loss(prediction: torch.Tensor, target: torch.Tensor,
                              weights: Sequence[float] | torch.Tensor) -> torch.Tensor:
    """Mean over the batch axis of per-item weighted squared-L2 sums."""
    prediction, target = _as_tensor_pair(prediction, target)
    weights = torch.as_tensor(weights, dtype=prediction.dtype)
    if weights.shape != prediction.shape[:1]:
        raise InvalidArgumentError("one weight per batch item is required")
    if not bool((weights > 0).all()):
        raise InvalidArgumentError("loss weights must be positive")
    per_item = (prediction - target).pow(2).flatten(1).sum(dim=1)
    return (weights * per_item).mean()


def total_loss(l_ldm, l_content, lambda1: float, lambda2: float):
    """``lambda1 * l_ldm + lambda2 * l_content``; works on floats and 0-d tensors."""
    for name, value in (("l_ldm", l_ldm), ("l_content", l_content),
                        ("lambda1", lambda1), ("lambda2", lambda2)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not (v >= 0.0 and math.isfinite(v)):
            raise InvalidArgumentError(f"{name} must be finite and non-negative, got {v!r}")
    return lambda1 * l_ldm + lambda2 * l_content
