"""Core DDPM mechanics: noise schedule, closed-form forward process, SNR
and min-SNR loss weighting.

Implements the standard formulation of Ho et al. (2020):

    q(x_t | x_0) = N(x_t; sqrt(abar_t) x_0, (1 - abar_t) I)

with abar_t the cumulative product of alpha_t = 1 - beta_t. Min-SNR
weighting follows Hang et al. (2023): w_t = min(SNR_t, gamma) / SNR_t.

All functions are pure and operate on either numpy arrays or torch
tensors; the noise schedule itself is a small immutable table of
float64 values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

__all__ = [
    "DiffusionConfig",
    "NoiseSchedule",
    "build_schedule",
    "forward_sample",
    "snr",
    "min_snr_weight",
    "noise_prediction_loss",
]

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class DiffusionConfig:
    """Configuration of the diffusion process."""

    num_steps: int = 1000
    schedule_kind: str = "linear"  # "linear" or "cosine"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    min_snr_gamma: Optional[float] = None

    def validate(self) -> None:
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.schedule_kind not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule_kind {self.schedule_kind!r}")
        if not (0.0 < self.beta_start < 1.0 and 0.0 < self.beta_end < 1.0):
            raise ValueError("beta bounds must lie in (0, 1)")
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        if self.min_snr_gamma is not None and self.min_snr_gamma <= 0:
            raise ValueError("min_snr_gamma must be positive")

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "schedule_kind": self.schedule_kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "min_snr_gamma": self.min_snr_gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        return cls(**d)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta/alpha/alpha_bar tables, indexed by t in [1, T].

    Arrays are stored 0-based (index t-1 holds timestep t). alpha_bar(0)
    is defined as 1.0, the convention used by the final DDIM step.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (lo <= t <= self.num_steps):
            raise ValueError(
                f"timestep {t} out of range [{lo}, {self.num_steps}]"
            )

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t) -> Union[float, np.ndarray]:
        """abar_t for a scalar timestep or an array of per-sample timesteps."""
        if np.ndim(t) == 0:
            self._check_t(int(t), allow_zero=True)
            return 1.0 if int(t) == 0 else float(self.alpha_bars[int(t) - 1])
        t = np.asarray(t)
        if t.min() < 0 or t.max() > self.num_steps:
            raise ValueError("timestep out of range")
        out = np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])
        return out


def build_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Build the beta/alpha/alpha_bar tables for a diffusion config.

    Deterministic function of the config. The linear schedule
    interpolates beta from beta_start to beta_end; the cosine schedule
    follows Nichol & Dhariwal (2021).
    """
    cfg.validate()
    T = cfg.num_steps
    if cfg.schedule_kind == "linear":
        betas = np.linspace(cfg.beta_start, cfg.beta_end, T, dtype=np.float64)
    else:  # cosine
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _per_sample_coeff(values: np.ndarray, like: ArrayLike) -> ArrayLike:
    """Reshape per-sample scalars to broadcast over the trailing dims of `like`."""
    shaped = np.asarray(values, dtype=np.float64).reshape(
        (-1,) + (1,) * (np.ndim(like) - 1)
    )
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(shaped, dtype=like.dtype, device=like.device)
    return shaped


def forward_sample(x0: ArrayLike, t, eps: ArrayLike, sched: NoiseSchedule) -> ArrayLike:
    """Closed-form forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    `t` may be a single timestep in [1, T] or a per-sample array whose
    length matches the leading (batch) dimension of x0.
    """
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise ValueError(
            f"shape mismatch: x0 {np.shape(x0)} vs eps {np.shape(eps)}"
        )
    ab = sched.alpha_bar(t)
    if np.ndim(ab) == 0:
        if int(t) == 0:
            raise ValueError("timestep 0 is the clean image; expected t >= 1")
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    if len(ab) != np.shape(x0)[0]:
        raise ValueError("per-sample t length must equal the batch size")
    if np.min(np.asarray(t)) < 1:
        raise ValueError("timesteps must be >= 1")
    sa = _per_sample_coeff(np.sqrt(ab), x0)
    sb = _per_sample_coeff(np.sqrt(1.0 - ab), x0)
    return sa * x0 + sb * eps


def snr(sched: NoiseSchedule, t: int) -> float:
    """Signal-to-noise ratio abar_t / (1 - abar_t) at timestep t."""
    sched._check_t(int(t))
    ab = sched.alpha_bar(int(t))
    return ab / (1.0 - ab)


def min_snr_weight(sched: NoiseSchedule, t: int, gamma: float) -> float:
    """Min-SNR loss weight min(SNR_t, gamma) / SNR_t, in (0, 1]."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    s = snr(sched, t)
    return min(s, gamma) / s


def noise_prediction_loss(
    eps_true: ArrayLike,
    eps_pred: ArrayLike,
    weights: Optional[Sequence[float]] = None,
) -> Union[float, torch.Tensor]:
    """MSE between true and predicted noise.

    Unweighted: mean of squared differences over all elements. Weighted:
    each sample's MSE is multiplied by its weight before averaging over
    the batch (one weight per leading-dimension sample).
    """
    if tuple(np.shape(eps_true)) != tuple(np.shape(eps_pred)):
        raise ValueError(
            f"shape mismatch: {np.shape(eps_true)} vs {np.shape(eps_pred)}"
        )
    diff = (eps_pred - eps_true) ** 2
    if weights is None:
        return diff.mean()
    batch = np.shape(diff)[0]
    if len(weights) != batch:
        raise ValueError("weights length must equal the batch size")
    per_sample = diff.reshape(batch, -1).mean(1)
    w = _per_sample_coeff(np.asarray(weights), per_sample)
    return (per_sample * w.reshape(-1)).mean()
