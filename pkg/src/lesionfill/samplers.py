"""Reverse-process sampling: DDPM ancestral steps, deterministic DDIM
steps, and the RePaint inpainting loop with jump/resample scheduling.

The step functions are pure arithmetic on numpy arrays or torch tensors.
`sample_inpaint` orchestrates a full inpainting run for a batch of 2D
slices and enforces exact preservation of the known region in the final
composite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .diffusion import NoiseSchedule, forward_sample

__all__ = [
    "SamplerConfig",
    "TimestepPlan",
    "ddpm_step",
    "make_ddim_timesteps",
    "ddim_step",
    "repaint_known_sample",
    "repaint_combine",
    "make_repaint_plan",
    "sample_inpaint",
]

ArrayLike = Union[np.ndarray, torch.Tensor]

SAMPLER_KINDS = ("ddpm", "ddim", "repaint")
SIGMA_MODES = ("beta", "posterior")


@dataclass(frozen=True)
class SamplerConfig:
    """Inference-time sampler settings.

    Defaults follow the reference setup: 50 DDIM inference steps for the
    conditional model, jump length 8 with 10 resamplings for RePaint.
    """

    kind: str = "ddim"
    num_inference_steps: int = 50
    sigma_mode: str = "beta"
    jump_length: int = 8
    resample: int = 10

    def validate(self, num_train_steps: Optional[int] = None) -> None:
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be >= 1")
        if (
            self.kind != "repaint"  # RePaint runs on the full T-step schedule
            and num_train_steps is not None
            and self.num_inference_steps > num_train_steps
        ):
            raise ValueError("num_inference_steps must not exceed T")
        if self.kind == "repaint" and (self.jump_length < 1 or self.resample < 1):
            raise ValueError("repaint requires jump_length >= 1 and resample >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_inference_steps": self.num_inference_steps,
            "sigma_mode": self.sigma_mode,
            "jump_length": self.jump_length,
            "resample": self.resample,
        }


@dataclass(frozen=True)
class TimestepPlan:
    """Ordered (t_from, t_to) transitions; t_to < t_from denotes a denoise
    step, t_to > t_from a RePaint re-noising jump."""

    transitions: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if not self.transitions:
            raise ValueError("empty timestep plan")
        if self.transitions[-1][1] != 0:
            raise ValueError("plan must end at timestep 0")
        top = self.transitions[0][0]
        for t_from, t_to in self.transitions:
            if t_from == t_to or t_to > top or t_from > top:
                raise ValueError("invalid transition in plan")

    def __iter__(self):
        return iter(self.transitions)

    def __len__(self):
        return len(self.transitions)


def _check_shapes(*arrays: ArrayLike) -> None:
    shapes = {tuple(np.shape(a)) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _clip(x: ArrayLike, lo: float, hi: float) -> ArrayLike:
    if isinstance(x, torch.Tensor):
        return x.clamp(lo, hi)
    return np.clip(x, lo, hi)


def clip_eps_to_x0_range(
    x_t: ArrayLike,
    t: int,
    eps_pred: ArrayLike,
    sched: NoiseSchedule,
    lo: float = -1.0,
    hi: float = 1.0,
) -> ArrayLike:
    """Adjust a noise prediction so the implied x0 lies in [lo, hi].

    Equivalent to the usual clip-denoised trick, expressed on the noise
    estimate so the pure step functions stay unchanged.
    """
    ab = sched.alpha_bar(t)
    x0_pred = (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)
    x0_pred = _clip(x0_pred, lo, hi)
    return (x_t - math.sqrt(ab) * x0_pred) / math.sqrt(1.0 - ab)


def sigma_t(sched: NoiseSchedule, t: int, sigma_mode: str = "beta") -> float:
    """Fixed reverse-process standard deviation at timestep t."""
    if sigma_mode == "beta":
        var = sched.beta(t)
    elif sigma_mode == "posterior":
        ab_prev = sched.alpha_bar(t - 1)
        var = sched.beta(t) * (1.0 - ab_prev) / (1.0 - sched.alpha_bar(t))
    else:
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
    return math.sqrt(var)


def ddpm_step(
    x_t: ArrayLike,
    t: int,
    eps_pred: ArrayLike,
    sched: NoiseSchedule,
    z: Optional[ArrayLike] = None,
    sigma_mode: str = "beta",
) -> ArrayLike:
    """One ancestral reverse step:

        x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_pred) / sqrt(alpha_t)
                  + sigma_t * z

    z must be zero (or None) at t=1; no noise is added on the final step.
    """
    _check_shapes(x_t, eps_pred)
    alpha = sched.alpha(t)
    ab = sched.alpha_bar(t)
    mean = (x_t - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    _check_shapes(x_t, z)
    return mean + sigma_t(sched, t, sigma_mode) * z


def make_ddim_timesteps(T: int, n: int) -> List[int]:
    """Evenly strided decreasing DDIM timesteps anchored at T.

    Uses stride floor(T / n): for T=1000, n=50 this yields
    1000, 980, ..., 20. The sampling loop appends the final transition
    to 0 (with the abar_0 = 1 convention).
    """
    if not (1 <= n <= T):
        raise ValueError(f"n must lie in [1, {T}], got {n}")
    stride = T // n
    return [T - k * stride for k in range(n)]


def ddim_step(
    x_t: ArrayLike,
    t: int,
    t_prev: int,
    eps_pred: ArrayLike,
    sched: NoiseSchedule,
    clip_x0: Optional[Tuple[float, float]] = None,
) -> ArrayLike:
    """Deterministic DDIM step (eta = 0) from t to t_prev < t.

    Predicts x0 from the noise estimate and re-noises it to the target
    timestep with the same estimate; abar_0 := 1 handles t_prev = 0.
    `clip_x0` optionally clamps the x0 prediction to the data range
    (stabilizes sampling with an imperfect noise predictor).
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    _check_shapes(x_t, eps_pred)
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_pred = (x_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    if clip_x0 is not None:
        x0_pred = _clip(x0_pred, *clip_x0)
    return math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps_pred


def repaint_known_sample(
    x0: ArrayLike, t: int, sched: NoiseSchedule, eps: ArrayLike
) -> ArrayLike:
    """Known-region sample at timestep t: identical math to the forward
    process, exposed separately to mirror the RePaint construction."""
    return forward_sample(x0, t, eps, sched)


def repaint_combine(x_known: ArrayLike, x_unknown: ArrayLike, m: ArrayLike) -> ArrayLike:
    """Elementwise composite: mask=1 selects the model sample, mask=0 the
    known-region sample."""
    _check_shapes(x_known, x_unknown, m)
    m_arr = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
    vals = np.unique(m_arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("mask must be binary")
    return x_unknown * m + x_known * (1 - m)


def make_repaint_plan(n_steps: int, j: int, r: int) -> TimestepPlan:
    """RePaint timestep plan with jump length j and r resamplings.

    Descends one step at a time from n_steps to 0. Each time the
    trajectory first reaches a timestep t with (n_steps - t) divisible by
    j (including t = 0), it performs r-1 resampling rounds: a single
    re-noising jump of j steps up (truncated at n_steps) followed by a
    one-step re-descent back to t.
    """
    if j < 1 or r < 1:
        raise ValueError("jump length and resample count must be >= 1")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    transitions: List[Tuple[int, int]] = []
    t = n_steps
    while True:
        if t < n_steps and (n_steps - t) % j == 0:
            for _ in range(r - 1):
                up = min(t + j, n_steps)
                transitions.append((t, up))
                for s in range(up, t, -1):
                    transitions.append((s, s - 1))
        if t == 0:
            break
        transitions.append((t, t - 1))
        t -= 1
    return TimestepPlan(tuple(transitions))


def _to_torch(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float32)
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def _noise_like(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    return torch.as_tensor(
        rng.standard_normal(tuple(x.shape)).astype(np.float32)
    )


def _renoise(
    x: torch.Tensor,
    t_from: int,
    t_to: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Composed forward transition q(x_{t_to} | x_{t_from}) for t_to > t_from."""
    ratio = sched.alpha_bar(t_to) / sched.alpha_bar(t_from)
    return math.sqrt(ratio) * x + math.sqrt(1.0 - ratio) * _noise_like(x, rng)


def sample_inpaint(
    denoiser: Callable[[torch.Tensor, int], torch.Tensor],
    mode: SamplerConfig,
    x_original: ArrayLike,
    mask: ArrayLike,
    voided_image: ArrayLike,
    sched: NoiseSchedule,
    rng_seed: int = 0,
) -> ArrayLike:
    """Inpaint the masked region of a batch of 2D slices.

    For "ddim" and "ddpm" the denoiser is conditional and receives the
    (noisy, voided, mask) channel stack; for "repaint" it is an
    unconditional single-channel model. In every mode the known region
    of the latent is re-anchored to the forward-diffused original at
    each step. The final composite copies every voxel outside the mask
    from `x_original` bitwise, so the output is exactly the input
    wherever the mask is zero.
    """
    mode.validate(sched.num_steps)
    _check_shapes(x_original, mask, voided_image)
    rng = np.random.default_rng(rng_seed)
    x_orig_t = _to_torch(x_original)
    mask_t = _to_torch(mask)
    voided_t = _to_torch(voided_image)
    T = sched.num_steps

    with torch.no_grad():
        x = _noise_like(x_orig_t, rng)
        if mode.kind in ("ddim", "ddpm"):
            def predict(x_t: torch.Tensor, t: int) -> torch.Tensor:
                stacked = torch.cat([x_t, voided_t, mask_t], dim=-3)
                return denoiser(stacked, t)

            def anchor(x_t: torch.Tensor, t: int) -> torch.Tensor:
                # Re-anchor the known region of the latent to the
                # forward-diffused original before each prediction; the
                # conditioning channels alone leave the trajectory free
                # to drift away from the true surroundings.
                x_known = repaint_known_sample(
                    x_orig_t, t, sched, _noise_like(x_orig_t, rng)
                )
                return repaint_combine(x_known, x_t, mask_t)

            if mode.kind == "ddim":
                steps = make_ddim_timesteps(T, mode.num_inference_steps)
                for i, t in enumerate(steps):
                    t_prev = steps[i + 1] if i + 1 < len(steps) else 0
                    x = anchor(x, t)
                    x = ddim_step(x, t, t_prev, predict(x, t), sched,
                                  clip_x0=(-1.0, 1.0))
            else:
                for t in range(T, 0, -1):
                    x = anchor(x, t)
                    eps_pred = clip_eps_to_x0_range(x, t, predict(x, t), sched)
                    z = _noise_like(x, rng) if t > 1 else None
                    x = ddpm_step(x, t, eps_pred, sched, z, mode.sigma_mode)
        elif mode.kind == "repaint":
            plan = make_repaint_plan(T, mode.jump_length, mode.resample)
            for t_from, t_to in plan:
                if t_to > t_from:
                    x = _renoise(x, t_from, t_to, sched, rng)
                    continue
                eps_pred = clip_eps_to_x0_range(x, t_from, denoiser(x, t_from), sched)
                z = _noise_like(x, rng) if t_from > 1 else None
                x_unknown = ddpm_step(x, t_from, eps_pred, sched, z, mode.sigma_mode)
                if t_to >= 1:
                    x_known = repaint_known_sample(
                        x_orig_t, t_to, sched, _noise_like(x_orig_t, rng)
                    )
                else:
                    x_known = x_orig_t
                x = repaint_combine(x_known, x_unknown, mask_t)
        else:  # pragma: no cover - guarded by validate()
            raise ValueError(f"unknown mode {mode.kind!r}")

    # Final composite: the known region is copied from the input bitwise.
    if isinstance(x_original, torch.Tensor):
        keep = _to_torch(mask) > 0.5
        return torch.where(keep.to(torch.bool), x.to(x_original.dtype), x_original)
    x_np = x.cpu().numpy().astype(np.asarray(x_original).dtype)
    return np.where(np.asarray(mask) > 0.5, x_np, np.asarray(x_original))
