"""Training loop for conditional and unconditional noise predictors:
per-step mask/timestep/noise sampling, AdamW with cosine LR schedule and
warmup, periodic validation via full inpainting, and best-SSIM
checkpointing (inside-mask SSIM, strict improvement).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .denoiser import UNetDenoiser, make_conditioning_input, save_checkpoint
from .diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    forward_sample,
    min_snr_weight,
    noise_prediction_loss,
)
from .maskgen import MaskDraw
from .metrics import MetricsReport, compute_slice_metrics
from .samplers import SamplerConfig, sample_inpaint

__all__ = [
    "TrainConfig",
    "CheckpointRecord",
    "conditional_training_loss",
    "unconditional_training_loss",
    "training_step_conditional",
    "training_step_unconditional",
    "validate",
    "maybe_checkpoint",
    "train",
]


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the reference setup
    (batch 16, AdamW at 1e-4, cosine schedule with 500 warmup steps).

    Min-SNR weighting is off by default.
    """

    steps: int = 10000
    batch_size: int = 16
    learning_rate: float = 1e-4
    warmup_steps: int = 500
    eval_interval: int = 500
    mask_policy: str = "mixture"  # "lesions" | "circles" | "mixture"
    conditional: bool = True
    min_snr_gamma: Optional[float] = None
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.eval_interval < 1:
            raise ValueError("steps and eval_interval must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.conditional and self.mask_policy not in ("lesions", "circles", "mixture"):
            raise ValueError(f"unknown mask policy {self.mask_policy!r}")


@dataclass
class CheckpointRecord:
    step: int
    masked_ssim: float
    path: Optional[Path] = None


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)


def make_lr_schedule(
    optimizer: torch.optim.Optimizer, cfg: TrainConfig
) -> torch.optim.lr_scheduler.LambdaLR:
    """Linear warmup over `warmup_steps`, then cosine decay to zero."""

    def factor(step: int) -> float:
        if step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        span = max(1, cfg.steps - cfg.warmup_steps)
        progress = min(1.0, (step - cfg.warmup_steps) / span)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def _draw_batch_noise(
    shape: Tuple[int, ...], T: int, rng: np.random.Generator
) -> Tuple[np.ndarray, torch.Tensor]:
    t = rng.integers(1, T + 1, size=shape[0])
    eps = torch.as_tensor(rng.standard_normal(shape).astype(np.float32))
    return t, eps


def _snr_weights(sched: NoiseSchedule, t: np.ndarray, gamma: float) -> List[float]:
    return [min_snr_weight(sched, int(ti), gamma) for ti in t]


def conditional_training_loss(
    images: torch.Tensor,
    masks: torch.Tensor,
    t: np.ndarray,
    eps: torch.Tensor,
    model: Callable[[torch.Tensor, np.ndarray], torch.Tensor],
    sched: NoiseSchedule,
    min_snr_gamma: Optional[float] = None,
) -> torch.Tensor:
    """Inpainting loss for given (mask, t, eps) draws: noise the images,
    stack (noisy, voided, mask) and compare predicted vs true noise."""
    x_t = forward_sample(images, t, eps, sched)
    bundle = make_conditioning_input(x_t, images, masks)
    pred = model(bundle.stacked(), t)
    weights = _snr_weights(sched, t, min_snr_gamma) if min_snr_gamma else None
    return noise_prediction_loss(eps, pred, weights)


def unconditional_training_loss(
    images: torch.Tensor,
    t: np.ndarray,
    eps: torch.Tensor,
    model: Callable[[torch.Tensor, np.ndarray], torch.Tensor],
    sched: NoiseSchedule,
    min_snr_gamma: Optional[float] = None,
) -> torch.Tensor:
    x_t = forward_sample(images, t, eps, sched)
    pred = model(x_t, t)
    weights = _snr_weights(sched, t, min_snr_gamma) if min_snr_gamma else None
    return noise_prediction_loss(eps, pred, weights)


def _apply_update(
    loss: torch.Tensor,
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer],
    grad_clip: float,
    lr_schedule=None,
) -> None:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"training diverged: loss={float(loss)}")
    if optimizer is None:
        return
    optimizer.zero_grad()
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    if lr_schedule is not None:
        lr_schedule.step()


def training_step_conditional(
    batch: torch.Tensor,
    model: torch.nn.Module,
    sched: NoiseSchedule,
    mask_source: Callable[[Tuple[int, ...], np.random.Generator], MaskDraw],
    rng: np.random.Generator,
    optimizer: Optional[torch.optim.Optimizer] = None,
    min_snr_gamma: Optional[float] = None,
    grad_clip: float = 1.0,
    lr_schedule=None,
) -> Tuple[float, List[dict]]:
    """One conditional step: per-sample mask/t/eps draws, loss, one
    optimizer update. Returns the loss and per-sample mask provenance."""
    draws = [mask_source(tuple(batch.shape[-2:]), rng) for _ in range(batch.shape[0])]
    masks = torch.as_tensor(
        np.stack([d.mask for d in draws])[:, None].astype(np.float32)
    )
    t, eps = _draw_batch_noise(tuple(batch.shape), sched.num_steps, rng)
    loss = conditional_training_loss(batch, masks, t, eps, model, sched, min_snr_gamma)
    _apply_update(loss, model, optimizer, grad_clip, lr_schedule)
    return float(loss.detach()), [d.provenance() for d in draws]


def training_step_unconditional(
    batch: torch.Tensor,
    model: torch.nn.Module,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    optimizer: Optional[torch.optim.Optimizer] = None,
    min_snr_gamma: Optional[float] = None,
    grad_clip: float = 1.0,
    lr_schedule=None,
) -> float:
    t, eps = _draw_batch_noise(tuple(batch.shape), sched.num_steps, rng)
    loss = unconditional_training_loss(batch, t, eps, model, sched, min_snr_gamma)
    _apply_update(loss, model, optimizer, grad_clip, lr_schedule)
    return float(loss.detach())


def validate(
    model: Callable,
    val_set: Sequence[Tuple[np.ndarray, np.ndarray]],
    sched: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    seed: int = 0,
) -> MetricsReport:
    """Inpaint every (image, mask) validation pair and compute per-slice
    region metrics. Images/masks are 2D arrays in [-1, 1] / {0, 1}."""
    if len(val_set) == 0:
        raise ValueError("empty validation set")
    report = MetricsReport()
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        for i, (image, mask) in enumerate(val_set):
            image = np.asarray(image, dtype=np.float32)
            mask = np.asarray(mask, dtype=np.float32)
            x = image[None, None]
            m = mask[None, None]
            voided = np.where(m > 0.5, -1.0, x).astype(np.float32)
            filled = sample_inpaint(model, sampler_cfg, x, m, voided, sched,
                                    rng_seed=seed + i)
            report.add_slice(compute_slice_metrics(filled[0, 0], image, mask))
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    return report


def maybe_checkpoint(
    history: List[CheckpointRecord],
    report: MetricsReport,
    step: int,
    model: Optional[UNetDenoiser] = None,
    diffusion_cfg: Optional[DiffusionConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Optional[CheckpointRecord]:
    """Save a checkpoint iff the inside-mask SSIM strictly beats the best
    so far. When a model is given, the weight file is written atomically."""
    ssim = report.mean("inside_mask", "ssim")
    if ssim is None:
        raise ValueError("report carries no inside-mask SSIM")
    best = max((r.masked_ssim for r in history), default=-math.inf)
    if ssim <= best:
        return None
    record = CheckpointRecord(step=step, masked_ssim=float(ssim))
    if model is not None:
        out_dir = Path(out_dir or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        record.path = save_checkpoint(
            out_dir / "best.pt",
            model,
            diffusion_cfg or DiffusionConfig(),
            extra={"step": step, "inside_mask_ssim": float(ssim)},
        )
    history.append(record)
    return record


def train(
    cfg: TrainConfig,
    train_images: np.ndarray,
    val_set: Sequence[Tuple[np.ndarray, np.ndarray]],
    model: UNetDenoiser,
    sched: NoiseSchedule,
    diffusion_cfg: DiffusionConfig,
    sampler_cfg: SamplerConfig,
    mask_source: Optional[Callable] = None,
    out_dir: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> List[CheckpointRecord]:
    """Full training run over a stack of 2D images in [-1, 1].

    Streams per-step losses and validation metrics to a JSON-lines log
    and keeps the best-SSIM checkpoint in `out_dir`.
    """
    cfg.validate()
    if cfg.conditional and mask_source is None:
        raise ValueError("conditional training requires a mask source")
    rng = np.random.default_rng(cfg.seed)
    images = torch.as_tensor(np.asarray(train_images, dtype=np.float32))
    if images.ndim == 3:
        images = images[:, None]
    optimizer = make_optimizer(model, cfg)
    lr_schedule = make_lr_schedule(optimizer, cfg)
    history: List[CheckpointRecord] = []
    log_fh = open(log_path, "a") if log_path else None
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.integers(len(images), size=cfg.batch_size)
            batch = images[torch.as_tensor(idx)]
            if cfg.conditional:
                loss, provenance = training_step_conditional(
                    batch, model, sched, mask_source, rng, optimizer,
                    cfg.min_snr_gamma, cfg.grad_clip, lr_schedule,
                )
            else:
                loss = training_step_unconditional(
                    batch, model, sched, rng, optimizer,
                    cfg.min_snr_gamma, cfg.grad_clip, lr_schedule,
                )
                provenance = None
            entry = {"step": step, "loss": loss}
            if provenance:
                entry["mask_sources"] = [p["source"] for p in provenance]
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                report = validate(model, val_set, sched, sampler_cfg, seed=cfg.seed)
                entry["validation"] = report.summary()["aggregate"]
                maybe_checkpoint(history, report, step, model, diffusion_cfg, out_dir)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return history
