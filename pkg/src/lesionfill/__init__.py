"""Diffusion-based white-matter lesion filling for 3D T1w brain MRI,
plus a harness quantifying how filling perturbs cortical-thickness
measurements from external morphometry tools."""

from .diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    build_schedule,
    forward_sample,
    min_snr_weight,
    noise_prediction_loss,
    snr,
)
from .samplers import (
    SamplerConfig,
    TimestepPlan,
    ddim_step,
    ddpm_step,
    make_ddim_timesteps,
    make_repaint_plan,
    repaint_combine,
    repaint_known_sample,
    sample_inpaint,
)

__version__ = "0.1.0"
