"""Noise-prediction U-Net: 2D architecture in the improved-DDPM style
(residual blocks with timestep embedding, self-attention at the 16x16
feature resolution) plus the pseudo-3D extension that adds a 1D
convolution along the slice axis after each 2D convolution.

Also owns conditioning-input assembly (noisy, voided, mask channel
stack) and the checkpoint format: torch weights next to a JSON sidecar
recording the architecture, diffusion config, normalization convention
and channel order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import DiffusionConfig
from .volume_io import SliceVolumeBatch  # noqa: F401  (slice-batch type lives with volume I/O)

__all__ = [
    "DenoiserSpec",
    "ConditioningBundle",
    "SliceVolumeBatch",
    "UNetDenoiser",
    "build_denoiser",
    "predict_noise",
    "make_conditioning_input",
    "save_checkpoint",
    "load_checkpoint",
    "VOID_VALUE",
    "CHANNEL_ORDER",
]

# Masked-out voxels are voided to the normalized background level.
VOID_VALUE = -1.0
CHANNEL_ORDER = ("noisy", "voided", "mask")
CHECKPOINT_FORMAT_VERSION = 1
Z_KERNEL_SIZE = 3


@dataclass(frozen=True)
class DenoiserSpec:
    """U-Net architecture description.

    The full-size model uses six feature-map resolutions with
    (128, 128, 256, 256, 512, 512) channels, two residual blocks per
    stage and self-attention at the 16x16 resolution. in_channels is 1
    for unconditional models and 3 for conditional ones.
    """

    image_size: int = 256
    channels_per_stage: Tuple[int, ...] = (128, 128, 256, 256, 512, 512)
    res_blocks_per_stage: int = 2
    attention_resolution: int = 16
    in_channels: int = 1
    out_channels: int = 1
    pseudo3d: bool = False
    time_embed_dim: int = 256

    @property
    def num_resolutions(self) -> int:
        return len(self.channels_per_stage)

    def validate(self) -> None:
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 (unconditional) or 3 (conditional)")
        if self.num_resolutions < 1:
            raise ValueError("need at least one resolution stage")
        down_factor = 2 ** (self.num_resolutions - 1)
        if self.image_size % down_factor != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by 2^{self.num_resolutions - 1}"
            )

    def attention_stages(self) -> Tuple[int, ...]:
        return tuple(
            s
            for s in range(self.num_resolutions)
            if self.image_size // (2**s) == self.attention_resolution
        )

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels_per_stage": list(self.channels_per_stage),
            "res_blocks_per_stage": self.res_blocks_per_stage,
            "attention_resolution": self.attention_resolution,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "pseudo3d": self.pseudo3d,
            "time_embed_dim": self.time_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        d = dict(d)
        d["channels_per_stage"] = tuple(d["channels_per_stage"])
        return cls(**d)


@dataclass(frozen=True)
class ConditioningBundle:
    """(noisy, voided, mask) channel triple for the conditional model."""

    noisy: torch.Tensor
    voided: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if not (self.noisy.shape == self.voided.shape == self.mask.shape):
            raise ValueError("bundle channels must share shape")

    def stacked(self) -> torch.Tensor:
        """Channel concatenation in the fixed (noisy, voided, mask) order."""
        return torch.cat([self.noisy, self.voided, self.mask], dim=-3)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(32, channels), channels)


class SinusoidalTimeEmbedding(nn.Module):
    """Standard transformer-style sinusoidal embedding of the timestep."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
        )
        angles = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ZConv(nn.Module):
    """1D convolution along the slice (z) axis of a (Z, C, H, W) batch.

    The batch dimension is treated as the slice stack of one volume;
    boundaries are zero-padded.
    """

    def __init__(self, channels: int, kernel_size: int = Z_KERNEL_SIZE):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z, c, h, w = x.shape
        seq = x.permute(2, 3, 1, 0).reshape(h * w, c, z)
        seq = self.conv(seq)
        return seq.reshape(h, w, c, z).permute(3, 2, 0, 1)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, pseudo3d: bool):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.zconv1 = ZConv(out_ch) if pseudo3d else None
        self.zconv2 = ZConv(out_ch) if pseudo3d else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.zconv1 is not None:
            h = self.zconv1(h)
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        if self.zconv2 is not None:
            h = self.zconv2(h)
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, num_heads: int = 4):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError("channels must divide evenly into heads")
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.num_heads = num_heads

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.num_heads, c // self.num_heads, h * w)
        q, k, v = qkv.unbind(dim=1)
        attn = torch.softmax(q.transpose(-2, -1) @ k / math.sqrt(c // self.num_heads), dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class UNetDenoiser(nn.Module):
    """Noise predictor eps_theta(x, t) with per-stage skip connections."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        chans = spec.channels_per_stage
        time_dim = spec.time_embed_dim
        attn_stages = set(spec.attention_stages())

        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(time_dim),
            nn.Linear(time_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv2d(spec.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        in_ch = chans[0]
        for s, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(spec.res_blocks_per_stage):
                blocks.append(ResidualBlock(in_ch, ch, time_dim, spec.pseudo3d))
                if s in attn_stages:
                    blocks.append(AttentionBlock(ch))
                in_ch = ch
            self.down_blocks.append(blocks)
            self.downsamplers.append(
                nn.Conv2d(ch, ch, 3, stride=2, padding=1) if s < len(chans) - 1 else None
            )

        mid_ch = chans[-1]
        self.mid_block1 = ResidualBlock(mid_ch, mid_ch, time_dim, spec.pseudo3d)
        self.mid_attn = AttentionBlock(mid_ch)
        self.mid_block2 = ResidualBlock(mid_ch, mid_ch, time_dim, spec.pseudo3d)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        in_ch = mid_ch
        for s in reversed(range(len(chans))):
            ch = chans[s]
            blocks = nn.ModuleList()
            for i in range(spec.res_blocks_per_stage):
                block_in = in_ch + ch if i == 0 else ch  # skip concat on entry
                blocks.append(ResidualBlock(block_in, ch, time_dim, spec.pseudo3d))
                if s in attn_stages:
                    blocks.append(AttentionBlock(ch))
            self.up_blocks.append(blocks)
            self.upsamplers.append(nn.Conv2d(ch, ch, 3, padding=1) if s > 0 else None)
            in_ch = ch

        self.out_norm = _norm(chans[0])
        self.out_conv = nn.Conv2d(chans[0], spec.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}"
            )
        if np.ndim(t) == 0:
            t = torch.full((x.shape[0],), float(t), device=x.device)
        elif not isinstance(t, torch.Tensor):
            t = torch.as_tensor(np.asarray(t), dtype=torch.float32, device=x.device)
        temb = self.time_embed(t)

        h = self.stem(x)
        skips = []
        for blocks, down in zip(self.down_blocks, self.downsamplers):
            for block in blocks:
                h = block(h, temb) if isinstance(block, ResidualBlock) else block(h)
            skips.append(h)
            if down is not None:
                h = down(h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for blocks, up in zip(self.up_blocks, self.upsamplers):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, temb) if isinstance(block, ResidualBlock) else block(h)
            if up is not None:
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))


def build_denoiser(spec: DenoiserSpec, seed: Optional[int] = None) -> UNetDenoiser:
    """Construct the U-Net; parameter init is deterministic given a seed."""
    if seed is not None:
        torch.manual_seed(seed)
    return UNetDenoiser(spec)


def predict_noise(denoiser: UNetDenoiser, x: torch.Tensor, t) -> torch.Tensor:
    """Run the noise predictor and fail loudly on divergence."""
    out = denoiser(x, t)
    if not torch.isfinite(out).all():
        raise FloatingPointError("denoiser produced non-finite output")
    return out


def make_conditioning_input(
    x_t: torch.Tensor,
    ground_truth: torch.Tensor,
    mask: torch.Tensor,
    void_value: float = VOID_VALUE,
) -> ConditioningBundle:
    """Assemble the conditional input: the voided channel equals the
    ground truth outside the mask and `void_value` inside it."""
    if not (x_t.shape == ground_truth.shape == mask.shape):
        raise ValueError(
            f"shape mismatch: {tuple(x_t.shape)}, {tuple(ground_truth.shape)}, "
            f"{tuple(mask.shape)}"
        )
    mask = mask.to(x_t.dtype)
    voided = torch.where(mask > 0.5, torch.full_like(ground_truth, void_value), ground_truth)
    return ConditioningBundle(noisy=x_t, voided=voided, mask=mask)


def save_checkpoint(
    path: Union[str, Path],
    model: UNetDenoiser,
    diffusion_cfg: DiffusionConfig,
    extra: Optional[dict] = None,
) -> Path:
    """Write model weights plus a JSON sidecar; both writes are atomic."""
    path = Path(path)
    sidecar = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "denoiser_spec": model.spec.to_dict(),
        "diffusion_config": diffusion_cfg.to_dict(),
        "normalization": {"target_range": [-1.0, 1.0], "void_value": VOID_VALUE},
        "channel_order": list(CHANNEL_ORDER),
    }
    if extra:
        sidecar["extra"] = extra
    tmp = path.with_name(path.name + ".tmp")
    torch.save(model.state_dict(), tmp)
    tmp.replace(path)
    side_path = path.with_suffix(path.suffix + ".json")
    side_tmp = side_path.with_name(side_path.name + ".tmp")
    side_tmp.write_text(json.dumps(sidecar, indent=2))
    side_tmp.replace(side_path)
    return path


def load_checkpoint(
    path: Union[str, Path],
    expected_in_channels: Optional[int] = None,
) -> Tuple[UNetDenoiser, DiffusionConfig, dict]:
    """Load a checkpoint, rebuilding the model from its sidecar.

    The sidecar is validated against the requested configuration before
    any weights are touched.
    """
    path = Path(path)
    side_path = path.with_suffix(path.suffix + ".json")
    if not side_path.exists():
        raise FileNotFoundError(f"missing checkpoint sidecar {side_path}")
    sidecar = json.loads(side_path.read_text())
    if sidecar.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {sidecar.get('format_version')}")
    if sidecar.get("channel_order") != list(CHANNEL_ORDER):
        raise ValueError("checkpoint channel order does not match this toolkit")
    spec = DenoiserSpec.from_dict(sidecar["denoiser_spec"])
    if expected_in_channels is not None and spec.in_channels != expected_in_channels:
        raise ValueError(
            f"checkpoint has in_channels={spec.in_channels}, "
            f"expected {expected_in_channels} for the requested sampler mode"
        )
    model = UNetDenoiser(spec)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    cfg = DiffusionConfig.from_dict(sidecar["diffusion_config"])
    return model, cfg, sidecar
