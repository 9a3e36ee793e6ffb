"""Region-aware image-quality metrics (MSE, PSNR, SSIM) used for
validation and model selection, computed inside the mask, outside the
mask, and over the full image.

SSIM follows Wang et al. (2004) with the standard constants: 11x11
Gaussian window with sigma 1.5, k1=0.01, k2=0.03. The SSIM map is
averaged over pixels whose window center lies in the requested region,
restricted to the interior where the window fully overlaps the image.
An optional LPIPS provider can be plugged in for full-image perceptual
distance; none is bundled.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "RegionMetrics",
    "MetricsReport",
    "mse_region",
    "psnr_region",
    "ssim_region",
    "compute_slice_metrics",
    "compute_report",
]

REGIONS = ("inside_mask", "outside_mask", "full")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 2.0  # images normalized to [-1, 1]


def _region_indices(x: np.ndarray, region_mask: Optional[np.ndarray]) -> np.ndarray:
    if region_mask is None:
        return np.ones(x.shape, dtype=bool)
    region = np.asarray(region_mask)
    if region.shape != x.shape:
        raise ValueError(f"region shape {region.shape} != image shape {x.shape}")
    return region > 0.5


def mse_region(x: np.ndarray, y: np.ndarray, region_mask: Optional[np.ndarray] = None) -> float:
    """Mean squared difference over the region voxels only."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    sel = _region_indices(x, region_mask)
    if not sel.any():
        raise ValueError("empty region")
    return float(((x[sel] - y[sel]) ** 2).mean())


def psnr_region(
    x: np.ndarray,
    y: np.ndarray,
    region_mask: Optional[np.ndarray] = None,
    data_range: float = DATA_RANGE,
) -> float:
    """PSNR in dB over the region; +inf when the region MSE is zero."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = mse_region(x, y, region_mask)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_taps(window: int, sigma: float) -> np.ndarray:
    radius = (window - 1) // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def _ssim_map(x: np.ndarray, y: np.ndarray, window: int, sigma: float,
              k1: float, k2: float, data_range: float) -> np.ndarray:
    taps = _gaussian_taps(window, sigma)

    def filt(im: np.ndarray) -> np.ndarray:
        out = im
        for axis in range(im.ndim):
            out = correlate1d(out, taps, axis=axis, mode="reflect")
        return out

    ux, uy = filt(x), filt(y)
    vx = filt(x * x) - ux * ux
    vy = filt(y * y) - uy * uy
    vxy = filt(x * y) - ux * uy
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    return ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )


def ssim_region(
    x: np.ndarray,
    y: np.ndarray,
    region_mask: Optional[np.ndarray] = None,
    window: int = SSIM_WINDOW,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
    data_range: float = DATA_RANGE,
    sigma: float = SSIM_SIGMA,
) -> float:
    """Mean SSIM over map pixels whose window center lies in the region.

    Only the interior (full window overlap) is evaluated; if the region
    does not intersect the interior a warning is emitted and the mean
    falls back to the region pixels of the reflect-padded map.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"window {window} does not fit image of shape {x.shape}")
    sel = _region_indices(x, region_mask)
    if not sel.any():
        raise ValueError("empty region")
    smap = _ssim_map(x, y, window, sigma, k1, k2, data_range)
    pad = (window - 1) // 2
    interior = np.zeros(x.shape, dtype=bool)
    interior[tuple(slice(pad, s - pad) for s in x.shape)] = True
    chosen = sel & interior
    if not chosen.any():
        warnings.warn(
            "region has no full-window pixels; falling back to the padded SSIM map",
            RuntimeWarning,
        )
        chosen = sel
    return float(smap[chosen].mean())


@dataclass
class RegionMetrics:
    mse: float
    psnr: float
    ssim: float
    pixel_count: int

    def to_dict(self) -> dict:
        psnr = self.psnr if math.isfinite(self.psnr) else "inf"
        return {"mse": self.mse, "psnr": psnr, "ssim": self.ssim,
                "pixel_count": self.pixel_count}


def compute_slice_metrics(
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray,
    data_range: float = DATA_RANGE,
) -> Dict[str, Optional[RegionMetrics]]:
    """Per-region metrics for one 2D slice pair.

    Regions with no pixels are reported as absent (None), never as zero.
    """
    mask_sel = np.asarray(mask) > 0.5
    out: Dict[str, Optional[RegionMetrics]] = {}
    for name, region in (
        ("inside_mask", mask_sel),
        ("outside_mask", ~mask_sel),
        ("full", np.ones_like(mask_sel)),
    ):
        if not region.any():
            out[name] = None
            continue
        out[name] = RegionMetrics(
            mse=mse_region(x, y, region),
            psnr=psnr_region(x, y, region, data_range),
            ssim=ssim_region(x, y, region, data_range=data_range),
            pixel_count=int(region.sum()),
        )
    return out


@dataclass
class MetricsReport:
    """Per-slice metrics plus aggregate means over evaluated slices."""

    per_slice: List[Dict[str, Optional[RegionMetrics]]] = field(default_factory=list)
    lpips: Optional[float] = None
    lpips_absent_reason: Optional[str] = None

    def add_slice(self, metrics: Dict[str, Optional[RegionMetrics]]) -> None:
        self.per_slice.append(metrics)

    def mean(self, region: str, metric: str) -> Optional[float]:
        values = [
            getattr(m[region], metric)
            for m in self.per_slice
            if m.get(region) is not None
        ]
        finite = [v for v in values if math.isfinite(v)]
        if not values:
            return None
        if not finite:
            return math.inf
        return float(np.mean(finite))

    def summary(self) -> dict:
        agg = {}
        for region in REGIONS:
            entry = {m: self.mean(region, m) for m in ("mse", "psnr", "ssim")}
            if entry["psnr"] is not None and math.isinf(entry["psnr"]):
                entry["psnr"] = "inf"
            agg[region] = entry
        out = {"num_slices": len(self.per_slice), "aggregate": agg}
        if self.lpips is not None:
            out["lpips"] = self.lpips
        elif self.lpips_absent_reason is not None:
            out["lpips_absent_reason"] = self.lpips_absent_reason
        return out

    def to_json(self) -> str:
        payload = self.summary()
        payload["per_slice"] = [
            {k: (v.to_dict() if v is not None else None) for k, v in m.items()}
            for m in self.per_slice
        ]
        return json.dumps(payload, indent=2)

    def write_csv(self, path) -> None:
        """Per-slice table: one row per (slice, region)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slice", "region", "mse", "psnr", "ssim", "pixel_count"])
            for i, m in enumerate(self.per_slice):
                for region in REGIONS:
                    rm = m.get(region)
                    if rm is None:
                        continue
                    writer.writerow([i, region, rm.mse, rm.psnr, rm.ssim, rm.pixel_count])


def compute_report(
    x_slices: np.ndarray,
    y_slices: np.ndarray,
    mask_slices: np.ndarray,
    lpips_fn: Optional[Callable[[np.ndarray, np.ndarray], float]] = None,
) -> MetricsReport:
    """Metrics report over a stack of 2D slices (leading axis = slice)."""
    x_slices = np.asarray(x_slices)
    if x_slices.shape != np.shape(y_slices) or x_slices.shape != np.shape(mask_slices):
        raise ValueError("slice stacks must share shape")
    report = MetricsReport()
    for x, y, m in zip(x_slices, np.asarray(y_slices), np.asarray(mask_slices)):
        report.add_slice(compute_slice_metrics(x, y, m))
    if lpips_fn is not None:
        report.lpips = float(
            np.mean([lpips_fn(x, y) for x, y in zip(x_slices, np.asarray(y_slices))])
        )
    else:
        report.lpips_absent_reason = "no LPIPS provider configured"
    return report
