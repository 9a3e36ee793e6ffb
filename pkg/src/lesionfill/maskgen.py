"""Training/inference mask machinery: random circle masks, connected-
component subsampling of real lesion masks, white-matter restriction,
one-voxel WM-restricted dilation, and the lesion/circle mixture policy.

Masks are plain numpy arrays with values in {0, 1} (dtype uint8), 2D or
3D, aligned to their parent image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

__all__ = [
    "CircleMaskParams",
    "ComponentSet",
    "MaskDraw",
    "as_binary_mask",
    "random_circle_mask",
    "restrict_to_wm",
    "connected_components",
    "sample_component_subset",
    "dilate_one_voxel_wm",
    "mixture_mask_source",
]


def as_binary_mask(arr: np.ndarray) -> np.ndarray:
    """Validate and canonicalize a {0,1} mask to uint8."""
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("mask must contain only 0/1 values")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class CircleMaskParams:
    """Random-circle mask parameters.

    Defaults span typical lesion cross-sections at 1 mm resolution:
    1-4 circles with radii of 2-16 pixels, centered inside the placement
    region (typically the WM support).
    """

    num_circles: Tuple[int, int] = (1, 4)
    radius: Tuple[float, float] = (2.0, 16.0)

    def validate(self) -> None:
        n_min, n_max = self.num_circles
        r_min, r_max = self.radius
        if not (1 <= n_min <= n_max):
            raise ValueError("need 1 <= n_min <= n_max")
        if not (1 <= r_min <= r_max):
            raise ValueError("need 1 <= r_min <= r_max")


@dataclass(frozen=True)
class ComponentSet:
    """Maximal connected components of a binary mask.

    `labels` assigns component index i+1 to the voxels of component i;
    components are ordered lexicographically by their first voxel.
    """

    labels: np.ndarray
    sizes: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.sizes)

    def component(self, i: int) -> np.ndarray:
        if not (0 <= i < len(self.sizes)):
            raise IndexError(f"component index {i} out of range")
        return (self.labels == i + 1).astype(np.uint8)

    def union(self, indices: Sequence[int]) -> np.ndarray:
        out = np.zeros(self.labels.shape, dtype=np.uint8)
        for i in indices:
            out |= self.component(i)
        return out


def random_circle_mask(
    shape: Tuple[int, ...],
    params: CircleMaskParams,
    rng: np.random.Generator,
    placement_region: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Union of k filled disks (balls in 3D) with uniformly drawn centers
    and radii, clipped to the image bounds.

    Centers are drawn uniformly from the placement region; if no region
    is given the whole image is used.
    """
    params.validate()
    if placement_region is None:
        placement_region = np.ones(shape, dtype=np.uint8)
    placement_region = as_binary_mask(placement_region)
    if placement_region.shape != tuple(shape):
        raise ValueError("placement region shape must equal the mask shape")
    candidates = np.argwhere(placement_region)
    if len(candidates) == 0:
        raise ValueError("placement region is empty")

    n_min, n_max = params.num_circles
    r_min, r_max = params.radius
    k = int(rng.integers(n_min, n_max + 1))
    out = np.zeros(shape, dtype=np.uint8)
    for _ in range(k):
        center = candidates[rng.integers(len(candidates))]
        radius = float(rng.uniform(r_min, r_max))
        rad = int(np.floor(radius))
        lo = [max(0, c - rad) for c in center]
        hi = [min(s, c + rad + 1) for c, s in zip(center, shape)]
        grids = np.meshgrid(
            *[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"
        )
        dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        out[box] |= (dist2 <= radius**2).astype(np.uint8)
    return out


def restrict_to_wm(mask: np.ndarray, wm: np.ndarray) -> np.ndarray:
    """Elementwise AND of the mask with the WM support."""
    mask = as_binary_mask(mask)
    wm = as_binary_mask(wm)
    if mask.shape != wm.shape:
        raise ValueError(f"shape mismatch: {mask.shape} vs {wm.shape}")
    return mask & wm


def _structure(ndim: int, connectivity: int) -> np.ndarray:
    if connectivity not in range(1, ndim + 1):
        raise ValueError(f"connectivity must lie in [1, {ndim}]")
    return ndimage.generate_binary_structure(ndim, connectivity)


def connected_components(mask: np.ndarray, connectivity: Optional[int] = None) -> ComponentSet:
    """Label maximal connected components.

    Default connectivity is full (26-neighborhood in 3D, 8 in 2D), the
    common convention for blobby clinical lesions. Labels are reordered
    lexicographically by each component's first voxel in C order.
    """
    mask = as_binary_mask(mask)
    if connectivity is None:
        connectivity = mask.ndim
    labels, n = ndimage.label(mask, structure=_structure(mask.ndim, connectivity))
    if n == 0:
        return ComponentSet(labels=labels, sizes=())
    flat = labels.ravel()
    first_idx = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # first occurrence per label, scanning in C order
    lab_nz = flat[nz]
    order = np.argsort(lab_nz, kind="stable")
    uniq, starts = np.unique(lab_nz[order], return_index=True)
    first_idx[uniq] = nz[order][starts]
    rank = np.argsort(first_idx[1 : n + 1], kind="stable")
    remap = np.zeros(n + 1, dtype=labels.dtype)
    remap[1 + rank] = np.arange(1, n + 1)
    labels = remap[labels]
    sizes = tuple(int(s) for s in np.bincount(labels.ravel())[1:])
    return ComponentSet(labels=labels, sizes=sizes)


def sample_component_subset(cs: ComponentSet, rng: np.random.Generator) -> np.ndarray:
    """Draw a nonempty subset of components uniformly among all nonempty
    subsets and return its union as a mask."""
    n = len(cs)
    if n == 0:
        raise ValueError("component set is empty")
    while True:
        picks = rng.random(n) < 0.5
        if picks.any():
            break
    return cs.union(np.flatnonzero(picks))


def dilate_one_voxel_wm(mask: np.ndarray, wm: np.ndarray) -> np.ndarray:
    """One-voxel face-adjacent dilation restricted to WM:
    mask OR (dilate1(mask) AND wm). Original mask voxels are kept."""
    mask = as_binary_mask(mask)
    wm = as_binary_mask(wm)
    if mask.shape != wm.shape:
        raise ValueError(f"shape mismatch: {mask.shape} vs {wm.shape}")
    grown = ndimage.binary_dilation(mask, structure=_structure(mask.ndim, 1))
    return mask | (grown.astype(np.uint8) & wm)


@dataclass(frozen=True)
class MaskDraw:
    """One mask draw plus its provenance (for the JSON-lines audit log)."""

    mask: np.ndarray
    source: str  # "lesion" or "circle"
    pool_index: Optional[int] = None
    component_indices: Optional[Tuple[int, ...]] = None

    def provenance(self) -> dict:
        return {
            "source": self.source,
            "pool_index": self.pool_index,
            "component_indices": list(self.component_indices)
            if self.component_indices is not None
            else None,
        }


class mixture_mask_source:
    """Per-draw mask source mixing real lesion masks and random circles.

    With probability `p_lesion` a registered, WM-restricted pool entry is
    drawn and a nonempty subset of its connected components is sampled;
    otherwise a random circle mask is generated. Each draw records its
    provenance.
    """

    def __init__(
        self,
        lesion_pool: Sequence[np.ndarray],
        circle_params: CircleMaskParams,
        p_lesion: float = 0.5,
        placement_region: Optional[np.ndarray] = None,
    ):
        if not (0.0 <= p_lesion <= 1.0):
            raise ValueError("p_lesion must lie in [0, 1]")
        if p_lesion > 0 and not lesion_pool:
            raise ValueError("lesion pool is empty but p_lesion > 0")
        self.circle_params = circle_params
        self.p_lesion = p_lesion
        self.placement_region = placement_region
        self._components = [connected_components(as_binary_mask(m)) for m in lesion_pool]
        self._shapes = [np.shape(m) for m in lesion_pool]

    def __call__(self, shape: Tuple[int, ...], rng: np.random.Generator) -> MaskDraw:
        if rng.random() < self.p_lesion:
            idx = int(rng.integers(len(self._components)))
            cs = self._components[idx]
            if self._shapes[idx] != tuple(shape):
                raise ValueError("pool mask shape does not match requested shape")
            if len(cs) == 0:
                mask = np.zeros(shape, dtype=np.uint8)
                chosen: Tuple[int, ...] = ()
            else:
                n = len(cs)
                while True:
                    picks = rng.random(n) < 0.5
                    if picks.any():
                        break
                chosen = tuple(int(i) for i in np.flatnonzero(picks))
                mask = cs.union(chosen)
            return MaskDraw(mask=mask, source="lesion", pool_index=idx,
                            component_indices=chosen)
        mask = random_circle_mask(shape, self.circle_params, rng, self.placement_region)
        return MaskDraw(mask=mask, source="circle")
