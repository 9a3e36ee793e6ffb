"""Volume handling: NIfTI-1 read/write, conforming to a canonical grid
(256^3, 1 mm isotropic, RAS), intensity normalization to [-1, 1] with a
noise floor at 0.01, WM-slice extraction and slice-stack reassembly.

The NIfTI-1 codec here is intentionally minimal: single-file .nii or
.nii.gz, scalar 3D volumes, sform/qform affines, optional scl slope and
intercept. That covers everything this toolkit reads and writes.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "VolumeGrid",
    "NormalizationRecord",
    "SliceVolumeBatch",
    "load_volume",
    "save_volume",
    "conform",
    "normalize",
    "denormalize",
    "extract_wm_slices",
    "reassemble",
]

CONFORM_SHAPE = (256, 256, 256)
CONFORM_SPACING = 1.0
NOISE_FLOOR = 0.01

# NIfTI-1 datatype code -> numpy dtype
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


@dataclass
class VolumeGrid:
    """3D scalar volume with a voxel-to-world affine (NIfTI convention:
    world coordinates are RAS+)."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"expected a 3D volume, got shape {self.data.shape}")
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if not np.all(np.isfinite(self.affine)):
            raise ValueError("affine contains non-finite values")

    @property
    def spacing(self) -> Tuple[float, float, float]:
        s = np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))
        if np.any(s <= 0):
            raise ValueError("degenerate affine: zero voxel size")
        return tuple(float(v) for v in s)

    @property
    def orientation(self) -> str:
        """Axis codes, e.g. 'RAS', derived from the affine."""
        codes = (("L", "R"), ("P", "A"), ("I", "S"))
        out = []
        rot = self.affine[:3, :3]
        for j in range(3):
            col = rot[:, j]
            axis = int(np.argmax(np.abs(col)))
            out.append(codes[axis][1 if col[axis] >= 0 else 0])
        return "".join(out)


@dataclass
class SliceVolumeBatch:
    """Ordered stack of transversal (z) slices of one volume.

    `slices` has shape (Z, H, W); `indices` are the z positions in the
    parent volume, strictly increasing.
    """

    slices: np.ndarray
    indices: Tuple[int, ...]

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        self.indices = tuple(int(i) for i in self.indices)
        if self.slices.ndim != 3:
            raise ValueError("slices must be a (Z, H, W) stack")
        if len(self.indices) != self.slices.shape[0]:
            raise ValueError("one index per slice required")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("slice indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.indices)


def _is_gzip(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(2) == b"\x1f\x8b"


def load_volume(path: Union[str, Path]) -> VolumeGrid:
    """Read a single-file NIfTI-1 volume (.nii or .nii.gz)."""
    path = Path(path)
    opener = gzip.open if _is_gzip(path) else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 352:
        raise ValueError(f"{path}: truncated NIfTI file")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    if raw[344:347] != b"n+1":
        raise ValueError(f"{path}: only single-file NIfTI-1 ('n+1') is supported")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] < 3 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise ValueError(f"{path}: expected a scalar 3D volume, dim={dim}")
    datatype, _bitpix = struct.unpack_from("<2h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    shape = tuple(dim[1:4])
    dtype = np.dtype(_NIFTI_DTYPES[datatype])
    count = int(np.prod(shape))
    start = int(vox_offset)
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = data.reshape(shape, order="F").copy()
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter

    if sform_code > 0:
        affine = np.eye(4)
        affine[0, :] = struct.unpack_from("<4f", raw, 280)
        affine[1, :] = struct.unpack_from("<4f", raw, 296)
        affine[2, :] = struct.unpack_from("<4f", raw, 312)
    elif qform_code > 0:
        b, c, d = struct.unpack_from("<3f", raw, 256)
        ox, oy, oz = struct.unpack_from("<3f", raw, 268)
        a = math_sqrt_clamped(1.0 - (b * b + c * c + d * d))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
            ]
        )
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        affine = np.eye(4)
        affine[:3, :3] = rot * zooms
        affine[:3, 3] = (ox, oy, oz)
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])
    return VolumeGrid(data=data, affine=affine)


def math_sqrt_clamped(v: float) -> float:
    return float(np.sqrt(max(v, 0.0)))


def save_volume(v: VolumeGrid, path: Union[str, Path]) -> None:
    """Write a single-file NIfTI-1 volume; gzip-compressed for .nii.gz.

    The write is atomic: data goes to a temporary file in the target
    directory which is renamed into place.
    """
    path = Path(path)
    data = v.data
    if data.dtype not in _NIFTI_CODES:
        data = data.astype(np.float32)
    datatype = _NIFTI_CODES[np.dtype(data.dtype)]
    bitpix = data.dtype.itemsize * 8

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, datatype, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *v.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    struct.pack_into("<2h", header, 252, 0, 1)  # qform off, sform aligned
    struct.pack_into("<4f", header, 280, *v.affine[0, :])
    struct.pack_into("<4f", header, 296, *v.affine[1, :])
    struct.pack_into("<4f", header, 312, *v.affine[2, :])
    header[344:348] = b"n+1\x00"

    payload = bytes(header) + b"\x00" * 4 + data.tobytes(order="F")
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.suffix == ".gz":
            # mtime=0 keeps byte-identical outputs for identical volumes
            with open(tmp, "wb") as raw_fh:
                with gzip.GzipFile(
                    filename="", fileobj=raw_fh, mode="wb", compresslevel=1, mtime=0
                ) as fh:
                    fh.write(payload)
        else:
            with open(tmp, "wb") as fh:
                fh.write(payload)
        tmp.replace(path)
    finally:
        tmp.unlink(missing_ok=True)


def _conform_affine(shape: Sequence[int], spacing: float) -> np.ndarray:
    affine = np.diag([spacing, spacing, spacing, 1.0])
    return affine


def conform(
    v: VolumeGrid,
    out_shape: Tuple[int, int, int] = CONFORM_SHAPE,
    spacing: float = CONFORM_SPACING,
    interpolation: str = "trilinear",
) -> VolumeGrid:
    """Resample a volume to the canonical grid: `out_shape` voxels at
    `spacing` mm isotropic, RAS orientation, centered on the input's
    physical center.

    Use interpolation="trilinear" for images and "nearest" for masks and
    segmentations (keeps them binary/label-valued).
    """
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    in_shape = np.array(v.data.shape, dtype=np.float64)
    center_vox = np.append((in_shape - 1) / 2.0, 1.0)
    center_world = v.affine @ center_vox

    out_affine = _conform_affine(out_shape, spacing)
    out_affine[:3, 3] = center_world[:3] - spacing * (np.array(out_shape) - 1) / 2.0

    # No-op fast path: grid already canonical.
    if tuple(v.data.shape) == tuple(out_shape) and np.allclose(
        v.affine, out_affine, atol=1e-6
    ):
        return VolumeGrid(data=v.data.copy(), affine=out_affine)

    try:
        vox2vox = np.linalg.inv(v.affine) @ out_affine
    except np.linalg.LinAlgError as exc:
        raise ValueError("degenerate affine: not invertible") from exc
    order = 1 if interpolation == "trilinear" else 0
    resampled = ndimage.affine_transform(
        v.data.astype(np.float64) if order else v.data,
        matrix=vox2vox[:3, :3],
        offset=vox2vox[:3, 3],
        output_shape=tuple(out_shape),
        order=order,
        mode="constant",
        cval=0.0,
    )
    if order == 1:
        resampled = resampled.astype(np.float32)
    return VolumeGrid(data=resampled, affine=out_affine)


@dataclass(frozen=True)
class NormalizationRecord:
    """Parameters of the [-1, 1] intensity mapping, kept for inversion."""

    noise_floor: float
    input_max: float
    target_range: Tuple[float, float] = (-1.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "noise_floor": self.noise_floor,
            "input_max": self.input_max,
            "target_range": list(self.target_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationRecord":
        return cls(
            noise_floor=d["noise_floor"],
            input_max=d["input_max"],
            target_range=tuple(d["target_range"]),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NormalizationRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def normalize(
    v: VolumeGrid, noise_floor: float = NOISE_FLOOR
) -> Tuple[VolumeGrid, NormalizationRecord]:
    """Zero out sub-threshold noise and map [0, max] linearly to [-1, 1]."""
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite intensities")
    data = np.where(data < noise_floor, 0.0, data)
    vmax = float(data.max())
    if vmax <= 0.0:
        raise ValueError("volume has no signal above the noise floor")
    scaled = (2.0 * data / vmax - 1.0).astype(np.float32)
    rec = NormalizationRecord(noise_floor=noise_floor, input_max=vmax)
    return VolumeGrid(data=scaled, affine=v.affine.copy()), rec


def denormalize(v: VolumeGrid, rec: NormalizationRecord) -> VolumeGrid:
    """Inverse of `normalize`: map [-1, 1] back to [0, input_max]."""
    if rec is None:
        raise ValueError("missing normalization record")
    data = (np.asarray(v.data, dtype=np.float64) + 1.0) / 2.0 * rec.input_max
    return VolumeGrid(data=data.astype(np.float32), affine=v.affine.copy())


def extract_wm_slices(v: VolumeGrid, wm: np.ndarray) -> SliceVolumeBatch:
    """Transversal slices (fixed z) whose WM mask contains at least one
    positive voxel, in increasing z order."""
    wm = np.asarray(wm)
    if wm.shape != v.data.shape:
        raise ValueError(f"shape mismatch: {wm.shape} vs {v.data.shape}")
    has_wm = np.flatnonzero(wm.reshape(-1, wm.shape[2]).sum(axis=0) > 0)
    if len(has_wm) == 0:
        raise ValueError("no WM anywhere in the volume")
    slices = np.stack([v.data[:, :, k] for k in has_wm])
    return SliceVolumeBatch(slices=slices, indices=tuple(int(k) for k in has_wm))


def reassemble(batch: SliceVolumeBatch, template: VolumeGrid) -> VolumeGrid:
    """Copy the template and replace the listed z slices; untouched
    slices are preserved bitwise."""
    nz = template.data.shape[2]
    if any(not (0 <= k < nz) for k in batch.indices):
        raise ValueError("slice index out of range for template")
    data = template.data.copy()
    for sl, k in zip(batch.slices, batch.indices):
        data[:, :, k] = sl.astype(data.dtype)
    return VolumeGrid(data=data, affine=template.affine.copy())
