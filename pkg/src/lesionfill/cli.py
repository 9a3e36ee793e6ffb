"""Command-line interface: `fill` (end-to-end lesion filling of a T1w
volume), `train`, `evaluate` and `robustness` subcommands.

The fill pipeline: conform inputs to the canonical grid, normalize to
[-1, 1], dilate the lesion mask one voxel inside WM, inpaint only the
slices intersecting the dilated mask (batched), reassemble, denormalize
and write the volume with a JSON provenance sidecar. Voxels outside the
dilated mask are preserved bitwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import denoiser as denoiser_mod
from .diffusion import DiffusionConfig, build_schedule
from .maskgen import CircleMaskParams, as_binary_mask, dilate_one_voxel_wm, mixture_mask_source
from .samplers import SamplerConfig, sample_inpaint
from .volume_io import (
    NormalizationRecord,
    SliceVolumeBatch,
    VolumeGrid,
    conform,
    denormalize,
    load_volume,
    normalize,
    reassemble,
    save_volume,
)

PROVENANCE_SCHEMA_VERSION = 1

PROVENANCE_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version", "inputs", "mode", "sampler", "seed",
        "slices_processed", "context_slices", "model_sha256",
        "normalization", "batches",
    ],
    "properties": {
        "schema_version": {"type": "integer"},
        "inputs": {
            "type": "object",
            "required": ["t1", "lesion_mask", "wm_seg", "model"],
            "properties": {k: {"type": "string"} for k in
                           ("t1", "lesion_mask", "wm_seg", "model")},
        },
        "mode": {"type": "string"},
        "sampler": {"type": "object"},
        "seed": {"type": "integer"},
        "slices_processed": {"type": "array", "items": {"type": "integer"}},
        "context_slices": {"type": "array", "items": {"type": "integer"}},
        "model_sha256": {"type": "string"},
        "normalization": {"type": "object"},
        "batches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["slices", "seconds"],
                "properties": {
                    "slices": {"type": "integer"},
                    "seconds": {"type": "number"},
                },
            },
        },
    },
}


@dataclass
class FillJob:
    """One end-to-end lesion-filling job."""

    t1_path: Path
    lesion_mask_path: Path
    wm_seg_path: Path
    model_path: Path
    output_path: Path
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    batch_size: int = 16
    conform_shape: Tuple[int, int, int] = (256, 256, 256)
    conform_spacing: float = 1.0
    pseudo3d_context: int = 2

    def validate(self) -> None:
        for p in (self.t1_path, self.lesion_mask_path, self.wm_seg_path, self.model_path):
            if not Path(p).exists():
                raise FileNotFoundError(f"input not found: {p}")
        self.sampler.validate()


def _file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _slice_batches(indices: List[int], batch_size: int) -> List[List[int]]:
    return [indices[i : i + batch_size] for i in range(0, len(indices), batch_size)]


def fill_volume(job: FillJob) -> Tuple[VolumeGrid, dict]:
    """Run the filling pipeline and write the output volume plus its
    provenance sidecar. Returns the filled volume and the provenance."""
    job.validate()
    expected_channels = 1 if job.sampler.kind == "repaint" else 3
    model, diffusion_cfg, _sidecar = denoiser_mod.load_checkpoint(
        job.model_path, expected_in_channels=expected_channels
    )
    sched = build_schedule(diffusion_cfg)

    t1 = conform(load_volume(job.t1_path), job.conform_shape, job.conform_spacing,
                 "trilinear")
    lesion_vol = conform(load_volume(job.lesion_mask_path), job.conform_shape,
                         job.conform_spacing, "nearest")
    wm_vol = conform(load_volume(job.wm_seg_path), job.conform_shape,
                     job.conform_spacing, "nearest")
    lesion = as_binary_mask(lesion_vol.data > 0.5)
    wm = as_binary_mask(wm_vol.data > 0.5)

    norm_vol, rec = normalize(t1)
    dilated = dilate_one_voxel_wm(lesion, wm)

    masked_z = sorted(int(z) for z in np.flatnonzero(dilated.any(axis=(0, 1))))
    context_z: List[int] = []
    process_z = list(masked_z)
    if model.spec.pseudo3d and masked_z:
        lo = max(0, min(masked_z) - job.pseudo3d_context)
        hi = min(norm_vol.data.shape[2] - 1, max(masked_z) + job.pseudo3d_context)
        process_z = list(range(lo, hi + 1))
        context_z = [z for z in process_z if z not in set(masked_z)]

    batches: List[dict] = []
    filled_slices: List[np.ndarray] = []
    groups = [process_z] if model.spec.pseudo3d and process_z else _slice_batches(
        process_z, job.batch_size
    )
    for b, group in enumerate(groups):
        x = np.stack([norm_vol.data[:, :, z] for z in group])[:, None]
        m = np.stack([dilated[:, :, z] for z in group])[:, None].astype(np.float32)
        voided = np.where(m > 0.5, denoiser_mod.VOID_VALUE, x).astype(np.float32)
        start = time.monotonic()
        out = sample_inpaint(model, job.sampler, x.astype(np.float32), m, voided,
                             sched, rng_seed=job.seed + b)
        batches.append({"slices": len(group), "seconds": time.monotonic() - start})
        filled_slices.extend(out[:, 0])

    if process_z:
        batch = SliceVolumeBatch(slices=np.stack(filled_slices), indices=process_z)
        filled_norm = reassemble(batch, norm_vol)
    else:
        filled_norm = norm_vol
    filled = denormalize(filled_norm, rec)
    # Outside the dilated mask the conformed input is preserved bitwise.
    final = VolumeGrid(
        data=np.where(dilated > 0, filled.data.astype(t1.data.dtype), t1.data),
        affine=t1.affine,
    )

    provenance = {
        "schema_version": PROVENANCE_SCHEMA_VERSION,
        "inputs": {
            "t1": str(job.t1_path),
            "lesion_mask": str(job.lesion_mask_path),
            "wm_seg": str(job.wm_seg_path),
            "model": str(job.model_path),
        },
        "mode": job.sampler.kind,
        "sampler": job.sampler.to_dict(),
        "seed": job.seed,
        "slices_processed": masked_z,
        "context_slices": context_z,
        "model_sha256": _file_sha256(Path(job.model_path)),
        "normalization": rec.to_dict(),
        "batches": batches,
    }

    save_volume(final, job.output_path)
    prov_path = Path(str(job.output_path) + ".provenance.json")
    tmp = prov_path.with_name(prov_path.name + ".tmp")
    tmp.write_text(json.dumps(provenance, indent=2))
    tmp.replace(prov_path)
    return final, provenance


def _cmd_fill(args: argparse.Namespace) -> dict:
    sampler = SamplerConfig(
        kind="repaint" if args.mode == "repaint" else "ddim",
        num_inference_steps=args.steps,
        jump_length=args.jump_length,
        resample=args.resample,
    )
    job = FillJob(
        t1_path=Path(args.t1),
        lesion_mask_path=Path(args.lesion_mask),
        wm_seg_path=Path(args.wm_seg),
        model_path=Path(args.model),
        output_path=Path(args.out),
        sampler=sampler,
        seed=args.seed,
        batch_size=args.batch_size,
        conform_shape=tuple(args.conform_shape),
        conform_spacing=args.conform_spacing,
    )
    _, provenance = fill_volume(job)
    return {"output": str(args.out), "provenance": provenance}


def _load_yaml(path: Path) -> dict:
    import yaml

    with open(path) as fh:
        return yaml.safe_load(fh)


def _cmd_train(args: argparse.Namespace) -> dict:
    from . import trainer as trainer_mod

    cfg_raw = _load_yaml(Path(args.config))
    out_dir = Path(cfg_raw.get("out_dir", "train_out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    diffusion_cfg = DiffusionConfig(**cfg_raw.get("diffusion", {}))
    sched = build_schedule(diffusion_cfg)
    spec = denoiser_mod.DenoiserSpec.from_dict(
        {**denoiser_mod.DenoiserSpec().to_dict(), **cfg_raw.get("model", {})}
    )
    train_cfg = trainer_mod.TrainConfig(**cfg_raw.get("train", {}))
    sampler_cfg = SamplerConfig(**cfg_raw.get("sampler", {}))

    images = np.load(cfg_raw["train_images"])
    val_images = np.load(cfg_raw["val_images"])
    val_masks = np.load(cfg_raw["val_masks"])
    val_set = list(zip(val_images, val_masks))

    mask_source = None
    if train_cfg.conditional:
        pool = []
        if cfg_raw.get("lesion_pool"):
            pool = list(np.load(cfg_raw["lesion_pool"]))
        p_lesion = {"lesions": 1.0, "circles": 0.0, "mixture": 0.5}[train_cfg.mask_policy]
        circle_cfg = cfg_raw.get("circle_params", {})
        params = CircleMaskParams(
            num_circles=tuple(circle_cfg.get("num_circles", (1, 4))),
            radius=tuple(circle_cfg.get("radius", (2.0, 16.0))),
        )
        mask_source = mixture_mask_source(pool, params, p_lesion)

    model = denoiser_mod.build_denoiser(spec, seed=train_cfg.seed)
    history = trainer_mod.train(
        train_cfg, images, val_set, model, sched, diffusion_cfg, sampler_cfg,
        mask_source=mask_source, out_dir=out_dir,
        log_path=out_dir / "training_log.jsonl",
    )
    return {
        "out_dir": str(out_dir),
        "checkpoints": [
            {"step": r.step, "inside_mask_ssim": r.masked_ssim} for r in history
        ],
    }


def _cmd_evaluate(args: argparse.Namespace) -> dict:
    from . import trainer as trainer_mod

    model, diffusion_cfg, _ = denoiser_mod.load_checkpoint(Path(args.model))
    sched = build_schedule(diffusion_cfg)
    kind = "repaint" if model.spec.in_channels == 1 else "ddim"
    sampler_cfg = SamplerConfig(kind=kind, num_inference_steps=args.steps)
    images = np.load(args.images)
    masks = np.load(args.masks)
    report = trainer_mod.validate(model, list(zip(images, masks)), sched, sampler_cfg)
    if args.out:
        Path(args.out).write_text(report.to_json())
    return report.summary()


def _cmd_robustness(args: argparse.Namespace) -> dict:
    from . import robustness as rob

    def read_tables(spec: str):
        p = Path(spec)
        paths = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        out = []
        for path in paths:
            out.extend(rob.load_thickness_csv(path, args.tool))
        return out

    before = read_tables(args.before)
    after = read_tables(args.after)
    cohorts = {"all_patients": rob.roi_errors(before, after)}

    if args.exclude_juxtacortical:
        if not (args.lesions and args.seg):
            raise ValueError("--exclude-juxtacortical requires --lesions and --seg")
        excluded = set()
        for m in before:
            lesion = load_volume(Path(args.lesions) / f"{m.patient_id}.nii.gz")
            seg = load_volume(Path(args.seg) / f"{m.patient_id}.nii.gz")
            if rob.juxtacortical_flag(lesion.data, seg.data, wm_labels=args.wm_labels):
                excluded.add(m.patient_id)
        keep_b = [m for m in before if m.patient_id not in excluded]
        keep_a = [m for m in after if m.patient_id not in excluded]
        cohorts["without_juxtacortical"] = rob.roi_errors(keep_b, keep_a)

    results = {args.tool: cohorts}
    written = rob.report(results, args.out, heatmap=args.heatmap)
    return {
        "tables": [str(p) for p in written],
        "cohorts": {
            name: {
                "global_mean_thickness_pct": t.global_error,
                "roi_average_pct": t.roi_average,
                "num_patients": t.num_patients,
            }
            for name, t in cohorts.items()
        },
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionfill",
        description="Diffusion-based white-matter lesion filling for T1w brain MRI",
    )
    parser.add_argument("--json", action="store_true",
                        help="print a machine-readable JSON summary on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fill = sub.add_parser("fill", help="fill lesions in a T1w volume")
    p_fill.add_argument("--t1", required=True, help="input T1w volume (.nii/.nii.gz)")
    p_fill.add_argument("--lesion-mask", required=True, help="binary lesion mask volume")
    p_fill.add_argument("--wm-seg", required=True, help="binary WM segmentation volume")
    p_fill.add_argument("--model", required=True, help="model checkpoint (.pt)")
    p_fill.add_argument("--mode", choices=("conditional-ddim", "repaint"),
                        default="conditional-ddim")
    p_fill.add_argument("--steps", type=int, default=50, help="DDIM inference steps")
    p_fill.add_argument("--jump-length", type=int, default=8)
    p_fill.add_argument("--resample", type=int, default=10)
    p_fill.add_argument("--seed", type=int, default=0)
    p_fill.add_argument("--batch-size", type=int, default=16)
    p_fill.add_argument("--conform-shape", type=int, nargs=3, default=[256, 256, 256],
                        metavar=("X", "Y", "Z"),
                        help="canonical grid size in voxels")
    p_fill.add_argument("--conform-spacing", type=float, default=1.0,
                        help="canonical voxel spacing in mm")
    p_fill.add_argument("--out", required=True, help="output volume path")
    p_fill.set_defaults(func=_cmd_fill)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("config", help="YAML training config")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a model on image/mask stacks")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--images", required=True, help=".npy stack of 2D images in [-1,1]")
    p_eval.add_argument("--masks", required=True, help=".npy stack of binary 2D masks")
    p_eval.add_argument("--steps", type=int, default=50)
    p_eval.add_argument("--out", help="write the full JSON report here")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_rob = sub.add_parser("robustness", help="cortical-thickness robustness report")
    p_rob.add_argument("--before", required=True, help="CSV file or directory")
    p_rob.add_argument("--after", required=True, help="CSV file or directory")
    p_rob.add_argument("--tool", required=True, help="morphometry tool name")
    p_rob.add_argument("--exclude-juxtacortical", action="store_true")
    p_rob.add_argument("--lesions", help="directory of per-patient lesion masks")
    p_rob.add_argument("--seg", help="directory of per-patient tissue segmentations")
    p_rob.add_argument("--wm-labels", type=int, nargs="+", default=[2, 41],
                       help="tissue labels counted as WM")
    p_rob.add_argument("--heatmap", action="store_true",
                       help="also render the per-ROI heatmap image")
    p_rob.add_argument("--out", required=True, help="output directory")
    p_rob.set_defaults(func=_cmd_robustness)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
