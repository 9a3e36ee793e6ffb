"""Cortical-thickness robustness harness.

Ingests per-patient thickness tables produced by external morphometry
tools before and after lesion filling, computes the reproducibility
error

    eps_mu = (100 / N) * sum_i 0.5 * sum_t |m_{i,t} - mu_i| / mu_i

globally and per Desikan-Killiany ROI, applies the juxtacortical-lesion
exclusion, and writes the CSV report tables.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "DK_REGIONS",
    "DK_ROI_NAMES",
    "ThicknessMeasurement",
    "ReproducibilityRecord",
    "repro_error",
    "roi_errors",
    "juxtacortical_flag",
    "load_thickness_csv",
    "report",
]

# The 34 Desikan-Killiany cortical parcels; ROIs are named lh-* / rh-*.
DK_REGIONS = (
    "bankssts", "caudalanteriorcingulate", "caudalmiddlefrontal", "cuneus",
    "entorhinal", "frontalpole", "fusiform", "inferiorparietal",
    "inferiortemporal", "insula", "isthmuscingulate", "lateraloccipital",
    "lateralorbitofrontal", "lingual", "medialorbitofrontal",
    "middletemporal", "paracentral", "parahippocampal", "parsopercularis",
    "parsorbitalis", "parstriangularis", "pericalcarine", "postcentral",
    "posteriorcingulate", "precentral", "precuneus",
    "rostralanteriorcingulate", "rostralmiddlefrontal", "superiorfrontal",
    "superiorparietal", "superiortemporal", "supramarginal", "temporalpole",
    "transversetemporal",
)
DK_ROI_NAMES = tuple(f"{h}-{r}" for h in ("lh", "rh") for r in DK_REGIONS)

CONDITIONS = ("before_filling", "after_filling")


@dataclass
class ThicknessMeasurement:
    """Per-patient thickness snapshot from one tool under one condition.

    `roi_thickness` maps ROI names (lh-/rh- prefixed DK parcels) to mm.
    `global_mean` is the mean of the left and right hemisphere means; if
    not supplied it falls back to the unweighted mean of each
    hemisphere's ROI values.
    """

    patient_id: str
    tool: str
    condition: str
    roi_thickness: Dict[str, float] = field(default_factory=dict)
    global_mean: Optional[float] = None

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        for roi, value in self.roi_thickness.items():
            if value <= 0:
                raise ValueError(f"nonpositive thickness for {roi}: {value}")
        if self.global_mean is None and self.roi_thickness:
            hemi_means = []
            for h in ("lh", "rh"):
                vals = [v for k, v in self.roi_thickness.items() if k.startswith(h + "-")]
                if vals:
                    hemi_means.append(float(np.mean(vals)))
            if hemi_means:
                self.global_mean = float(np.mean(hemi_means))
        if self.global_mean is not None and self.global_mean <= 0:
            raise ValueError("nonpositive global mean thickness")


@dataclass(frozen=True)
class ReproducibilityRecord:
    """Paired before/after measurements for one patient and their error
    contribution |m1 - m2| / (m1 + m2) (the half-sum form of the
    mean-relative absolute change)."""

    patient_id: str
    m1: float
    m2: float

    @property
    def mu(self) -> float:
        return 0.5 * (self.m1 + self.m2)

    @property
    def contribution(self) -> float:
        return abs(self.m1 - self.m2) / (self.m1 + self.m2)


def repro_error(pairs: Sequence[Tuple[float, float]]) -> float:
    """Mean absolute change relative to the within-patient mean, in %."""
    if len(pairs) == 0:
        raise ValueError("empty measurement list")
    total = 0.0
    for m1, m2 in pairs:
        if m1 <= 0 or m2 <= 0:
            raise ValueError(f"nonpositive measurement pair ({m1}, {m2})")
        mu = 0.5 * (m1 + m2)
        total += 0.5 * (abs(m1 - mu) + abs(m2 - mu)) / mu
    return 100.0 * total / len(pairs)


def _index_by_patient(
    measurements: Iterable[ThicknessMeasurement],
) -> Dict[str, ThicknessMeasurement]:
    out: Dict[str, ThicknessMeasurement] = {}
    for m in measurements:
        if m.patient_id in out:
            raise ValueError(f"duplicate patient {m.patient_id!r}")
        out[m.patient_id] = m
    return out


@dataclass
class RoiErrorTable:
    per_roi: Dict[str, float]
    roi_average: float
    global_error: Optional[float]
    num_patients: int
    missing_rois: Dict[str, int]


def roi_errors(
    before: Sequence[ThicknessMeasurement],
    after: Sequence[ThicknessMeasurement],
    roi_names: Sequence[str] = DK_ROI_NAMES,
) -> RoiErrorTable:
    """Reproducibility error per ROI over matched patients, plus the
    unweighted ROI-average and the global-mean-thickness error.

    ROIs missing for some patients are excluded from those patients'
    pairs; ROIs with no complete pair at all are excluded from the
    average and counted in `missing_rois`.
    """
    b = _index_by_patient(before)
    a = _index_by_patient(after)
    if set(b) != set(a):
        raise ValueError(
            f"unmatched patients: {sorted(set(b) ^ set(a))}"
        )
    patients = sorted(b)
    if not patients:
        raise ValueError("no patients")

    per_roi: Dict[str, float] = {}
    missing: Dict[str, int] = {}
    for roi in roi_names:
        pairs = []
        absent = 0
        for pid in patients:
            v1 = b[pid].roi_thickness.get(roi)
            v2 = a[pid].roi_thickness.get(roi)
            if v1 is None or v2 is None:
                absent += 1
                continue
            pairs.append((v1, v2))
        if pairs:
            per_roi[roi] = repro_error(pairs)
        if absent:
            missing[roi] = absent
    if not per_roi:
        raise ValueError("no ROI has a complete before/after pair")
    roi_average = float(np.mean(list(per_roi.values())))

    global_pairs = [
        (b[pid].global_mean, a[pid].global_mean)
        for pid in patients
        if b[pid].global_mean is not None and a[pid].global_mean is not None
    ]
    global_error = repro_error(global_pairs) if global_pairs else None
    return RoiErrorTable(
        per_roi=per_roi,
        roi_average=roi_average,
        global_error=global_error,
        num_patients=len(patients),
        missing_rois=missing,
    )


def juxtacortical_flag(
    lesion_mask: np.ndarray,
    tissue_seg: np.ndarray,
    wm_labels: Sequence[int],
    background_labels: Sequence[int] = (0,),
    exempt_labels: Sequence[int] = (),
) -> bool:
    """True (exclude the patient) iff the one-voxel face-adjacent
    dilation of the lesion mask touches any non-WM, non-background
    tissue label."""
    lesion_mask = np.asarray(lesion_mask)
    tissue_seg = np.asarray(tissue_seg)
    if lesion_mask.shape != tissue_seg.shape:
        raise ValueError(
            f"geometry mismatch: {lesion_mask.shape} vs {tissue_seg.shape}"
        )
    structure = ndimage.generate_binary_structure(lesion_mask.ndim, 1)
    dilated = ndimage.binary_dilation(lesion_mask > 0, structure=structure)
    touched = np.unique(tissue_seg[dilated])
    allowed = set(wm_labels) | set(background_labels) | set(exempt_labels)
    return bool(any(int(lbl) not in allowed for lbl in touched))


def load_thickness_csv(path: Union[str, Path], tool: str) -> List[ThicknessMeasurement]:
    """Read a thickness table with columns patient_id, condition, roi,
    thickness_mm. The special roi values lh_global / rh_global carry the
    hemisphere mean thicknesses; their average becomes the global mean."""
    rows: Dict[Tuple[str, str], Dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"patient_id", "condition", "roi", "thickness_mm"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(required)}")
        for row in reader:
            key = (row["patient_id"], row["condition"])
            rows.setdefault(key, {})[row["roi"]] = float(row["thickness_mm"])
    out = []
    for (pid, condition), table in sorted(rows.items()):
        hemis = [table.pop(k) for k in ("lh_global", "rh_global") if k in table]
        global_mean = float(np.mean(hemis)) if hemis else None
        out.append(
            ThicknessMeasurement(
                patient_id=pid,
                tool=tool,
                condition=condition,
                roi_thickness=table,
                global_mean=global_mean,
            )
        )
    return out


def _atomic_write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        tmp.replace(path)
    finally:
        tmp.unlink(missing_ok=True)


def report(
    results: Dict[str, Dict[str, RoiErrorTable]],
    out_dir: Union[str, Path],
    heatmap: bool = False,
) -> List[Path]:
    """Write the summary and per-ROI CSV tables.

    `results` maps tool name -> cohort name ("all_patients",
    "without_juxtacortical", ...) -> RoiErrorTable. Optionally renders a
    color-coded per-ROI heatmap (requires matplotlib).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    summary_path = out_dir / "reproducibility_summary.csv"
    summary_rows = []
    for tool, cohorts in sorted(results.items()):
        for cohort, table in sorted(cohorts.items()):
            summary_rows.append(
                [
                    tool,
                    cohort,
                    "" if table.global_error is None else f"{table.global_error:.6f}",
                    f"{table.roi_average:.6f}",
                    table.num_patients,
                    sum(table.missing_rois.values()),
                ]
            )
    _atomic_write_csv(
        summary_path,
        ["tool", "cohort", "global_mean_thickness_pct", "roi_average_pct",
         "num_patients", "missing_roi_pairs"],
        summary_rows,
    )
    written.append(summary_path)

    roi_path = out_dir / "reproducibility_per_roi.csv"
    roi_rows = []
    for tool, cohorts in sorted(results.items()):
        for cohort, table in sorted(cohorts.items()):
            for roi, err in sorted(table.per_roi.items()):
                roi_rows.append([tool, cohort, roi, f"{err:.6f}"])
    _atomic_write_csv(roi_path, ["tool", "cohort", "roi", "error_pct"], roi_rows)
    written.append(roi_path)

    if heatmap:
        written.append(_write_heatmap(results, out_dir))
    return written


def _write_heatmap(results, out_dir: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tools = sorted(results)
    rois = sorted({r for cohorts in results.values()
                   for t in cohorts.values() for r in t.per_roi})
    grid = np.full((len(tools), len(rois)), np.nan)
    for i, tool in enumerate(tools):
        table = results[tool].get("all_patients") or next(iter(results[tool].values()))
        for j, roi in enumerate(rois):
            if roi in table.per_roi:
                grid[i, j] = table.per_roi[roi]
    fig, ax = plt.subplots(figsize=(max(8, len(rois) * 0.25), 2 + len(tools) * 0.5))
    im = ax.imshow(grid, aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(tools)), tools)
    ax.set_xticks(range(len(rois)), rois, rotation=90, fontsize=5)
    fig.colorbar(im, ax=ax, label="reproducibility error (%)")
    fig.tight_layout()
    path = out_dir / "reproducibility_roi_heatmap.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
