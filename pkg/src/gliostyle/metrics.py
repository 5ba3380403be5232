"""Region Dice, connected components, and lesion-wise Dice."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume import REGIONS, LabelVolume, RegionSpec, _as_region, region_mask

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelVolume) else np.asarray(x)


def _check_geometry(pred, truth):
    if isinstance(pred, LabelVolume) and isinstance(truth, LabelVolume):
        if pred.spacing != truth.spacing:
            raise DataError(f"spacing mismatch: {pred.spacing} vs {truth.spacing}")
    if _labels(pred).shape != _labels(truth).shape:
        raise DataError(f"shape mismatch: {_labels(pred).shape} vs {_labels(truth).shape}")


def dice_binary(a: np.ndarray, b: np.ndarray) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass(frozen=True)
class DiceReport:
    case_id: str
    dice: dict[str, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.dice.values())))


def region_dice_report(pred, truth, case_id: str = "") -> DiceReport:
    _check_geometry(pred, truth)
    p, t = _labels(pred), _labels(truth)
    return DiceReport(case_id, {name: dice_binary(region_mask(p, r), region_mask(t, r))
                                for name, r in REGIONS.items()})


def components_26(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 26-connected components 1..K in raster order of first voxel."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise DataError(f"expected a 3D mask, got {mask.ndim}D")
    labeled, count = ndimage.label(mask, structure=_STRUCT_26)
    return labeled.astype(np.int32), int(count)


@dataclass(frozen=True)
class LesionWiseReport:
    region: str
    score: float
    tp: int
    fn: int
    fp: int
    lesion_dice: tuple[float, ...]
    dilation_radius: int
    min_lesion: int


def lesion_wise_dice(pred, truth, region: RegionSpec | str = "WT",
                     dilation_radius: int = 1, min_lesion: int = 2) -> LesionWiseReport:
    """Per-lesion Dice with zero scores for missed and spurious lesions.

    Ground-truth lesions smaller than ``min_lesion`` voxels are ignored. Each
    remaining lesion, dilated by ``dilation_radius`` (26-neighbourhood steps),
    claims every predicted component that touches it; unclaimed predicted
    components of at least ``min_lesion`` voxels count as false positives.
    """
    _check_geometry(pred, truth)
    region = _as_region(region)
    gt_lab, n_gt = components_26(region_mask(_labels(truth), region))
    pr_lab, n_pr = components_26(region_mask(_labels(pred), region))
    gt_sizes = np.bincount(gt_lab.ravel(), minlength=n_gt + 1)
    pr_sizes = np.bincount(pr_lab.ravel(), minlength=n_pr + 1)

    scores: list[float] = []
    claimed: set[int] = set()
    tp = fn = 0
    for k in range(1, n_gt + 1):
        if gt_sizes[k] < min_lesion:
            continue
        lesion = gt_lab == k
        zone = ndimage.binary_dilation(lesion, _STRUCT_26, iterations=dilation_radius) \
            if dilation_radius > 0 else lesion
        hits = np.unique(pr_lab[zone])
        hits = hits[hits > 0]
        if hits.size == 0:
            fn += 1
            scores.append(0.0)
            continue
        tp += 1
        claimed.update(int(h) for h in hits)
        scores.append(dice_binary(np.isin(pr_lab, hits), lesion))
    fp = sum(1 for j in range(1, n_pr + 1) if j not in claimed and pr_sizes[j] >= min_lesion)
    contributions = scores + [0.0] * fp
    score = float(np.mean(contributions)) if contributions else 1.0
    return LesionWiseReport(region.name, score, tp, fn, fp, tuple(scores), dilation_radius, min_lesion)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def write_dice_csv(reports, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *REGIONS])
        for rep in reports:
            writer.writerow([rep.case_id, *(repr(rep.dice[r]) for r in REGIONS)])


def read_dice_csv(path: str | Path) -> list[DiceReport]:
    with open(path, newline="") as fh:
        return [DiceReport(row["case_id"], {r: float(row[r]) for r in REGIONS})
                for row in csv.DictReader(fh)]


def write_lesion_csv(rows, path: str | Path) -> None:
    """``rows`` are (case_id, {region: LesionWiseReport}) tuples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *[f"Dice_{r}" for r in REGIONS],
                         *[f"{c}_{r}" for r in REGIONS for c in ("tp", "fn", "fp")]])
        for case_id, reps in rows:
            writer.writerow([case_id, *(repr(reps[r].score) for r in REGIONS),
                             *(getattr(reps[r], c) for r in REGIONS for c in ("tp", "fn", "fp"))])


def summarize(values) -> dict[str, float]:
    vals = [float(v) for v in values]
    n = len(vals)
    mean = math.fsum(vals) / n if n else float("nan")
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
    return {"n": n, "mean": mean, "sd": sd}


def dice_summary(reports) -> dict:
    reports = list(reports)
    return {r: summarize(rep.dice[r] for rep in reports) for r in REGIONS}


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
