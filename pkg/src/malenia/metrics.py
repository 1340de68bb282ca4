"""Segmentation and attribute-matching metrics.

Dice measures volumetric overlap; normalized surface distance measures
boundary agreement within a tolerance.  Attribute matching pairs predicted
lesions with ground truth by overlap and scores per-aspect precision/recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from .errors import ShapeError

PAIRING_DICE_THRESHOLD = 0.1


def dsc(pred, gt) -> float:
    """Dice similarity coefficient; 1.0 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a, b = pred.sum(), gt.sum()
    if a == 0 and b == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / (a + b))


def _boundary(mask: np.ndarray) -> np.ndarray:
    # voxels of the mask with at least one outside 6-neighbor (volume border counts)
    structure = np.zeros((3, 3, 3), dtype=bool)
    structure[1, 1, :] = structure[1, :, 1] = structure[:, 1, 1] = True
    return mask & ~binary_erosion(mask, structure=structure, border_value=0)


def nsd(pred, gt, tolerance_voxels: float = 1.0,
        spacing=(1.0, 1.0, 1.0)) -> float:
    """Normalized surface distance at the given tolerance (in voxel units).

    Symmetric average of the boundary fractions within tolerance of the other
    mask's boundary.  Both masks empty -> 1.0; exactly one empty -> 0.0.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if tolerance_voxels <= 0:
        raise ShapeError("tolerance must be positive")
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    bp, bg = _boundary(pred), _boundary(gt)
    tolerance = tolerance_voxels * float(np.mean(spacing))
    dist_to_gt = distance_transform_edt(~bg, sampling=spacing)
    dist_to_pred = distance_transform_edt(~bp, sampling=spacing)
    near_pred = (dist_to_gt[bp] <= tolerance).sum()
    near_gt = (dist_to_pred[bg] <= tolerance).sum()
    return float((near_pred + near_gt) / (bp.sum() + bg.sum()))


def pair_lesions(pred_masks, gt_masks,
                 threshold: float = PAIRING_DICE_THRESHOLD):
    """Greedy max-overlap pairing: list of (pred index, gt index, dice)."""
    overlaps = [
        (dsc(pm, gm), i, j)
        for i, pm in enumerate(pred_masks)
        for j, gm in enumerate(gt_masks)
    ]
    overlaps.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, pairs = set(), set(), []
    for score, i, j in overlaps:
        if score <= threshold or i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, score))
    return pairs


def attribute_matching_metrics(predicted, ground_truth, schema):
    """Per-aspect precision/recall over lesion-level attribute assignments.

    `predicted`: list of (mask, {aspect: value}); `ground_truth` likewise.
    Lesions are paired by mask overlap; unpaired ground truth counts against
    recall, unpaired predictions against precision.  Undefined ratios (no
    predictions / no ground truth) are reported as None.
    """
    pairs = pair_lesions([m for m, _ in predicted], [m for m, _ in ground_truth])
    n_pred, n_gt = len(predicted), len(ground_truth)
    report = {}
    for aspect in schema.aspects:
        correct = sum(
            1
            for i, j, _ in pairs
            if predicted[i][1].get(aspect) == ground_truth[j][1].get(aspect)
        )
        report[aspect] = {
            "precision": correct / n_pred if n_pred else None,
            "recall": correct / n_gt if n_gt else None,
            "n_pred": n_pred,
            "n_gt": n_gt,
        }
    return report


@dataclass
class MetricReport:
    """Aggregated evaluation results, serializable as stable-ordered text."""

    per_class: dict = field(default_factory=dict)
    per_aspect: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["[classes]"]
        for name in sorted(self.per_class):
            row = self.per_class[name]
            flag = " zero-shot" if row.get("zero_shot") else ""
            lines.append(
                f"{name}: dsc={row['dsc']:.4f} nsd={row['nsd']:.4f} "
                f"support={row['support']}{flag}"
            )
        lines.append("[attributes]")
        for aspect in self.per_aspect:
            row = self.per_aspect[aspect]
            p = "n/a" if row["precision"] is None else f"{row['precision']:.4f}"
            r = "n/a" if row["recall"] is None else f"{row['recall']:.4f}"
            lines.append(f"{aspect}: precision={p} recall={r} "
                         f"n_pred={row['n_pred']} n_gt={row['n_gt']}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"per_class": self.per_class, "per_aspect": self.per_aspect},
            indent=2, sort_keys=True,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
