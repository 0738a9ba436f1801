"""Segmentation quality metrics: Dice, IoU, HD95 and ASD on binary masks.

Surfaces are 6-connected boundary voxels (foreground voxels with at least
one background or out-of-volume face neighbor). Directed surface distances
are exhaustive nearest-neighbor Euclidean distances in voxel units; HD95 is
the 95th percentile (linear interpolation) of the pooled directed distances
from both directions and ASD their mean. Pooled distances are sorted before
reduction so both metrics are bitwise symmetric in their arguments.

An empty mask on either side yields the volume-diagonal sentinel so a
collapsed prediction visibly hurts the score.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError

METRIC_COLUMNS = ("volume_id", "category", "scatter", "dice", "iou", "hd95", "asd")


def dice_iou(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Dice = 2|A&B|/(|A|+|B|), IoU = |A&B|/|A|B|; both-empty -> (1, 1)."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    sa, sb = a.sum(), b.sum()
    union = sa + sb - inter
    if sa + sb == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (sa + sb)
    iou = inter / union if union else 1.0
    return float(dice), float(iou)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (n, 3) of 6-connected boundary voxels, C-order."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 3:
        raise ContractError("masks must be 3-D")
    padded = np.pad(m, 1, constant_values=False)
    core = padded[1:-1, 1:-1, 1:-1]
    has_bg_neighbor = (
        ~padded[:-2, 1:-1, 1:-1] | ~padded[2:, 1:-1, 1:-1]
        | ~padded[1:-1, :-2, 1:-1] | ~padded[1:-1, 2:, 1:-1]
        | ~padded[1:-1, 1:-1, :-2] | ~padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(core & has_bg_neighbor)


def _directed(src: np.ndarray, dst_tree: cKDTree) -> np.ndarray:
    d, _ = dst_tree.query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def surface_distances(a: np.ndarray, b: np.ndarray) -> tuple[float, float, bool]:
    """(hd95, asd, collapsed). ``collapsed`` flags the empty-mask sentinel."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.sum() == 0 or b.sum() == 0:
        sentinel = float(np.sqrt(sum(float(s) ** 2 for s in a.shape)))
        return sentinel, sentinel, True
    sa, sb = surface_voxels(a), surface_voxels(b)
    ta, tb = cKDTree(sa), cKDTree(sb)
    pooled = np.sort(np.concatenate([_directed(sa, tb), _directed(sb, ta)]))
    hd95 = float(np.percentile(pooled, 95))
    asd = float(pooled.mean())
    return hd95, asd, False


@dataclass
class VolumeMetrics:
    volume_id: str
    category: str
    scatter: str
    dice: float
    iou: float
    hd95: float
    asd: float
    collapsed: bool = False


def evaluate_pair(pred: np.ndarray, truth: np.ndarray, volume_id: str = "",
                  category: str = "", scatter: str = "") -> VolumeMetrics:
    d, i = dice_iou(pred, truth)
    h, s, collapsed = surface_distances(pred, truth)
    return VolumeMetrics(volume_id, category, scatter, d, i, h, s, collapsed)


def write_report(rows: list[VolumeMetrics], path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([r.volume_id, r.category, r.scatter,
                             repr(r.dice), repr(r.iou), repr(r.hd95), repr(r.asd)])
    return path


def aggregate(rows: list[VolumeMetrics]) -> dict:
    """Mean of each metric over volumes; empty input -> empty dict."""
    if not rows:
        return {}
    return {
        "n": len(rows),
        "dice": float(np.mean([r.dice for r in rows])),
        "iou": float(np.mean([r.iou for r in rows])),
        "hd95": float(np.mean([r.hd95 for r in rows])),
        "asd": float(np.mean([r.asd for r in rows])),
    }
