"""Per-class Dice and average surface distance on label grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def dice_score(pred, ref, cls: int) -> float | None:
    """2|P & R| / (|P| + |R|); ``None`` when the class is absent from both."""
    p = np.asarray(pred) == cls
    r = np.asarray(ref) == cls
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return None
    return 2.0 * int((p & r).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it; the border counts as outside."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for dz, dy, dx in _NEIGHBOURS:
        interior &= padded[1 + dz:padded.shape[0] - 1 + dz,
                           1 + dy:padded.shape[1] - 1 + dy,
                           1 + dx:padded.shape[2] - 1 + dx]
    return mask & ~interior


def _directed_mean(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    """Mean over points of ``a`` of the Euclidean distance to the nearest point of ``b``."""
    nearest = np.empty(len(a))
    for i in range(0, len(a), chunk):
        diff = a[i:i + chunk, None, :] - b[None, :, :]
        nearest[i:i + chunk] = np.sqrt((diff * diff).sum(axis=-1).min(axis=1))
    return float(nearest.mean())


def average_surface_distance(pred, ref, cls: int) -> float | None:
    """Symmetric ASD in voxels by exhaustive search; ``None`` if either mask is empty."""
    p = np.asarray(pred) == cls
    r = np.asarray(ref) == cls
    if not p.any() or not r.any():
        return None
    sp = np.argwhere(surface(p)).astype(np.float64)
    sr = np.argwhere(surface(r)).astype(np.float64)
    return 0.5 * (_directed_mean(sp, sr) + _directed_mean(sr, sp))


@dataclass
class MetricReport:
    dice: dict[int, float | None]
    asd: dict[int, float | None]

    @property
    def mean_dice(self) -> float | None:
        vals = [v for v in self.dice.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_asd(self) -> float | None:
        vals = [v for v in self.asd.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def evaluate(pred, ref, num_classes: int, include_background: bool = False, with_asd: bool = True) -> MetricReport:
    classes = range(0 if include_background else 1, num_classes)
    dice = {c: dice_score(pred, ref, c) for c in classes}
    asd = {c: average_surface_distance(pred, ref, c) if with_asd else None for c in classes}
    return MetricReport(dice, asd)
