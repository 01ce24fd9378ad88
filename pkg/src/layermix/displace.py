"""Confidence-guided patch displacement between weak and strong streams.

Every case in the stack has two views (stream 0 = weak, stream 1 = strong).
Each layer of thickness p along the chosen axis is tiled into an n x n grid
of patches over the two orthogonal axes. Patches are classified from their
mean confidence and whether they hold ground truth, the K locations with
the widest confidence gap are kept per (case, layer), and at kept locations
where one stream is a source and the other a target the two streams swap
image, label and supervision patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Axis, ShapeError

WEAK, STRONG = 0, 1


class ConsistencyError(ValueError):
    """Statistics or selections do not belong to the given decomposition."""


@dataclass
class StreamStack:
    """Images, labels, confidences and supervision, each shaped (B, 2, d, h, w)."""

    volumes: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    supervision: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.volumes)
        if len(shape) != 5 or shape[1] != 2:
            raise ShapeError(f"stream stack must be shaped (B, 2, d, h, w), got {shape}")
        for name in ("labels", "confidence", "supervision"):
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"{name} shape {np.shape(getattr(self, name))} does not match volumes {shape}")


@dataclass
class PatchDecomposition:
    """Patch view of a stream stack.

    Each payload array is shaped (B, 2, N, n, n, p, s1, s2) where (s1, s2)
    are the patch extents along the two in-plane axes.
    """

    axis: Axis
    p: int
    n: int
    dims: tuple[int, int, int]
    volumes: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    supervision: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.volumes.shape[2]

    @property
    def layout(self) -> tuple:
        return (int(self.axis), self.p, self.n, self.dims, self.volumes.shape[0])


@dataclass
class PatchStats:
    mean_conf: np.ndarray  # (B, 2, N, n, n)
    has_gt: np.ndarray
    is_high: np.ndarray
    src: np.ndarray
    tgt: np.ndarray
    layout: tuple


def _to_patches(x: np.ndarray, axis: Axis, p: int, n: int) -> np.ndarray:
    B, S = x.shape[:2]
    a, o1, o2 = int(axis), *(int(o) for o in axis.in_plane())
    y = np.transpose(x, (0, 1, 2 + a, 2 + o1, 2 + o2))
    L, E1, E2 = y.shape[2:]
    y = y.reshape(B, S, L // p, p, n, E1 // n, n, E2 // n)
    return np.ascontiguousarray(np.transpose(y, (0, 1, 2, 4, 6, 3, 5, 7)))


def _from_patches(z: np.ndarray, axis: Axis) -> np.ndarray:
    B, S, N, n, _, p, s1, s2 = z.shape
    y = np.transpose(z, (0, 1, 2, 5, 3, 6, 4, 7)).reshape(B, S, N * p, n * s1, n * s2)
    a, o1, o2 = int(axis), *(int(o) for o in axis.in_plane())
    order = np.argsort([a, o1, o2])
    return np.ascontiguousarray(np.transpose(y, (0, 1, *(2 + order))))


def patchify(stack: StreamStack, axis, p: int, n: int) -> PatchDecomposition:
    axis = Axis.parse(axis)
    dims = tuple(int(s) for s in np.shape(stack.volumes)[2:])
    if p < 1 or dims[axis] % p:
        raise ShapeError(f"block thickness p={p} does not divide L_a={dims[axis]} along axis {axis.name}")
    for o in axis.in_plane():
        if n < 1 or dims[o] % n:
            raise ShapeError(f"grid size n={n} does not divide extent {dims[o]} along axis {o.name}")
    parts = [_to_patches(np.asarray(g), axis, p, n)
             for g in (stack.volumes, stack.labels, stack.confidence, stack.supervision)]
    return PatchDecomposition(axis, p, n, dims, *parts)


def unpatchify(dec: PatchDecomposition) -> StreamStack:
    return StreamStack(*(_from_patches(g, dec.axis)
                         for g in (dec.volumes, dec.labels, dec.confidence, dec.supervision)))


def compute_stats(dec: PatchDecomposition) -> PatchStats:
    mean_conf = dec.confidence.mean(axis=(-3, -2, -1))
    has_gt = (dec.supervision == 1).any(axis=(-3, -2, -1))
    weak, strong = mean_conf[:, WEAK], mean_conf[:, STRONG]
    # strict comparison: on ties neither stream counts as high
    is_high = np.stack([weak > strong, strong > weak], axis=1)
    src = (~is_high & has_gt) | (is_high & ~has_gt)
    tgt = (is_high & has_gt) | (~is_high & ~has_gt)
    return PatchStats(mean_conf, has_gt, is_high, src, tgt, dec.layout)


def confidence_gap(stats: PatchStats) -> np.ndarray:
    """Absolute inter-stream gap of mean confidence, shaped (B, N, n, n)."""
    return np.abs(stats.mean_conf[:, WEAK] - stats.mean_conf[:, STRONG])


def topk_select(gaps: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest gaps per (case, layer); ties go to the smaller u*n+v."""
    if k < 1:
        raise ValueError("K must be at least 1")
    gaps = np.asarray(gaps)
    B, N, n, _ = gaps.shape
    flat = gaps.reshape(B, N, n * n)
    order = np.argsort(-flat, axis=-1, kind="stable")[..., :k]
    selected = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(selected, order, True, axis=-1)
    return selected.reshape(gaps.shape)


def composite_labels(labels, supervision, pseudo) -> np.ndarray:
    labels, supervision, pseudo = np.asarray(labels), np.asarray(supervision), np.asarray(pseudo)
    if not labels.shape == supervision.shape == pseudo.shape:
        raise ShapeError("labels, supervision and pseudo-labels must share a shape")
    return np.where(supervision == 1, labels, pseudo)


def swap_mask(stats: PatchStats, selected: np.ndarray) -> np.ndarray:
    """Locations (B, N, n, n) where the streams complement each other and are selected."""
    complementary = ((stats.src[:, WEAK] & stats.tgt[:, STRONG])
                     | (stats.tgt[:, WEAK] & stats.src[:, STRONG]))
    return complementary & selected


@dataclass
class Displaced:
    """Stream-folded outputs, ordered [case0-weak, case0-strong, case1-weak, ...]."""

    volumes: np.ndarray
    labels: np.ndarray
    supervision: np.ndarray
    swapped: np.ndarray  # (B, N, n, n) locations that were exchanged


def _swap(payload: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # payload[:, ::-1] is the other stream at the same location
    where = mask[:, None, :, :, :, None, None, None]
    return np.where(where, payload[:, ::-1], payload)


def _checked_mask(dec: PatchDecomposition, stats: PatchStats, selected) -> np.ndarray:
    if stats.layout != dec.layout:
        raise ConsistencyError(f"statistics were computed on layout {stats.layout}, not {dec.layout}")
    selected = np.asarray(selected, dtype=bool)
    want = (dec.volumes.shape[0],) + dec.volumes.shape[2:5]
    if selected.shape != want:
        raise ConsistencyError(f"selection mask shape {selected.shape} does not match {want}")
    return swap_mask(stats, selected)


def displace_patches(dec: PatchDecomposition, stats: PatchStats, selected: np.ndarray) -> PatchDecomposition:
    """Swap patches between streams; returns a new decomposition (confidence swaps too)."""
    return swap_with_mask(dec, _checked_mask(dec, stats, selected))


def swap_with_mask(dec: PatchDecomposition, mask) -> PatchDecomposition:
    """Exchange the streams at ``mask`` (B, N, n, n); replays a recorded swap, and undoes it if applied twice."""
    mask = np.asarray(mask, dtype=bool)
    want = (dec.volumes.shape[0],) + dec.volumes.shape[2:5]
    if mask.shape != want:
        raise ConsistencyError(f"swap mask shape {mask.shape} does not match {want}")
    return PatchDecomposition(dec.axis, dec.p, dec.n, dec.dims,
                              *(_swap(g, mask) for g in (dec.volumes, dec.labels,
                                                          dec.confidence, dec.supervision)))


def displace(dec: PatchDecomposition, stats: PatchStats, selected: np.ndarray) -> Displaced:
    mask = _checked_mask(dec, stats, selected)

    def fold(payload):
        g = _from_patches(_swap(payload, mask), dec.axis)
        return g.reshape((-1,) + g.shape[2:])

    return Displaced(fold(dec.volumes), fold(dec.labels), fold(dec.supervision), mask)


def unfold_streams(grids: np.ndarray) -> np.ndarray:
    """Inverse of the stream fold: (2B, ...) -> (B, 2, ...)."""
    grids = np.asarray(grids)
    return grids.reshape((grids.shape[0] // 2, 2) + grids.shape[1:])
