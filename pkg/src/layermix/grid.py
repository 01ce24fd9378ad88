"""Lattice types and shape algebra shared by the rest of the package.

Grids are plain numpy arrays laid out row-major over (D, H, W). Batched
grids carry a leading batch axis; probability grids carry the class axis
innermost. The channel dimension of images is always 1 and never stored.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Grid extents do not fit the requested operation."""


class Axis(enum.IntEnum):
    D = 0
    H = 1
    W = 2

    @classmethod
    def parse(cls, value) -> "Axis":
        if isinstance(value, Axis):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown axis {value!r}; expected one of D, H, W") from None
        return cls(int(value))

    def in_plane(self) -> tuple["Axis", "Axis"]:
        """The two axes orthogonal to this one, in (D, H, W) order."""
        return tuple(a for a in Axis if a != self)  # type: ignore[return-value]


def linear_index(dims: Sequence[int], z: int, y: int, x: int) -> int:
    d, h, w = dims
    return (z * h + y) * w + x


def check_volume(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 3 or min(grid.shape) < 1:
        raise ShapeError(f"volume must be a non-empty 3-d array, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("volume contains non-finite values")
    return grid


def check_labels(grid: np.ndarray, num_classes: int) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ShapeError(f"label grid must be 3-d, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes - 1}]")
    return grid


def check_confidence(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.size and (not np.all(np.isfinite(grid)) or grid.min() < 0 or grid.max() > 1):
        raise ValueError("confidence values must lie in [0, 1]")
    return grid


def check_supervision(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.size and not np.all((grid == 0) | (grid == 1)):
        raise ValueError("supervision values must be 0 or 1")
    return grid


def check_probs(probs: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    probs = np.asarray(probs)
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=atol):
        raise ValueError("class probabilities do not sum to 1")
    return probs


def slice_along(grid: np.ndarray, axis, start: int, length: int) -> np.ndarray:
    """Contiguous block of ``length`` slices along ``axis`` starting at ``start``.

    Works on any grid whose first three dimensions are (D, H, W); trailing
    dimensions (e.g. classes) are carried along. Returns a copy.
    """
    axis = Axis.parse(axis)
    extent = grid.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise IndexError(
            f"slice [{start}, {start + length}) out of range for axis {axis.name} with extent {extent}"
        )
    index = [slice(None)] * grid.ndim
    index[axis] = slice(start, start + length)
    return grid[tuple(index)].copy()


def concat_along(blocks: Sequence[np.ndarray], axis) -> np.ndarray:
    axis = Axis.parse(axis)
    if len(blocks) == 0:
        raise ShapeError("cannot concatenate an empty list of blocks")
    ref = blocks[0].shape
    for i, b in enumerate(blocks):
        cross = [s for k, s in enumerate(b.shape) if k != axis]
        want = [s for k, s in enumerate(ref) if k != axis]
        if b.ndim != len(ref) or cross != want:
            raise ShapeError(
                f"block {i} has cross-section {tuple(cross)} along axis {axis.name}, expected {tuple(want)}"
            )
    return np.concatenate(blocks, axis=int(axis))


def partition(grid: np.ndarray, axis, p: int) -> list[np.ndarray]:
    """Split ``grid`` into consecutive blocks of thickness ``p`` along ``axis``."""
    axis = Axis.parse(axis)
    extent = grid.shape[axis]
    if p < 1 or extent % p:
        raise ShapeError(f"block thickness p={p} does not divide L_a={extent} along axis {axis.name}")
    return [slice_along(grid, axis, j * p, p) for j in range(extent // p)]
