"""Slice-block shuffling across a mini-batch and its exact inverse.

A batch of 2B same-shaped grids is cut along one axis into N blocks of
thickness p. For every layer index j the blocks at that index are permuted
across the batch by column j of the shuffle matrix R; recovery applies the
column-wise inverse S. Blocks never change layer index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Axis, ShapeError


class ArityError(ValueError):
    """Batch size does not match what the operation expects."""


def choose_axis(rng: np.random.Generator) -> Axis:
    return Axis(int(rng.integers(3)))


def sample_shuffle_matrix(rng: np.random.Generator, batch_size: int, n_blocks: int) -> np.ndarray:
    """Matrix of shape (batch_size, n_blocks) whose columns are independent uniform permutations."""
    if batch_size < 1 or n_blocks < 1:
        raise ValueError("batch_size and n_blocks must be positive")
    return np.stack([rng.permutation(batch_size) for _ in range(n_blocks)], axis=1)


def check_shuffle_matrix(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"shuffle matrix must be 2-d, got shape {matrix.shape}")
    rows = matrix.shape[0]
    want = np.arange(rows)
    for j in range(matrix.shape[1]):
        if not np.array_equal(np.sort(matrix[:, j]), want):
            raise ValueError(f"column {j} of the shuffle matrix is not a permutation of 0..{rows - 1}")
    return matrix


def invert(matrix: np.ndarray) -> np.ndarray:
    """Column-wise inverse permutation S with ``R[S[k, j], j] == k``."""
    matrix = check_shuffle_matrix(matrix)
    inverse = np.empty_like(matrix)
    cols = np.arange(matrix.shape[1])
    inverse[matrix, cols[None, :]] = np.arange(matrix.shape[0])[:, None]
    return inverse


@dataclass(frozen=True)
class ShufflePlan:
    axis: Axis
    p: int
    n_blocks: int
    matrix: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_matrix(cls, axis, p: int, matrix) -> "ShufflePlan":
        matrix = check_shuffle_matrix(np.asarray(matrix, dtype=np.int64))
        return cls(Axis.parse(axis), int(p), matrix.shape[1], matrix, invert(matrix))

    @classmethod
    def sample(cls, rng: np.random.Generator, batch_size: int, extent: int, axis, p: int) -> "ShufflePlan":
        axis = Axis.parse(axis)
        if p < 1 or extent % p:
            raise ShapeError(f"block thickness p={p} does not divide L_a={extent} along axis {axis.name}")
        return cls.from_matrix(axis, p, sample_shuffle_matrix(rng, batch_size, extent // p))

    @classmethod
    def identity(cls, batch_size: int, extent: int, axis, p: int) -> "ShufflePlan":
        n = extent // p
        return cls.from_matrix(axis, p, np.tile(np.arange(batch_size)[:, None], (1, n)))

    @property
    def batch_size(self) -> int:
        return self.matrix.shape[0]


def _gather(grids: np.ndarray, index: np.ndarray, plan: ShufflePlan) -> np.ndarray:
    grids = np.asarray(grids)
    if grids.ndim < 4:
        raise ShapeError(f"expected a batch of 3-d grids, got shape {grids.shape}")
    if grids.shape[0] != plan.batch_size:
        raise ArityError(f"batch has {grids.shape[0]} grids but the plan has {plan.batch_size} rows")
    ax = 1 + int(plan.axis)
    extent = grids.shape[ax]
    if extent != plan.p * plan.n_blocks:
        raise ShapeError(
            f"block thickness p={plan.p} with N={plan.n_blocks} does not match L_a={extent} "
            f"along axis {plan.axis.name}"
        )
    # trailing per-voxel dims (e.g. classes) go in front so class-major storage stays contiguous
    trail = grids.ndim - 4
    lead = np.moveaxis(grids, list(range(4, grids.ndim)), list(range(trail)))
    lead = lead.reshape((-1,) + grids.shape[:4])
    moved = np.moveaxis(lead, ax + 1, 2)
    blocked = moved.reshape((moved.shape[0], -1, plan.p) + moved.shape[3:])
    # flat (batch, layer) source index; np.take keeps the result C-ordered
    source = index * plan.n_blocks + np.arange(plan.n_blocks)[None, :]
    out = np.take(blocked, source.ravel(), axis=1)
    out = out.reshape(moved.shape)
    out = np.moveaxis(out, 2, ax + 1).reshape(grids.shape[4:] + grids.shape[:4])
    out = np.ascontiguousarray(out)
    return np.moveaxis(out, list(range(trail)), list(range(4, grids.ndim)))


def shuffle_batch(grids, plan: ShufflePlan) -> np.ndarray:
    """Output i takes its block j from input ``R[i, j]``."""
    return _gather(np.asarray(grids), plan.matrix, plan)


def recover_batch(grids, plan: ShufflePlan) -> np.ndarray:
    """Inverse of :func:`shuffle_batch`: output k takes block j from input ``S[k, j]``."""
    return _gather(np.asarray(grids), plan.inverse, plan)


def split_batch(grids):
    n = len(grids)
    if n % 2:
        raise ArityError(f"cannot split a batch of odd length {n}")
    return grids[: n // 2], grids[n // 2 :]
