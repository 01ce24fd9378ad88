"""Per-voxel linear softmax segmentor with analytic gradients.

Each voxel is described by four features: its intensity and its (z, y, x)
position normalized by the grid extents. Logits are ``phi @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels, losses

FEATURE_DIM = 4


@dataclass
class SegmentorParams:
    weight: np.ndarray  # (4, num_classes)
    bias: np.ndarray  # (num_classes,)

    @classmethod
    def zeros(cls, num_classes: int) -> "SegmentorParams":
        return cls(np.zeros((FEATURE_DIM, num_classes)), np.zeros(num_classes))

    @classmethod
    def init(cls, num_classes: int, rng: np.random.Generator, scale: float = 0.01) -> "SegmentorParams":
        return cls(scale * rng.standard_normal((FEATURE_DIM, num_classes)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def copy(self) -> "SegmentorParams":
        return SegmentorParams(self.weight.copy(), self.bias.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    @classmethod
    def from_vector(cls, vec: np.ndarray, num_classes: int) -> "SegmentorParams":
        vec = np.asarray(vec, dtype=np.float64)
        split = FEATURE_DIM * num_classes
        return cls(vec[:split].reshape(FEATURE_DIM, num_classes).copy(), vec[split:].copy())


@lru_cache(maxsize=16)
def _coords(dims: tuple[int, int, int]) -> np.ndarray:
    """Normalized (z, y, x) coordinates, shaped (3, d*h*w)."""
    d, h, w = dims
    z, y, x = np.meshgrid(np.arange(d) / d, np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.stack([z.ravel(), y.ravel(), x.ravel()])
    out.setflags(write=False)
    return out


def features(volumes: np.ndarray) -> np.ndarray:
    """Feature array shaped ``volumes.shape + (4,)`` for a grid or a batch of grids."""
    volumes = np.asarray(volumes, dtype=np.float64)
    coords = _coords(tuple(volumes.shape[-3:])).T.reshape(volumes.shape[-3:] + (3,))
    coords = np.broadcast_to(coords, volumes.shape + (3,))
    return np.concatenate([volumes[..., None], coords], axis=-1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _position_term(params: SegmentorParams, spatial) -> np.ndarray:
    """Logit contribution of the coordinates plus bias, shaped (K, d*h*w)."""
    return params.weight[1:].T @ _coords(tuple(spatial)) + params.bias[:, None]


def _flat_volumes(volumes: np.ndarray) -> np.ndarray:
    size = int(np.prod(volumes.shape[-3:]))
    return np.ascontiguousarray(volumes, dtype=np.float64).reshape(-1, size)


def _softmax_class_major(params: SegmentorParams, volumes: np.ndarray):
    """Class-major probabilities (K, M, V), argmax labels (M, V) and max probability (M, V)."""
    flat = _flat_volumes(volumes)
    probs = np.empty((params.num_classes,) + flat.shape)
    labels = np.empty(flat.shape, dtype=np.int64)
    conf = np.empty(flat.shape)
    _kernels.shifted_logits(np.ascontiguousarray(params.weight[0]),
                            _position_term(params, volumes.shape[-3:]), flat, probs, labels)
    np.exp(probs, out=probs)
    _kernels.normalize(probs, conf)
    return probs, labels, conf


def forward(params: SegmentorParams, volumes: np.ndarray) -> np.ndarray:
    """Softmax probabilities shaped ``volumes.shape + (num_classes,)``.

    The result is a view onto class-major storage; voxel reductions per class stay contiguous.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    probs = _softmax_class_major(params, volumes)[0]
    return np.moveaxis(probs.reshape((params.num_classes,) + volumes.shape), 0, -1)


def backward_from_prob_grad(volumes: np.ndarray, probs: np.ndarray, prob_grad: np.ndarray) -> SegmentorParams:
    """Chain a loss gradient w.r.t. probabilities through softmax and the linear map."""
    volumes = np.asarray(volumes, dtype=np.float64)
    flat = _flat_volumes(volumes)
    k = np.shape(probs)[-1]

    def class_major(a):
        return np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)).reshape((k,) + flat.shape)

    weight, bias = _kernels.chain_backward(flat, _coords(tuple(volumes.shape[-3:])),
                                           class_major(probs), class_major(prob_grad))
    return SegmentorParams(weight, bias)


LOSS_GRADS = {
    "ce": losses.cross_entropy_grad,
    "dice": losses.soft_dice_grad,
    "hybrid": losses.displacement_grad,
}
LOSSES = {
    "ce": losses.cross_entropy_loss,
    "dice": losses.soft_dice_loss,
    "hybrid": losses.displacement_loss,
}


def backward(params: SegmentorParams, volumes, probs, target, loss_kind: str) -> SegmentorParams:
    """Gradient of ``loss_kind`` (ce, dice or hybrid) w.r.t. the parameters."""
    return backward_from_prob_grad(volumes, probs, LOSS_GRADS[loss_kind](probs, target))


def clamped_noise(rng: np.random.Generator, shape, sigma: float, clamp: float) -> np.ndarray:
    if sigma < 0 or clamp < 0:
        raise ValueError("noise sigma and clamp must be nonnegative")
    if sigma == 0:
        return np.zeros(shape)
    return np.clip(rng.normal(0.0, sigma, size=shape), -clamp, clamp)


def pseudo_label(teacher: SegmentorParams, volumes, rng: np.random.Generator,
                 sigma: float = 0.1, clamp: float = 0.2):
    """Argmax labels and max-probability confidence of the teacher on noised inputs.

    Ties go to the smallest class id.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    noisy = volumes + clamped_noise(rng, volumes.shape, sigma, clamp)
    _, labels, conf = _softmax_class_major(teacher, noisy)
    return labels.reshape(volumes.shape), conf.reshape(volumes.shape)
