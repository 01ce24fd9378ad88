"""Synthetic layered phantoms: ellipsoidal structures in fixed bands along one axis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Axis


class SpecError(ValueError):
    """Phantom spec cannot be realized."""


@dataclass(frozen=True)
class ClassSpec:
    band: tuple[float, float]  # voxel interval along the layer axis holding the structure
    radius_range: tuple[float, float]  # semi-axis length range in voxels, sampled per axis
    jitter: float = 0.0  # max in-plane offset of the center from the volume center
    intensity_mean: float = 1.0
    intensity_std: float = 0.0
    plane_offset: tuple[float, float] = (0.0, 0.0)  # fixed in-plane displacement from center
    plane_radius_range: tuple[float, float] | None = None  # in-plane semi-axes; defaults to radius_range

    @property
    def max_plane_radius(self) -> float:
        return (self.plane_radius_range or self.radius_range)[1]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    classes: tuple[ClassSpec, ...]
    layer_axis: Axis = Axis.D
    noise_std: float = 0.0
    background_mean: float = 0.0
    gain_range: tuple[float, float] = (1.0, 1.0)
    bias_range: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    @property
    def num_classes(self) -> int:
        """Class count including background."""
        return len(self.classes) + 1

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecError(f"invalid dims {self.dims}")
        a = int(self.layer_axis)
        prev = -np.inf
        for c, cls in enumerate(self.classes, start=1):
            lo, hi = cls.band
            rmin, rmax = cls.radius_range
            if not 0 <= lo < hi <= self.dims[a]:
                raise SpecError(f"class {c}: band {cls.band} outside [0, {self.dims[a]}]")
            if lo < prev:
                raise SpecError(f"class {c}: bands must be ordered along the layer axis")
            prev = lo
            if not 0 < rmin <= rmax:
                raise SpecError(f"class {c}: invalid radius range {cls.radius_range}")
            if cls.plane_radius_range is not None and not 0 < cls.plane_radius_range[0] <= cls.plane_radius_range[1]:
                raise SpecError(f"class {c}: invalid in-plane radius range {cls.plane_radius_range}")
            if 2 * rmax > hi - lo:
                raise SpecError(f"class {c}: radius {rmax} exceeds half the band width {(hi - lo) / 2}")
            for k, o in enumerate(self.layer_axis.in_plane()):
                center = self.dims[o] / 2 + cls.plane_offset[k]
                r = cls.max_plane_radius
                if center - cls.jitter - r < 0 or center + cls.jitter + r > self.dims[o]:
                    raise SpecError(f"class {c}: radius {r} with jitter does not fit along axis {o.name}")


def default_spec(size: int = 24, seed: int = 0) -> PhantomSpec:
    """Four-class layered phantom: two large organs, a medium one and a small one."""
    s = size / 24
    return PhantomSpec(
        dims=(size, size, size),
        classes=(
            ClassSpec(band=(1 * s, 11 * s), radius_range=(3.5 * s, 4.8 * s), jitter=2.0 * s,
                      intensity_mean=0.55, intensity_std=0.05, plane_offset=(0.0, -2.0 * s)),
            ClassSpec(band=(6 * s, 16 * s), radius_range=(2.5 * s, 3.5 * s), jitter=1.5 * s,
                      intensity_mean=0.85, intensity_std=0.05, plane_offset=(0.0, 4.0 * s)),
            ClassSpec(band=(8 * s, 14 * s), radius_range=(1.2 * s, 1.8 * s), jitter=1.0 * s,
                      intensity_mean=0.30, intensity_std=0.04, plane_offset=(-4.0 * s, 0.0)),
            ClassSpec(band=(12 * s, 23 * s), radius_range=(3.5 * s, 5.0 * s), jitter=2.0 * s,
                      intensity_mean=0.55, intensity_std=0.05, plane_offset=(0.0, 0.0)),
        ),
        layer_axis=Axis.D,
        noise_std=0.05,
        background_mean=0.1,
        gain_range=(0.75, 1.25),
        bias_range=(-0.15, 0.15),
        seed=seed,
    )


def _ellipsoid(dims, center, radii) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator | None = None):
    """Return (volume float64, labels int64); deterministic for a given rng/seed."""
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    a = int(spec.layer_axis)
    plane = spec.layer_axis.in_plane()
    labels = np.zeros(spec.dims, dtype=np.int64)
    for c, cls in enumerate(spec.classes, start=1):
        radii = rng.uniform(cls.radius_range[0], cls.radius_range[1], size=3)
        if cls.plane_radius_range is not None:
            for o in plane:
                radii[o] = rng.uniform(*cls.plane_radius_range)
        lo, hi = cls.band
        center = [0.0, 0.0, 0.0]
        # voxel centers sit at integer coordinates; the band [lo, hi) spans lo..hi-1
        center[a] = rng.uniform(lo - 0.5 + radii[a], hi - 0.5 - radii[a]) if hi - lo > 2 * radii[a] \
            else (lo + hi - 1) / 2
        for k, o in enumerate(plane):
            center[o] = (spec.dims[o] - 1) / 2 + cls.plane_offset[k] + rng.uniform(-cls.jitter, cls.jitter)
        labels[_ellipsoid(spec.dims, center, radii)] = c
    means = np.array([spec.background_mean] + [c.intensity_mean for c in spec.classes])
    stds = np.array([0.0] + [c.intensity_std for c in spec.classes])
    volume = means[labels] + stds[labels] * rng.standard_normal(spec.dims)
    volume += spec.noise_std * rng.standard_normal(spec.dims)
    gain = rng.uniform(*spec.gain_range)
    bias = rng.uniform(*spec.bias_range)
    return gain * volume + bias, labels


def generate_dataset(spec: PhantomSpec, count: int, seed: int):
    """``count`` phantoms drawn from independent child streams of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [generate_phantom(spec, np.random.default_rng(c)) for c in children]


def layered_spec(size: int = 24, seed: int = 0) -> PhantomSpec:
    """Stacked flat structures of equal brightness whose identity is given by depth alone.

    Per-case gain and bias shift intensities, so brightness separates foreground
    from background only up to a case-dependent offset while depth is stable.
    """
    s = size / 24
    wide = (6.0 * s, 7.5 * s)
    return PhantomSpec(
        dims=(size, size, size),
        classes=(
            ClassSpec(band=(1 * s, 7 * s), radius_range=(2.2 * s, 2.9 * s), plane_radius_range=wide,
                      jitter=3.0 * s, intensity_mean=1.0, intensity_std=0.05),
            ClassSpec(band=(7 * s, 12 * s), radius_range=(1.8 * s, 2.4 * s),
                      plane_radius_range=(5.0 * s, 6.5 * s), jitter=3.0 * s, intensity_mean=1.0,
                      intensity_std=0.05),
            ClassSpec(band=(12 * s, 16 * s), radius_range=(1.2 * s, 1.8 * s),
                      plane_radius_range=(2.0 * s, 3.0 * s), jitter=3.0 * s, intensity_mean=1.0,
                      intensity_std=0.04),
            ClassSpec(band=(16 * s, 23 * s), radius_range=(2.5 * s, 3.4 * s), plane_radius_range=wide,
                      jitter=3.0 * s, intensity_mean=1.0, intensity_std=0.05),
        ),
        layer_axis=Axis.D,
        noise_std=0.05,
        background_mean=0.0,
        gain_range=(0.8, 1.2),
        bias_range=(-0.1, 0.1),
        seed=seed,
    )
