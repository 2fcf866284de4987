"""CT-style volume preprocessing: HU windowing, isotropic resampling, cropping, augmentation.

Conventions: ``voxels[i, j, k]`` sits at physical position
``((i + 0.5) * sx, (j + 0.5) * sy, (k + 0.5) * sz)`` in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ContractError

HU_MIN = -1024.0
HU_MAX = 400.0
AIR = -1.0


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise ConfigurationError(f"a volume is 3-D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigurationError(f"spacings must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def hu_normalize(v: Volume) -> Volume:
    """Clip to [-1024, 400] HU, then map linearly onto [-1, 1]."""
    x = np.clip(v.voxels, HU_MIN, HU_MAX)
    return Volume((x - HU_MIN) / ((HU_MAX - HU_MIN) / 2.0) - 1.0, v.spacing)


def _round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def _interp_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation of ``a`` along ``axis`` at fractional indices, edge-clamped."""
    n = a.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    i0 = np.floor(c).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w = c - i0
    shape = [1] * a.ndim
    shape[axis] = len(coords)
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def resample_trilinear(v: Volume, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Volume:
    """Resample to ``spacing`` (default 1 mm isotropic), sampling output voxel centers."""
    target = tuple(float(s) for s in spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ConfigurationError(f"target spacing must be three positive numbers, got {spacing}")
    out = v.voxels
    for axis, (n, s, t) in enumerate(zip(v.dims, v.spacing, target)):
        m = max(1, _round_half_away(n * s / t))
        centers = (np.arange(m) + 0.5) * t
        out = _interp_axis(out, centers / s - 0.5, axis)
    return Volume(out, target)


def crop_patch(v: Volume, center, edge: int, fill: float = AIR) -> Volume:
    """edge^3 cube around the voxel containing the physical point ``center``.

    The containing voxel lands at index ``edge // 2`` of the patch; regions
    outside the volume are filled with ``fill`` (normalized air).
    """
    edge = int(edge)
    if edge <= 0:
        raise ConfigurationError(f"patch edge must be positive, got {edge}")
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (3,):
        raise ContractError(f"center must be an (x, y, z) point, got {center!r}")
    idx = np.floor(center / np.asarray(v.spacing)).astype(int)
    start = idx - edge // 2
    patch = np.full((edge, edge, edge), fill, dtype=np.float64)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + edge, v.dims)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - start
        dst_hi = dst_lo + (src_hi - src_lo)
        patch[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = v.voxels[
            src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
        ]
    return Volume(patch, v.spacing)


@dataclass(frozen=True)
class AugmentSpec:
    rotation: int = 0
    axis: int = 0
    flip: bool = False
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ConfigurationError(f"rotation must be one of 0/90/180/270 degrees, got {self.rotation}")
        if self.axis not in (0, 1, 2):
            raise ConfigurationError(f"rotation axis must be 0, 1 or 2, got {self.axis}")
        shift = tuple(float(s) for s in self.shift)
        if len(shift) != 3 or any(abs(s) > 1 for s in shift):
            raise ConfigurationError(f"shift must be three offsets in [-1, 1], got {self.shift}")
        object.__setattr__(self, "shift", shift)

    @classmethod
    def random(cls, rng: np.random.Generator) -> AugmentSpec:
        return cls(
            rotation=int(rng.choice([0, 90, 180, 270])),
            axis=int(rng.integers(3)),
            flip=bool(rng.integers(2)),
            shift=tuple(rng.uniform(-1.0, 1.0, 3)),
        )


def _rotate(a: np.ndarray, quarter_turns: int, axis: int) -> np.ndarray:
    plane = [d for d in range(3) if d != axis]
    return np.rot90(a, quarter_turns, axes=plane)


def augment(patch, spec: AugmentSpec):
    """Rotate, then flip left-right (axis 0), then shift sub-voxel with edge clamp.

    Accepts a :class:`Volume` or a bare cubic array and returns the same kind.
    """
    is_volume = isinstance(patch, Volume)
    a = patch.voxels if is_volume else np.asarray(patch, dtype=np.float64)
    if a.ndim != 3 or len(set(a.shape)) != 1:
        raise ContractError(f"augment expects a cubic patch, got shape {a.shape}")
    a = _rotate(a, spec.rotation // 90, spec.axis)
    if spec.flip:
        a = a[::-1]
    for axis, s in enumerate(spec.shift):
        if s != 0.0:
            a = _interp_axis(a, np.arange(a.shape[axis]) - s, axis)
    a = np.ascontiguousarray(a)
    return Volume(a, patch.spacing) if is_volume else a
