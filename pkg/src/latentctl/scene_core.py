"""Label maps, class masks, replicated 3D latent codes and edit arithmetic.

Everything here is a pure function over immutable numpy values. Latent codes
are H x W x D with the channel dimension last; directions are D-vectors that
get broadcast spatially when applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ClassIdError, DimensionError, ShapeError

UNIT_NORM_TOL = 1e-5


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LabelMap:
    """Integer semantic layout; every pixel holds one class id in [0, class_count)."""

    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] <= 0 or labels.shape[1] <= 0:
            raise DimensionError(f"label grid must be 2D and nonempty, got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ShapeError("labels must be integers")
        if self.class_count <= 0:
            raise ClassIdError("class_count must be positive")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ClassIdError(
                f"labels must lie in [0, {self.class_count}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "labels", _readonly(labels.astype(np.int32)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def present_classes(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels)]


@dataclass(frozen=True)
class ClassMask:
    """Binary indicator of one class inside a label map."""

    values: np.ndarray
    class_id: int
    pixel_count: int = field(default=-1)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DimensionError(f"mask must be 2D, got {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ShapeError("mask values must be binary")
        values = _readonly(values.astype(np.uint8))
        object.__setattr__(self, "values", values)
        count = int(values.sum())
        if self.pixel_count == -1:
            object.__setattr__(self, "pixel_count", count)
        elif self.pixel_count != count:
            raise ShapeError(f"pixel_count {self.pixel_count} != actual {count}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def complement(self) -> "ClassMask":
        return ClassMask(values=1 - self.values, class_id=self.class_id)


@dataclass(frozen=True)
class LatentCode3D:
    """H x W x D noise tensor; base_vector is kept only while all fibers agree."""

    values: np.ndarray
    base_vector: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise DimensionError(f"latent tensor must be H x W x D, got {values.shape}")
        if not np.isfinite(values).all():
            raise ShapeError("latent tensor must be finite")
        object.__setattr__(self, "values", _readonly(values))
        if self.base_vector is not None:
            base = np.asarray(self.base_vector, dtype=np.float32)
            if base.shape != (values.shape[2],):
                raise ShapeError("base vector length must match channel count")
            if not (values == base[None, None, :]).all():
                raise ShapeError("base vector present but fibers are not replicated")
            object.__setattr__(self, "base_vector", _readonly(base))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class EditVector:
    """A direction in latent channel space."""

    values: np.ndarray
    unit_norm: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 1 or values.shape[0] <= 0:
            raise DimensionError(f"direction must be a nonempty vector, got {values.shape}")
        if self.unit_norm:
            norm = float(np.linalg.norm(values))
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                raise ShapeError(f"unit_norm set but |v| = {norm}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def normalized(self) -> "EditVector":
        norm = float(np.linalg.norm(self.values))
        if norm == 0.0:
            raise ShapeError("cannot normalize the zero vector")
        return EditVector(values=self.values / norm, unit_norm=True)


def build_latent(seed: int, channels: int, height: int, width: int) -> LatentCode3D:
    """Draw a standard-normal base vector and replicate it over the canvas."""
    if channels <= 0 or height <= 0 or width <= 0:
        raise DimensionError(
            f"dimensions must be positive, got D={channels}, H={height}, W={width}"
        )
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(channels).astype(np.float32)
    values = np.broadcast_to(base, (height, width, channels)).copy()
    return LatentCode3D(values=values, base_vector=base)


def class_mask(label_map: LabelMap, class_id: int) -> ClassMask:
    """Binary indicator of the pixels carrying `class_id`."""
    if not 0 <= class_id < label_map.class_count:
        raise ClassIdError(
            f"class {class_id} out of range [0, {label_map.class_count})"
        )
    values = (label_map.labels == class_id).astype(np.uint8)
    return ClassMask(values=values, class_id=class_id)


def apply_direction(
    z: LatentCode3D,
    v: EditVector,
    alpha: float,
    mask: Optional[ClassMask] = None,
) -> LatentCode3D:
    """Shift z by alpha * v everywhere, or only inside the mask when given."""
    if v.channels != z.channels:
        raise ShapeError(f"direction has {v.channels} channels, latent has {z.channels}")
    if mask is not None and (mask.height, mask.width) != (z.height, z.width):
        raise ShapeError(
            f"mask {mask.values.shape} does not match latent canvas "
            f"{(z.height, z.width)}"
        )
    delta = np.float32(alpha) * v.values
    if mask is None:
        values = z.values + delta[None, None, :]
        base = None if z.base_vector is None else z.base_vector + delta
        return LatentCode3D(values=values, base_vector=base)
    values = z.values + mask.values[:, :, None].astype(np.float32) * delta[None, None, :]
    return LatentCode3D(values=values, base_vector=None)


LatentSampler = Callable[[], np.ndarray]


def gaussian_latent_sampler(seed: int, channels: int) -> LatentSampler:
    """Stateful sampler of standard-normal base vectors, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def sample() -> np.ndarray:
        return rng.standard_normal(channels).astype(np.float32)

    return sample


def average_channel_norm(sampler: LatentSampler, samples: int) -> float:
    """Monte-Carlo estimate of the mean channel-wise L2 norm of base vectors."""
    if samples < 1:
        raise DimensionError("samples must be >= 1")
    total = 0.0
    for _ in range(samples):
        total += float(np.linalg.norm(np.asarray(sampler(), dtype=np.float64)))
    return total / samples


def nearest_indices(source: int, target: int) -> np.ndarray:
    """Source indices selected by nearest-neighbor reduction to `target` cells."""
    if target <= 0 or source <= 0:
        raise DimensionError("sizes must be positive")
    if target > source:
        raise DimensionError(f"cannot upsample from {source} to {target}")
    return (np.arange(target) * source) // target


def downsample_mask(mask: ClassMask, target_height: int, target_width: int) -> ClassMask:
    """Nearest-neighbor mask reduction; output stays binary."""
    rows = nearest_indices(mask.height, target_height)
    cols = nearest_indices(mask.width, target_width)
    values = mask.values[np.ix_(rows, cols)]
    return ClassMask(values=values, class_id=mask.class_id)


def downsample_grid(values: np.ndarray, target_height: int, target_width: int) -> np.ndarray:
    """Nearest-neighbor reduction for arbitrary per-pixel grids (H x W x ...)."""
    rows = nearest_indices(values.shape[0], target_height)
    cols = nearest_indices(values.shape[1], target_width)
    return values[np.ix_(rows, cols)]
