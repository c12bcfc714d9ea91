"""Volume and mask data model plus geometric primitives.

Voxel data is stored as numpy arrays of shape ``(nz, ny, nx)`` in C order,
so the flat buffer is x-fastest: ``flat[x + nx*(y + ny*z)]``.  A video clip
reuses the same layout with z as the frame axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RAW = "raw"
NORMALIZED_0_255 = "normalized_0_255"

_INTENSITY_KINDS = (RAW, NORMALIZED_0_255)


class VoxelGrid:
    """A 3D scalar volume (or video clip) with anisotropic physical spacing.

    Immutable after construction; the backing array is marked read-only.
    For videos, ``spacing[2]`` is the frame period.
    """

    __slots__ = ("values", "spacing", "intensity_kind")

    def __init__(self, values, spacing, intensity_kind=RAW):
        values = np.ascontiguousarray(values)
        if values.ndim != 3:
            raise ValueError(f"expected a 3D array (nz, ny, nx), got shape {values.shape}")
        if min(values.shape) < 1:
            raise ValueError(f"all dims must be positive, got shape {values.shape}")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive finite values, got {spacing}")
        if intensity_kind not in _INTENSITY_KINDS:
            raise ValueError(f"unknown intensity_kind {intensity_kind!r}")
        if intensity_kind == NORMALIZED_0_255:
            vmin, vmax = float(values.min()), float(values.max())
            if vmin < 0.0 or vmax > 255.0:
                raise ValueError(
                    f"normalized_0_255 values must lie in [0, 255], got [{vmin}, {vmax}]"
                )
        values = values.copy()
        values.flags.writeable = False
        self.values = values
        self.spacing = spacing
        self.intensity_kind = intensity_kind

    @property
    def dims(self):
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def nz(self):
        return self.values.shape[0]

    @classmethod
    def from_flat(cls, intensities, dims, spacing, intensity_kind=RAW):
        """Build from an x-fastest flat buffer and (nx, ny, nz) dims."""
        nx, ny, nz = dims
        flat = np.asarray(intensities)
        if flat.size != nx * ny * nz:
            raise ValueError(f"buffer has {flat.size} values, dims {dims} need {nx * ny * nz}")
        return cls(flat.reshape(nz, ny, nx), spacing, intensity_kind)

    def with_values(self, values, intensity_kind=None):
        """New grid with the same spacing but different voxel values."""
        kind = self.intensity_kind if intensity_kind is None else intensity_kind
        return VoxelGrid(values, self.spacing, kind)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.intensity_kind == other.intensity_kind
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def __repr__(self):
        return f"VoxelGrid(dims={self.dims}, spacing={self.spacing}, kind={self.intensity_kind})"


class LabelMask:
    """Small-integer label volume congruent to a parent :class:`VoxelGrid`.

    Label 0 is background.  Per-object views treat ``labels == k`` as a
    binary mask.  Unlike grids, masks stay writable so :func:`insert_slice`
    can edit single slices (single-writer contract).
    """

    __slots__ = ("labels", "spacing")

    def __init__(self, labels, spacing):
        labels = np.ascontiguousarray(labels)
        if labels.ndim != 3:
            raise ValueError(f"expected a 3D array (nz, ny, nx), got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be an integer array, got dtype {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive finite values, got {spacing}")
        self.labels = labels
        self.spacing = spacing

    @property
    def dims(self):
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)

    @property
    def nz(self):
        return self.labels.shape[0]

    @property
    def object_ids(self):
        """Set of labels present, excluding background."""
        present = np.unique(self.labels)
        return {int(v) for v in present if v != 0}

    @classmethod
    def zeros_like(cls, grid: VoxelGrid, dtype=np.uint8):
        return cls(np.zeros(grid.values.shape, dtype=dtype), grid.spacing)

    def binary(self, object_id=None):
        """Boolean array for one object (or any foreground if None)."""
        if object_id is None:
            return self.labels != 0
        return self.labels == object_id

    def copy(self):
        return LabelMask(self.labels.copy(), self.spacing)

    def congruent_with(self, grid) -> bool:
        return self.labels.shape == grid.values.shape and self.spacing == grid.spacing

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.labels.shape == other.labels.shape
            and bool(np.array_equal(self.labels, other.labels))
        )

    def __repr__(self):
        return f"LabelMask(dims={self.dims}, spacing={self.spacing}, objects={sorted(self.object_ids)})"


@dataclass(frozen=True)
class BoundingBox2D:
    """Axis-aligned box on one slice; max coordinates are half-open."""

    slice_index: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinates in {self}")
        if self.slice_index < 0:
            raise ValueError(f"negative slice index in {self}")

    def check_within(self, dims):
        nx, ny, nz = dims
        if self.slice_index >= nz:
            raise ValueError(f"box slice {self.slice_index} outside volume with nz={nz}")
        if self.x_max > nx or self.y_max > ny:
            raise ValueError(f"box {self} exceeds slice dims ({nx}, {ny})")


@dataclass(frozen=True)
class BoundingBox3D:
    """A 2D extent swept over a half-open slice interval [z_min, z_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    z_min: int
    z_max: int

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box {self}")
        if self.z_min >= self.z_max:
            raise ValueError(f"empty slice interval in {self}")
        if min(self.x_min, self.y_min, self.z_min) < 0:
            raise ValueError(f"negative coordinates in {self}")

    def check_within(self, dims):
        nx, ny, nz = dims
        if self.z_max > nz or self.x_max > nx or self.y_max > ny:
            raise ValueError(f"box {self} exceeds volume dims {dims}")

    def box2d_at(self, z) -> BoundingBox2D:
        if not (self.z_min <= z < self.z_max):
            raise ValueError(f"slice {z} outside [{self.z_min}, {self.z_max})")
        return BoundingBox2D(z, self.x_min, self.y_min, self.x_max, self.y_max)

    def slice_range(self) -> "SliceRange":
        return SliceRange(self.z_min, self.z_max - 1)


@dataclass(frozen=True)
class SliceRange:
    """Inclusive slice interval in array order (top <= bottom)."""

    top: int
    bottom: int

    def __post_init__(self):
        if self.top < 0 or self.top > self.bottom:
            raise ValueError(f"invalid slice range {self}")

    def check_within(self, nz):
        if self.bottom >= nz:
            raise ValueError(f"range {self} outside volume with nz={nz}")

    def __contains__(self, z):
        return self.top <= z <= self.bottom

    def indices(self):
        return range(self.top, self.bottom + 1)

    def __len__(self):
        return self.bottom - self.top + 1


def middle_slice_index(grid) -> int:
    """Default prompt slice: floor(nz / 2); ties on even nz break low."""
    return grid.nz // 2


def extract_slice(grid, z):
    """Read-only (ny, nx) view of one slice / frame."""
    if not 0 <= z < grid.nz:
        raise IndexError(f"slice {z} out of range for nz={grid.nz}")
    values = grid.values if isinstance(grid, VoxelGrid) else grid.labels
    view = values[z]
    view = view.view()
    view.flags.writeable = False
    return view


def insert_slice(mask: LabelMask, z, slice_mask) -> LabelMask:
    """Overwrite one slice of a mask in place; other slices untouched."""
    if not 0 <= z < mask.nz:
        raise IndexError(f"slice {z} out of range for nz={mask.nz}")
    slice_mask = np.asarray(slice_mask)
    if slice_mask.shape != mask.labels.shape[1:]:
        raise ValueError(
            f"slice shape {slice_mask.shape} does not match {mask.labels.shape[1:]}"
        )
    if slice_mask.size and slice_mask.min() < 0:
        raise ValueError("labels must be non-negative")
    mask.labels[z] = slice_mask
    return mask


def tight_box_2d(slice_mask, slice_index=0) -> BoundingBox2D:
    """Tightest half-open box around the foreground of a 2D mask."""
    ys, xs = np.nonzero(np.asarray(slice_mask) != 0)
    if ys.size == 0:
        raise ValueError("cannot compute a bounding box of an empty mask")
    return BoundingBox2D(
        slice_index,
        int(xs.min()),
        int(ys.min()),
        int(xs.max()) + 1,
        int(ys.max()) + 1,
    )
