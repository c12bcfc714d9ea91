"""Intensity normalization and geometric resampling.

CT volumes are windowed to a width/level preset and rescaled to [0, 255];
other modalities (MRI, PET) use a 0.5-99.5 foreground percentile cut-off.
Images resample with prefiltered cubic B-splines, masks with
nearest-neighbor (ties toward the lower index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import NORMALIZED_0_255, RAW, LabelMask, VoxelGrid


@dataclass(frozen=True)
class WindowPreset:
    name: str
    width: float
    level: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"window width must be positive, got {self.width}")


WINDOW_PRESETS = {
    "brain": WindowPreset("brain", 80, 40),
    "abdomen": WindowPreset("abdomen", 400, 40),
    "bone": WindowPreset("bone", 1800, 400),
    "lung": WindowPreset("lung", 1500, -600),
    "mediastinum": WindowPreset("mediastinum", 400, 40),
}


def get_preset(name: str) -> WindowPreset:
    try:
        return WINDOW_PRESETS[name]
    except KeyError:
        raise KeyError(
            f"unknown window preset {name!r}; choose from {sorted(WINDOW_PRESETS)}"
        ) from None


def window_ct(grid: VoxelGrid, preset: WindowPreset) -> VoxelGrid:
    """Clamp to [level - width/2, level + width/2] and rescale to [0, 255]."""
    if grid.intensity_kind != RAW:
        raise ValueError(f"window_ct expects raw intensities, got {grid.intensity_kind}")
    lo = preset.level - preset.width / 2.0
    hi = preset.level + preset.width / 2.0
    values = np.clip(grid.values.astype(np.float64), lo, hi)
    # divide before scaling so the window endpoints land exactly on 0 / 255
    values = (values - lo) / (hi - lo) * 255.0
    return VoxelGrid(values.astype(np.float32), grid.spacing, NORMALIZED_0_255)


def percentile_bounds(grid: VoxelGrid):
    """(0.5th, 99.5th) percentile of foreground (> 0) intensity, linearly
    interpolated between order statistics."""
    foreground = grid.values[grid.values > 0]
    if foreground.size == 0:
        raise ValueError("volume has no foreground voxels (all values <= 0)")
    lo, hi = np.percentile(foreground.astype(np.float64), [0.5, 99.5])
    return float(lo), float(hi)


def percentile_normalize(grid: VoxelGrid) -> VoxelGrid:
    """Clamp to the [0.5, 99.5] percentiles of foreground (> 0) intensity,
    then rescale to [0, 255].

    A constant foreground (hi == lo) maps everything to 0.  Output stays
    float64: the mapping is specified to sub-1e-9 accuracy.
    """
    if grid.intensity_kind != RAW:
        raise ValueError(f"percentile_normalize expects raw intensities, got {grid.intensity_kind}")
    lo, hi = percentile_bounds(grid)
    if hi == lo:
        values = np.zeros(grid.values.shape, dtype=np.float64)
    else:
        values = np.clip(grid.values.astype(np.float64), lo, hi)
        values = (values - lo) / (hi - lo) * 255.0
    return VoxelGrid(values, grid.spacing, NORMALIZED_0_255)


def _source_coords(n_out, s_out, s_in):
    """Center-aligned output -> input index mapping for one axis."""
    return (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5


def _nearest_index(coords, n_in):
    # round half down so .5 ties go to the lower index
    idx = np.ceil(coords - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample(obj, target_dims, target_spacing, kind: str):
    """Resample a volume (kind='image', cubic) or mask (kind='mask', NN).

    ``target_dims`` is (nx, ny, nz); voxel centers are aligned so the
    physical extent is preserved.  Resampled masks never invent labels.
    """
    nx, ny, nz = (int(d) for d in target_dims)
    if min(nx, ny, nz) < 1:
        raise ValueError(f"target dims must be positive, got {target_dims}")
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")

    if kind == "image":
        if not isinstance(obj, VoxelGrid):
            raise TypeError("kind='image' requires a VoxelGrid")
        src, spacing = obj.values, obj.spacing
    elif kind == "mask":
        if not isinstance(obj, LabelMask):
            raise TypeError("kind='mask' requires a LabelMask")
        src, spacing = obj.labels, obj.spacing
    else:
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")

    in_nz, in_ny, in_nx = src.shape
    zc = _source_coords(nz, target_spacing[2], spacing[2])
    yc = _source_coords(ny, target_spacing[1], spacing[1])
    xc = _source_coords(nx, target_spacing[0], spacing[0])

    if kind == "mask":
        zi = _nearest_index(zc, in_nz)
        yi = _nearest_index(yc, in_ny)
        xi = _nearest_index(xc, in_nx)
        out = src[np.ix_(zi, yi, xi)]
        return LabelMask(np.ascontiguousarray(out), target_spacing)

    coords = np.meshgrid(zc, yc, xc, indexing="ij")
    out = ndimage.map_coordinates(
        src.astype(np.float64), coords, order=3, mode="mirror", prefilter=True
    )
    if obj.intensity_kind == NORMALIZED_0_255:
        out = np.clip(out, 0.0, 255.0)  # cubic overshoot would break the invariant
    return VoxelGrid(out.astype(np.float32), target_spacing, obj.intensity_kind)


MIN_AXIAL_SPACING_MM = 3.0


def enforce_axial_spacing(grid: VoxelGrid, mask: LabelMask):
    """Resample grid+mask along z to 3mm when spacing is strictly below 3mm."""
    if not mask.congruent_with(grid):
        raise ValueError("grid and mask are not congruent")
    sz = grid.spacing[2]
    if sz >= MIN_AXIAL_SPACING_MM:
        return grid, mask
    nx, ny, nz = grid.dims
    new_nz = max(1, int(round(nz * sz / MIN_AXIAL_SPACING_MM)))
    dims = (nx, ny, new_nz)
    spacing = (grid.spacing[0], grid.spacing[1], MIN_AXIAL_SPACING_MM)
    return (
        resample(grid, dims, spacing, kind="image"),
        resample(mask, dims, spacing, kind="mask"),
    )
