"""Input validation helpers shared by the estimator layer."""

from __future__ import annotations

import numpy as np

from .volume import NORMALIZED_0_255, LabelMask, VoxelGrid


def as_voxel_grid(x, spacing=(1.0, 1.0, 1.0)) -> VoxelGrid:
    """Accept a VoxelGrid or a (nz, ny, nx) array in [0, 255]."""
    if isinstance(x, VoxelGrid):
        return x
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected VoxelGrid or 3D array, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 255.0:
        raise ValueError("array volumes must already be normalized to [0, 255]")
    return VoxelGrid(arr, spacing, NORMALIZED_0_255)


def as_label_mask(y, like: VoxelGrid = None) -> LabelMask:
    if isinstance(y, LabelMask):
        mask = y
    else:
        arr = np.asarray(y)
        if arr.ndim != 3:
            raise ValueError(f"expected LabelMask or 3D array, got shape {arr.shape}")
        spacing = like.spacing if like is not None else (1.0, 1.0, 1.0)
        mask = LabelMask(arr.astype(np.uint8, copy=False), spacing)
    if like is not None and not mask.congruent_with(like):
        raise ValueError(
            f"mask dims/spacing {mask.dims}/{mask.spacing} do not match "
            f"volume {like.dims}/{like.spacing}"
        )
    return mask


def check_paired(X, y):
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} volumes but y has {len(y)} masks")
    if len(X) == 0:
        raise ValueError("need at least one volume")
    grids = [as_voxel_grid(x) for x in X]
    masks = [as_label_mask(m, like=g) for m, g in zip(y, grids)]
    for i, (g, m) in enumerate(zip(grids, masks)):
        if g.intensity_kind != NORMALIZED_0_255:
            raise ValueError(f"volume {i} is not normalized; preprocess first")
        if not m.binary().any():
            raise ValueError(f"mask {i} is empty")
    return grids, masks


def check_normalized_grids(X):
    grids = [as_voxel_grid(x) for x in X]
    for i, g in enumerate(grids):
        if g.intensity_kind != NORMALIZED_0_255:
            raise ValueError(f"volume {i} is not normalized; preprocess first")
    return grids
