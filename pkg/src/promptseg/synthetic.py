"""Synthetic desk-scale corpus: bright spheres/ellipsoids in noisy volumes
and moving-blob video clips, each paired with its analytic mask."""

from __future__ import annotations

import numpy as np

from .volume import NORMALIZED_0_255, LabelMask, VoxelGrid


def _noisy_canvas(shape, rng, bg=40.0, noise=8.0):
    vals = rng.normal(bg, noise, size=shape)
    return vals


def _paint(vals, inside, rng, fg=200.0, noise=8.0):
    vals[inside] = rng.normal(fg, noise, size=int(inside.sum()))
    return np.clip(vals, 0.0, 255.0).astype(np.float32)


def ellipsoid_volume(dims=(64, 64, 24), spacing=(1.0, 1.0, 3.0), center=None,
                     radii=(10.0, 8.0, 6.0), rng=None, fg=200.0, bg=40.0, noise=8.0):
    """Bright ellipsoid on a noisy background; radii are in voxels (x, y, z)."""
    rng = rng or np.random.default_rng(0)
    nx, ny, nz = dims
    if center is None:
        center = (nx / 2.0, ny / 2.0, nz / 2.0)
    zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx].astype(np.float64)
    inside = (
        ((xx - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((zz - center[2]) / radii[2]) ** 2
    ) <= 1.0
    vals = _paint(_noisy_canvas((nz, ny, nx), rng, bg, noise), inside, rng, fg, noise)
    grid = VoxelGrid(vals, spacing, NORMALIZED_0_255)
    mask = LabelMask(inside.astype(np.uint8), spacing)
    return grid, mask


def sphere_volume(dims=(64, 64, 24), spacing=(1.0, 1.0, 3.0), center=None,
                  radius=8.0, rng=None, fg=200.0, bg=40.0, noise=8.0):
    return ellipsoid_volume(dims, spacing, center, (radius, radius, radius), rng, fg, bg, noise)


def moving_blob_clip(frames=12, size=64, radius=7.0, rng=None, fg=200.0, bg=40.0,
                     noise=8.0, drift=1.5):
    """Video clip: a bright disk drifting linearly with slight radius wobble."""
    rng = rng or np.random.default_rng(0)
    start = np.array([size * 0.35, size * 0.5])
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    vals = _noisy_canvas((frames, size, size), rng, bg, noise)
    labels = np.zeros((frames, size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for t in range(frames):
        cx, cy = start + direction * drift * t
        cx = float(np.clip(cx, radius + 1, size - radius - 2))
        cy = float(np.clip(cy, radius + 1, size - radius - 2))
        r = radius * (1.0 + 0.1 * np.sin(t / 2.0))
        inside = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r
        frame = vals[t]
        frame[inside] = rng.normal(fg, noise, size=int(inside.sum()))
        labels[t] = inside
    vals = np.clip(vals, 0.0, 255.0).astype(np.float32)
    clip = VoxelGrid(vals, (1.0, 1.0, 1.0), NORMALIZED_0_255)
    return clip, LabelMask(labels, (1.0, 1.0, 1.0))


def synthetic_cases(n, dims=(64, 64, 24), seed=0, modality="CT", fg=200.0, bg=40.0, noise=8.0):
    """n (grid, mask, modality) cases with randomized shape and placement."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    cases = []
    for i in range(n):
        center = (
            rng.uniform(nx * 0.3, nx * 0.7),
            rng.uniform(ny * 0.3, ny * 0.7),
            rng.uniform(nz * 0.35, nz * 0.65),
        )
        if i % 2 == 0:
            radii = (rng.uniform(7, 12),) * 3
        else:
            radii = tuple(rng.uniform(5, 12) for _ in range(3))
        sub = np.random.default_rng(rng.integers(0, 2 ** 31))
        grid, mask = ellipsoid_volume(
            dims=dims, center=center, radii=radii, rng=sub, fg=fg, bg=bg, noise=noise
        )
        cases.append((grid, mask, modality))
    return cases
