"""Independent brute-force oracles for metric tests.

These deliberately avoid the code paths they verify: NSD distances come
from an O(|S1||S2|) pairwise scan and the Wilcoxon null from explicit
enumeration of all sign assignments.
"""

import numpy as np

from promptseg.metrics import surface_voxels


def brute_force_min_sqdist(points_a, points_b, spacing):
    """Min squared mm distance from each a-point to the b set.

    Accumulates (dx^2 + dy^2) + dz^2 in that grouping; coordinates are
    (z, y, x) index tuples, spacing is (sx, sy, sz).
    """
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    sx, sy = spacing[0], spacing[1]
    dx = (a[:, None, -1] - b[None, :, -1]) * sx
    dy = (a[:, None, -2] - b[None, :, -2]) * sy
    d2 = dx * dx + dy * dy
    if a.shape[1] == 3:
        dz = (a[:, None, 0] - b[None, :, 0]) * spacing[2]
        d2 = d2 + dz * dz
    return d2.min(axis=1)


def brute_force_nsd(pred, ref, spacing, tolerance_mm):
    p = np.asarray(pred) != 0
    r = np.asarray(ref) != 0
    sp = np.argwhere(surface_voxels(p))
    sr = np.argwhere(surface_voxels(r))
    if len(sp) == 0 and len(sr) == 0:
        return 1.0
    if len(sp) == 0 or len(sr) == 0:
        return 0.0
    tol2 = tolerance_mm * tolerance_mm
    hits = int((brute_force_min_sqdist(sp, sr, spacing) <= tol2).sum())
    hits += int((brute_force_min_sqdist(sr, sp, spacing) <= tol2).sum())
    return hits / (len(sp) + len(sr))


def enumerate_wilcoxon_p(ranks, w_observed):
    """Two-sided exact p via full enumeration of sign assignments."""
    ranks = list(ranks)
    n = len(ranks)
    count = 0
    for bits in range(2 ** n):
        s = 0.0
        for i in range(n):
            if bits >> i & 1:
                s += ranks[i]
        if s <= w_observed + 1e-9:
            count += 1
    return min(1.0, 2.0 * count / 2 ** n)


def random_mask(rng, shape, p=0.3):
    return (rng.random(shape) < p).astype(np.uint8)


def random_blob_mask(rng, shape):
    """Connected-ish blob: a couple of random solid boxes."""
    m = np.zeros(shape, dtype=np.uint8)
    for _ in range(rng.integers(1, 3)):
        lo = [rng.integers(0, s) for s in shape]
        hi = [int(min(s, l + 1 + rng.integers(1, max(2, s // 2)))) for l, s in zip(lo, shape)]
        m[tuple(slice(l, h) for l, h in zip(lo, hi))] = 1
    return m
