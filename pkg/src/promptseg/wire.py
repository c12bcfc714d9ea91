"""Run-length mask encoding used on the HTTP wire.

Runs alternate background/foreground over the x-fastest flat order,
starting with the background count (possibly 0), wrapped in a JSON
envelope ``{"dims": [nx, ny(, nz)], "rle": [...]}``.  Endianness-free and
diffable in tests.
"""

from __future__ import annotations

import numpy as np


def rle_encode(binary) -> list:
    flat = (np.asarray(binary) != 0).reshape(-1)
    if flat.size == 0:
        return [0]
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:  # encoding starts with a background run
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, size) -> np.ndarray:
    runs = [int(r) for r in runs]
    if sum(runs) != size:
        raise ValueError(f"rle covers {sum(runs)} voxels, expected {size}")
    out = np.zeros(size, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        if run < 0:
            raise ValueError("negative run length")
        if value:
            out[pos : pos + run] = 1
        pos += run
        value ^= 1
    return out


def mask_to_wire(binary, dims) -> dict:
    """dims is (nx, ny) or (nx, ny, nz); the array is (…, ny, nx)."""
    return {"dims": list(int(d) for d in dims), "rle": rle_encode(binary)}


def wire_to_mask(payload) -> np.ndarray:
    dims = payload["dims"]
    if not 2 <= len(dims) <= 3:
        raise ValueError(f"bad dims {dims}")
    size = int(np.prod(dims))
    flat = rle_decode(payload["rle"], size)
    shape = tuple(int(d) for d in reversed(dims))  # (nz, ny, nx) or (ny, nx)
    return flat.reshape(shape)
