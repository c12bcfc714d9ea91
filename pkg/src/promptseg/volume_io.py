"""File and wire formats for volumes and masks.

Two formats are supported:

* A NIfTI-1 subset: uncompressed, little-endian, single-file ``.nii`` with
  datatype uint8 / int16 / float32.  Orientation (qform/sform) is ignored;
  only ``dim`` and ``pixdim`` geometry is honored.
* The internal interchange format: a JSON metadata document
  ``{dims, spacing, dtype, intensity_kind}`` next to a raw little-endian
  payload.  On disk this is a ``.json`` + ``.raw`` sidecar pair; on the wire
  it is a single length-prefixed envelope (see :func:`pack_envelope`).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import RAW, LabelMask, VoxelGrid

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extender
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

_DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODE_FOR_DTYPE = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}

ENVELOPE_MAGIC = b"PSEG"


class NiftiError(ValueError):
    """Base class for NIfTI parsing failures."""


class NiftiFormatError(NiftiError):
    """Bad magic, malformed header fields, or unsupported layout."""


class NiftiUnsupportedError(NiftiError):
    """Valid NIfTI-1 but outside the supported subset."""


class NiftiCompressedError(NiftiUnsupportedError):
    """Gzip stream detected; compressed NIfTI is not supported."""


class NiftiTruncatedError(NiftiError):
    """Header and payload sizes disagree."""


def read_nifti1(data: bytes) -> VoxelGrid:
    """Parse an uncompressed little-endian NIfTI-1 byte stream.

    Applies ``scl_slope`` / ``scl_inter`` when ``scl_slope != 0`` and
    returns intensities as float32 with ``intensity_kind='raw'``.
    """
    if data[:2] == GZIP_MAGIC:
        raise NiftiCompressedError("compressed NIfTI (.nii.gz) is not supported; gunzip first")
    if len(data) < HEADER_SIZE:
        raise NiftiTruncatedError(f"stream has {len(data)} bytes, header needs {HEADER_SIZE}")
    magic = data[344:348]
    if magic != MAGIC:
        raise NiftiFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (sizeof_hdr,) = struct.unpack_from("<i", data, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiFormatError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} (little-endian)")
    dim = struct.unpack_from("<8h", data, 40)
    if not (dim[0] == 3 or (dim[0] == 4 and dim[4] == 1)):
        raise NiftiFormatError(f"unsupported dim[0]={dim[0]} (need 3, or 4 with dim[4]==1)")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise NiftiFormatError(f"non-positive dims ({nx}, {ny}, {nz})")
    (datatype, bitpix) = struct.unpack_from("<hh", data, 70)
    if datatype not in _DTYPE_CODES:
        raise NiftiUnsupportedError(
            f"datatype code {datatype} unsupported (uint8=2, int16=4, float32=16)"
        )
    dtype = _DTYPE_CODES[datatype]
    if bitpix != np.dtype(dtype).itemsize * 8:
        raise NiftiFormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}")
    pixdim = struct.unpack_from("<8f", data, 76)
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiFormatError(f"non-positive pixdim {spacing}")
    (vox_offset,) = struct.unpack_from("<f", data, 108)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise NiftiFormatError(f"vox_offset {vox_offset} inside the header")
    scl_slope, scl_inter = struct.unpack_from("<ff", data, 112)

    expected = nx * ny * nz * np.dtype(dtype).itemsize
    payload = data[offset:]
    if len(payload) != expected:
        raise NiftiTruncatedError(
            f"payload has {len(payload)} bytes, dims ({nx}, {ny}, {nz}) need {expected}"
        )
    raw = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<")).reshape(nz, ny, nx)
    if scl_slope != 0.0:
        values = raw.astype(np.float32) * np.float32(scl_slope) + np.float32(scl_inter)
    else:
        values = raw.astype(np.float32)
    return VoxelGrid(values, spacing, RAW)


def _pack_header(dims, spacing, datatype_code, bitpix) -> bytes:
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    nx, ny, nz = dims
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", header, 70, datatype_code, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", header, 112, 0.0, 0.0)  # scl_slope=0: no rescale on read
    header[344:348] = MAGIC
    return bytes(header)


def write_nifti1(grid: VoxelGrid) -> bytes:
    """Serialize a grid as float32 NIfTI-1; round-trips bit-exactly."""
    values = np.ascontiguousarray(grid.values, dtype=np.float32)
    header = _pack_header(grid.dims, grid.spacing, 16, 32)
    return header + b"\x00\x00\x00\x00" + values.tobytes()


def write_nifti1_mask(mask: LabelMask) -> bytes:
    """Serialize a label mask as uint8 (or int16 if labels exceed 255)."""
    if mask.labels.max(initial=0) > 255:
        data = np.ascontiguousarray(mask.labels, dtype=np.int16)
        code, bits = 4, 16
    else:
        data = np.ascontiguousarray(mask.labels, dtype=np.uint8)
        code, bits = 2, 8
    header = _pack_header(mask.dims, mask.spacing, code, bits)
    return header + b"\x00\x00\x00\x00" + data.tobytes()


def read_nifti1_mask(data: bytes) -> LabelMask:
    """Parse a NIfTI-1 stream holding integer labels."""
    grid = read_nifti1(data)
    labels = np.rint(grid.values).astype(np.int16)
    if labels.min() < 0:
        raise NiftiFormatError("mask payload contains negative labels")
    return LabelMask(labels, grid.spacing)


# ---------------------------------------------------------------------------
# Interchange format


def grid_to_interchange(grid: VoxelGrid):
    """Return (meta dict, little-endian payload bytes)."""
    values = np.ascontiguousarray(grid.values, dtype=np.float32)
    meta = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "dtype": "float32",
        "intensity_kind": grid.intensity_kind,
    }
    return meta, values.astype("<f4").tobytes()


def interchange_to_grid(meta, payload: bytes) -> VoxelGrid:
    for key in ("dims", "spacing", "dtype", "intensity_kind"):
        if key not in meta:
            raise ValueError(f"interchange metadata missing {key!r}")
    if meta["dtype"] != "float32":
        raise ValueError(f"unsupported interchange dtype {meta['dtype']!r}")
    nx, ny, nz = (int(d) for d in meta["dims"])
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise ValueError(f"payload has {len(payload)} bytes, dims need {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    return VoxelGrid(values, meta["spacing"], meta["intensity_kind"])


def save_interchange(grid: VoxelGrid, path) -> None:
    """Write the sidecar pair ``<path>.json`` + ``<path>.raw``."""
    path = Path(path)
    meta, payload = grid_to_interchange(grid)
    path.with_suffix(".json").write_text(json.dumps(meta))
    path.with_suffix(".raw").write_bytes(payload)


def load_interchange(path) -> VoxelGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    payload = path.with_suffix(".raw").read_bytes()
    return interchange_to_grid(meta, payload)


def pack_envelope(grid: VoxelGrid) -> bytes:
    """Single-buffer wire form: magic + u32 meta length + meta JSON + payload."""
    meta, payload = grid_to_interchange(grid)
    meta_bytes = json.dumps(meta).encode()
    return ENVELOPE_MAGIC + struct.pack("<I", len(meta_bytes)) + meta_bytes + payload


def unpack_envelope(data: bytes) -> VoxelGrid:
    if data[:4] != ENVELOPE_MAGIC:
        raise ValueError(f"bad envelope magic {data[:4]!r}")
    if len(data) < 8:
        raise ValueError("envelope truncated before metadata length")
    (meta_len,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + meta_len:
        raise ValueError("envelope truncated inside metadata")
    meta = json.loads(data[8 : 8 + meta_len].decode())
    return interchange_to_grid(meta, data[8 + meta_len :])
