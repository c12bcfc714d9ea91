import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptseg import volume_io as vio
from promptseg.volume import LabelMask, VoxelGrid


def minimal_nifti(dims=(2, 2, 2), pixdim=(1.0, 1.0, 1.0), dtype_code=16, payload=None,
                  scl=(0.0, 0.0), dim0=3, magic=b"n+1\x00", vox_offset=352.0):
    nx, ny, nz = dims
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, dim0, nx, ny, nz, 1, 1, 1, 1)
    bitpix = {2: 8, 4: 16, 16: 32}.get(dtype_code, 32)
    struct.pack_into("<hh", header, 70, dtype_code, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, vox_offset)
    struct.pack_into("<ff", header, 112, *scl)
    header[344:348] = magic
    if payload is None:
        payload = np.arange(nx * ny * nz, dtype="<f4").tobytes()
    return bytes(header) + b"\x00\x00\x00\x00" + payload


def test_read_minimal_header_field_mapping():
    g = vio.read_nifti1(minimal_nifti())
    assert g.dims == (2, 2, 2)
    assert g.spacing == (1.0, 1.0, 1.0)
    assert np.array_equal(g.values.reshape(-1), np.arange(8, dtype=np.float32))
    assert g.intensity_kind == "raw"


def test_scl_slope_inter_applied():
    g = vio.read_nifti1(minimal_nifti(scl=(2.0, 1.0)))
    assert np.array_equal(g.values.reshape(-1), np.arange(8) * 2.0 + 1.0)


def test_gzip_detected():
    with pytest.raises(vio.NiftiCompressedError, match="compressed"):
        vio.read_nifti1(b"\x1f\x8b" + b"\x00" * 400)


def test_bad_magic():
    with pytest.raises(vio.NiftiFormatError, match="magic"):
        vio.read_nifti1(minimal_nifti(magic=b"ni1\x00"))


def test_unsupported_datatype():
    with pytest.raises(vio.NiftiUnsupportedError, match="datatype"):
        vio.read_nifti1(minimal_nifti(dtype_code=8))  # int32


def test_truncated_payload():
    data = minimal_nifti()
    with pytest.raises(vio.NiftiTruncatedError):
        vio.read_nifti1(data[:-4])
    with pytest.raises(vio.NiftiTruncatedError):
        vio.read_nifti1(data + b"\x00\x00\x00\x00")


def test_dim0_must_be_3_or_degenerate_4():
    data = minimal_nifti(dim0=4)  # dim[4] == 1 in the helper
    assert vio.read_nifti1(data).dims == (2, 2, 2)
    header = bytearray(minimal_nifti())
    struct.pack_into("<8h", header, 40, 4, 2, 2, 2, 2, 1, 1, 1)
    with pytest.raises(vio.NiftiFormatError, match="dim"):
        vio.read_nifti1(bytes(header))


def test_uint8_and_int16_payloads():
    payload = np.arange(8, dtype=np.uint8).tobytes()
    g = vio.read_nifti1(minimal_nifti(dtype_code=2, payload=payload))
    assert g.values.dtype == np.float32
    assert np.array_equal(g.values.reshape(-1), np.arange(8))
    payload = (np.arange(8, dtype="<i2") - 3).tobytes()
    g = vio.read_nifti1(minimal_nifti(dtype_code=4, payload=payload))
    assert np.array_equal(g.values.reshape(-1), np.arange(8) - 3)


def test_roundtrip_basic():
    g = VoxelGrid(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1, 1, 1))
    assert vio.read_nifti1(vio.write_nifti1(g)) == g


def test_roundtrip_preserves_anisotropic_spacing():
    g = VoxelGrid(np.zeros((3, 2, 2), dtype=np.float32), (1, 1, 3))
    assert vio.read_nifti1(vio.write_nifti1(g)).spacing == (1.0, 1.0, 3.0)


def test_roundtrip_single_voxel():
    g = VoxelGrid(np.array([[[42.5]]], dtype=np.float32), (0.5, 2, 3))
    assert vio.read_nifti1(vio.write_nifti1(g)) == g


@settings(max_examples=60, deadline=None)
@given(
    nx=st.integers(1, 16), ny=st.integers(1, 16), nz=st.integers(1, 16),
    seed=st.integers(0, 2**31), sp=st.sampled_from([(1, 1, 1), (0.5, 0.5, 3), (2, 1, 5)]),
)
def test_roundtrip_property(nx, ny, nz, seed, sp):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(nz, ny, nx)).astype(np.float32) * 1000
    g = VoxelGrid(vals, sp)
    back = vio.read_nifti1(vio.write_nifti1(g))
    assert back.values.tobytes() == g.values.tobytes()  # bit-exact
    assert back.dims == g.dims and back.spacing == g.spacing


def test_mask_roundtrip():
    labels = np.zeros((3, 4, 5), dtype=np.uint8)
    labels[1, 2, 3] = 2
    m = LabelMask(labels, (1, 1, 2))
    back = vio.read_nifti1_mask(vio.write_nifti1_mask(m))
    assert np.array_equal(back.labels, labels) and back.spacing == m.spacing
    # wide labels fall back to int16
    labels16 = labels.astype(np.int16)
    labels16[0, 0, 0] = 300
    back = vio.read_nifti1_mask(vio.write_nifti1_mask(LabelMask(labels16, (1, 1, 2))))
    assert back.labels[0, 0, 0] == 300


def test_interchange_sidecar_roundtrip(tmp_path):
    g = VoxelGrid(np.random.default_rng(1).normal(size=(4, 3, 2)).astype(np.float32), (1, 2, 3))
    vio.save_interchange(g, tmp_path / "vol")
    assert (tmp_path / "vol.json").exists() and (tmp_path / "vol.raw").exists()
    assert vio.load_interchange(tmp_path / "vol") == g


def test_envelope_roundtrip_and_errors():
    g = VoxelGrid(np.ones((2, 2, 2), dtype=np.float32), (1, 1, 1), "normalized_0_255")
    env = vio.pack_envelope(g)
    back = vio.unpack_envelope(env)
    assert back == g and back.intensity_kind == "normalized_0_255"
    with pytest.raises(ValueError, match="magic"):
        vio.unpack_envelope(b"XXXX" + env[4:])
    with pytest.raises(ValueError):
        vio.unpack_envelope(env[: len(env) - 3])
