import numpy as np
import pytest

from svrkit.errors import FormatError
from svrkit.grid import Volume
from svrkit.io import (format_spec, read_motion, read_nifti, read_stack,
                       stack_sidecar, stack_to_volume, volume_to_stack,
                       write_json, write_motion, write_nifti)
from svrkit.warp import MotionStack, SliceStack


def test_nifti_round_trip_values(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.standard_normal((5, 6, 7)).astype(np.float32)
                 .astype(np.float64), spacing=2.0)
    p = tmp_path / "v.nii"
    write_nifti(p, vol)
    back = read_nifti(p)
    assert back.dims == (5, 6, 7)
    assert back.spacing == 2.0
    assert np.array_equal(back.data, vol.data)


def test_nifti_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    vol = Volume(rng.uniform(size=(4, 4, 4)))
    a, b = tmp_path / "a.nii", tmp_path / "b.nii"
    write_nifti(a, vol)
    write_nifti(b, vol)
    assert a.read_bytes() == b.read_bytes()


def test_nifti_file_round_trip_bytes(tmp_path):
    vol = Volume(np.random.default_rng(2).uniform(size=(3, 4, 5)))
    a = tmp_path / "a.nii"
    write_nifti(a, vol)
    again = tmp_path / "b.nii"
    write_nifti(again, read_nifti(a))
    assert a.read_bytes() == again.read_bytes()


def test_nifti_rejects_garbage(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(b"x" * 400)
    with pytest.raises(FormatError):
        read_nifti(p)


def test_nifti_payload_is_x_fastest(tmp_path):
    data = np.zeros((2, 2, 2))
    data[1, 0, 0] = 1.0  # second value in x-fastest order
    p = tmp_path / "v.nii"
    write_nifti(p, Volume(data))
    raw = np.frombuffer(p.read_bytes()[352:], dtype="<f4")
    assert raw[1] == 1.0
    assert raw.sum() == 1.0


def test_svrm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    m = MotionStack(rng.standard_normal((3, 3, 4, 5)).astype(np.float32)
                    .astype(np.float64), spacing=2.5, axis="y", slab=4)
    p = tmp_path / "m.svrm"
    write_motion(p, m)
    back = read_motion(p)
    assert back.axis == "y"
    assert back.slab == 4
    assert back.spacing == 2.5
    assert np.array_equal(back.data, m.data)
    # write-read-write byte stability
    q = tmp_path / "m2.svrm"
    write_motion(q, back)
    assert p.read_bytes() == q.read_bytes()


def test_svrm_header_layout(tmp_path):
    m = MotionStack(np.zeros((2, 3, 4, 5)), spacing=1.5, axis="z", slab=2)
    p = tmp_path / "m.svrm"
    write_motion(p, m)
    raw = p.read_bytes()
    assert raw[:4] == b"SVRM"
    import struct
    version, K, H, W, axis, slab = struct.unpack_from("<6I", raw, 4)
    (spacing,) = struct.unpack_from("<f", raw, 28)
    assert (version, K, H, W, axis, slab) == (1, 2, 4, 5, 2, 2)
    assert spacing == 1.5
    assert len(raw) == 32 + 4 * 2 * 3 * 4 * 5


def test_svrm_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.svrm"
    p.write_bytes(b"NOPE" + b"\x00" * 60)
    with pytest.raises(FormatError):
        read_motion(p)
    m = MotionStack(np.zeros((2, 3, 4, 5)), 1.0, "z", 1)
    q = tmp_path / "trunc.svrm"
    write_motion(q, m)
    q.write_bytes(q.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_motion(q)


def test_stack_volume_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    stack = SliceStack(rng.uniform(size=(3, 4, 5)), spacing=4.0, axis="x",
                       slab=4)
    vol = stack_to_volume(stack)
    assert vol.dims == (5, 4, 3)
    back = volume_to_stack(vol, "x", 4.0, 4)
    assert np.array_equal(back.data, stack.data)

    nii = tmp_path / "s.nii"
    write_nifti(nii, vol)
    write_json(tmp_path / "s.json",
               stack_sidecar(stack, (16, 16, 16), 1.0, {"seed": 0}))
    loaded, doc = read_stack(nii)
    assert loaded.axis == "x"
    assert loaded.slab == 4
    assert np.array_equal(loaded.data, stack.data.astype(np.float32))
    assert doc["grid_dims"] == [16, 16, 16]


def test_format_spec_mentions_both_formats():
    text = format_spec()
    assert "SVRM" in text
    assert "NIfTI-1" in text
