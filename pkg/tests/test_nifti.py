"""NIfTI round trips and byte determinism."""

import numpy as np
import pytest

from traumasynth.errors import DataError
from traumasynth.nifti import read_nifti, read_sidecar, write_nifti, write_sidecar


def test_float32_roundtrip(tmp_path):
    a = np.random.default_rng(0).random((20, 24, 28)).astype(np.float32)
    p = write_nifti(tmp_path / "x.nii.gz", a, spacing=(1.0, 1.5, 2.0))
    b, spacing = read_nifti(p)
    assert np.array_equal(a, b)
    assert spacing == (1.0, 1.5, 2.0)


def test_uint8_roundtrip_uncompressed(tmp_path):
    lab = np.random.default_rng(1).integers(0, 6, (8, 9, 10)).astype(np.uint8)
    p = write_nifti(tmp_path / "l.nii", lab)
    b, _ = read_nifti(p)
    assert np.array_equal(lab, b)


def test_gzip_bytes_deterministic(tmp_path):
    a = np.random.default_rng(2).random((16, 16, 16)).astype(np.float32)
    p1 = write_nifti(tmp_path / "a.nii.gz", a)
    p2 = write_nifti(tmp_path / "b.nii.gz", a)
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_non_3d(tmp_path):
    with pytest.raises(DataError):
        write_nifti(tmp_path / "x.nii", np.zeros((4, 4)))


def test_rejects_bad_file(tmp_path):
    p = tmp_path / "junk.nii"
    p.write_bytes(b"not a nifti header")
    with pytest.raises(DataError):
        read_nifti(p)


def test_sidecar_roundtrip(tmp_path):
    payload = {"seed": 7, "classes": ["bg", "r1"], "nested": {"a": 1}}
    p = write_sidecar(tmp_path / "x.json", payload)
    assert read_sidecar(p) == payload
