from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moec import volume as vl


def test_grid_coord_corners():
    dims = (4, 5, 6)
    np.testing.assert_array_equal(vl.grid_coord(0, dims), [-1.0, -1.0, -1.0])
    np.testing.assert_array_equal(vl.grid_coord(4 * 5 * 6 - 1, dims), [1.0, 1.0, 1.0])
    # (1, 2, 3) -> -1 + 2k/(N-1)
    np.testing.assert_allclose(vl.grid_coord(1 * 30 + 2 * 6 + 3, dims), [-1 + 2 / 3, 0.0, 0.2], atol=1e-15)


def test_singleton_axis_maps_to_zero():
    np.testing.assert_array_equal(vl.grid_coord(np.arange(3), (1, 3, 1))[:, [0, 2]], 0.0)


def test_grid_coord_rejects_out_of_range():
    with pytest.raises(IndexError):
        vl.grid_coord(8, (2, 2, 2))
    with pytest.raises(IndexError):
        vl.grid_coord(-1, (2, 2, 2))


@given(st.tuples(*[st.integers(1, 9)] * 3))
def test_full_grid_agrees_with_grid_coord(dims):
    n = int(np.prod(dims))
    assert np.array_equal(vl.full_grid(dims), vl.grid_coord(np.arange(n), dims))


@pytest.mark.parametrize("bits,endian", [(8, "little"), (16, "little"), (16, "big")])
def test_raw_round_trip(tmp_path, rng, bits, endian):
    top = (1 << bits) - 1
    v = vl.from_array(rng.integers(0, top + 1, size=(3, 4, 5)), voxel_bits=bits)
    path = vl.save_raw(v, tmp_path / "v.raw", endianness=endian)
    assert json.loads(vl.sidecar_path(path).read_text()) == {
        "dims": [3, 4, 5], "voxel_bits": bits, "endianness": endian}
    back = vl.load_with_sidecar(path)
    np.testing.assert_array_equal(back.data, v.data)
    assert back.norm == v.norm
    assert path.stat().st_size == v.nbytes


def test_big_endian_bytes_on_disk(tmp_path):
    v = vl.Volume(np.full((1, 1, 2), 258.0), voxel_bits=16)
    path = vl.save_raw(v, tmp_path / "be.raw", endianness="big")
    assert path.read_bytes() == b"\x01\x02\x01\x02"


def test_size_mismatch_is_reported(tmp_path):
    p = tmp_path / "short.raw"
    p.write_bytes(b"\x00" * 7)
    with pytest.raises(vl.VolumeFormatError):
        vl.load_raw(p, (2, 2, 2), 8)


def test_volume_validation():
    with pytest.raises(vl.VolumeFormatError):
        vl.Volume(np.zeros((2, 2)))
    with pytest.raises(vl.VolumeFormatError):
        vl.Volume(np.zeros((2, 2, 2)), voxel_bits=12)


def test_normalization_maps_range_to_0_100(rng):
    v = vl.from_array(rng.integers(10, 200, size=(4, 4, 4)))
    n = v.normalized()
    assert n.min() == 0.0 and n.max() == pytest.approx(100.0, abs=1e-12)
    np.testing.assert_allclose(vl.denormalize(n, v.norm), v.data, atol=1e-12)


def test_constant_volume_warns(caplog):
    v = vl.from_array(np.full((2, 2, 2), 7.0))
    assert v.norm == (7.0, 8.0)
    assert "constant volume" in caplog.text


def test_sample_batch_reproducible(rng):
    v = vl.make_synthetic("smooth_gradient", (8, 8, 8))
    a = vl.sample_batch(v, 100, np.random.default_rng(3))
    b = vl.sample_batch(v, 100, np.random.default_rng(3))
    np.testing.assert_array_equal(a.flat_indices, b.flat_indices)
    np.testing.assert_array_equal(a.targets, v.flat_normalized()[a.flat_indices])
    np.testing.assert_array_equal(a.coords, vl.grid_coord(a.flat_indices, v.dims))


@pytest.mark.parametrize("kind", vl.SYNTHETIC_KINDS)
def test_synthetic_volumes_are_deterministic_integers(kind):
    a = vl.make_synthetic(kind, (16, 16, 16), seed=5)
    b = vl.make_synthetic(kind, (16, 16, 16), seed=5)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.array_equal(a.data, np.rint(a.data))
    assert 0.2 * 255 - 1 <= a.data.min() and a.data.max() <= 0.8 * 255 + 1


def test_sphere_has_two_plateaus():
    v = vl.make_synthetic("two_material_sphere", (32, 32, 32))
    lo, hi = v.norm
    # radius ~0.5 in a side-2 cube: the core is a few percent of the voxels
    assert (v.data == lo).mean() > 0.5 and (v.data == hi).mean() > 0.005
    assert np.isin(v.data, (lo, hi)).mean() > 0.85


def test_unknown_kind():
    with pytest.raises(ValueError):
        vl.make_synthetic("marble", (8, 8, 8))


@pytest.mark.parametrize("chunk,threads", [(1000, 1), (4096, 1), (333, 3)])
def test_reconstruction_independent_of_chunking(chunk, threads):
    dims = (12, 10, 9)
    f = lambda c: 50 + 40 * np.sin(3 * c[:, 0]) * c[:, 1] - 7 * c[:, 2]
    ref = vl.reconstruct_grid(f, dims, (0.0, 255.0), chunk_size=10**6, threads=1)
    got = vl.reconstruct_grid(f, dims, (0.0, 255.0), chunk_size=chunk, threads=threads)
    assert np.array_equal(ref.data, got.data)
    np.testing.assert_allclose(ref.data, vl.denormalize(f(vl.full_grid(dims)), (0, 255)).reshape(dims))
