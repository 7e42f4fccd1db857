import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octreg.synthetic import PhantomConfig, generate_synthetic_pair, with_kind
from octreg.volume_io import (SyntheticTruth, Volume, VolumeFormatError, checkerboard, load_volume,
                              overlay, project_volume, read_pnm, save_mask, save_overlay,
                              save_projection, save_volume)


def _write_raw(tmp_path, payload, dims, bit_depth=8, byte_order="little"):
    path = tmp_path / "vol.raw"
    path.write_bytes(payload)
    meta = {"dims": list(dims), "bit_depth": bit_depth, "byte_order": byte_order}
    (tmp_path / "vol.raw.json").write_text(json.dumps(meta))
    return path


def test_load_smallest_volume(tmp_path):
    path = _write_raw(tmp_path, bytes(range(8)), (2, 2, 2))
    v = load_volume(path)
    assert v.dims == (2, 2, 2)
    assert v.data.size == 8


def test_load_rejects_size_mismatch(tmp_path):
    path = _write_raw(tmp_path, bytes(7), (2, 2, 2))
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        load_volume(path)


def test_load_rejects_unsupported_bit_depth(tmp_path):
    path = _write_raw(tmp_path, bytes(32), (2, 2, 2), bit_depth=32)
    with pytest.raises(VolumeFormatError, match="bit depth"):
        load_volume(path)


def test_load_large_u16_geometry_without_reading_twice(tmp_path):
    # declared 1024x512x512 u16 geometry; size check uses the sidecar dims
    path = tmp_path / "big.raw"
    with open(path, "wb") as fh:
        fh.truncate(1024 * 512 * 512 * 2)
    meta = {"dims": [1024, 512, 512], "bit_depth": 16, "byte_order": "little"}
    v = load_volume(path, meta)
    assert v.dims == (1024, 512, 512)
    assert v.data.dtype == np.uint16


def test_z_fastest_file_order(tmp_path):
    # sample (z, y, x) sits at byte offset ((y * nx) + x) * nz + z
    nz, ny, nx = 3, 2, 4
    payload = bytes(range(nz * ny * nx))
    v = load_volume(_write_raw(tmp_path, payload, (nz, ny, nx)))
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                assert v.data[z, y, x] == (y * nx + x) * nz + z


@pytest.mark.parametrize("dtype,order", [(np.uint8, "little"), (np.uint16, "little"),
                                         (np.uint16, "big")])
def test_volume_round_trip_bit_exact(tmp_path, rng, dtype, order):
    data = rng.integers(0, np.iinfo(dtype).max, size=(5, 3, 4)).astype(dtype)
    v = Volume(data, (2.0, 1.0, 1.0))
    save_volume(v, tmp_path / "v.raw", byte_order=order)
    back = load_volume(tmp_path / "v.raw")
    assert back.data.dtype == dtype
    assert np.array_equal(back.data, data)
    assert back.voxel_spacing == (2.0, 1.0, 1.0)


def test_volume_rejects_bad_dims():
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((0, 2, 2), np.uint8))
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((2, 2), np.uint8))


def test_project_all_zeros():
    assert not project_volume(Volume(np.zeros((3, 4, 5), np.uint8))).any()


def test_project_single_impulse():
    data = np.zeros((4, 5, 6), np.uint8)
    data[2, 3, 1] = 17
    p = project_volume(Volume(data))
    expected = np.zeros((5, 6))
    expected[3, 1] = 1.0
    assert np.array_equal(p, expected)


def test_project_matches_loop_oracle(rng):
    data = rng.integers(0, 256, size=(4, 4, 4)).astype(np.uint8)
    sums = np.zeros((4, 4))
    for y in range(4):
        for x in range(4):
            for z in range(4):
                sums[y, x] += int(data[z, y, x])
    oracle = (sums - sums.min()) / (sums.max() - sums.min())
    assert np.allclose(project_volume(Volume(data)), oracle, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_linear_before_normalization(seed):
    r = np.random.default_rng(seed)
    a = r.integers(0, 100, size=(3, 4, 5)).astype(np.uint16)
    b = r.integers(0, 100, size=(3, 4, 5)).astype(np.uint16)
    pa = project_volume(Volume(a), normalize=False)
    pb = project_volume(Volume(b), normalize=False)
    pab = project_volume(Volume(a + b), normalize=False)
    assert np.array_equal(pab, pa + pb)


def test_projection_pgm_bytes(tmp_path):
    save_projection(np.array([[0.0, 1.0], [1.0, 0.0]]), tmp_path / "p.pgm")
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw.startswith(b"P5")
    assert b"255" in raw.split(b"\n")[2] or raw.split()[3] == b"255"
    assert raw[-4:] == bytes([0, 255, 255, 0])


def test_mask_round_trip(tmp_path, rng):
    m = rng.random((7, 9)) > 0.5
    save_mask(m, tmp_path / "m.pgm")
    assert np.array_equal(read_pnm(tmp_path / "m.pgm") > 0, m)


def test_overlay_of_identical_images_is_grey(rng):
    img = rng.random((6, 8))
    rgb = overlay(img, img)
    assert np.array_equal(rgb[..., 0], rgb[..., 1])
    assert np.array_equal(rgb[..., 1], rgb[..., 2])


def test_checkerboard_with_itself_is_identity(rng):
    img = rng.random((40, 70))
    assert np.array_equal(checkerboard(img, img, tile=32), img)


def test_save_overlay_writes_ppm(tmp_path, rng):
    img = rng.random((5, 5))
    save_overlay(img, img, tmp_path / "o.ppm")
    assert (tmp_path / "o.ppm").read_bytes().startswith(b"P6")


def test_synthetic_identity_zero_noise_is_voxel_identical():
    cfg = with_kind(PhantomConfig(dims=(48, 64, 64)), "identity", noise=0.0, drop_fraction=0.0,
                    jitter_px=0.0, z_shift=0)
    ref, mov, truth = generate_synthetic_pair(3, cfg)
    assert np.array_equal(ref.data, mov.data)
    assert truth.z_shift == 0


def test_synthetic_pure_z_shift_keeps_projection():
    # deep enough for the whole tissue stack, so shifting loses nothing
    cfg = with_kind(PhantomConfig(dims=(112, 64, 64)), "identity", noise=0.0, drop_fraction=0.0,
                    jitter_px=0.0, z_shift=5)
    ref, mov, truth = generate_synthetic_pair(3, cfg)
    assert truth.z_shift == 5
    assert np.array_equal(project_volume(ref), project_volume(mov))
    assert not np.array_equal(ref.data, mov.data)


def test_synthetic_deterministic_per_seed():
    cfg = with_kind(PhantomConfig(dims=(48, 64, 64)), "affine", drop_fraction=0.1)
    a = generate_synthetic_pair(7, cfg)
    b = generate_synthetic_pair(7, cfg)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)
    assert a[2].coefficients == b[2].coefficients
    assert a[2].node_truth == b[2].node_truth


def test_truth_round_trip(tmp_path):
    cfg = with_kind(PhantomConfig(dims=(48, 64, 64)), "quadratic", z_ramp=2.0)
    _, _, truth = generate_synthetic_pair(11, cfg)
    truth.save(tmp_path / "truth.txt")
    back = SyntheticTruth.load(tmp_path / "truth.txt")
    assert back.model_kind == truth.model_kind
    assert np.allclose(back.coefficients, truth.coefficients, rtol=0, atol=0)
    assert back.z_shift == truth.z_shift and back.z_ramp == truth.z_ramp
    assert back.node_truth == truth.node_truth
    assert np.array_equal(back.ref_points, truth.ref_points)


def test_truth_requires_injective_node_map():
    with pytest.raises(ValueError):
        SyntheticTruth("affine", (1, 0, 0, 0, 1, 0), 0, node_truth=((0, 1), (2, 1)))
