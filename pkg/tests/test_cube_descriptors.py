import numpy as np
import pytest
from scipy.signal import fftconvolve

from octreg import cube_descriptors as cd
from octreg import vessel_graph as vg
from octreg.segmentation import IlmSurface
from octreg.volume_io import Volume


def _features(cubes, gabors, hrs):
    n = len(cubes)
    return cd.CubeFeatures(np.asarray(cubes, float).reshape(n, -1),
                           np.asarray(gabors, float).reshape(n, 4, -1),
                           np.asarray(hrs, float), np.zeros((n, 3), int), np.ones(n, bool))


def test_node_voxel_on_flat_ilm():
    ilm = IlmSurface(np.full((20, 20), 40), np.ones((20, 20), bool))
    assert cd.locate_node_voxel((10, 10), ilm) == (40, 10, 10)


def test_node_voxel_nearest_valid():
    depth = np.full((20, 20), 50)
    valid = np.zeros((20, 20), bool)
    depth[10, 11] = 37
    valid[10, 11] = True
    depth[10, 15] = 12
    valid[10, 15] = True
    assert cd.locate_node_voxel((10, 10), IlmSurface(depth, valid)) == (37, 10, 10)


def test_node_voxel_none_beyond_radius():
    depth = np.zeros((30, 30), int)
    valid = np.zeros((30, 30), bool)
    valid[0, 0] = True
    assert cd.locate_node_voxel((20, 20), IlmSurface(depth, valid), radius=5) is None


def test_node_voxel_on_sinusoidal_ilm():
    y, x = np.mgrid[0:40, 0:40]
    surf = 30 + 5 * np.sin(x / 6.0)
    ilm = IlmSurface(np.rint(surf).astype(int), np.ones((40, 40), bool))
    for node in [(3, 4), (20, 17), (39, 39)]:
        z, _, _ = cd.locate_node_voxel(node, ilm)
        assert abs(z - surf[node]) <= 2


def test_constant_volume_cube_and_zero_gabor():
    # large enough that every kernel support stays inside the volume
    vol = Volume(np.full((72, 72, 72), 90, np.uint8))
    cube, gab, hr = cd.extract_cube_feature(vol, (36, 36, 36), (36, 36, 36))
    assert cube.shape == (19, 19, 19)
    assert np.all(cube == 90)
    assert gab.shape == (4, 19, 19, 19)
    assert np.abs(gab).max() < 1e-9 * 90
    assert np.array_equal(hr, [0, 0, 0])


def test_cube_zero_padded_at_border():
    vol = Volume(np.full((10, 10, 10), 5, np.uint8))
    cube, _, hr = cd.extract_cube_feature(vol, (0, 0, 0), (3, 4, 5))
    assert cube[9, 9, 9] == 5 and cube[0, 0, 0] == 0
    assert np.array_equal(hr, [-3, -4, -5])


def test_gabor_matches_direct_convolution(rng):
    data = rng.integers(0, 256, size=(30, 28, 33)).astype(np.uint8)
    o = (12, 9, 20)
    bank = cd.GaborBank()
    _, gab, _ = cd.extract_cube_feature(Volume(data), o, (0, 0, 0), side=7, bank=bank)
    pad = 40
    big = np.pad(data.astype(float), pad)
    for i, k in enumerate(bank.kernels()):
        for j, y in enumerate(range(o[1] - 3, o[1] + 4)):
            plane = big[:, y + pad, :]
            full = fftconvolve(plane, k, mode="same")
            ref = full[pad + o[0] - 3:pad + o[0] + 4, pad + o[2] - 3:pad + o[2] + 4]
            assert np.allclose(gab[i][:, j, :], ref, atol=1e-8)


def test_grating_prefers_matching_wavelength():
    z, y, x = np.mgrid[0:40, 0:40, 0:40]
    data = np.rint(120 + 100 * np.cos(2 * np.pi * x / 4.0)).astype(np.uint8)
    _, gab, _ = cd.extract_cube_feature(Volume(data), (20, 20, 20), (0, 0, 0))
    # orientation-major order: (0 deg, 4), (0 deg, 8), (90 deg, 4), (90 deg, 8)
    energy = [np.abs(g).mean() for g in gab]
    assert energy[0] > energy[1]
    assert energy[0] > energy[2]


def test_identical_features_give_zero():
    rng = np.random.default_rng(0)
    c = rng.random((2, 27))
    g = rng.random((2, 4, 27))
    u = rng.random((2, 3)) + 0.1
    f = _features(c, g, u)
    d = cd.volume_dissimilarity(f, f, normalize=False)
    assert np.allclose(np.diag(d), 0, atol=1e-12)


def test_antiparallel_hr_vectors():
    d = cd.hr_dissimilarity(np.array([[1.0, 2.0, 3.0]]), np.array([[-2.0, -4.0, -6.0]]))
    assert d[0, 0] == pytest.approx(1.0)


def test_hr_term_scale_invariant(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    assert np.allclose(cd.hr_dissimilarity(a, b), cd.hr_dissimilarity(3.0 * a, 0.25 * b))


def test_zero_vector_neutral():
    d = cd.hr_dissimilarity(np.zeros((1, 3)), np.ones((1, 3)))
    assert d[0, 0] == 0.5


def test_hand_built_3cubed_cosines():
    a = np.arange(27, dtype=float)
    b = np.ones(27)
    b[::2] = 0.0
    ga = np.stack([a, b, a, b])
    gb = np.stack([b, a, b, a])
    fa = _features([a], [ga], [[1.0, 0.0, 0.0]])
    fb = _features([b], [gb], [[0.0, 1.0, 0.0]])
    d1, d2, d3 = cd.volume_terms(fa, fb)
    ab = float(a @ b)
    cos = ab / (np.sqrt(a @ a) * np.sqrt(b @ b))
    assert d1[0, 0] == pytest.approx(1 - cos, abs=1e-12)
    assert d2[0, 0] == pytest.approx(1 - cos, abs=1e-12)
    assert d3[0, 0] == pytest.approx(0.5, abs=1e-12)
    total = cd.volume_dissimilarity(fa, fb, normalize=False)
    assert total[0, 0] == pytest.approx(2 * (1 - cos) + 0.5, abs=1e-12)


def test_volume_dissimilarity_transpose_and_range(rng):
    fa = _features(rng.random((4, 27)), rng.random((4, 4, 27)), rng.normal(size=(4, 3)))
    fb = _features(rng.random((3, 27)), rng.random((3, 4, 27)), rng.normal(size=(3, 3)))
    ab = cd.volume_dissimilarity(fa, fb)
    ba = cd.volume_dissimilarity(fb, fa)
    assert np.allclose(ab, ba.T)
    assert ab.min() >= 0 and ab.max() <= 1


def test_constant_volume_no_nan():
    vol = Volume(np.full((30, 30, 30), 7, np.uint8))
    g = vg.VesselGraph([(10, 10), (12, 20)], [(0, 1)], [10.2])
    ilm = IlmSurface(np.full((30, 30), 15), np.ones((30, 30), bool))
    f = cd.extract_features(vol, g, ilm, (10, 10, 10), side=5)
    d = cd.volume_dissimilarity(f, f)
    assert np.all(np.isfinite(d))
    assert d.min() >= 0 and d.max() <= 1


def test_excluded_node_neutral():
    vol = Volume(np.random.default_rng(1).integers(0, 255, (30, 30, 30)).astype(np.uint8))
    g = vg.VesselGraph([(10, 10), (25, 25)], [(0, 1)], [21.2])
    valid = np.zeros((30, 30), bool)
    valid[:15, :15] = True
    ilm = IlmSurface(np.full((30, 30), 15), valid)
    f = cd.extract_features(vol, g, ilm, (10, 10, 10), side=5)
    assert list(f.valid) == [True, False]
    d = cd.volume_dissimilarity(f, f)
    assert np.all(d[1, :] == 0.5) and np.all(d[:, 1] == 0.5)


def test_neighbour_volume_self_and_isolated(rng):
    g = vg.VesselGraph([(0, 0), (0, 5), (0, 10), (9, 9)], [(0, 1), (1, 2)], [5.0, 5.0])
    dv = rng.random((4, 4))
    np.fill_diagonal(dv, 0.0)
    s = cd.neighbour_dissimilarity_volume(g, g, dv, normalize=False)
    assert np.all(np.diag(s)[:3] == 0)
    assert np.all(s[3] == 0.5)


def test_neighbour_volume_three_node_enumeration(rng):
    gr = vg.VesselGraph([(0, 0), (0, 1), (0, 2)], [(0, 1), (1, 2)], [1.0, 1.0])
    gm = vg.VesselGraph([(0, 0), (0, 1), (0, 2)], [(0, 2), (1, 2)], [2.0, 1.0])
    dv = rng.random((3, 3))
    s = cd.neighbour_dissimilarity_volume(gr, gm, dv, normalize=False)
    nr, nm = gr.neighbours(), gm.neighbours()
    for i in range(3):
        for j in range(3):
            a = np.mean([min(dv[p, q] for q in nm[j]) for p in nr[i]])
            b = np.mean([min(dv[p, q] for p in nr[i]) for q in nm[j]])
            assert s[i, j] == pytest.approx(0.5 * (a + b), abs=1e-15)


def test_feature_dump_lines():
    vol = Volume(np.random.default_rng(2).integers(0, 255, (20, 20, 20)).astype(np.uint8))
    g = vg.VesselGraph([(5, 5), (10, 12)], [(0, 1)], [8.6])
    ilm = IlmSurface(np.full((20, 20), 8), np.ones((20, 20), bool))
    f = cd.extract_features(vol, g, ilm, (8, 5, 5), side=5)
    lines = f.dump().splitlines()
    assert len(lines) == 2
    assert lines[0].split()[2:5] == ["0", "0", "0"]
