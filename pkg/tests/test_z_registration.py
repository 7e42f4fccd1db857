import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octreg.segmentation import AnatomyFeatures, IlmSurface
from octreg.volume_io import Volume
from octreg.z_registration import ZAlignment, apply_z_alignment, coarse_z_shift, refine_z_per_slice


def _feat(z):
    return AnatomyFeatures((z, 3, 4), (3, 4))


def _flat(ny, nx, d):
    return IlmSurface(np.full((ny, nx), d), np.ones((ny, nx), bool))


def test_coarse_equal():
    assert coarse_z_shift(_feat(40), _feat(40)) == (0, False)


def test_coarse_difference():
    assert coarse_z_shift(_feat(40), _feat(55)) == (-15, False)


def test_coarse_fallback_to_ilm():
    shift, flagged = coarse_z_shift(None, _feat(3), _flat(4, 4, 30), _flat(4, 4, 26))
    assert (shift, flagged) == (4, True)


def test_refine_flat_identical():
    a = refine_z_per_slice(_flat(6, 8, 30), _flat(6, 8, 30), 0)
    assert np.all(a.per_slice_shift == 0)


def test_refine_recovers_ramp():
    ny, nx = 16, 20
    ramp = np.arange(ny) // 3
    coarse = 4
    ref = _flat(ny, nx, 30)
    mov = IlmSurface(np.full((ny, nx), 30 - coarse) + ramp[:, None], np.ones((ny, nx), bool))
    a = refine_z_per_slice(ref, mov, coarse)
    assert np.max(np.abs(a.per_slice_shift - (coarse - ramp))) <= 1


def test_refine_invalid_slice_inherits():
    ny, nx = 5, 6
    ref = _flat(ny, nx, 30)
    depth = np.full((ny, nx), 27)
    depth[3] = 10
    valid = np.ones((ny, nx), bool)
    valid[2] = False
    a = refine_z_per_slice(ref, IlmSurface(depth, valid), 3)
    assert a.per_slice_shift[2] == a.per_slice_shift[1] == 3
    assert a.per_slice_shift[3] == 20


def test_refine_both_invalid_coarse_only():
    bad = IlmSurface(np.zeros((3, 3), int), np.zeros((3, 3), bool))
    a = refine_z_per_slice(bad, bad, 7)
    assert np.all(a.per_slice_shift == 7) and a.flags.get("coarse_only")


def test_refine_respects_bound():
    ref = _flat(3, 4, 60)
    mov = _flat(3, 4, 10)
    a = refine_z_per_slice(ref, mov, 0, bound=20)
    assert np.all(np.abs(a.per_slice_shift) <= 20)


def test_apply_zero_shift(rng):
    v = Volume(rng.integers(0, 255, (8, 4, 5)).astype(np.uint8))
    assert np.array_equal(apply_z_alignment(v, ZAlignment(0, np.zeros(4, int))).data, v.data)


def test_apply_uniform_shift(rng):
    v = Volume(rng.integers(1, 255, (8, 4, 5)).astype(np.uint8))
    out = apply_z_alignment(v, ZAlignment(3, np.full(4, 3))).data
    assert np.array_equal(out[3:], v.data[:-3])
    assert not out[:3].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-7, 7))
def test_shift_round_trip(seed, k):
    r = np.random.default_rng(seed)
    v = Volume(r.integers(1, 255, (10, 3, 4)).astype(np.uint8))
    there = apply_z_alignment(v, ZAlignment(k, np.full(3, k)))
    back = apply_z_alignment(there, ZAlignment(-k, np.full(3, -k))).data
    keep = slice(0, 10 - k) if k >= 0 else slice(-k, 10)
    assert np.array_equal(back[keep], v.data[keep])


def test_alignment_text():
    assert ZAlignment(1, np.array([1, 2, -3])).to_text() == "1\n2\n-3\n"


def test_phantom_alignment_closes_ilm_gap():
    from octreg.segmentation import segment_ilm
    from octreg.synthetic import PhantomConfig, generate_synthetic_pair, with_kind
    cfg = with_kind(PhantomConfig(dims=(64, 48, 48)), "identity", z_shift=4, z_ramp=2.0)
    ref, mov, truth = generate_synthetic_pair(2, cfg)
    ilm_r, ilm_m = segment_ilm(ref), segment_ilm(mov)
    a = refine_z_per_slice(ilm_r, ilm_m, truth.z_shift)
    aligned = segment_ilm(apply_z_alignment(mov, a))
    both = ilm_r.valid & aligned.valid
    gap = [abs(ilm_r.depth[y, both[y]].mean() - aligned.depth[y, both[y]].mean())
           for y in range(48) if both[y].any()]
    assert np.mean(gap) <= 1.0
