"""Depth (z) alignment of x-y registered volumes.

Shifts are integers and follow the convention ``aligned[z] = moving[z - s]``:
a positive shift pushes moving content deeper.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .segmentation import AnatomyFeatures, IlmSurface
from .volume_io import Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZAlignment:
    coarse_shift: int
    per_slice_shift: np.ndarray
    flags: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return "\n".join(str(int(s)) for s in self.per_slice_shift) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def coarse_z_shift(feat_r: AnatomyFeatures | None, feat_m: AnatomyFeatures | None,
                   ilm_r: IlmSurface | None = None, ilm_m: IlmSurface | None = None):
    """Apex depth difference; median ILM depth difference when an apex is missing.

    Returns ``(shift, flagged)``.
    """
    if feat_r is not None and feat_m is not None:
        return int(feat_r.hr_apex[0] - feat_m.hr_apex[0]), False
    if ilm_r is None or ilm_m is None or not ilm_r.valid.any() or not ilm_m.valid.any():
        raise ValueError("no apex and no ILM to fall back on")
    log.warning("HR apex missing; coarse z shift from median ILM depth")
    diff = np.median(ilm_r.depth[ilm_r.valid]) - np.median(ilm_m.depth[ilm_m.valid])
    return int(np.rint(diff)), True


def _slice_gap(ilm_r: IlmSurface, ilm_m: IlmSurface) -> np.ndarray:
    """Per-slice mean ILM depth difference (reference minus moving).

    Both means are taken over the columns valid on both surfaces so a partly
    out-of-view moving slice is compared on the same support.
    """
    both = ilm_r.valid & ilm_m.valid
    out = np.full(both.shape[0], np.nan)
    for y in range(len(out)):
        v = both[y]
        if v.any():
            out[y] = ilm_r.depth[y, v].mean() - ilm_m.depth[y, v].mean()
    return out


def _fill_nearest(shift: np.ndarray, ok: np.ndarray) -> np.ndarray:
    if ok.all():
        return shift
    idx = np.flatnonzero(ok)
    out = shift.copy()
    for y in np.flatnonzero(~ok):
        j = idx[np.argmin(np.abs(idx - y))]   # ties -> the lower slice
        out[y] = shift[j]
    return out


def refine_z_per_slice(ilm_r: IlmSurface, ilm_m: IlmSurface, coarse: int, bound: int = 20,
                       max_iter: int = 10) -> ZAlignment:
    """Per-B-scan shifts from the mean ILM depth, starting from ``coarse``."""
    ny = ilm_r.depth.shape[0]
    gap = _slice_gap(ilm_r, ilm_m)
    ok = np.isfinite(gap)
    shift = np.full(ny, int(coarse), dtype=np.int64)
    if not ok.any():
        log.warning("no slice has a valid ILM on both sides; coarse-only z alignment")
        return ZAlignment(int(coarse), shift, {"coarse_only": True})

    def discrepancy(s):
        return float(np.mean(np.abs(gap[ok] - s[ok])))

    prev = discrepancy(shift)
    for it in range(max_iter):
        residual = gap - shift
        step = np.where(ok, np.rint(residual), 0).astype(np.int64)
        new = np.clip(shift + step, coarse - bound, coarse + bound)
        if np.array_equal(new, shift):
            break
        cur = discrepancy(new)
        if cur > prev + 1e-12:
            log.debug("z refinement iteration %d would increase the discrepancy; stopping", it)
            break
        shift, prev = new, cur
    shift = _fill_nearest(shift, ok)
    return ZAlignment(int(coarse), shift)


def apply_z_alignment(vol: Volume, a: ZAlignment) -> Volume:
    """Shift every B-scan (fixed y) along z; vacated voxels become zero."""
    data = vol.data
    nz = data.shape[0]
    out = np.zeros_like(data)
    for y, s in enumerate(np.asarray(a.per_slice_shift, dtype=np.int64)):
        s = int(s)
        if s >= nz or s <= -nz:
            continue
        if s >= 0:
            out[s:, y, :] = data[:nz - s, y, :]
        else:
            out[:nz + s, y, :] = data[-s:, y, :]
    return Volume(out, vol.voxel_spacing)
