"""Vessel, ILM and hyaloid-remnant segmentation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.feature import canny
from skimage.filters import apply_hysteresis_threshold, threshold_otsu
from skimage.morphology import remove_small_objects

from .volume_io import Volume

log = logging.getLogger(__name__)

B3_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
DEFAULT_LEVELS = (2, 3, 5)


class SegmentationError(ValueError):
    pass


def atrous_decompose(image: np.ndarray, n_levels: int) -> list[np.ndarray]:
    """Undecimated B3-spline wavelet planes ``w_1 .. w_n`` (finest first).

    ``image == sum(w) + residual`` where residual is the last smooth plane.
    """
    c = np.asarray(image, dtype=np.float64)
    planes = []
    for j in range(n_levels):
        step = 2 ** j
        kernel = np.zeros(4 * step + 1)
        kernel[::step] = B3_KERNEL
        smooth = ndimage.convolve1d(c, kernel, axis=0, mode="mirror")
        smooth = ndimage.convolve1d(smooth, kernel, axis=1, mode="mirror")
        planes.append(c - smooth)
        c = smooth
    planes.append(c)
    return planes


def vessel_response(p: np.ndarray, levels=DEFAULT_LEVELS, dark_vessels: bool = True) -> np.ndarray:
    """Product of the (sign-adjusted, rectified) detail planes at ``levels``."""
    p = np.asarray(p, dtype=np.float64)
    levels = sorted(set(int(l) for l in levels))
    if not levels:
        raise SegmentationError("at least one decomposition level is required")
    max_level = int(math.floor(math.log2(min(p.shape))))
    if levels[0] < 1 or levels[-1] > max_level:
        raise SegmentationError(f"levels {levels} outside 1..{max_level} for image {p.shape}")
    planes = atrous_decompose(p, levels[-1])
    sign = -1.0 if dark_vessels else 1.0
    resp = np.ones_like(p)
    for lv in levels:
        resp *= np.maximum(sign * planes[lv - 1], 0.0)
    return resp


def segment_vessels(p: np.ndarray, levels=DEFAULT_LEVELS, dark_vessels: bool = True,
                    min_area: int = 20, grow: bool = True) -> np.ndarray:
    """Binary vessel mask from a projection image.

    The multi-scale product gives a conservative core.  With ``grow`` the core
    is extended by hysteresis on the product of the two finest configured
    levels, which recovers thin vessels the coarse level misses.
    """
    resp = vessel_response(p, levels, dark_vessels)
    top = resp.max()
    if top <= 0:
        return np.zeros(resp.shape, dtype=bool)
    # geometric mean of the rectified planes, scale-free before Otsu
    r = np.power(resp / top, 1.0 / len(set(levels)))
    mask = r > threshold_otsu(r)
    fine_levels = sorted(set(int(l) for l in levels))[:2]
    if grow and len(fine_levels) == 2 and len(set(levels)) > 2:
        fine = np.sqrt(vessel_response(p, fine_levels, dark_vessels))
        if fine.max() > 0:
            t = threshold_otsu(fine)
            lab, _ = ndimage.label(apply_hysteresis_threshold(fine, 0.6 * t, t),
                                   structure=np.ones((3, 3)))
            hit = np.unique(lab[mask & (lab > 0)])
            mask |= np.isin(lab, hit[hit > 0])
    if min_area > 1:
        mask = remove_small_objects(mask, min_size=min_area)
    return mask


# --------------------------------------------------------------------------
# ILM

@dataclass(frozen=True)
class IlmSurface:
    depth: np.ndarray   # (ny, nx) int
    valid: np.ndarray   # (ny, nx) bool, True where an edge was detected

    @property
    def coverage(self) -> float:
        return float(self.valid.mean()) if self.valid.size else 0.0

    def shifted(self, k) -> "IlmSurface":
        k = np.asarray(k)
        if k.ndim == 1:
            k = k[:, None]
        return IlmSurface(self.depth + k, self.valid.copy())


def _fill_columns(z: np.ndarray, ok: np.ndarray) -> np.ndarray:
    if ok.all() or not ok.any():
        return z
    x = np.arange(len(z))
    return np.rint(np.interp(x, x[ok], z[ok])).astype(z.dtype)


def ilm_bscan(bscan: np.ndarray, sigma: float = 2.0, low: float = 0.1, high: float = 0.2):
    """Top boundary of one x-z slice: ``(depth per x, detected per x)``.

    Otsu binarization, then Canny on the binary slice with hysteresis
    thresholds given as fractions of the maximum gradient magnitude.
    """
    b = np.asarray(bscan, dtype=np.float64)
    nz, nx = b.shape
    depth = np.zeros(nx, dtype=np.int64)
    if b.max() <= b.min():
        return depth, np.zeros(nx, dtype=bool)
    binary = b > threshold_otsu(b)
    g = ndimage.gaussian_filter(binary.astype(np.float64), sigma, mode="nearest")
    mag = np.hypot(ndimage.sobel(g, 0, mode="nearest"), ndimage.sobel(g, 1, mode="nearest"))
    top = mag.max()
    if top <= 0:
        return depth, np.zeros(nx, dtype=bool)
    # canny discards the outermost pixels; pad x so the border columns survive
    padded = np.pad(binary.astype(np.float64), ((0, 0), (1, 1)), mode="edge")
    edges = canny(padded, sigma=sigma, low_threshold=low * top,
                  high_threshold=high * top, mode="nearest")[:, 1:-1]
    ok = edges.any(axis=0)
    first = np.argmax(edges, axis=0)
    # snap the edge to the first foreground voxel at or just below it
    for x in np.flatnonzero(ok):
        z0 = max(first[x] - 2, 0)
        col = binary[z0:min(first[x] + 3, nz), x]
        hit = np.flatnonzero(col)
        first[x] = z0 + hit[0] if hit.size else first[x]
    depth[ok] = first[ok]
    return depth, ok


def segment_ilm(vol: Volume, sigma: float = 2.0, low: float = 0.1, high: float = 0.2,
                workers: int = 1) -> IlmSurface:
    """ILM depth per (y, x); undetected columns are filled along x."""
    data = vol.data
    nz, ny, nx = data.shape
    depth = np.zeros((ny, nx), dtype=np.int64)
    valid = np.zeros((ny, nx), dtype=bool)

    def one(y):
        d, ok = ilm_bscan(data[:, y, :], sigma, low, high)
        return y, _fill_columns(d, ok), ok

    ys = range(ny)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, ys))
    else:
        results = [one(y) for y in ys]
    for y, d, ok in results:
        depth[y] = d
        valid[y] = ok
    return IlmSurface(depth, valid)


@dataclass(frozen=True)
class AnatomyFeatures:
    hr_apex: tuple      # (z, y, x)
    onh_centroid: tuple  # (y, x)

    def __post_init__(self):
        assert tuple(self.onh_centroid) == tuple(self.hr_apex[1:]), "ONH centroid must sit under the HR apex"


def locate_hr_apex(ilm: IlmSurface, anterior_is_low_z: bool = True) -> AnatomyFeatures:
    """Highest valid ILM point; ties go to the smallest y, then smallest x."""
    if not ilm.valid.any():
        raise SegmentationError("no valid ILM entries")
    d = ilm.depth.astype(np.float64)
    if not anterior_is_low_z:
        d = -d
    d = np.where(ilm.valid, d, np.inf)
    flat = int(np.argmin(d))          # row-major argmin = smallest y, then x
    y, x = divmod(flat, d.shape[1])
    z = int(ilm.depth[y, x])
    return AnatomyFeatures((z, y, x), (y, x))


def prefilter(vol: Volume, mode: str = "gaussian", size: float = 1.0) -> Volume:
    """Light denoising before segmentation ('none', 'gaussian' or 'median')."""
    if mode == "none":
        return vol
    data = vol.data
    if mode == "gaussian":
        out = ndimage.gaussian_filter(data.astype(np.float32), size)
    elif mode == "median":
        out = ndimage.median_filter(data, size=int(size) * 2 + 1)
    else:
        raise ValueError(f"unknown prefilter {mode!r}")
    info = np.iinfo(data.dtype)
    return Volume(np.clip(np.rint(out), info.min, info.max).astype(data.dtype), vol.voxel_spacing)


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 1.0


__all__ = ["atrous_decompose", "vessel_response", "segment_vessels", "IlmSurface", "segment_ilm",
           "AnatomyFeatures", "locate_hr_apex", "prefilter", "mask_iou"]
