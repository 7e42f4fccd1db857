"""3D cube descriptors sampled at graph nodes.

Each node is lifted onto the ILM surface and described by the intensity cube
around that voxel, the same cube filtered with a small Gabor bank in the
B-scan (x-z) plane, and the vector from the hyaloid-remnant apex to the voxel.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

from .segmentation import IlmSurface
from .vessel_graph import NEUTRAL, VesselGraph, neighbour_dissimilarity, normalize01
from .volume_io import Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaborBank:
    orientations_deg: tuple = (0.0, 90.0)
    wavelengths: tuple = (4.0, 8.0)
    sigma_ratio: float = 0.56
    aspect: float = 0.5
    phase: float = 0.0
    truncate: float = 2.5

    def kernels(self) -> list[np.ndarray]:
        """Zero-mean real kernels in the (z, x) plane, orientation-major order."""
        out = []
        for theta in self.orientations_deg:
            for lam in self.wavelengths:
                out.append(gabor_kernel(lam, theta, self.sigma_ratio * lam, self.aspect,
                                        self.phase, self.truncate))
        return out


def gabor_kernel(wavelength, theta_deg, sigma, aspect=0.5, phase=0.0, truncate=2.5) -> np.ndarray:
    """Real Gabor kernel indexed ``[z, x]``; theta = 0 oscillates along x."""
    half = int(math.ceil(truncate * sigma / min(aspect, 1.0)))
    z, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    th = math.radians(theta_deg)
    xr = x * math.cos(th) + z * math.sin(th)
    zr = -x * math.sin(th) + z * math.cos(th)
    env = np.exp(-(xr ** 2 + (aspect * zr) ** 2) / (2 * sigma ** 2))
    k = env * np.cos(2 * math.pi * xr / wavelength + phase)
    k -= env * (k.sum() / env.sum())   # remove DC so flat regions give zero
    return k


@dataclass
class CubeFeatures:
    """Descriptors of N nodes (batched).  ``valid[i]`` is False for excluded nodes."""
    intensity: np.ndarray   # (N, L)
    gabor: np.ndarray       # (N, 4, L)
    hr: np.ndarray          # (N, 3) = o - h
    voxels: np.ndarray      # (N, 3) (z, y, x)
    valid: np.ndarray       # (N,)

    def dump(self) -> str:
        lines = []
        for i in range(len(self.valid)):
            crc = zlib.crc32(np.ascontiguousarray(self.intensity[i], dtype=np.float32).tobytes())
            crc = zlib.crc32(np.ascontiguousarray(self.gabor[i], dtype=np.float32).tobytes(), crc)
            hz, hy, hx = self.hr[i]
            lines.append(f"{i} {crc:08x} {hz:g} {hy:g} {hx:g} {int(self.valid[i])}")
        return "\n".join(lines) + "\n"

    def save_dump(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")


def locate_node_voxel(node, ilm: IlmSurface, radius: int = 5):
    """ILM voxel ``(z, y, x)`` under a node, or None if no valid ILM is near."""
    ny, nx = ilm.depth.shape
    y = int(np.clip(round(float(node[0])), 0, ny - 1))
    x = int(np.clip(round(float(node[1])), 0, nx - 1))
    if ilm.valid[y, x]:
        return int(ilm.depth[y, x]), y, x
    y0, y1 = max(0, y - radius), min(ny, y + radius + 1)
    x0, x1 = max(0, x - radius), min(nx, x + radius + 1)
    win = ilm.valid[y0:y1, x0:x1]
    if not win.any():
        return None
    yy, xx = np.nonzero(win)
    d2 = (yy + y0 - y) ** 2 + (xx + x0 - x) ** 2
    order = np.lexsort((xx, yy, d2))
    j = order[0]
    if d2[j] > radius ** 2:
        return None
    vy, vx = int(yy[j] + y0), int(xx[j] + x0)
    return int(ilm.depth[vy, vx]), y, x


def _block(data: np.ndarray, center, half: int) -> np.ndarray:
    """Zero-padded block of side ``2*half+1`` around ``center``."""
    side = 2 * half + 1
    out = np.zeros((side, side, side), dtype=np.float64)
    src, dst = [], []
    for c, n in zip(center, data.shape):
        lo, hi = c - half, c + half + 1
        s0, s1 = max(lo, 0), min(hi, n)
        if s1 <= s0:
            return out
        src.append(slice(s0, s1))
        dst.append(slice(s0 - lo, s1 - lo))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _pad_kernels(kernels) -> np.ndarray:
    """Centre every (z, x) kernel in a common odd-sized square."""
    size = max(max(k.shape) for k in kernels)
    out = np.zeros((len(kernels), size, size))
    for i, k in enumerate(kernels):
        oz, ox = (size - k.shape[0]) // 2, (size - k.shape[1]) // 2
        out[i, oz:oz + k.shape[0], ox:ox + k.shape[1]] = k
    return out


def extract_cube_feature(vol: Volume | np.ndarray, o, h, side: int = 19,
                         bank: GaborBank = GaborBank(), kernels=None):
    """Single-node descriptor: ``(intensity_cube, gabor_cubes, hr_vector)``.

    Gabor responses are 2D convolutions of every x-z slice of the cube with
    zero padding outside the volume; they are evaluated on an enlarged block
    so values at the cube faces see the true neighbourhood.
    """
    if side % 2 != 1:
        raise ValueError("cube side must be odd")
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    kernels = bank.kernels() if kernels is None else kernels
    half = side // 2
    o = tuple(int(v) for v in o)
    cube = _block(data, o, half)
    kp = _pad_kernels(kernels)
    m = kp.shape[1] // 2
    big = _block(data, o, half + m)[:, m:m + side, :]     # enlarged in z and x only
    n = big.shape[0] + kp.shape[1] - 1
    shape = (sp_fft.next_fast_len(n, real=True),) * 2
    fb = sp_fft.rfftn(big, s=shape, axes=(0, 2))
    fk = sp_fft.rfftn(kp, s=shape, axes=(1, 2))
    lo = 2 * m
    gab = np.empty((len(kp), side, side, side))
    for i in range(len(kp)):
        full = sp_fft.irfftn(fb * fk[i][:, None, :], s=shape, axes=(0, 2))
        gab[i] = full[lo:lo + side, :, lo:lo + side]
    hr = np.asarray(o, dtype=np.float64) - np.asarray(h, dtype=np.float64)
    return cube, gab, hr


def extract_features(vol: Volume, graph: VesselGraph, ilm: IlmSurface, apex, side: int = 19,
                     bank: GaborBank = GaborBank(), search_radius: int = 5) -> CubeFeatures:
    n = graph.n_nodes
    kernels = bank.kernels()
    length = side ** 3
    inten = np.zeros((n, length))
    gab = np.zeros((n, len(kernels), length))
    hr = np.zeros((n, 3))
    vox = np.zeros((n, 3), dtype=np.int64)
    valid = np.zeros(n, dtype=bool)
    for i, node in enumerate(graph.coords):
        o = locate_node_voxel(node, ilm, search_radius)
        if o is None:
            continue
        c, g, u = extract_cube_feature(vol, o, apex, side, bank, kernels)
        inten[i] = c.ravel()
        gab[i] = g.reshape(len(kernels), -1)
        hr[i] = u
        vox[i] = o
        valid[i] = True
    if not valid.all():
        log.warning("%d node(s) without ILM support excluded from cube descriptors", int((~valid).sum()))
    return CubeFeatures(inten, gab, hr, vox, valid)


def cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise ``1 - cos`` clamped to [0, 1]; zero-norm rows give 0.5."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = a @ b.T
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = dots / (na[:, None] * nb[None, :])
    d = np.clip(1.0 - cos, 0.0, 1.0)
    zero = (na == 0)[:, None] | (nb == 0)[None, :]
    return np.where(zero, NEUTRAL, d)


def hr_dissimilarity(ur: np.ndarray, um: np.ndarray) -> np.ndarray:
    """Negative normalized correlation of apex vectors mapped to [0, 1]."""
    nr = np.linalg.norm(ur, axis=1)
    nm = np.linalg.norm(um, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (ur @ um.T) / (nr[:, None] * nm[None, :])
    d = np.clip((1.0 - corr) / 2.0, 0.0, 1.0)
    zero = (nr == 0)[:, None] | (nm == 0)[None, :]
    return np.where(zero, NEUTRAL, d)


def volume_terms(fr: CubeFeatures, fm: CubeFeatures) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d1 = cosine_distance_matrix(fr.intensity, fm.intensity)
    k = fr.gabor.shape[1]
    d2 = sum(cosine_distance_matrix(fr.gabor[:, i], fm.gabor[:, i]) for i in range(k)) / k
    d3 = hr_dissimilarity(fr.hr, fm.hr)
    return d1, d2, d3


def volume_dissimilarity(fr: CubeFeatures, fm: CubeFeatures, normalize: bool = True) -> np.ndarray:
    """``D_V = diss_1 + diss_2 + diss_3``, min-max normalized; excluded nodes -> 0.5."""
    d1, d2, d3 = volume_terms(fr, fm)
    d = d1 + d2 + d3
    excluded = (~fr.valid)[:, None] | (~fm.valid)[None, :]
    if normalize:
        ok = ~excluded
        if ok.any():
            lo, hi = d[ok].min(), d[ok].max()
            d = (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)
        else:
            d = np.zeros_like(d)
    return np.where(excluded, NEUTRAL, d)


def neighbour_dissimilarity_volume(gr: VesselGraph, gm: VesselGraph, dv: np.ndarray,
                                   normalize: bool = True) -> np.ndarray:
    return neighbour_dissimilarity(gr, gm, dv, normalize)


__all__ = ["GaborBank", "gabor_kernel", "CubeFeatures", "locate_node_voxel", "extract_cube_feature",
           "extract_features", "volume_dissimilarity", "neighbour_dissimilarity_volume",
           "cosine_distance_matrix", "hr_dissimilarity", "normalize01"]
