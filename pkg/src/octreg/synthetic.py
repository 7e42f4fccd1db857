"""Synthetic OCT volume pairs with known ground truth.

The phantom is a continuous description of a mouse-like retina: an ILM
surface with a hyaloid-remnant peak over the optic nerve head, a layered
depth profile below it, a smooth 3D texture, and a vessel tree radiating from
the nerve head.  Vessels are bright just under the ILM and shadow the deeper
layers, so they appear dark in the summed projection.

The moving volume is rendered by evaluating the same phantom at
``F^-1(q)`` for every moving pixel ``q``, where ``F`` is the ground-truth
reference -> moving map.  This avoids black borders that a discrete warp
would introduce.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .transform import TransformModel, fit_model
from .volume_io import SyntheticTruth, Volume

log = logging.getLogger(__name__)

FAMILIES = ("identity", "similarity", "affine", "projective", "quadratic")


class FieldOfViewError(RuntimeError):
    """The requested warp pushes the phantom out of the image."""


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 128, 128)
    n_trunks: int = 6
    branching_depth: int = 3
    trunk_radius: float = 2.0
    kind: str = "affine"
    max_rotation_deg: float = 8.0
    max_scale: float = 0.06
    min_translation: float = 5.0
    max_translation: float = 10.0
    max_shear: float = 0.05
    max_perspective: float = 0.08
    max_bend: float = 4.0
    z_shift: int | None = None
    max_z_shift: int = 6
    z_ramp: float = 0.0
    noise: float = 0.04
    jitter_px: float = 0.5
    drop_fraction: float = 0.1
    texture: float = 0.25
    ilm_depth: int = 20
    hr_height: int = 10
    hr_radius: float = 6.0
    onh_offset: float = 0.08

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown transform family {self.kind!r}")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ValueError("drop_fraction must be in [0, 1)")


# depth below ILM -> intensity (0..255 scale)
_PROFILE_T = np.array([-1e9, -0.5, 0, 3, 3.5, 8, 8.5, 12, 12.5, 18, 18.5, 22, 22.5, 26, 26.5,
                       30, 30.5, 40, 60, 70, 1e9])
_PROFILE_V = np.array([14, 14, 200, 200, 120, 120, 165, 165, 95, 95, 150, 150, 70, 70, 225,
                       225, 110, 80, 35, 14, 14], dtype=float)
_TISSUE_END = 70.0      # below this depth the signal is back at the noise floor
_VESSEL_DEPTH = 4.0
_SHADOW = 0.35


@dataclass
class Segment:
    points: np.ndarray          # (K, 2) centreline (y, x), ~0.5 px spacing
    radius: float
    parent: int = -1
    children: list = field(default_factory=list)
    start_id: int = -1          # key-point id of the first vertex
    end_id: int = -1


@dataclass
class Phantom:
    shape: tuple
    onh: tuple
    segments: list
    keypoints: np.ndarray       # (P, 2) (y, x)
    ilm_base: float
    undulation: tuple
    hr_height: int
    hr_radius: float
    texture: np.ndarray         # (nz, ny + 2m, nx + 2m)
    texture_margin: int
    texture_gain: float

    # -- scalar fields evaluated at arbitrary (y, x) source positions ----
    def ilm_depth(self, yx: np.ndarray) -> np.ndarray:
        y, x = yx[..., 0], yx[..., 1]
        cy, cx = self.onh
        undul = sum(a * np.sin(2 * np.pi * (fy * y + fx * x) + ph) for a, fy, fx, ph in self.undulation)
        base = np.rint(self.ilm_base + undul)
        base_top = np.rint(self.ilm_base + sum(a * np.sin(2 * np.pi * (fy * cy + fx * cx) + ph)
                                               for a, fy, fx, ph in self.undulation))
        cheb = np.maximum(np.abs(y - cy), np.abs(x - cx))
        dist = np.hypot(y - cy, x - cx)
        rise = np.clip(1.0 - (dist - 1.0) / self.hr_radius, 0.0, 1.0) * self.hr_height
        depth = np.rint(base - rise)
        plateau = cheb <= 1.0
        depth = np.where(plateau, base_top - self.hr_height, np.maximum(depth, base_top - self.hr_height + 1))
        return depth.astype(np.int64)

    def vessel_weight(self, yx: np.ndarray, segments=None, jitter=None) -> np.ndarray:
        segs = range(len(self.segments)) if segments is None else segments
        pts, rad = [], []
        for k in segs:
            p = self.segments[k].points
            if jitter is not None:
                p = p + jitter[k]
            pts.append(p)
            rad.append(np.full(len(p), self.segments[k].radius))
        if not pts:
            return np.zeros(yx.shape[:-1])
        pts = np.concatenate(pts)
        rad = np.concatenate(rad)
        tree = cKDTree(pts)
        flat = yx.reshape(-1, 2)
        dist, idx = tree.query(flat, k=4, distance_upper_bound=8.0)
        valid = np.isfinite(dist)
        r = np.where(valid, rad[np.minimum(idx, len(rad) - 1)], 0.0)
        w = np.where(valid, np.clip(r + 0.5 - dist, 0.0, 1.0), 0.0).max(axis=1)
        return w.reshape(yx.shape[:-1])

    def render(self, yx: np.ndarray, segments=None, jitter=None,
               z_offset: np.ndarray | None = None) -> np.ndarray:
        """Float volume whose column (y, x) shows the phantom at source ``yx[y, x]``."""
        nz = self.shape[0]
        ny, nx = yx.shape[:2]
        ilm = self.ilm_depth(yx)
        if z_offset is not None:
            ilm = ilm + z_offset[:, None]
        vw = self.vessel_weight(yx, segments, jitter)
        z = np.arange(nz, dtype=float)[:, None, None]
        t = z - ilm[None]
        vol = np.interp(t, _PROFILE_T, _PROFILE_V)
        # texture sampled at the nearest source column, following the ILM
        m = self.texture_margin
        ty = np.clip(np.rint(yx[..., 0]).astype(int) + m, 0, self.texture.shape[1] - 1)
        tx = np.clip(np.rint(yx[..., 1]).astype(int) + m, 0, self.texture.shape[2] - 1)
        tz = np.clip(t.astype(int) + self.shape[0] // 4, 0, self.texture.shape[0] - 1)
        tex = self.texture[tz, ty[None], tx[None]]
        inside = (t >= 0) & (t < _TISSUE_END)
        vol = np.where(inside, vol * (1.0 + self.texture_gain * tex), vol)
        wall = (t >= 0) & (t < _VESSEL_DEPTH)
        vol = np.where(wall, vol * (1 - vw) + 235.0 * vw, vol)
        deep = (t >= _VESSEL_DEPTH) & (t < _TISSUE_END)
        vol = np.where(deep, vol * (1.0 - (1.0 - _SHADOW) * vw), vol)
        return vol

    def vessel_mask(self, yx: np.ndarray, segments=None, threshold: float = 0.5) -> np.ndarray:
        return self.vessel_weight(yx, segments) >= threshold


def pixel_grid(ny: int, nx: int) -> np.ndarray:
    yy, xx = np.mgrid[0:ny, 0:nx]
    return np.stack([yy, xx], axis=-1).astype(np.float64)


def _grow(rng, start, heading, length, ny, nx, margin=3.0, step=0.5):
    pts = [np.asarray(start, float)]
    h = heading
    for _ in range(int(length / step)):
        h += rng.normal(0.0, 0.025)
        nxt = pts[-1] + step * np.array([math.sin(h), math.cos(h)])
        if not (margin <= nxt[0] <= ny - 1 - margin and margin <= nxt[1] <= nx - 1 - margin):
            break
        pts.append(nxt)
    return np.array(pts), h


def build_phantom(seed: int, cfg: PhantomConfig, texture: bool = True) -> Phantom:
    rng = np.random.default_rng(seed)
    nz, ny, nx = cfg.dims
    size = min(ny, nx)
    cy = int(round(ny / 2 + rng.uniform(-1, 1) * cfg.onh_offset * ny))
    cx = int(round(nx / 2 + rng.uniform(-1, 1) * cfg.onh_offset * nx))
    segments: list[Segment] = []
    keypoints = [(float(cy), float(cx))]
    root_id = 0

    def add_kp(p):
        keypoints.append((float(p[0]), float(p[1])))
        return len(keypoints) - 1

    angles = np.linspace(0, 2 * np.pi, cfg.n_trunks, endpoint=False) + rng.uniform(0, 2 * np.pi)
    angles += rng.uniform(-0.25, 0.25, cfg.n_trunks)
    frontier = []
    for a in angles:
        length = rng.uniform(0.55, 0.8) * size
        pts, _ = _grow(rng, (cy, cx), a, length, ny, nx)
        if len(pts) < 8:
            continue
        segments.append(Segment(pts, cfg.trunk_radius, -1, [], root_id, add_kp(pts[-1])))
        frontier.append((len(segments) - 1, 0))
    while frontier:
        k, level = frontier.pop(0)
        if level >= cfg.branching_depth:
            continue
        parent = segments[k]
        n_children = int(rng.integers(1, 3))
        positions = np.sort(rng.uniform(0.3, 0.8, n_children))
        if n_children == 2 and positions[1] - positions[0] < 0.2:
            positions = positions[:1]
        for i, pos in enumerate(positions):
            j = int(pos * (len(parent.points) - 1))
            if j < 4 or j > len(parent.points) - 4:
                continue
            d = parent.points[j + 2] - parent.points[j - 2]
            heading = math.atan2(d[0], d[1])
            side = 1 if (i + rng.integers(0, 2)) % 2 else -1
            h = heading + side * math.radians(rng.uniform(35, 60))
            plen = (len(parent.points) - 1) * 0.5
            pts, _ = _grow(rng, parent.points[j], h, plen * rng.uniform(0.5, 0.8), ny, nx)
            if len(pts) < 10:
                continue
            segments.append(Segment(pts, max(parent.radius * 0.75, 1.2), k, [], add_kp(pts[0]),
                                    add_kp(pts[-1])))
            parent.children.append(len(segments) - 1)
            frontier.append((len(segments) - 1, level + 1))

    undulation = tuple((rng.uniform(0.8, 2.0), rng.uniform(-1, 1) / size, rng.uniform(-1, 1) / size,
                        rng.uniform(0, 2 * np.pi)) for _ in range(2))
    m = 48
    if texture:
        tex = rng.standard_normal((nz // 2 + 64, ny + 2 * m, nx + 2 * m)).astype(np.float32)
        tex = ndimage.gaussian_filter(tex, 1.2)
        tex /= tex.std() + 1e-12
    else:   # geometry only (graph experiments)
        tex = np.zeros((1, 1, 1), dtype=np.float32)
    return Phantom((nz, ny, nx), (cy, cx), segments, np.array(keypoints), cfg.ilm_depth,
                   undulation, cfg.hr_height, cfg.hr_radius, tex, m, cfg.texture)


def random_warp(rng, cfg: PhantomConfig, shape, scale: float = 1.0) -> TransformModel:
    """Ground-truth reference -> moving map of family ``cfg.kind``."""
    ny, nx = shape
    c = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0])
    kind = cfg.kind
    if kind == "identity":
        return TransformModel.identity("similarity")
    ang = rng.uniform(0, 2 * np.pi)
    tmag = rng.uniform(cfg.min_translation, cfg.max_translation) * (scale if scale < 1 else 1)
    t = tmag * np.array([math.cos(ang), math.sin(ang)])
    th = math.radians(rng.uniform(-1, 1) * cfg.max_rotation_deg * scale)
    s = 1.0 + rng.uniform(-1, 1) * cfg.max_scale * scale
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    if kind == "similarity":
        a = s * rot
        off = c + t - a @ c
        return TransformModel("similarity", (s, th, off[0], off[1]))
    sh = rng.uniform(-1, 1, 2) * cfg.max_shear * scale
    a = rot @ np.array([[s + sh[0], sh[1]], [-sh[1] * 0.5, s - sh[0]]])
    off = c + t - a @ c
    aff = np.array([[a[0, 0], a[0, 1], off[0]], [a[1, 0], a[1, 1], off[1]], [0, 0, 1.0]])
    if kind == "affine":
        return TransformModel("affine", tuple(aff[:2].ravel()))
    half = max(nx, ny) / 2.0
    if kind == "projective":
        g = rng.uniform(-1, 1, 2) * cfg.max_perspective * scale / half
        # perspective about the image centre, keeping the centre's image fixed
        pers = np.array([[1, 0, 0], [0, 1, 0], [g[0], g[1], 1.0]])
        tc = np.array([[1, 0, -c[0]], [0, 1, -c[1]], [0, 0, 1.0]])
        h = aff @ np.linalg.inv(tc) @ pers @ tc
        h = h / h[2, 2]
        return TransformModel("projective", tuple(h.ravel()[:8]))
    # quadratic: affine plus a bend of up to max_bend px at the corners
    q = rng.uniform(-1, 1, 6) * cfg.max_bend * scale
    gy, gx = np.mgrid[0:ny:8, 0:nx:8]
    src = np.column_stack([gx.ravel(), gy.ravel()]).astype(float)
    u = (src - c) / half
    bend = np.column_stack([q[0] * u[:, 0] ** 2 + q[1] * u[:, 0] * u[:, 1] + q[2] * u[:, 1] ** 2,
                            q[3] * u[:, 0] ** 2 + q[4] * u[:, 0] * u[:, 1] + q[5] * u[:, 1] ** 2])
    dst = src @ aff[:2, :2].T + aff[:2, 2] + bend / 2.0
    fitted = fit_model("quadratic", src, dst)
    return TransformModel("quadratic", fitted.coefficients)


def _segment_jitter(rng, phantom: Phantom, sigma: float) -> dict:
    out = {}
    for k, seg in enumerate(phantom.segments):
        if sigma <= 0:
            out[k] = np.zeros_like(seg.points)
            continue
        j = rng.standard_normal(seg.points.shape)
        j = ndimage.gaussian_filter1d(j, 6.0, axis=0, mode="nearest")
        j *= sigma / (j.std(axis=0, keepdims=True) + 1e-12)
        j[0] = 0.0  # keep branch attachment on the parent
        out[k] = j
    return out


def _drop_branches(rng, phantom: Phantom, fraction: float) -> set:
    leaves = [k for k, s in enumerate(phantom.segments) if not s.children and s.parent >= 0]
    n = int(round(fraction * len(phantom.segments)))
    n = min(n, len(leaves))
    if n == 0:
        return set()
    return set(int(k) for k in rng.choice(leaves, size=n, replace=False))


def _z_ramp(cfg: PhantomConfig, ny: int) -> np.ndarray:
    if cfg.z_ramp == 0:
        return np.zeros(ny, dtype=int)
    yy = (np.arange(ny) - (ny - 1) / 2.0) / ((ny - 1) / 2.0)
    return np.rint(cfg.z_ramp * yy).astype(int)


def _quantize(vol: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(vol), 0, 255).astype(np.uint8)


def generate_synthetic_pair(seed: int, cfg: PhantomConfig = PhantomConfig(), max_retries: int = 8):
    """Return ``(reference, moving, truth)`` for a seeded phantom.

    Deterministic per ``(seed, cfg)``.  If the warp pushes too much of the
    vessel tree out of view, the magnitudes are shrunk and the warp redrawn.
    """
    nz, ny, nx = cfg.dims
    phantom = build_phantom(seed, cfg)
    rng = np.random.default_rng([seed, 1])
    grid = pixel_grid(ny, nx)

    scale = 1.0
    for attempt in range(max_retries + 1):
        warp = random_warp(rng, cfg, (ny, nx), scale)
        kp_xy = phantom.keypoints[:, ::-1]
        mov_kp = warp.apply(kp_xy)[:, ::-1]
        inside = ((mov_kp[:, 0] >= 2) & (mov_kp[:, 0] <= ny - 3) &
                  (mov_kp[:, 1] >= 2) & (mov_kp[:, 1] <= nx - 3))
        if inside.mean() >= 0.8 and inside[0]:
            break
        if attempt == max_retries:
            raise FieldOfViewError(f"seed {seed}: warp leaves the field of view")
        log.warning("seed %d: warp pushes content out of view, retrying with tighter bounds", seed)
        scale *= 0.7

    dropped = _drop_branches(rng, phantom, cfg.drop_fraction)
    jitter = _segment_jitter(rng, phantom, cfg.jitter_px)
    keep = [k for k in range(len(phantom.segments)) if k not in dropped]

    ramp = _z_ramp(cfg, ny)
    apex_z = int(phantom.ilm_depth(np.array([[phantom.onh]], float))[0, 0])
    bound = cfg.max_z_shift
    while True:
        z_shift = cfg.z_shift if cfg.z_shift is not None else int(rng.integers(-bound, bound + 1))
        if apex_z - z_shift + ramp.min() >= 2:
            break
        if cfg.z_shift is not None or bound == 0:
            raise FieldOfViewError("z shift pushes the ILM apex out of the volume")
        log.warning("seed %d: z shift pushes the apex out of view, retrying with tighter bounds", seed)
        bound //= 2

    ref = phantom.render(grid)
    src_yx = warp.inverse_apply(grid[..., ::-1].reshape(-1, 2))[:, ::-1].reshape(ny, nx, 2)
    mov = phantom.render(src_yx, keep, jitter, z_offset=ramp - z_shift)

    noise_rng = np.random.default_rng([seed, 2])
    if cfg.noise > 0:
        ref = ref + noise_rng.normal(0.0, cfg.noise * 255.0, ref.shape)
        mov = mov + noise_rng.normal(0.0, cfg.noise * 255.0, mov.shape)

    # key points that stay key points in the moving tree
    gone = set()
    for k in dropped:
        seg = phantom.segments[k]
        gone.update((seg.end_id, seg.start_id))
    node_truth = tuple((i, i) for i in range(len(phantom.keypoints)) if i not in gone)
    family = "similarity" if cfg.kind == "identity" else cfg.kind
    truth = SyntheticTruth(
        model_kind=family,
        coefficients=warp.coefficients,
        z_shift=int(z_shift),
        z_ramp=tuple(int(r) for r in ramp),
        node_truth=node_truth,
        ref_points=phantom.keypoints.copy(),
        mov_points=mov_kp,
        hr_apex=(apex_z, phantom.onh[0], phantom.onh[1]),
    )
    return Volume(_quantize(ref)), Volume(_quantize(mov)), truth


def truth_model(truth: SyntheticTruth) -> TransformModel:
    return TransformModel(truth.model_kind, truth.coefficients)


def with_kind(cfg: PhantomConfig, kind: str, **kw) -> PhantomConfig:
    return replace(cfg, kind=kind, **kw)
