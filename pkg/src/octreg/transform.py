"""Geometric models for the x-y registration step.

Points are handled as ``(x, y)`` rows (column index first), which keeps the
usual homography notation.  A fitted model maps *reference* coordinates to
*moving* coordinates, so resampling the moving image into the reference frame
is a direct pull: ``out[p] = moving[T(p)]``.  No model ever needs to be
inverted to warp, which matters for the quadratic family.

Coefficient layouts:

* ``similarity``: ``(scale, rotation_rad, tx, ty)``
* ``affine``: ``(a, b, c, d, e, f)`` with ``x' = a x + b y + c``, ``y' = d x + e y + f``
* ``projective``: ``h11 h12 h13 h21 h22 h23 h31 h32`` (``h33 = 1``)
* ``quadratic``: per output coordinate the weights of ``1, x, y, x², xy, y²``
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

KINDS = ("similarity", "affine", "projective", "quadratic")
MIN_PAIRS = {"similarity": 2, "affine": 3, "projective": 4, "quadratic": 6}
N_COEFFS = {"similarity": 4, "affine": 6, "projective": 8, "quadratic": 12}

# returned by gain_coefficient when nothing overlapped before the mapping
GC_INF = math.inf


class FitDegenerateError(ValueError):
    """The point configuration cannot determine the requested model."""


class RegistrationInfeasible(RuntimeError):
    """No usable transform could be produced."""


@dataclass(frozen=True)
class TransformModel:
    kind: str
    coefficients: tuple
    residual_rms: float = 0.0

    def __post_init__(self):
        if self.kind not in N_COEFFS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if len(self.coefficients) != N_COEFFS[self.kind]:
            raise ValueError(f"{self.kind} needs {N_COEFFS[self.kind]} coefficients, "
                             f"got {len(self.coefficients)}")
        if self.kind == "similarity" and not self.coefficients[0] > 0:
            raise ValueError("similarity scale must be positive")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    @classmethod
    def identity(cls, kind: str = "affine") -> "TransformModel":
        return cls(kind, _IDENTITY[kind])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix (not defined for the quadratic family)."""
        c = self.coefficients
        if self.kind == "similarity":
            s, th, tx, ty = c
            return np.array([[s * math.cos(th), -s * math.sin(th), tx],
                             [s * math.sin(th), s * math.cos(th), ty],
                             [0.0, 0.0, 1.0]])
        if self.kind == "affine":
            return np.array([c[0:3], c[3:6], [0.0, 0.0, 1.0]])
        if self.kind == "projective":
            return np.array([c[0:3], c[3:6], [c[6], c[7], 1.0]])
        raise TypeError("quadratic models have no matrix form")

    def apply(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if self.kind == "quadratic":
            c = np.asarray(self.coefficients)
            m = _monomials(pts)
            return np.column_stack([m @ c[:6], m @ c[6:]])
        h = self.matrix()
        xh = pts @ h[:, :2].T + h[:, 2]
        # a vanishing projective denominator gives inf/nan, treated as out of view
        with np.errstate(divide="ignore", invalid="ignore"):
            return xh[:, :2] / xh[:, 2:3]

    def denominators(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if self.kind != "projective":
            return np.ones(len(pts))
        c = self.coefficients
        return c[6] * pts[:, 0] + c[7] * pts[:, 1] + 1.0

    def check_domain(self, shape) -> None:
        """Fail if a projective denominator vanishes inside a ``(h, w)`` domain."""
        if self.kind != "projective":
            return
        d = self.denominators(corners(shape))
        if np.any(np.abs(d) < 1e-9) or not (np.all(d > 0) or np.all(d < 0)):
            raise FitDegenerateError("projective denominator vanishes inside the image domain")

    def inverse_apply(self, pts, iterations: int = 50) -> np.ndarray:
        """Map moving coordinates back to the reference frame."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if self.kind != "quadratic":
            h = np.linalg.inv(self.matrix())
            xh = pts @ h[:, :2].T + h[:, 2]
            return xh[:, :2] / xh[:, 2:3]
        # Newton from the linear part
        c = np.asarray(self.coefficients)
        lin = np.array([[c[1], c[2]], [c[7], c[8]]])
        x = np.linalg.solve(lin, (pts - [c[0], c[6]]).T).T
        for _ in range(iterations):
            r = self.apply(x) - pts
            if np.max(np.abs(r), initial=0.0) < 1e-12:
                break
            jac = _quadratic_jacobian(c, x)
            x = x - np.linalg.solve(jac, r[..., None])[..., 0]
        return x

    def to_text(self) -> str:
        return self.kind + " " + " ".join(repr(v) for v in self.coefficients)

    @classmethod
    def from_text(cls, text: str) -> "TransformModel":
        parts = text.split()
        return cls(parts[0], tuple(float(v) for v in parts[1:]))


_IDENTITY = {
    "similarity": (1.0, 0.0, 0.0, 0.0),
    "affine": (1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    "projective": (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
    "quadratic": (0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
}


def _monomials(pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    return np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])


def _quadratic_jacobian(c: np.ndarray, pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    jac = np.empty((len(pts), 2, 2))
    for row, off in ((0, 0), (1, 6)):
        jac[:, row, 0] = c[off + 1] + 2 * c[off + 3] * x + c[off + 4] * y
        jac[:, row, 1] = c[off + 2] + c[off + 4] * x + 2 * c[off + 5] * y
    return jac


def corners(shape) -> np.ndarray:
    h, w = shape[:2]
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def corner_error(a: TransformModel, b: TransformModel, shape) -> float:
    """Mean Euclidean distance between the images of the four domain corners."""
    c = corners(shape)
    return float(np.mean(np.linalg.norm(a.apply(c) - b.apply(c), axis=1)))


# --------------------------------------------------------------------------
# least-squares fitting

def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Isotropic conditioning: centroid to origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1).mean()
    s = math.sqrt(2.0) / dist if dist > 0 else 1.0
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])


def _h(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ t[:2, :2].T + t[:2, 2]


def _rank_ok(a: np.ndarray, need: int, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(a, compute_uv=False)
    return len(s) >= need and s[need - 1] > tol * s[0]


def fit_model(kind: str, src, dst) -> TransformModel:
    """Least-squares fit of ``kind`` mapping ``src`` (reference) to ``dst`` (moving)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if kind not in KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")
    if len(src) != len(dst):
        raise ValueError("src and dst differ in length")
    if len(src) < MIN_PAIRS[kind]:
        raise FitDegenerateError(f"{kind} needs at least {MIN_PAIRS[kind]} pairs, got {len(src)}")
    ts, td = _normalizer(src), _normalizer(dst)
    ns, nd = _h(ts, src), _h(td, dst)
    td_inv = np.linalg.inv(td)

    if kind == "similarity":
        n = len(ns)
        a = np.zeros((2 * n, 4))
        a[0::2] = np.column_stack([ns[:, 0], -ns[:, 1], np.ones(n), np.zeros(n)])
        a[1::2] = np.column_stack([ns[:, 1], ns[:, 0], np.zeros(n), np.ones(n)])
        if not _rank_ok(a, 4):
            raise FitDegenerateError("similarity: coincident points")
        p = np.linalg.lstsq(a, nd.reshape(-1), rcond=None)[0]
        hn = np.array([[p[0], -p[1], p[2]], [p[1], p[0], p[3]], [0, 0, 1.0]])
        h = td_inv @ hn @ ts
        s = math.hypot(h[0, 0], h[1, 0])
        if s <= 0:
            raise FitDegenerateError("similarity: zero scale")
        model = TransformModel(kind, (s, math.atan2(h[1, 0], h[0, 0]), h[0, 2], h[1, 2]))
    elif kind == "affine":
        a = np.column_stack([ns, np.ones(len(ns))])
        if not _rank_ok(a, 3):
            raise FitDegenerateError("affine: collinear points")
        p = np.linalg.lstsq(a, nd, rcond=None)[0]
        hn = np.vstack([p.T, [0, 0, 1.0]])
        h = td_inv @ hn @ ts
        model = TransformModel(kind, tuple(h[:2].ravel()))
    elif kind == "projective":
        n = len(ns)
        a = np.zeros((2 * n, 9))
        x, y = ns[:, 0], ns[:, 1]
        u, v = nd[:, 0], nd[:, 1]
        a[0::2] = np.column_stack([x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u])
        a[1::2] = np.column_stack([np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v])
        _, s, vt = np.linalg.svd(a)
        if not _rank_ok(np.column_stack([ns, np.ones(n)]), 3) or s[7] <= 1e-9 * s[0]:
            raise FitDegenerateError("projective: degenerate point configuration")
        h = td_inv @ vt[-1].reshape(3, 3) @ ts
        if abs(h[2, 2]) < 1e-12:
            raise FitDegenerateError("projective: h33 vanishes")
        h = h / h[2, 2]
        model = TransformModel(kind, tuple(h.ravel()[:8]))
    else:
        m = _monomials(ns)
        if not _rank_ok(m, 6):
            raise FitDegenerateError("quadratic: rank-deficient design")
        p = np.linalg.lstsq(m, nd, rcond=None)[0]
        # the composition with the two similarity normalizers stays quadratic;
        # recover its coefficients exactly from a generic grid
        lo, hi = src.min(axis=0), src.max(axis=0)
        span = np.maximum(hi - lo, 1.0)
        g = np.stack(np.meshgrid(np.linspace(0, 1, 4), np.linspace(0, 1, 4)), -1).reshape(-1, 2)
        grid = lo + g * span
        vals = _h(td_inv, _monomials(_h(ts, grid)) @ p)
        c = np.linalg.lstsq(_monomials(grid), vals, rcond=None)[0]
        model = TransformModel(kind, tuple(c[:, 0]) + tuple(c[:, 1]))

    rms = float(np.sqrt(np.mean(np.sum((model.apply(src) - dst) ** 2, axis=1))))
    return TransformModel(model.kind, model.coefficients, rms)


def fit_robust(kind: str, src, dst, threshold: float = 5.0, iterations: int = 500,
               seed: int = 0, min_inliers: int | None = None):
    """RANSAC around :func:`fit_model`; returns ``(model, inlier_mask)``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    k = MIN_PAIRS[kind]
    n = len(src)
    if n < k:
        raise FitDegenerateError(f"{kind} needs at least {k} pairs, got {n}")
    if n == k:
        return fit_model(kind, src, dst), np.ones(n, bool)
    rng = np.random.default_rng(seed)
    best, best_count, best_err = None, -1, math.inf
    for _ in range(iterations):
        idx = rng.choice(n, size=k, replace=False)
        try:
            m = fit_model(kind, src[idx], dst[idx])
        except (FitDegenerateError, np.linalg.LinAlgError):
            continue
        err = np.linalg.norm(m.apply(src) - dst, axis=1)
        inl = err < threshold
        count = int(inl.sum())
        score = float(np.sum(np.minimum(err, threshold)))
        if count > best_count or (count == best_count and score < best_err):
            best, best_count, best_err = inl, count, score
    if best is None or best_count < k:
        raise FitDegenerateError(f"{kind}: RANSAC found no consensus")
    inl = best
    # a couple of refit/re-select rounds
    for _ in range(3):
        m = fit_model(kind, src[inl], dst[inl])
        new = np.linalg.norm(m.apply(src) - dst, axis=1) < threshold
        if new.sum() < k or np.array_equal(new, inl):
            break
        inl = new
    if min_inliers is not None and inl.sum() < min_inliers:
        raise FitDegenerateError(f"{kind}: only {int(inl.sum())} inliers")
    return fit_model(kind, src[inl], dst[inl]), inl


def refine_on_centrelines(model: TransformModel, pts_ref, pts_mov, iterations: int = 30,
                          max_dist: float = 4.0, min_dist: float = 1.5) -> TransformModel:
    """Iterative closest point refinement of ``model`` within its own family.

    ``pts_ref``/``pts_mov`` are ``(x, y)`` centreline samples.  Every
    reference point is mapped into the moving frame and paired with its nearest
    moving point; pairs farther than the current gate are dropped and the model
    is refitted.  The gate shrinks from ``max_dist`` to ``min_dist``.
    """
    pts_ref = np.asarray(pts_ref, dtype=np.float64).reshape(-1, 2)
    pts_mov = np.asarray(pts_mov, dtype=np.float64).reshape(-1, 2)
    if len(pts_ref) < MIN_PAIRS[model.kind] or len(pts_mov) == 0:
        return model
    tree = cKDTree(pts_mov)
    gates = np.geomspace(max_dist, min_dist, iterations)
    current = model
    for gate in gates:
        with np.errstate(all="ignore"):
            pred = current.apply(pts_ref)
        ok = np.all(np.isfinite(pred), axis=1)
        dist = np.full(len(pts_ref), np.inf)
        idx = np.zeros(len(pts_ref), dtype=np.int64)
        dist[ok], idx[ok] = tree.query(pred[ok])
        keep = dist < gate
        if keep.sum() < max(3 * MIN_PAIRS[model.kind], 12):
            break
        try:
            nxt = fit_model(model.kind, pts_ref[keep], pts_mov[idx[keep]])
        except FitDegenerateError:
            break
        converged = np.allclose(nxt.coefficients, current.coefficients, rtol=0, atol=1e-6)
        current = nxt
        if converged and gate == gates[-1]:
            break
    return current


# --------------------------------------------------------------------------
# warping

def sample_grid(t: TransformModel, shape) -> tuple[np.ndarray, np.ndarray]:
    """Nearest source indices ``(rows, cols)`` for each output pixel, -1 outside."""
    h, w = shape[:2]
    t.check_domain(shape)
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64)
    src = t.apply(pts)
    cols = np.rint(src[:, 0])
    rows = np.rint(src[:, 1])
    ok = np.isfinite(cols) & np.isfinite(rows) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    rows = np.where(ok, rows, -1).astype(np.int64).reshape(h, w)
    cols = np.where(ok, cols, -1).astype(np.int64).reshape(h, w)
    return rows, cols


def warp_image(image, t: TransformModel) -> np.ndarray:
    """Nearest-neighbour pull warp ``out[p] = image[T(p)]``; outside -> 0."""
    image = np.asarray(image)
    rows, cols = sample_grid(t, image.shape)
    ok = rows >= 0
    out = np.zeros_like(image)
    out[ok] = image[rows[ok], cols[ok]]
    return out


def warp_mask(mask, t: TransformModel) -> np.ndarray:
    return warp_image(np.asarray(mask, dtype=bool), t)


def warp_volume_xy(vol, t: TransformModel):
    """Relocate whole A-scans by the x-y model; z profiles are never resampled."""
    from .volume_io import Volume

    data = vol.data
    rows, cols = sample_grid(t, data.shape[1:])
    ok = rows >= 0
    out = np.zeros_like(data)
    out[:, ok] = data[:, rows[ok], cols[ok]]
    return Volume(out, vol.voxel_spacing)


# --------------------------------------------------------------------------
# gain coefficient and model selection

def gain_coefficient(b_ref, b_mov, t: TransformModel) -> float:
    """Overlap after mapping divided by overlap before.

    The overlap after mapping is counted in the reference frame,
    ``|B_R ∩ B_M∘T|``.  With no overlap before the mapping the result is
    :data:`GC_INF` when something overlaps afterwards and 1 otherwise.
    """
    b_ref = np.asarray(b_ref, dtype=bool)
    b_mov = np.asarray(b_mov, dtype=bool)
    if b_ref.shape != b_mov.shape:
        raise ValueError("masks differ in shape")
    before = int(np.count_nonzero(b_ref & b_mov))
    after = int(np.count_nonzero(b_ref & warp_mask(b_mov, t)))
    if before == 0:
        return GC_INF if after > 0 else 1.0
    return after / before


@dataclass
class GcReport:
    gc: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    selected: str | None = None
    inliers: dict = field(default_factory=dict)

    def to_kv(self) -> dict:
        out = {"selected": self.selected or "none"}
        for kind in KINDS:
            if kind in self.gc:
                out[f"gc_{kind}"] = self.gc[kind]
            else:
                out[f"gc_{kind}"] = "skipped:" + self.skipped.get(kind, "n/a").replace(" ", "_")
        return out


def select_model(b_ref, b_mov, src, dst, kinds=KINDS, robust: bool = True,
                 ransac_threshold: float = 5.0, ransac_iterations: int = 500,
                 seed: int = 0, tie_tolerance: float = 0.0, refine=None):
    """Fit every feasible family and keep the one with the largest GC.

    ``refine`` optionally maps each fitted model to an improved model of the
    same family before scoring.  Ties (within ``tie_tolerance`` relative) go
    to the family listed first.
    """
    report = GcReport()
    best = None
    b_ref = np.asarray(b_ref, dtype=bool)
    for kind in kinds:
        try:
            if robust:
                model, inl = fit_robust(kind, src, dst, ransac_threshold, ransac_iterations, seed)
            else:
                model = fit_model(kind, src, dst)
                inl = np.ones(len(np.atleast_2d(src)), bool)
            if refine is not None:
                model = refine(model)
            gc = gain_coefficient(b_ref, b_mov, model)
        except FitDegenerateError as exc:
            report.skipped[kind] = str(exc)
            log.debug("model %s skipped: %s", kind, exc)
            continue
        report.gc[kind] = gc
        report.inliers[kind] = int(inl.sum())
        if best is None or gc > best[1] * (1.0 + tie_tolerance):
            best = (model, gc)
    if best is None:
        raise RegistrationInfeasible("every transform family was degenerate")
    report.selected = best[0].kind
    return best[0], report
