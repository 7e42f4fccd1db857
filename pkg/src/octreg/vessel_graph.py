"""Vessel graphs and the adaptively weighted graph descriptors.

A graph is built from a vessel skeleton: branch points and endpoints first,
then extra nodes every ``d`` pixels of arc length, merged into existing
nodes closer than ``merge_radius``.  Each node gets five descriptors
(degree, closeness, betweenness, eigenvector centrality, edge-weight sum),
min-max normalized per graph.  The pair's difference pattern selects one of
six weight rows used to combine them into the node dissimilarity ``D_G``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import networkx as nx
import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize as _sk_skeletonize

log = logging.getLogger(__name__)

N_DESCRIPTORS = 5
DESCRIPTOR_NAMES = ("degree", "closeness", "betweenness", "eigenvector", "strength")
NEUTRAL = 0.5

_NEIGH = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _canonical(mask: np.ndarray):
    """Bounding-box crop of ``mask`` in canonical 90 degree orientation.

    Returns ``(box, k, canon)`` with ``canon == np.rot90(mask[box], k)``,
    where ``k`` picks the lexicographically smallest of the four rotations.
    Every rotation or translation of the mask yields the same ``canon``.
    """
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    crop = mask[box]
    best_k, best_key = 0, None
    for k in range(4):
        r = np.rot90(crop, k)
        key = (r.shape, np.packbits(r).tobytes())
        if best_key is None or key < best_key:
            best_k, best_key = k, key
    return box, best_k, np.ascontiguousarray(np.rot90(crop, best_k))


def skeletonize(mask) -> np.ndarray:
    """One-pixel-wide, topology-preserving skeleton of a binary mask.

    Sequential thinning favours some directions, so the mask is thinned in
    its canonical orientation and rotated back; the result is exactly
    equivariant under 90 degree rotations and translations of the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    box, k, canon = _canonical(mask)
    # one pixel of background keeps border pixels away from the thinning edge
    skel = _sk_skeletonize(np.pad(canon, 1))[1:-1, 1:-1]
    out = np.zeros_like(mask)
    out[box] = np.rot90(skel, -k)
    return out


def neighbour_count(skel: np.ndarray) -> np.ndarray:
    k = np.ones((3, 3), dtype=np.int32)
    k[1, 1] = 0
    s = skel.astype(np.int32)
    return np.where(skel, ndimage.convolve(s, k, mode="constant"), 0)


@dataclass
class VesselGraph:
    coords: np.ndarray                  # (N, 2) node positions (y, x)
    edges: np.ndarray                   # (E, 2) node indices, a < b
    weights: np.ndarray                 # (E,) Euclidean lengths
    descriptors: np.ndarray | None = None  # (N, 5) normalized
    raw_descriptors: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.edges):
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-edges are not allowed")
            if np.any(self.weights <= 0):
                raise ValueError("edge weights must be positive")

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> csr_matrix:
        n = self.n_nodes
        if not len(self.edges):
            return csr_matrix((n, n))
        a, b = self.edges[:, 0], self.edges[:, 1]
        return csr_matrix((np.concatenate([self.weights, self.weights]),
                           (np.concatenate([a, b]), np.concatenate([b, a]))), shape=(n, n))

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def neighbours(self) -> list[list[int]]:
        out = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            out[a].append(int(b))
            out[b].append(int(a))
        return out

    def n_components(self) -> int:
        if self.n_nodes == 0:
            return 0
        return int(connected_components(self.adjacency(), directed=False)[0])

    def with_coords(self, coords) -> "VesselGraph":
        """Same topology at new positions; edge weights recomputed."""
        coords = np.asarray(coords, dtype=np.float64)
        w = np.linalg.norm(coords[self.edges[:, 0]] - coords[self.edges[:, 1]], axis=1) \
            if len(self.edges) else np.zeros(0)
        return VesselGraph(coords, self.edges.copy(), w)

    def subgraph(self, keep) -> "VesselGraph":
        keep = np.asarray(sorted(set(int(k) for k in keep)), dtype=np.int64)
        remap = -np.ones(self.n_nodes, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        ok = (remap[self.edges[:, 0]] >= 0) & (remap[self.edges[:, 1]] >= 0) if len(self.edges) \
            else np.zeros(0, bool)
        return VesselGraph(self.coords[keep], remap[self.edges[ok]], self.weights[ok])

    # -- plain-text exchange: "id y x d1..d5" per node, "a b w" per edge --
    def to_text(self) -> str:
        desc = self.descriptors if self.descriptors is not None else np.zeros((self.n_nodes, 5))
        lines = [f"# nodes {self.n_nodes}"]
        for i, ((y, x), d) in enumerate(zip(self.coords, desc)):
            lines.append(" ".join([str(i), repr(float(y)), repr(float(x))] + [repr(float(v)) for v in d]))
        lines.append(f"# edges {self.n_edges}")
        for (a, b), w in zip(self.edges, self.weights):
            lines.append(f"{int(a)} {int(b)} {float(w)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VesselGraph":
        nodes, edges, weights = [], [], []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) == 3 + N_DESCRIPTORS:
                nodes.append([float(v) for v in parts[1:]])
            elif len(parts) == 3:
                edges.append((int(parts[0]), int(parts[1])))
                weights.append(float(parts[2]))
            else:
                raise ValueError(f"malformed graph line: {line!r}")
        arr = np.asarray(nodes, dtype=np.float64).reshape(-1, 2 + N_DESCRIPTORS)
        g = cls(arr[:, :2], edges, weights)
        g.descriptors = arr[:, 2:]
        return g

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VesselGraph":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# graph construction

def _key_nodes(skel: np.ndarray):
    """Cluster branch/end/isolated pixels; return (node coords, pixel -> node map)."""
    cnt = neighbour_count(skel)
    key = skel & ((cnt >= 3) | (cnt <= 1))
    lab, n = ndimage.label(key, structure=np.ones((3, 3)))
    node_of = -np.ones(skel.shape, dtype=np.int64)
    coords = []
    if n == 0:
        return np.zeros((0, 2)), node_of
    idx = ndimage.find_objects(lab)
    reps = []
    for k, sl in enumerate(idx, start=1):
        ys, xs = np.nonzero(lab[sl] == k)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        cy, cx = ys.mean(), xs.mean()
        j = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        reps.append((ys[j], xs[j], ys, xs))
    reps.sort(key=lambda r: (r[0], r[1]))
    for k, (y, x, ys, xs) in enumerate(reps):
        coords.append((y, x))
        node_of[ys, xs] = k
    return np.asarray(coords, dtype=np.float64), node_of


def _trace_arcs(skel: np.ndarray, node_of: np.ndarray):
    """Walk every skeleton arc between key nodes.

    Returns a list of ``(node_a, node_b, path)`` where ``path`` is the list of
    pixels from a's cluster boundary to b's, inclusive of the end pixels.
    Loops without key pixels get a synthetic node at their first pixel.
    """
    h, w = skel.shape
    visited = np.zeros_like(skel, dtype=bool)
    arcs = []
    extra = []

    def nbrs(y, x):
        for dy, dx in _NEIGH:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and skel[yy, xx]:
                yield yy, xx

    key_pixels = np.argwhere(node_of >= 0)
    for y, x in key_pixels:
        a = node_of[y, x]
        for ny_, nx_ in nbrs(y, x):
            if node_of[ny_, nx_] >= 0 or visited[ny_, nx_]:
                continue
            path = [(y, x), (ny_, nx_)]
            visited[ny_, nx_] = True
            prev, cur = (y, x), (ny_, nx_)
            end = None
            while True:
                nxt = None
                cands = [p for p in nbrs(*cur) if p != prev and p not in path[-3:]]
                keys = [p for p in cands if node_of[p] >= 0]
                if keys and not (len(path) == 2 and node_of[keys[0]] == a and len(cands) > len(keys)):
                    # reached a key cluster (prefer the closest 4-neighbour)
                    keys.sort(key=lambda p: abs(p[0] - cur[0]) + abs(p[1] - cur[1]))
                    end = keys[0]
                    path.append(end)
                    break
                free = [p for p in cands if not visited[p]]
                if not free:
                    break
                free.sort(key=lambda p: abs(p[0] - cur[0]) + abs(p[1] - cur[1]))
                nxt = free[0]
                visited[nxt] = True
                path.append(nxt)
                prev, cur = cur, nxt
            if end is not None:
                arcs.append((a, int(node_of[end]), path))
            else:
                arcs.append((a, -1, path))
        # adjacent key clusters touching each other directly
        for ny_, nx_ in nbrs(y, x):
            b = node_of[ny_, nx_]
            if b >= 0 and b != a:
                arcs.append((a, int(b), [(y, x), (ny_, nx_)]))
    # closed loops without any key pixel
    rest = skel & ~visited & (node_of < 0)
    while rest.any():
        y, x = map(int, np.argwhere(rest)[0])
        extra.append((y, x))
        loop = [(y, x)]
        visited[y, x] = True
        cur, prev = (y, x), None
        while True:
            free = [p for p in nbrs(*cur) if not visited[p]]
            if not free:
                break
            free.sort(key=lambda p: abs(p[0] - cur[0]) + abs(p[1] - cur[1]))
            prev, cur = cur, free[0]
            visited[cur] = True
            loop.append(cur)
        loop.append((y, x))
        arcs.append((-2 - (len(extra) - 1), -2 - (len(extra) - 1), loop))
        rest = skel & ~visited & (node_of < 0)
    return arcs, extra


def build_graph(skeleton, d: float = 46.0, merge_radius: float = 10.0) -> VesselGraph:
    """Graph from a thin skeleton (see module docstring for the node rules).

    Tracing runs on the skeleton's canonical orientation, so the graph of a
    rotated or translated skeleton is the same graph at mapped positions.
    """
    skel = np.asarray(skeleton, dtype=bool)
    if not d > merge_radius > 0:
        raise ValueError("need d > merge_radius > 0")
    if not skel.any():
        return VesselGraph(np.zeros((0, 2)), np.zeros((0, 2), int), np.zeros(0))
    box, k, canon = _canonical(skel)
    g = _build_graph(canon, d, merge_radius)
    # canonical pixel -> original pixel through rotated index grids
    h, w = skel[box].shape
    rr, cc = np.mgrid[0:h, 0:w]
    rr, cc = np.rot90(rr, k), np.rot90(cc, k)
    iy = g.coords[:, 0].astype(np.int64)
    ix = g.coords[:, 1].astype(np.int64)
    coords = np.column_stack([rr[iy, ix] + box[0].start, cc[iy, ix] + box[1].start]).astype(np.float64)
    return VesselGraph(coords, g.edges, g.weights)


def _build_graph(skel: np.ndarray, d: float, merge_radius: float) -> VesselGraph:
    key_coords, node_of = _key_nodes(skel)
    arcs, extra = _trace_arcs(skel, node_of)
    coords = [tuple(c) for c in key_coords] + [tuple(map(float, e)) for e in extra]
    n_key = len(key_coords)

    def resolve(k):
        return k if k >= 0 else n_key + (-k - 2)

    edge_w: dict[tuple[int, int], float] = {}

    def link(a, b):
        if a == b:
            return
        key = (min(a, b), max(a, b))
        wgt = float(np.hypot(coords[a][0] - coords[b][0], coords[a][1] - coords[b][1]))
        if wgt > 0 and key not in edge_w:
            edge_w[key] = wgt

    tree = cKDTree(np.asarray(coords)) if coords else None
    placed = []  # inserted nodes, checked for merging as they appear
    for a, b, path in arcs:
        a = resolve(a)
        pts = np.asarray(path, dtype=np.float64)
        seg = np.hypot(*np.diff(pts, axis=0).T)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        total = arc[-1]
        prev = a
        s = d
        while s < total:
            i = int(np.searchsorted(arc, s))
            p = tuple(pts[min(i, len(pts) - 1)])
            # merge into an existing node within merge_radius
            near = None
            dist, j = tree.query(p)
            if dist <= merge_radius:
                near = int(j)
            for k in placed:
                if np.hypot(coords[k][0] - p[0], coords[k][1] - p[1]) <= merge_radius:
                    near = k
                    break
            if near is None:
                coords.append(p)
                near = len(coords) - 1
                placed.append(near)
            link(prev, near)
            prev = near
            s += d
        if b == -1:
            # dangling arc (should not happen on clean skeletons): end at last pixel
            coords.append(tuple(pts[-1]))
            b = len(coords) - 1
        link(prev, resolve(b))
    keys = sorted(edge_w)
    return VesselGraph(np.asarray(coords, dtype=np.float64),
                       np.asarray(keys, dtype=np.int64).reshape(-1, 2),
                       np.asarray([edge_w[k] for k in keys]))


# --------------------------------------------------------------------------
# descriptors

def _minmax_columns(m: np.ndarray) -> np.ndarray:
    lo = m.min(axis=0)
    span = m.max(axis=0) - lo
    out = np.zeros_like(m)
    ok = span > 0
    out[:, ok] = (m[:, ok] - lo[ok]) / span[ok]
    return out


def eigenvector_centrality(adj: csr_matrix, labels: np.ndarray, gap_tol: float = 1e-12):
    """Per-component principal eigenvector of the weighted adjacency.

    Components are small (tens to hundreds of nodes), so a dense symmetric
    eigensolver is used; plain power iteration stalls on vessel trees, whose
    spectrum is symmetric about zero.  Returns ``(values, ok)``; a component
    whose leading eigenvalue is not separated from the next falls back to its
    normalized weighted degree and sets ``ok`` to False.
    """
    n = adj.shape[0]
    out = np.zeros(n)
    ok = True
    for comp in np.unique(labels):
        idx = np.flatnonzero(labels == comp)
        if len(idx) < 2:
            continue
        a = adj[idx][:, idx].toarray()
        vals, vecs = np.linalg.eigh(a)
        x = vecs[:, -1]
        if vals[-1] - vals[-2] <= gap_tol * max(abs(vals[-1]), 1.0):
            ok = False
            strength = a.sum(axis=1)
            x = strength / np.linalg.norm(strength)
        out[idx] = np.abs(x) * np.sqrt(len(idx) / n)
    return out, ok


def raw_descriptors(g: VesselGraph) -> tuple[np.ndarray, bool]:
    n = g.n_nodes
    if n == 0:
        raise ValueError("graph has no nodes")
    adj = g.adjacency()
    deg = g.degree().astype(np.float64)
    _, labels = connected_components(adj, directed=False)
    dist = dijkstra(adj, directed=False)
    closeness = np.zeros(n)
    for i in range(n):
        reach = np.isfinite(dist[i])
        total = dist[i, reach].sum()
        n_cc = int(reach.sum())
        closeness[i] = (n_cc - 1) / total if total > 0 else 0.0
    gx = nx.Graph()
    gx.add_nodes_from(range(n))
    gx.add_weighted_edges_from((int(a), int(b), float(w)) for (a, b), w in zip(g.edges, g.weights))
    bc = nx.betweenness_centrality(gx, weight="weight", normalized=False)
    betweenness = np.array([bc[i] for i in range(n)])
    eig, converged = eigenvector_centrality(adj, labels)
    strength = np.asarray(adj.sum(axis=1)).ravel()
    return np.column_stack([deg, closeness, betweenness, eig, strength]), converged


def node_descriptors(g: VesselGraph) -> np.ndarray:
    """Compute, store and return the (N, 5) column-normalized descriptors."""
    raw, converged = raw_descriptors(g)
    g.raw_descriptors = raw
    g.descriptors = _minmax_columns(raw)
    if not converged:
        g.flags["eigenvector_fallback"] = True
        log.warning("leading eigenvalue not separated; eigenvector centrality uses strength fallback")
    return g.descriptors


# --------------------------------------------------------------------------
# pattern classification and weights

@dataclass(frozen=True)
class PatternConfig:
    low_degree: int = 1
    high_degree: int = 3
    gate: float = 6.0
    uncorrelated_fraction: float = 0.3
    large_fraction: float = 0.2
    max_high_missing: int = 2


@dataclass(frozen=True)
class GraphPattern:
    category: int
    stats: dict


def _procrustes(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity (scale, rotation, translation) taking src onto dst."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    u, sv, vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag([1.0, d]) @ vt
    var = (a ** 2).sum()
    scale = (sv[0] + d * sv[1]) / var if var > 0 else 1.0
    return scale * rot, md - scale * rot @ ms


def _vote_offset(a: np.ndarray, b: np.ndarray, cell: float) -> np.ndarray:
    """Translation taking b onto a, by voting over all pairwise offsets."""
    off = (a[:, None, :] - b[None, :, :]).reshape(-1, 2)
    key = np.floor(off / cell).astype(np.int64)
    lo = key.min(axis=0)
    key -= lo
    shape = key.max(axis=0) + 1
    hist = np.zeros(shape)
    np.add.at(hist, (key[:, 0], key[:, 1]), 1.0)
    votes = ndimage.uniform_filter(hist, size=3, mode="constant")
    peak = np.array(np.unravel_index(np.argmax(votes), shape))
    near = np.all(np.abs(key - peak) <= 1, axis=1)
    return off[near].mean(axis=0)


def _coarse_align(a: np.ndarray, b: np.ndarray, iterations: int = 10,
                  cell: float = 5.0) -> np.ndarray:
    """Positions of b brought onto a: offset voting, then trimmed similarity ICP."""
    if len(a) < 3 or len(b) < 3:
        return b + (a.mean(axis=0) - b.mean(axis=0))
    bb = b + _vote_offset(a, b, cell)
    tree = cKDTree(a)
    for _ in range(iterations):
        dist, j = tree.query(bb)
        keep = dist <= np.median(dist) * 1.5 + 1e-9
        if keep.sum() < 3:
            break
        m, t = _procrustes(b[keep], a[j[keep]])
        bb = b @ m.T + t
    return bb


def _unmatched(a: np.ndarray, b: np.ndarray, gate: float):
    """Masks of nodes in a / b with no counterpart within ``gate``."""
    bb = _coarse_align(a, b)
    da = cKDTree(bb).query(a)[0]
    db = cKDTree(a).query(bb)[0]
    return da > gate, db > gate


def pattern_stats(gr: VesselGraph, gm: VesselGraph, cfg: PatternConfig = PatternConfig()) -> dict:
    deg_r, deg_m = gr.degree(), gm.degree()
    um_r, um_m = _unmatched(gr.coords, gm.coords, cfg.gate)
    missing_deg = np.concatenate([deg_r[um_r], deg_m[um_m]])
    low = int(np.sum(missing_deg <= cfg.low_degree))
    high = int(np.sum(missing_deg >= cfg.high_degree))
    return {
        "d_low_degree": low,
        "d_high_degree": high,
        "d_mid_degree": int(len(missing_deg) - low - high),
        "missing": int(len(missing_deg)),
        "count_low_r": int(np.sum(deg_r <= cfg.low_degree)),
        "count_low_m": int(np.sum(deg_m <= cfg.low_degree)),
        "count_high_r": int(np.sum(deg_r >= cfg.high_degree)),
        "count_high_m": int(np.sum(deg_m >= cfg.high_degree)),
        "d_nodes": abs(gr.n_nodes - gm.n_nodes),
        "d_edges": abs(gr.n_edges - gm.n_edges),
        "d_components": abs(gr.n_components() - gm.n_components()),
        "uncorrelated": float(min(um_r.mean(), um_m.mean())),
        "unmatched": float(max(um_r.mean(), um_m.mean())),
        "n_ref": gr.n_nodes,
        "n_mov": gm.n_nodes,
    }


def classify_pattern(gr: VesselGraph, gm: VesselGraph, cfg: PatternConfig = PatternConfig()) -> GraphPattern:
    """Assign one of six difference patterns (rules checked in order).

    1. a few missing nodes, mostly low-degree (endpoints)
    2. a few (<= 2) high-degree nodes differ, topology otherwise intact
    3. only high-degree nodes are missing and components/edges change
    4. many nodes on both sides have no counterpart (uncorrelated)
    5. node, edge and unmatched counts all differ a lot, components stay close
    6. anything else (equal weights)
    """
    s = pattern_stats(gr, gm, cfg)
    n = max(s["n_ref"], s["n_mov"], 1)
    low, high, mid, missing = s["d_low_degree"], s["d_high_degree"], s["d_mid_degree"], s["missing"]
    if missing == 0:
        cat = 6
    elif s["uncorrelated"] <= cfg.uncorrelated_fraction and low > 0 and low >= high + mid \
            and s["d_components"] == 0 and missing <= cfg.large_fraction * n:
        cat = 1
    elif 0 < high <= cfg.max_high_missing and high >= low + mid and s["d_components"] == 0:
        cat = 2
    elif s["d_components"] > 0 and s["d_edges"] > 0 and high > 0 and high == missing:
        cat = 3
    elif s["uncorrelated"] > cfg.uncorrelated_fraction:
        cat = 4
    elif (s["d_nodes"] / n > cfg.large_fraction and s["d_edges"] / n > cfg.large_fraction
          and s["unmatched"] > cfg.large_fraction and s["d_components"] <= 1):
        cat = 5
    else:
        cat = 6
    return GraphPattern(cat, s)


class WeightTable:
    """Six rows of five non-negative descriptor weights, each row summing to 1."""

    def __init__(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (6, N_DESCRIPTORS):
            raise ValueError("weight table must be 6 x 5")
        if np.any(rows < 0):
            raise ValueError("weights must be non-negative")
        sums = rows.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise ValueError("weight rows must not be all zero")
        rows = rows / sums
        rows[5] = 1.0 / N_DESCRIPTORS
        self.rows = rows

    def row(self, category: int) -> np.ndarray:
        return self.rows[category - 1]

    @classmethod
    def uniform(cls) -> "WeightTable":
        return cls(np.full((6, N_DESCRIPTORS), 1.0 / N_DESCRIPTORS))

    @classmethod
    def load(cls, path=None) -> "WeightTable":
        if path is None:
            text = resources.files("octreg").joinpath("data/weights.txt").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        rows = [[float(v) for v in line.split()] for line in text.splitlines()
                if line.strip() and not line.lstrip().startswith("#")]
        return cls(rows)

    def to_text(self, header: str = "") -> str:
        lines = [f"# {line}" for line in header.splitlines()]
        lines.append("# " + " ".join(DESCRIPTOR_NAMES))
        lines += [" ".join(f"{v:.10g}" for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# dissimilarities

def normalize01(m: np.ndarray) -> np.ndarray:
    """Whole-matrix min-max to [0, 1]; constant matrices map to zeros."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return m.copy()
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def descriptor_sq_diffs(desc_r: np.ndarray, desc_m: np.ndarray) -> np.ndarray:
    """(5, N_R, N_M) squared differences, one plane per descriptor."""
    return (desc_r.T[:, :, None] - desc_m.T[:, None, :]) ** 2


def graph_dissimilarity(gr: VesselGraph, gm: VesselGraph, weights, normalize: bool = True) -> np.ndarray:
    """``D_G[i, j] = sum_m w_m (desc_m(i) - desc_m(j))^2``, min-max normalized."""
    for g in (gr, gm):
        if g.descriptors is None:
            node_descriptors(g)
    w = np.asarray(weights, dtype=np.float64).reshape(N_DESCRIPTORS)
    d = np.tensordot(w, descriptor_sq_diffs(gr.descriptors, gm.descriptors), axes=1)
    return normalize01(d) if normalize else d


def _padded_neighbours(g: VesselGraph):
    nb = g.neighbours()
    k = max((len(v) for v in nb), default=0)
    k = max(k, 1)
    idx = np.zeros((g.n_nodes, k), dtype=np.int64)
    ok = np.zeros((g.n_nodes, k), dtype=bool)
    for i, v in enumerate(nb):
        idx[i, :len(v)] = v
        ok[i, :len(v)] = True
    return idx, ok


def neighbour_dissimilarity(gr: VesselGraph, gm: VesselGraph, dmat: np.ndarray,
                            normalize: bool = True) -> np.ndarray:
    """Mean-of-min neighbourhood aggregation of a node dissimilarity matrix.

    ``S[i, j]`` averages, over neighbours p of i, the best ``dmat[p, q]`` among
    neighbours q of j, and symmetrizes with the role-swapped value.  Pairs
    where either node has no neighbours get the neutral 0.5.
    """
    dmat = np.asarray(dmat, dtype=np.float64)
    n_r, n_m = dmat.shape
    if n_r == 0 or n_m == 0:
        return np.zeros((n_r, n_m))
    ir, okr = _padded_neighbours(gr)
    im, okm = _padded_neighbours(gm)
    # (n_r, kr, n_m, km)
    sub = dmat[ir[:, :, None, None], im[None, None, :, :]]
    mask = okr[:, :, None, None] & okm[None, None, :, :]
    big = np.where(mask, sub, np.inf)
    best_q = big.min(axis=3)                       # (n_r, kr, n_m)
    best_p = big.min(axis=1)                       # (n_r, n_m, km)
    cnt_r = okr.sum(axis=1)
    cnt_m = okm.sum(axis=1)
    with np.errstate(invalid="ignore"):
        a = np.where(okr[:, :, None], best_q, 0.0).sum(axis=1) / np.maximum(cnt_r, 1)[:, None]
        b = np.where(okm[None, :, :], best_p, 0.0).sum(axis=2) / np.maximum(cnt_m, 1)[None, :]
    s = 0.5 * (a + b)
    empty = (cnt_r == 0)[:, None] | (cnt_m == 0)[None, :]
    s = np.where(empty, NEUTRAL, s)
    return normalize01(s) if normalize else s
