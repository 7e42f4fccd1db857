"""End-to-end registration of one OCT volume pair.

Stages: preprocessing (prefilter, projection, vessel mask, ILM, HR apex),
x-y registration (vessel graphs, cube descriptors, transport matching, model
selection by gain coefficient) and z registration.  Each stage is a plain
function so that the CLI subcommands can run them one at a time and produce
the same results as :func:`register`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import cube_descriptors as cd
from . import segmentation as seg
from . import vessel_graph as vg
from .config import PipelineConfig
from .ot_matching import TransportPlan, add_ghosts, assemble_cost, solve_transport
from .transform import (KINDS, RegistrationInfeasible, TransformModel, refine_on_centrelines,
                        sample_grid, select_model, warp_mask, warp_volume_xy)
from .volume_io import Volume, project_volume
from .z_registration import ZAlignment, apply_z_alignment, coarse_z_shift, refine_z_per_slice

log = logging.getLogger(__name__)


@dataclass
class VesselStage:
    volume: Volume                # prefiltered
    projection: np.ndarray
    mask: np.ndarray
    skeleton: np.ndarray
    graph: vg.VesselGraph
    ilm: seg.IlmSurface
    anatomy: seg.AnatomyFeatures | None


@dataclass
class MatchStage:
    pattern: vg.GraphPattern
    cost: np.ndarray
    plan: TransportPlan
    src_xy: np.ndarray            # reference node positions (x, y)
    dst_xy: np.ndarray            # moving node positions (x, y)


@dataclass
class RunReport:
    success: bool = False
    gc: float = 0.0
    selected_kind: str = "none"
    coefficients: tuple = ()
    n_correspondences: int = 0
    n_nodes_ref: int = 0
    n_nodes_mov: int = 0
    pattern: int = 0
    overlap_before: int = 0
    overlap_after: int = 0
    gc_per_model: dict = field(default_factory=dict)
    coarse_z: int = 0
    z_shifts: tuple = ()
    error: str = ""
    timings: dict = field(default_factory=dict)

    def as_items(self, include_timings: bool = False) -> dict:
        items = {
            "success": self.success,
            "gc": self.gc,
            "selected_kind": self.selected_kind,
            "coefficients": " ".join(repr(float(c)) for c in self.coefficients),
            "n_correspondences": self.n_correspondences,
            "n_nodes_ref": self.n_nodes_ref,
            "n_nodes_mov": self.n_nodes_mov,
            "pattern": self.pattern,
            "overlap_before": self.overlap_before,
            "overlap_after": self.overlap_after,
        }
        for kind in KINDS:
            items[f"gc_{kind}"] = self.gc_per_model.get(kind, "skipped")
        items["coarse_z"] = self.coarse_z
        items["z_shifts"] = " ".join(str(int(s)) for s in self.z_shifts)
        items["error"] = self.error or "none"
        if include_timings:
            for k, v in self.timings.items():
                items[f"time_{k}"] = v
        return items

    def to_text(self, include_timings: bool = False) -> str:
        lines = []
        for k, v in self.as_items(include_timings).items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append(self.summary_line())
        return "\n".join(lines) + "\n"

    def summary_line(self) -> str:
        return (f"SUMMARY success={int(self.success)} gc={self.gc!r} kind={self.selected_kind} "
                f"pairs={self.n_correspondences} coarse_z={self.coarse_z}")


@dataclass
class RegistrationResult:
    report: RunReport
    model: TransformModel | None = None
    warped: Volume | None = None
    aligned: Volume | None = None
    ref: VesselStage | None = None
    mov: VesselStage | None = None
    match: MatchStage | None = None
    z: ZAlignment | None = None


# --------------------------------------------------------------------------
# stages

def stage_project(vol: Volume, cfg: PipelineConfig):
    pre = seg.prefilter(vol, cfg.prefilter, cfg.prefilter_size)
    return pre, project_volume(pre, reduce=cfg.projection)


def stage_vessels(pre: Volume, projection: np.ndarray, cfg: PipelineConfig) -> VesselStage:
    mask = seg.segment_vessels(projection, cfg.wavelet_levels, cfg.dark_vessels, cfg.min_vessel_area)
    skel = vg.skeletonize(mask)
    graph = vg.build_graph(skel, cfg.d, cfg.merge_radius)
    if graph.n_nodes:
        vg.node_descriptors(graph)
    ilm = seg.segment_ilm(pre, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)
    try:
        anatomy = seg.locate_hr_apex(ilm, cfg.anterior_is_low_z)
    except seg.SegmentationError:
        anatomy = None
    return VesselStage(pre, projection, mask, skel, graph, ilm, anatomy)


def load_weights(cfg: PipelineConfig) -> vg.WeightTable:
    if not cfg.adaptive_weights:
        return vg.WeightTable.uniform()
    return vg.WeightTable.load(None if cfg.weight_table == "default" else cfg.weight_table)


def pattern_config(cfg: PipelineConfig) -> vg.PatternConfig:
    return vg.PatternConfig(gate=cfg.pattern_gate, uncorrelated_fraction=cfg.uncorrelated_fraction)


def graph_cost(gr: vg.VesselGraph, gm: vg.VesselGraph, weights: vg.WeightTable,
               pattern_cfg: vg.PatternConfig):
    pattern = vg.classify_pattern(gr, gm, pattern_cfg)
    d_g = vg.graph_dissimilarity(gr, gm, weights.row(pattern.category))
    s_g = vg.neighbour_dissimilarity(gr, gm, d_g)
    return pattern, d_g, s_g


def stage_match(r: VesselStage, m: VesselStage, cfg: PipelineConfig,
                weights: vg.WeightTable | None = None) -> MatchStage:
    gr, gm = r.graph, m.graph
    if gr.n_nodes < 2 or gm.n_nodes < 2:
        raise RegistrationInfeasible("vessel graph too small to match")
    weights = load_weights(cfg) if weights is None else weights
    pcfg = pattern_config(cfg)
    terms = []
    pattern, d_g, s_g = graph_cost(gr, gm, weights, pcfg)
    if cfg.use_graph_descriptors:
        terms += [d_g, s_g]
    if cfg.use_volume_descriptors:
        if r.anatomy is None or m.anatomy is None:
            raise RegistrationInfeasible("HR apex missing; cube descriptors unavailable")
        bank = cd.GaborBank(cfg.gabor_orientations, cfg.gabor_wavelengths, cfg.gabor_sigma_ratio,
                            cfg.gabor_aspect)
        fr = cd.extract_features(r.volume, gr, r.ilm, r.anatomy.hr_apex, cfg.cube_side, bank,
                                 cfg.ilm_search_radius)
        fm = cd.extract_features(m.volume, gm, m.ilm, m.anatomy.hr_apex, cfg.cube_side, bank,
                                 cfg.ilm_search_radius)
        d_v = cd.volume_dissimilarity(fr, fm)
        s_v = cd.neighbour_dissimilarity_volume(gr, gm, d_v)
        terms += [d_v, s_v]
    if not terms:
        raise ValueError("no descriptor family enabled")
    cost = assemble_cost(*terms) if len(terms) == 4 else np.sum(terms, axis=0) / len(terms)
    plan = solve_transport(add_ghosts(cost, cfg.omega, cfg.ghost_percentile))
    idx = np.asarray(plan.correspondences, dtype=np.int64).reshape(-1, 2)
    src = gr.coords[idx[:, 0]][:, ::-1]
    dst = gm.coords[idx[:, 1]][:, ::-1]
    return MatchStage(pattern, cost, plan, src, dst)


def stage_transform(mask_r, mask_m, src_xy, dst_xy, cfg: PipelineConfig, skel_r=None, skel_m=None):
    if len(src_xy) < 2:
        raise RegistrationInfeasible(f"only {len(src_xy)} correspondence(s) retained")
    refine = None
    if cfg.refine and skel_r is not None and skel_m is not None:
        pr = np.argwhere(skel_r)[:, ::-1].astype(np.float64)
        pm = np.argwhere(skel_m)[:, ::-1].astype(np.float64)

        def refine(model):
            return refine_on_centrelines(model, pr, pm, cfg.refine_iterations, cfg.refine_max_dist)

    return select_model(mask_r, mask_m, src_xy, dst_xy, robust=cfg.ransac,
                        ransac_threshold=cfg.ransac_threshold,
                        ransac_iterations=cfg.ransac_iterations, seed=cfg.seed,
                        tie_tolerance=cfg.gc_tie_tolerance, refine=refine)


def warp_ilm(ilm: seg.IlmSurface, model: TransformModel) -> seg.IlmSurface:
    """Carry an ILM surface through the x-y warp; columns pulled from outside become invalid."""
    rows, cols = sample_grid(model, ilm.depth.shape)
    inside = rows >= 0
    depth = np.zeros_like(ilm.depth)
    valid = np.zeros_like(ilm.valid)
    depth[inside] = ilm.depth[rows[inside], cols[inside]]
    valid[inside] = ilm.valid[rows[inside], cols[inside]]
    return seg.IlmSurface(depth, valid)


def stage_z(r: VesselStage, m: VesselStage, model: TransformModel, warped: Volume,
            cfg: PipelineConfig):
    ilm_w = warp_ilm(m.ilm, model)
    try:
        feat_w = seg.locate_hr_apex(ilm_w, cfg.anterior_is_low_z)
    except seg.SegmentationError:
        feat_w = None
    coarse, flagged = coarse_z_shift(r.anatomy, feat_w, r.ilm, ilm_w)
    za = refine_z_per_slice(r.ilm, ilm_w, coarse, cfg.z_bound, cfg.z_max_iter)
    if flagged:
        za.flags["apex_fallback"] = True
    return za, apply_z_alignment(warped, za)


# --------------------------------------------------------------------------

def is_success(gc: float, n_pairs: int, masks_identical: bool, cfg: PipelineConfig) -> bool:
    if n_pairs < cfg.min_correspondences:
        return False
    return gc > 1.0 or (masks_identical and gc == 1.0)


def register(ref: Volume, mov: Volume, cfg: PipelineConfig = PipelineConfig(),
             weights: vg.WeightTable | None = None, pairs_override=None,
             ref_stage: VesselStage | None = None,
             mov_stage: VesselStage | None = None) -> RegistrationResult:
    """Run every stage; failures produce ``success=False`` with GC 0.

    ``pairs_override`` (a :class:`TransportPlan` or an ``(i, j)`` list) replaces the transport matching,
    and ``ref_stage``/``mov_stage`` replace preprocessing, so outputs of the
    stage subcommands can be chained into a full run.
    """
    if ref.dims[1:] != mov.dims[1:]:
        raise ValueError(f"x-y dims differ: {ref.dims} vs {mov.dims}")
    report = RunReport()
    result = RegistrationResult(report)
    t0 = time.perf_counter()
    r = ref_stage if ref_stage is not None else stage_vessels(*stage_project(ref, cfg), cfg)
    m = mov_stage if mov_stage is not None else stage_vessels(*stage_project(mov, cfg), cfg)
    result.ref, result.mov = r, m
    report.n_nodes_ref, report.n_nodes_mov = r.graph.n_nodes, m.graph.n_nodes
    report.overlap_before = int(np.count_nonzero(r.mask & m.mask))
    t1 = time.perf_counter()
    report.timings["preprocess"] = t1 - t0
    try:
        if pairs_override is None:
            ms = stage_match(r, m, cfg, weights)
        else:
            plan = pairs_override if isinstance(pairs_override, TransportPlan) else \
                TransportPlan(np.zeros((0, 0), dtype=np.int64),
                              tuple(sorted(tuple(map(int, p)) for p in pairs_override)), 0.0)
            idx = np.asarray(plan.correspondences, dtype=np.int64).reshape(-1, 2)
            if len(idx) and (idx[:, 0].max() >= r.graph.n_nodes or idx[:, 1].max() >= m.graph.n_nodes):
                raise ValueError("correspondence index outside the vessel graphs")
            ms = MatchStage(vg.classify_pattern(r.graph, m.graph, pattern_config(cfg)), np.zeros(0),
                            plan, r.graph.coords[idx[:, 0]][:, ::-1], m.graph.coords[idx[:, 1]][:, ::-1])
        result.match = ms
        report.pattern = ms.pattern.category
        report.n_correspondences = len(ms.src_xy)
        model, gcr = stage_transform(r.mask, m.mask, ms.src_xy, ms.dst_xy, cfg, r.skeleton, m.skeleton)
    except RegistrationInfeasible as exc:
        report.error = str(exc).replace("\n", " ")
        report.timings["xy"] = time.perf_counter() - t1
        log.info("registration infeasible: %s", exc)
        return result
    result.model = model
    report.gc_per_model = dict(gcr.gc)
    report.selected_kind = model.kind
    report.coefficients = model.coefficients
    gc = gcr.gc[model.kind]
    report.overlap_after = int(np.count_nonzero(r.mask & warp_mask(m.mask, model)))
    warped = warp_volume_xy(mov, model)
    result.warped = warped
    t2 = time.perf_counter()
    report.timings["xy"] = t2 - t1
    za, aligned = stage_z(r, m, model, warped, cfg)
    result.z, result.aligned = za, aligned
    report.coarse_z = za.coarse_shift
    report.z_shifts = tuple(int(s) for s in za.per_slice_shift)
    report.timings["z"] = time.perf_counter() - t2
    identical = bool(np.array_equal(r.mask, m.mask))
    report.success = is_success(gc, report.n_correspondences, identical, cfg)
    report.gc = float(gc) if report.success else 0.0
    if not report.success:
        report.error = "gain coefficient did not improve" if report.n_correspondences >= \
            cfg.min_correspondences else "too few correspondences"
    return result
