"""Command line interface: ``octreg <subcommand> ...``.

Subcommands
-----------
register   full pipeline on one pair; writes the registered volume, report,
           transform, z shifts and visual checks
eval       batch registration over a manifest (or a seeded synthetic batch)
synth      write a seeded synthetic pair and its ground truth
project    prefilter + projection image of one volume
vessels    vessel mask, skeleton, graph, ILM and HR apex of one volume
match      node correspondences between two ``vessels`` outputs

Exit status: 0 on success, 1 when registration ran but was not successful,
2 on bad input.  The output directory defaults to ``$OCTREG_OUTPUT_DIR`` or
``./octreg_out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import segmentation as seg
from . import vessel_graph as vg
from .config import PipelineConfig
from .ot_matching import TransportPlan
from .pipeline import (RunReport, VesselStage, register, stage_match, stage_project,
                       stage_vessels)
from .synthetic import FAMILIES, PhantomConfig, generate_synthetic_pair, truth_model, with_kind
from .transform import corner_error, warp_mask
from .volume_io import (Volume, VolumeFormatError, load_volume, project_volume, read_kv,
                        save_mask, save_overlay, save_projection, save_volume, write_kv)

log = logging.getLogger("octreg")

OUTPUT_ENV = "OCTREG_OUTPUT_DIR"


class InputError(Exception):
    """Bad command-line input; reported with exit status 2."""


# --------------------------------------------------------------------------
# config flags

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline settings (override --config)")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest="cfg_" + f.name, default=None, metavar="V",
                       help=f"default {PipelineConfig.__dataclass_fields__[f.name].default!r}")
    p.add_argument("--config", help="key = value settings file")


def config_from_args(args) -> PipelineConfig:
    items = {}
    if getattr(args, "config", None):
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = PipelineConfig()
    for f in fields(PipelineConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            items[f.name] = v
    if not items:
        return cfg
    merged = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    merged.update(items)
    return PipelineConfig.from_mapping(merged)


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or "octreg_out")


def _load(path) -> Volume:
    try:
        return load_volume(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read volume {path}: {exc}") from exc


# --------------------------------------------------------------------------
# stage artifacts

def write_projection(out: Path, projection: np.ndarray) -> None:
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "projection.npy", projection)
    save_projection(projection, out / "projection.pgm")


def write_vessels(out: Path, st: VesselStage) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_mask(st.mask, out / "vessel_mask.pgm")
    save_mask(st.skeleton, out / "skeleton.pgm")
    np.save(out / "vessel_mask.npy", st.mask)
    np.save(out / "skeleton.npy", st.skeleton)
    st.graph.save(out / "graph.txt")
    np.save(out / "ilm_depth.npy", st.ilm.depth)
    np.save(out / "ilm_valid.npy", st.ilm.valid)
    items = {"ilm_coverage": st.ilm.coverage}
    if st.anatomy is not None:
        items["hr_apex"] = list(st.anatomy.hr_apex)
        items["onh_centroid"] = list(st.anatomy.onh_centroid)
    write_kv(out / "anatomy.txt", items)


def read_vessels(out: Path, vol: Volume, cfg: PipelineConfig) -> VesselStage:
    """Rebuild a :class:`VesselStage` from ``vessels`` output plus its volume."""
    out = Path(out)
    try:
        projection = np.load(out / "projection.npy") if (out / "projection.npy").exists() else None
        mask = np.load(out / "vessel_mask.npy")
        skel = np.load(out / "skeleton.npy")
        graph = vg.VesselGraph.load(out / "graph.txt")
        ilm = seg.IlmSurface(np.load(out / "ilm_depth.npy"), np.load(out / "ilm_valid.npy"))
        kv = read_kv(out / "anatomy.txt")
    except (OSError, ValueError) as exc:
        raise InputError(f"incomplete vessels output in {out}: {exc}") from exc
    anatomy = None
    if "hr_apex" in kv:
        apex = tuple(int(v) for v in kv["hr_apex"].split())
        anatomy = seg.AnatomyFeatures(apex, apex[1:])
    pre = seg.prefilter(vol, cfg.prefilter, cfg.prefilter_size)
    return VesselStage(pre, projection, mask, skel, graph, ilm, anatomy)


def write_registration(out: Path, res, ref: Volume, cfg: PipelineConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rep = res.report
    (out / "report.txt").write_text(rep.to_text(), encoding="utf-8")
    write_kv(out / "timings.txt", {k: v for k, v in rep.timings.items()})
    if res.match is not None:
        (out / "matches.txt").write_text(res.match.plan.to_text(), encoding="utf-8")
    if res.model is None:
        return
    (out / "transform.txt").write_text(res.model.to_text(), encoding="utf-8")
    if res.z is not None:
        res.z.save(out / "z_shifts.txt")
    final = res.aligned if res.aligned is not None else res.warped
    save_volume(final, out / "registered.raw")
    p_ref = project_volume(ref)
    p_reg = project_volume(res.warped)
    save_overlay(p_ref, p_reg, out / "checkerboard.ppm", "checkerboard", cfg.checkerboard_tile)
    save_overlay(res.ref.mask, warp_mask(res.mov.mask, res.model), out / "vessel_overlay.ppm")


# --------------------------------------------------------------------------
# subcommands

def cmd_register(args) -> int:
    cfg = config_from_args(args)
    ref = _load(args.reference)
    mov = _load(args.moving)
    pairs = None
    if args.matches:
        try:
            pairs = TransportPlan.from_text(Path(args.matches).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read matches {args.matches}: {exc}") from exc
    if ref.dims[1:] != mov.dims[1:]:
        raise InputError(f"x-y dims differ: {ref.dims} vs {mov.dims}")
    stages = [None, None]
    for k, (d, vol) in enumerate(((args.ref_vessels, ref), (args.mov_vessels, mov))):
        if d:
            stages[k] = read_vessels(Path(d), vol, cfg)
    res = register(ref, mov, cfg, pairs_override=pairs, ref_stage=stages[0], mov_stage=stages[1])
    out = _out_dir(args)
    write_registration(out, res, ref, cfg)
    print(res.report.summary_line())
    return 0 if res.report.success else 1


def cmd_project(args) -> int:
    cfg = config_from_args(args)
    vol = _load(args.volume)
    _, proj = stage_project(vol, cfg)
    write_projection(_out_dir(args), proj)
    return 0


def cmd_vessels(args) -> int:
    cfg = config_from_args(args)
    vol = _load(args.volume)
    out = _out_dir(args)
    pre, proj = stage_project(vol, cfg)
    if args.projection_file:
        try:
            proj = np.load(args.projection_file)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read projection {args.projection_file}: {exc}") from exc
        if proj.shape != vol.dims[1:]:
            raise InputError("projection shape does not match the volume")
    st = stage_vessels(pre, proj, cfg)
    write_projection(out, proj)
    write_vessels(out, st)
    print(f"nodes={st.graph.n_nodes} edges={st.graph.n_edges} "
          f"apex={'none' if st.anatomy is None else ' '.join(map(str, st.anatomy.hr_apex))}")
    return 0


def cmd_match(args) -> int:
    cfg = config_from_args(args)
    ref = _load(args.reference)
    mov = _load(args.moving)
    r = read_vessels(Path(args.ref_vessels), ref, cfg)
    m = read_vessels(Path(args.mov_vessels), mov, cfg)
    try:
        ms = stage_match(r, m, cfg)
    except seg.SegmentationError as exc:
        raise InputError(f"match: {exc}") from exc
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matches.txt").write_text(ms.plan.to_text(), encoding="utf-8")
    write_kv(out / "pattern.txt", {"category": ms.pattern.category, **ms.pattern.stats})
    print(f"pairs={len(ms.plan.correspondences)} pattern={ms.pattern.category}")
    return 0


def cmd_synth(args) -> int:
    pcfg = with_kind(PhantomConfig(), args.kind)
    if args.dims:
        pcfg = with_kind(pcfg, args.kind, dims=tuple(args.dims))
    if args.z_shift is not None:
        pcfg = with_kind(pcfg, args.kind, z_shift=args.z_shift)
    if args.z_ramp is not None:
        pcfg = with_kind(pcfg, args.kind, z_ramp=args.z_ramp)
    ref, mov, truth = generate_synthetic_pair(args.seed, pcfg)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(ref, out / "reference.raw")
    save_volume(mov, out / "moving.raw")
    truth.save(out / "truth.txt")
    print(f"wrote {out}/reference.raw {out}/moving.raw {out}/truth.txt")
    return 0


# -- eval --------------------------------------------------------------------

def read_manifest(path) -> list[tuple[str, str, str | None]]:
    base = Path(path).parent
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise InputError(f"malformed manifest line: {line!r}")
        full = [str(p if Path(p).is_absolute() else base / p) for p in parts]
        rows.append((full[0], full[1], full[2] if len(full) == 3 else None))
    if not rows:
        raise InputError("empty manifest")
    return rows


def _eval_one(job):
    idx, ref_path, mov_path, truth_path, synth, cfg, out = job
    t0 = time.perf_counter()
    truth = None
    if synth is not None:
        seed, kind = synth
        ref, mov, truth = generate_synthetic_pair(seed, with_kind(PhantomConfig(), kind))
    else:
        ref, mov = load_volume(ref_path), load_volume(mov_path)
        if truth_path:
            from .volume_io import SyntheticTruth
            truth = SyntheticTruth.load(truth_path)
    res = register(ref, mov, cfg)
    wall = time.perf_counter() - t0
    rep = res.report
    extra = {}
    if truth is not None and res.model is not None:
        extra["corner_error"] = corner_error(res.model, truth_model(truth), ref.dims[1:])
        if rep.z_shifts:
            exp = truth.expected_z_shift(ref.dims[1])
            extra["z_max_error"] = int(np.abs(np.asarray(rep.z_shifts) - exp).max())
    pair_dir = Path(out) / f"pair_{idx:04d}"
    pair_dir.mkdir(parents=True, exist_ok=True)
    (pair_dir / "report.txt").write_text(rep.to_text(), encoding="utf-8")
    write_kv(pair_dir / "timings.txt", {**rep.timings, "wall": wall})
    return idx, rep.success, rep.gc, wall, extra


def aggregate(results) -> dict:
    """Success rate (%), mean GC with failures counted as 0, mean wall time."""
    if not results:
        raise ValueError("no results to aggregate")
    ok = np.array([r[1] for r in results], dtype=bool)
    gc = np.array([r[2] if r[1] else 0.0 for r in results], dtype=np.float64)
    wall = np.array([r[3] for r in results], dtype=np.float64)
    return {"pairs": len(results), "accuracy_percent": 100.0 * ok.mean(),
            "mean_gc": float(gc.mean()), "mean_time_s": float(wall.mean())}


def cmd_eval(args) -> int:
    cfg = config_from_args(args)
    out = _out_dir(args)
    jobs = []
    if args.manifest:
        for i, (r, m, t) in enumerate(read_manifest(args.manifest)):
            jobs.append((i, r, m, t, None, cfg, str(out)))
    else:
        if args.synthetic <= 0:
            raise InputError("need a manifest or --synthetic N > 0")
        for i in range(args.synthetic):
            jobs.append((i, None, None, None, (args.first_seed + i, args.kind), cfg, str(out)))
    out.mkdir(parents=True, exist_ok=True)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    agg = aggregate(results)
    errs = [r[4]["corner_error"] for r in results if "corner_error" in r[4]]
    if errs:
        agg["mean_corner_error"] = float(np.mean(errs))
    lines = [f"{i} success={int(s)} gc={g if s else 0.0!r}" for i, s, g, _, _ in results]
    (out / "pairs.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_kv(out / "aggregate.txt", agg)
    print(" ".join(f"{k}={v}" for k, v in agg.items()))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octreg", description="Longitudinal OCT volume registration")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("register", help="register a moving volume onto a reference")
    s.add_argument("reference")
    s.add_argument("moving")
    s.add_argument("--matches", help="reuse correspondences written by 'match'")
    s.add_argument("--ref-vessels", help="reuse a 'vessels' output directory for the reference")
    s.add_argument("--mov-vessels", help="reuse a 'vessels' output directory for the moving volume")
    s.add_argument("-o", "--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval", help="batch evaluation")
    s.add_argument("manifest", nargs="?", help="lines of 'reference moving [truth]'")
    s.add_argument("--synthetic", type=int, default=0, help="number of seeded synthetic pairs")
    s.add_argument("--kind", choices=FAMILIES, default="affine")
    s.add_argument("--first-seed", type=int, default=0, help="seed of the first synthetic pair")
    s.add_argument("-o", "--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a seeded synthetic pair")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", choices=FAMILIES, default="affine")
    s.add_argument("--dims", type=int, nargs=3, metavar=("NZ", "NY", "NX"))
    s.add_argument("--z-shift", type=int)
    s.add_argument("--z-ramp", type=float)
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("project", help="projection image of a volume")
    s.add_argument("volume")
    s.add_argument("-o", "--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("vessels", help="vessel mask, graph, ILM and HR apex")
    s.add_argument("volume")
    s.add_argument("--projection-file", help="projection.npy from 'project'")
    s.add_argument("-o", "--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_vessels)

    s = sub.add_parser("match", help="node correspondences between two 'vessels' outputs")
    s.add_argument("reference")
    s.add_argument("moving")
    s.add_argument("ref_vessels")
    s.add_argument("mov_vessels")
    s.add_argument("-o", "--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_match)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"octreg {args.command}: {exc}", file=sys.stderr)
        return 2
    except (VolumeFormatError, KeyError, ValueError) as exc:
        print(f"octreg {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
