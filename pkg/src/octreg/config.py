"""Pipeline configuration as a flat ``key = value`` text file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class PipelineConfig:
    # preprocessing
    prefilter: str = "gaussian"          # none | gaussian | median
    prefilter_size: float = 1.0
    projection: str = "sum"              # sum | mean
    wavelet_levels: tuple = (2, 3, 5)
    dark_vessels: bool = True
    min_vessel_area: int = 20
    canny_sigma: float = 2.0
    canny_low: float = 0.1
    canny_high: float = 0.2
    anterior_is_low_z: bool = True
    # graph
    d: float = 46.0
    merge_radius: float = 10.0
    weight_table: str = "default"
    adaptive_weights: bool = True
    pattern_gate: float = 6.0
    uncorrelated_fraction: float = 0.3
    use_graph_descriptors: bool = True
    use_volume_descriptors: bool = True
    # cube descriptors
    cube_side: int = 19
    gabor_orientations: tuple = (0.0, 90.0)
    gabor_wavelengths: tuple = (4.0, 8.0)
    gabor_sigma_ratio: float = 0.56
    gabor_aspect: float = 0.5
    ilm_search_radius: int = 5
    # transport
    omega: float = 0.1
    ghost_percentile: float = 75.0
    # transform
    ransac: bool = True
    ransac_threshold: float = 5.0
    ransac_iterations: int = 500
    gc_tie_tolerance: float = 0.0
    refine: bool = True                  # centreline ICP after the node-based fit
    refine_iterations: int = 30
    refine_max_dist: float = 4.0
    min_correspondences: int = 4
    # z
    z_bound: int = 20
    z_max_iter: int = 10
    # misc
    seed: int = 0
    checkerboard_tile: int = 32
    workers: int = 1

    def __post_init__(self):
        if not self.d > self.merge_radius > 0:
            raise ValueError("need d > merge_radius > 0")
        if self.cube_side < 1 or self.cube_side % 2 == 0:
            raise ValueError("cube_side must be a positive odd integer")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must be in [0, 1]")
        if not 0.0 <= self.ghost_percentile <= 100.0:
            raise ValueError("ghost_percentile must be in [0, 100]")
        if not self.wavelet_levels or min(self.wavelet_levels) < 1:
            raise ValueError("wavelet levels must be >= 1")
        if self.prefilter not in ("none", "gaussian", "median"):
            raise ValueError(f"unknown prefilter {self.prefilter!r}")
        if self.projection not in ("sum", "mean"):
            raise ValueError(f"unknown projection reduce {self.projection!r}")
        if self.z_bound < 0 or self.z_max_iter < 1:
            raise ValueError("invalid z refinement settings")
        if self.ransac_threshold <= 0 or self.ransac_iterations < 1:
            raise ValueError("invalid RANSAC settings")

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_mapping(cls, items: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in items.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _parse(getattr(cls, key), raw)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        items = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed config line: {line!r}")
            items[key.strip()] = value.strip()
        return cls.from_mapping(items)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(default, raw):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        conv = type(default[0]) if default else float
        return tuple(conv(p) for p in raw.replace(" ", "").split(",") if p)
    return raw
