"""Discrete optimal transport between two node sets with ghost nodes.

Real nodes carry unit mass.  One ghost node per side absorbs outliers and
the size imbalance: with ``alpha = round(omega * min(N_R, N_M))`` the ghost on
the smaller side carries ``alpha + |N_R - N_M|`` and the other carries
``alpha``.  Ghost-to-ghost transport is not allowed, so exactly ``alpha`` (plus
the imbalance) real nodes per side are discarded.

All masses are integral and the transport polytope is totally unimodular,
so the binary optimum is found exactly by a min-cost assignment on the
graph where each ghost is replicated by its mass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .transform import RegistrationInfeasible
from .vessel_graph import VesselGraph


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray      # (N_R + 1, N_M + 1); last row / column are ghosts
    ghost_cost: float
    ghost_mass_r: int        # mass of the reference-side ghost (last row)
    ghost_mass_m: int        # mass of the moving-side ghost (last column)

    @property
    def n_ref(self) -> int:
        return self.entries.shape[0] - 1

    @property
    def n_mov(self) -> int:
        return self.entries.shape[1] - 1

    @property
    def real(self) -> np.ndarray:
        return self.entries[:-1, :-1]


@dataclass(frozen=True)
class TransportPlan:
    x: np.ndarray                  # (N_R + 1, N_M + 1) integer plan
    correspondences: tuple         # retained (i, j) real-real matches
    objective: float

    def to_text(self) -> str:
        lines = [f"# objective {self.objective!r}"]
        lines += [f"{i} {j}" for i, j in self.correspondences]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TransportPlan":
        """Correspondences and objective only; the full plan matrix is not stored."""
        objective = 0.0
        for line in text.splitlines():
            if line.startswith("# objective"):
                objective = float(line.split()[2])
        pairs = cls.read_pairs(text)
        return cls(np.zeros((0, 0), dtype=np.int64), tuple(sorted(pairs)), objective)

    @staticmethod
    def read_pairs(text: str) -> list[tuple[int, int]]:
        out = []
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                i, j = line.split()
                out.append((int(i), int(j)))
        return out


def assemble_cost(d_g, s_g, d_v=None, s_v=None, rescale: bool = True) -> np.ndarray:
    """``C = D_G + S_G + D_V + S_V`` (volume terms optional), divided by the term count."""
    terms = [np.asarray(t, dtype=np.float64) for t in (d_g, s_g, d_v, s_v) if t is not None]
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise ValueError(f"cost term shapes differ: {[t.shape for t in terms]}")
    c = np.sum(terms, axis=0)
    return c / len(terms) if rescale else c


def ghost_masses(n_ref: int, n_mov: int, omega: float) -> tuple[int, int]:
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    alpha = int(round(omega * min(n_ref, n_mov)))
    gap = abs(n_ref - n_mov)
    # ghost row absorbs moving nodes, ghost column absorbs reference nodes
    if n_ref >= n_mov:
        return alpha, alpha + gap
    return alpha + gap, alpha


def add_ghosts(c, omega: float = 0.1, percentile: float = 75.0) -> CostMatrix:
    c = np.asarray(c, dtype=np.float64)
    n_ref, n_mov = c.shape
    mass_r, mass_m = ghost_masses(n_ref, n_mov, omega)
    ghost = float(np.percentile(c, percentile)) if c.size else 0.0
    aug = np.full((n_ref + 1, n_mov + 1), ghost)
    aug[:n_ref, :n_mov] = c
    aug[n_ref, n_mov] = 0.0
    return CostMatrix(aug, ghost, mass_r, mass_m)


def solve_transport(cm: CostMatrix) -> TransportPlan:
    """Exact binary transport plan for a ghost-augmented cost matrix."""
    n_ref, n_mov = cm.n_ref, cm.n_mov
    if n_ref + cm.ghost_mass_r != n_mov + cm.ghost_mass_m:
        raise ValueError("infeasible masses: supply differs from demand")
    if cm.ghost_mass_r > n_mov or cm.ghost_mass_m > n_ref:
        raise ValueError("infeasible masses: ghost mass exceeds the opposite node count")
    rows = n_ref + cm.ghost_mass_r
    cols = n_mov + cm.ghost_mass_m
    big = np.empty((rows, cols))
    big[:n_ref, :n_mov] = cm.real
    big[:n_ref, n_mov:] = cm.entries[:n_ref, n_mov][:, None]
    big[n_ref:, :n_mov] = cm.entries[n_ref, :n_mov][None, :]
    big[n_ref:, n_mov:] = np.inf
    r, c = linear_sum_assignment(big)
    x = np.zeros((n_ref + 1, n_mov + 1), dtype=np.int64)
    pairs = []
    for i, j in zip(r, c):
        gi = min(i, n_ref)
        gj = min(j, n_mov)
        x[gi, gj] += 1
        if i < n_ref and j < n_mov:
            pairs.append((int(i), int(j)))
    objective = float(big[r, c].sum())
    return TransportPlan(x, tuple(sorted(pairs)), objective)


def brute_force_transport(cm: CostMatrix) -> float:
    """Minimum objective by enumerating every feasible binary plan (tiny inputs)."""
    n_ref, n_mov = cm.n_ref, cm.n_mov
    c = cm.real
    g_row = cm.entries[n_ref, :n_mov]
    g_col = cm.entries[:n_ref, n_mov]
    k = n_ref - cm.ghost_mass_m          # matched real pairs
    best = np.inf
    perms = np.array(list(itertools.permutations(range(k)))) if k else None
    for rs in itertools.combinations(range(n_ref), k):
        drop_r = g_col[[i for i in range(n_ref) if i not in rs]].sum()
        for cs in itertools.combinations(range(n_mov), k):
            drop_m = g_row[[j for j in range(n_mov) if j not in cs]].sum()
            sub = c[np.ix_(rs, cs)]
            if k:
                match = sub[np.arange(k), perms].sum(axis=1).min()
            else:
                match = 0.0
            best = min(best, match + drop_r + drop_m)
    return float(best)


def retained_correspondences(plan: TransportPlan, gr: VesselGraph, gm: VesselGraph,
                             minimum: int = 2):
    """``[((y, x)_ref, (y, x)_mov), ...]`` for every real-real match."""
    pairs = [(tuple(gr.coords[i]), tuple(gm.coords[j])) for i, j in plan.correspondences]
    if len(pairs) < minimum:
        raise RegistrationInfeasible(f"only {len(pairs)} correspondence(s) retained")
    return pairs


def match_nodes(cost: np.ndarray, omega: float = 0.1, percentile: float = 75.0) -> TransportPlan:
    return solve_transport(add_ghosts(cost, omega, percentile))
