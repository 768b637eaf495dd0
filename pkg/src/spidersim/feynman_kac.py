"""Monte Carlo evaluation of the probabilistic representation

    u_i(t,x,l) = E[ int_t^T h_{i(s)}(s,x(s),l(s)) ds
                    + int_t^T h0(s,l(s)) dl(s) + g_{i(T)}(x(T),l(T)) ]

for the backward system with the local-time vertex coupling, and its
cross-validation against the grid solver.  Time integrals use left-endpoint
quadrature on the simulation grid; the dl integral uses the scheme's own
local-time increments, evaluated at the left endpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .network import CoefficientSet
from .pde import PdeGrid, PdeProblem, PdeSolution, solve
from .simulator import SimConfig, map_path_blocks, run_batch

__all__ = ["FKProblem", "FKEstimate", "FKComparisonRow", "fk_estimate", "fk_vs_pde"]


@dataclass(frozen=True)
class FKProblem:
    """Running costs per ray, vertex running cost, terminal payoff."""

    g_edge: tuple[Callable, ...]
    h_edge: tuple[Callable, ...] | None = None
    h0: Callable | None = None
    h_bound: float = 10.0

    def check(self, I: int, l_samples=None, tol: float = 1e-9) -> None:
        """Vertex continuity of the payoff and the declared ceiling for the
        running costs, sampled."""
        if len(self.g_edge) != I:
            raise ValueError("payoff needs one entry per ray")
        ls = np.linspace(0.0, 3.0, 13) if l_samples is None else np.asarray(l_samples)
        ref = np.asarray(self.g_edge[0](0.0, ls), dtype=float)
        for g in self.g_edge[1:]:
            if np.max(np.abs(np.asarray(g(0.0, ls), dtype=float) - ref)) > tol:
                raise ValueError("terminal payoff is discontinuous at the vertex")
        if self.h_edge is not None:
            ts = np.linspace(0.0, 1.0, 5)
            xs = np.linspace(0.0, 2.0, 5)
            for h in self.h_edge:
                tt, xx, ll = np.meshgrid(ts, xs, ls[:5], indexing="ij")
                vals = np.asarray(h(tt, xx, ll), dtype=float)
                if np.max(np.abs(vals)) > self.h_bound:
                    raise ValueError("running cost exceeds its declared bound")

    def payoff(self, edge_arr: np.ndarray, x: np.ndarray, l: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for e in range(1, len(self.g_edge) + 1):
            m = edge_arr == e
            if m.any():
                out[m] = self.g_edge[e - 1](x[m], l[m])
        return out

    def running(self, edge_arr, t, x, l) -> np.ndarray:
        if self.h_edge is None:
            return np.zeros_like(x)
        out = np.empty_like(x)
        for e in range(1, len(self.h_edge) + 1):
            m = edge_arr == e
            if m.any():
                out[m] = self.h_edge[e - 1](t[m], x[m], l[m])
        return out

    def vertex_cost(self, t, l) -> np.ndarray:
        if self.h0 is None:
            return np.zeros_like(np.asarray(t, dtype=float))
        return np.asarray(self.h0(t, l), dtype=np.float64)


@dataclass(frozen=True)
class FKEstimate:
    t: float
    x: float
    edge: int
    l: float
    mean: float
    stderr: float
    n_paths: int
    seed: int


@dataclass(frozen=True)
class FKComparisonRow:
    query: tuple
    mc_mean: float
    mc_stderr: float
    pde_value: float
    diff: float
    tolerance: float
    grid_budget: float
    passed: bool


def _per_path_values(prob: FKProblem, c: CoefficientSet, query, cfg: SimConfig,
                     lo: int, hi: int) -> np.ndarray:
    t_q, x_q, e_q, l_q = query
    K = cfg.n_steps(t_q)
    n = hi - lo
    acc = np.zeros(n)

    def on_step(k, t, x, edge, l, dl, contact):
        acc_step = prob.running(edge, t, x, l) * cfg.h
        if prob.h0 is not None:
            hit = dl > 0
            if hit.any():
                acc_step = acc_step + np.where(hit, prob.vertex_cost(t, l) * dl, 0.0)
        np.add(acc, acc_step, out=acc)

    res = run_batch(
        c, cfg, K=K, t0=t_q, x0=x_q, edge0=e_q, l0=l_q,
        path_ids=np.arange(lo, hi, dtype=np.uint64), on_step=on_step,
    )
    return acc + prob.payoff(res.edge, res.x, res.l)


def fk_estimate(prob: FKProblem, c: CoefficientSet, query, cfg: SimConfig,
                workers: int = 1) -> FKEstimate:
    """Monte Carlo value of the representation at query = (t, x, edge, l)."""
    t_q, x_q, e_q, l_q = query
    if t_q >= cfg.T:
        raise ValueError("query time must be before the horizon")
    prob.check(c.I)
    parts = map_path_blocks(
        cfg.n_paths, workers,
        lambda lo, hi: {"v": _per_path_values(prob, c, query, cfg, lo, hi)},
    )
    vals = parts["v"]
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return FKEstimate(t=t_q, x=x_q, edge=e_q, l=l_q, mean=mean, stderr=stderr,
                      n_paths=vals.size, seed=cfg.seed)


def to_pde_problem(prob: FKProblem, c: CoefficientSet, T: float, R: float, K: float,
                   psi_edge: tuple[Callable, ...] | None = None) -> PdeProblem:
    return PdeProblem(
        coefficients=c, T=T, R=R, K=K,
        g_edge=prob.g_edge, h_edge=prob.h_edge, h0=prob.h0,
        psi_edge=psi_edge, direction="backward",
    )


def fk_vs_pde(prob: FKProblem, c: CoefficientSet, queries: Sequence[tuple],
              cfg: SimConfig, grid: PdeGrid, R: float, K: float,
              psi_edge: tuple[Callable, ...] | None = None,
              richardson_factor: float = 1.5, workers: int = 1,
              ) -> tuple[list[FKComparisonRow], PdeSolution]:
    """Compare the Monte Carlo representation with the grid solver.

    The per-query grid-error budget is the coarse-vs-fine solution gap at
    the query (first-order scheme, so the gap estimates the fine-grid
    error), inflated by richardson_factor.  A row passes when
    |MC - PDE| <= 3 stderr + budget.
    """
    pde_prob = to_pde_problem(prob, c, cfg.T, R, K, psi_edge=psi_edge)
    fine = solve(pde_prob, grid)
    coarse = solve(pde_prob, grid.coarsened())
    rows = []
    for q in queries:
        t_q, x_q, e_q, l_q = q
        if x_q > 0.9 * R or l_q > 0.9 * K:
            raise ValueError(f"query {q} too close to the truncation boundary")
        est = fk_estimate(prob, c, q, cfg, workers=workers)
        u_fine = fine.at(t_q, x_q, e_q, l_q)
        u_coarse = coarse.at(t_q, x_q, e_q, l_q)
        budget = richardson_factor * abs(u_fine - u_coarse)
        diff = abs(est.mean - u_fine)
        # rounding floor so exactly-solvable problems do not fail on ulps
        tol = 3.0 * est.stderr + budget + 1e-12 * (1.0 + abs(u_fine))
        rows.append(FKComparisonRow(
            query=q, mc_mean=est.mean, mc_stderr=est.stderr, pde_value=u_fine,
            diff=diff, tolerance=tol, grid_budget=budget, passed=diff <= tol,
        ))
    return rows, fine
