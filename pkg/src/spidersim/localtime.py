"""Estimators and oracles for the junction local time.

Three grid estimators are provided: the downcrossing count (eps times the
number of completed excursions from eps back to the vertex), the excursion
sum of test-function increments, and the sigma^2-weighted occupation-time
integral over the eps-shell.  The exact reflection-map transform of a
Brownian skeleton serves as the independent oracle for the driftless
unit-diffusion case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import rng as _rng
from .network import CoefficientSet, TestFunction
from .simulator import SpiderPath

__all__ = [
    "ExcursionDecomposition",
    "LocalTimeEstimate",
    "EstimationError",
    "excursion_decompose",
    "downcrossing_estimate",
    "excursion_functional",
    "occupation_estimate",
    "occupation_batch",
    "skorokhod_oracle",
    "oracle_path",
    "grid_index",
]


class EstimationError(ValueError):
    pass


def grid_index(p: SpiderPath, t: float) -> int:
    """Grid index of query time t on the path (rounded to the nearest node)."""
    idx = round((t - p.t0) / p.h)
    if idx < 0 or idx > p.K or abs(p.t0 + idx * p.h - t) > 1e-9 * max(1.0, abs(t)):
        raise EstimationError(f"query time {t} is not on the path grid")
    return idx


@dataclass(frozen=True)
class ExcursionDecomposition:
    """Alternating indices of eps-upcrossings and vertex returns.

    theta[n] is the first grid index at or above eps after tau[n-1];
    tau[n] is the first vertex contact strictly after theta[n].  theta may
    be one entry longer than tau when the final excursion is incomplete.
    """

    eps: float
    theta: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        if self.tau.size not in (self.theta.size, self.theta.size - 1) and self.theta.size:
            raise EstimationError("indices do not interleave")

    def count(self, query_idx: int) -> int:
        """Number of completed downcrossings inside [0, query_idx]."""
        return int(np.searchsorted(self.tau, query_idx, side="right"))


@dataclass(frozen=True)
class LocalTimeEstimate:
    method: str
    value: float
    eps: float
    t: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.value < 0:
            raise EstimationError("local-time estimate must be nonnegative")


def _contact_indices(p: SpiderPath) -> np.ndarray:
    flags = p.contact.copy()
    flags |= p.x == 0.0
    return np.flatnonzero(flags)


def excursion_decompose(p: SpiderPath, eps: float) -> ExcursionDecomposition:
    """Grid decomposition of the path into eps-excursions from the vertex.

    Upcrossings are detected as the first index with x >= eps, vertex
    returns via the contact flags recorded by the scheme (exact zeros for
    the reflection-map oracle).
    """
    if eps <= p.delta_activity:
        raise EstimationError(
            f"eps = {eps} must exceed the vertex-activity radius {p.delta_activity:.3g}")
    above = np.flatnonzero(p.x >= eps)
    contacts = _contact_indices(p)
    thetas: list[int] = []
    taus: list[int] = []
    cur = 0
    while True:
        a = np.searchsorted(above, cur, side="left")
        if a == above.size:
            break
        th = int(above[a])
        thetas.append(th)
        b = np.searchsorted(contacts, th + 1, side="left")
        if b == contacts.size:
            break
        ta = int(contacts[b])
        taus.append(ta)
        cur = ta + 1
    return ExcursionDecomposition(
        eps=eps,
        theta=np.asarray(thetas, dtype=np.int64),
        tau=np.asarray(taus, dtype=np.int64),
    )


def downcrossing_estimate(p: SpiderPath, eps: float, t: float) -> LocalTimeEstimate:
    """eps times the number of completed eps-to-vertex downcrossings by t."""
    dec = excursion_decompose(p, eps)
    n = dec.count(grid_index(p, t))
    return LocalTimeEstimate(
        method="downcrossing", value=eps * n, eps=eps, t=t,
        meta={"count": n, "policy": p.policy},
    )


def excursion_functional(p: SpiderPath, f: TestFunction, eps: float, t: float) -> float:
    """Sum over completed downcrossings of the f-increment from the vertex
    return to the next eps-upcrossing.

    The n-th term is f at the (n+1)-th upcrossing minus f at the n-th
    return, with f evaluated at the nominal levels (x = eps at upcrossings,
    x = 0 at returns).  The trailing upcrossing may fall after t; a term
    whose upcrossing never happens on the stored grid is dropped.  Returns
    0 when no downcrossing completed by t.
    """
    dec = excursion_decompose(p, eps)
    n_count = dec.count(grid_index(p, t))
    if n_count < 1:
        return 0.0
    times = p.times()
    total = 0.0
    for n in range(1, n_count + 1):
        if n >= dec.theta.size:
            break
        th = int(dec.theta[n])
        ta = int(dec.tau[n - 1])
        total += float(f.value(int(p.edge[th]), times[th], eps, p.l[th]))
        total -= float(f.value(int(p.edge[ta]), times[ta], 0.0, p.l[ta]))
    return total


def occupation_estimate(p: SpiderPath, c: CoefficientSet, eps: float, t: float,
                        edges: Iterable[int] | None = None) -> LocalTimeEstimate:
    """Shell occupation integral (1/2 eps) sum_j int sigma_j^2(s,0,l) 1{x<=eps, i=j} ds.

    With all edges this estimates the junction local time; with a strict
    subset it estimates the alpha-weighted share of the selected rays.
    """
    if eps <= 0:
        raise EstimationError("eps must be positive")
    subset = tuple(sorted(set(range(1, c.I + 1) if edges is None else (int(e) for e in edges))))
    if not subset or any(e < 1 or e > c.I for e in subset):
        raise EstimationError(f"edge subset {subset} invalid for I={c.I}")
    idx = grid_index(p, t)
    times = p.times()[:idx]
    xk = p.x[:idx]
    ek = p.edge[:idx]
    lk = p.l[:idx]
    total = 0.0
    inside = xk <= eps
    for e in subset:
        m = inside & (ek == e)
        if m.any():
            sig = np.asarray(c.diffusion(e, times[m], np.zeros(int(m.sum())), lk[m]))
            total += float(np.sum(sig**2)) * p.h
    return LocalTimeEstimate(
        method="occupation", value=total / (2.0 * eps), eps=eps, t=t,
        meta={"edges": subset},
    )


def occupation_batch(c: CoefficientSet, init, cfg, eps: float,
                     edges: Iterable[int] | None = None,
                     workers: int = 1) -> np.ndarray:
    """Streaming shell-occupation values for cfg.n_paths simulated paths.

    Equivalent to occupation_estimate at the horizon on stored paths, but
    accumulated on the fly so large ensembles never materialize.
    """
    from .simulator import map_path_blocks, run_batch  # local import, cycle-free

    subset = tuple(sorted(set(range(1, c.I + 1) if edges is None else (int(e) for e in edges))))
    if not subset or any(e < 1 or e > c.I for e in subset):
        raise EstimationError(f"edge subset {subset} invalid for I={c.I}")
    K = cfg.n_steps(init.t)

    def block(lo, hi):
        acc = np.zeros(hi - lo)

        def on_step(k, t, x, edge, l, dl, contact):
            inside = x <= eps
            for e in subset:
                m = inside & (edge == e)
                if m.any():
                    sig = np.asarray(c.diffusion(e, t[m], np.zeros(int(m.sum())), l[m]))
                    acc[m] += sig**2 * cfg.h
            return None

        run_batch(c, cfg, K=K, t0=init.t, x0=init.x, edge0=init.i, l0=init.l,
                  path_ids=np.arange(lo, hi, dtype=np.uint64), on_step=on_step)
        return {"occ": acc / (2.0 * eps)}

    return map_path_blocks(cfg.n_paths, workers, block)["occ"]


def skorokhod_oracle(gaussians: np.ndarray, h: float, T: float,
                     x0: float = 0.0) -> tuple[SpiderPath, np.ndarray]:
    """Exact reflection map of a Brownian skeleton (driftless, unit sigma).

    The skeleton is y_k = x0 + sum sqrt(h) g_j; the reflected path is
    y_k - min(0, min_{j<=k} y_j) and the regulator -min(0, min y) is the
    exact grid local time.  Returns the path (single ray) and its local
    time array.
    """
    g = np.asarray(gaussians, dtype=np.float64)
    K = round(T / h)
    if abs(K * h - T) > 1e-9 * max(1.0, T):
        raise EstimationError("T must be a whole number of steps")
    if g.shape != (K,):
        raise EstimationError(f"need {K} increments, got {g.shape}")
    y = np.empty(K + 1)
    y[0] = x0
    np.cumsum(g * math.sqrt(h), out=y[1:])
    y[1:] += x0
    m = np.minimum(np.minimum.accumulate(y), 0.0)
    x = y - m
    l = -m
    path = SpiderPath(
        t0=0.0, h=h, x=x, edge=np.ones(K + 1, dtype=np.int64), l=l,
        contact=x == 0.0, gauss=g.copy(), policy="oracle", seed=0,
        path_index=0, delta_shell=0.0, sigma_bound=1.0,
    )
    return path, l


def oracle_path(seed: int, path_index: int, h: float, T: float,
                x0: float = 0.0) -> tuple[SpiderPath, np.ndarray]:
    """Reflection-map oracle driven by the counter-based stream of one path."""
    K = round(T / h)
    g = _rng.gaussians(seed, np.full(K, path_index, dtype=np.uint64),
                       np.arange(K, dtype=np.uint64))
    path, l = skorokhod_oracle(g, h, T, x0=x0)
    path.seed = seed
    path.path_index = path_index
    return path, l
