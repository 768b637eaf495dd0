"""Euler-type path generation for the spider diffusion on the star network.

Interior steps are explicit Euler with coefficients frozen at the left
endpoint.  Vertex visits are handled by a pluggable policy:

* ``reflection`` -- a negative radial proposal y < 0 is placed symmetrically
  at -y and the junction local time is increased by 2*(-y); the ray is
  redrawn from alpha(t, l) at every contact.  The doubled overshoot is what
  makes the stored local time satisfy the same discrete decomposition
  x_{k+1} - x_k = b h + sigma sqrt(h) g + dl as the continuous dynamics; the
  driftless radial law is then exactly |N(0, t)| while E[l at the first
  hitting of delta] / delta -> 1, matching the exact reflection map oracle.

* ``shell`` -- on reaching the vertex the ray is drawn once from
  alpha(t, l), then a reflected radial excursion is run on that ray (same
  step size, same symmetric placement and accrual, no redraws) until the
  first step with x >= delta_shell, where the path is placed at exactly
  delta_shell.

Every random number is a pure function of (seed, path index, step, slot),
so batches are reproducible bit for bit regardless of how the paths are
split across workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng as _rng
from .network import CoefficientSet

__all__ = [
    "SpiderState",
    "BoundaryContact",
    "VertexPolicy",
    "SimConfig",
    "SpiderPath",
    "BatchResult",
    "FirstHitResult",
    "SimulationError",
    "step_interior",
    "resolve_vertex",
    "simulate_path",
    "simulate_batch",
    "first_hit",
    "run_batch",
    "map_path_blocks",
]

_GAUSS_SLOT = 0
_CONTACT_SLOT = 1
_DEPART_SLOT = 2
_SLOTS = 3


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpiderState:
    """Scheme state: time, radial position, ray label (1-based), local time."""

    t: float
    x: float
    i: int
    l: float

    def __post_init__(self):
        if self.x < 0 or self.l < 0:
            raise SimulationError(f"invalid state x={self.x}, l={self.l}")


@dataclass(frozen=True)
class BoundaryContact:
    """Flagged intermediate state: the proposal left the half-line."""

    t: float
    proposal: float  # y <= 0
    i: int
    l: float
    h: float


@dataclass(frozen=True)
class VertexPolicy:
    kind: str  # "reflection" | "shell"
    delta_shell: float
    h: float

    def __post_init__(self):
        if self.kind not in ("reflection", "shell"):
            raise SimulationError(f"unknown vertex policy {self.kind!r}")
        if self.delta_shell <= 0 or self.h <= 0:
            raise SimulationError("delta_shell and h must be positive")


@dataclass(frozen=True)
class SimConfig:
    h: float
    T: float
    delta_shell: float = 1e-3
    policy: str = "reflection"
    n_paths: int = 1
    seed: int = 0
    store_paths: bool = False

    def __post_init__(self):
        if self.h <= 0 or self.T <= 0 or self.delta_shell <= 0:
            raise SimulationError("h, T and delta_shell must be positive")
        if self.policy not in ("reflection", "shell"):
            raise SimulationError(f"unknown vertex policy {self.policy!r}")
        if self.n_paths < 0:
            raise SimulationError("n_paths must be nonnegative")
        if not (0 <= int(self.seed) < 2**64):
            raise SimulationError("seed must fit in 64 bits")

    def vertex_policy(self) -> VertexPolicy:
        return VertexPolicy(self.policy, self.delta_shell, self.h)

    def n_steps(self, t_start: float = 0.0) -> int:
        span = self.T - t_start
        k = round(span / self.h)
        if k < 0 or abs(k * self.h - span) > 1e-9 * max(1.0, self.T):
            raise SimulationError(
                f"horizon {span} is not a whole number of steps of size {self.h}")
        return k

    def check_against(self, c: CoefficientSet):
        """Shell stability guard: the 0 -> delta_shell excursion must span
        about ten steps or more."""
        if self.policy == "shell":
            limit = self.delta_shell**2 / (10.0 * c.bounds.sigma_bound**2)
            if self.h > limit * (1 + 1e-12):
                raise SimulationError(
                    f"shell policy needs h <= delta_shell^2/(10 sigma_bound^2) = {limit:.3g}, "
                    f"got h = {self.h:.3g}")


@dataclass
class SpiderPath:
    """One discretized trajectory on the uniform grid t0 + k*h."""

    t0: float
    h: float
    x: np.ndarray          # (K+1,)
    edge: np.ndarray       # (K+1,) int, 1-based
    l: np.ndarray          # (K+1,)
    contact: np.ndarray    # (K+1,) bool, True where the grid point is a vertex visit
    gauss: np.ndarray      # (K,) driving standard normals
    policy: str = "reflection"
    seed: int = 0
    path_index: int = 0
    delta_shell: float = 1e-3
    sigma_bound: float = 1.0

    @property
    def K(self) -> int:
        return self.x.size - 1

    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.x.size)

    @property
    def delta_activity(self) -> float:
        return max(self.delta_shell, 3.0 * self.sigma_bound * math.sqrt(self.h))

    def check_invariants(self):
        if np.any(self.x < 0):
            raise SimulationError("negative radial position stored")
        dl = np.diff(self.l)
        if np.any(dl < -1e-15):
            raise SimulationError("local time decreased")
        near = np.minimum(self.x[:-1], self.x[1:]) <= self.delta_activity
        if np.any((dl > 0) & ~near):
            raise SimulationError("local time increased away from the vertex")
        changed = self.edge[1:] != self.edge[:-1]
        if np.any(changed & ~near):
            raise SimulationError("ray label changed away from the vertex")


@dataclass
class BatchResult:
    """Terminal states for a batch, plus the stored paths if requested."""

    t: np.ndarray
    x: np.ndarray
    edge: np.ndarray
    l: np.ndarray
    paths: list[SpiderPath] | None = None

    @property
    def n(self) -> int:
        return self.x.size


@dataclass
class FirstHitResult:
    """Per-path first passage of the level: time, ray, local time, censoring."""

    theta: np.ndarray
    edge: np.ndarray
    l: np.ndarray
    censored: np.ndarray
    level: float

    @property
    def n(self) -> int:
        return self.theta.size


# ---------------------------------------------------------------------------
# scalar operations
# ---------------------------------------------------------------------------


def step_interior(s: SpiderState, c: CoefficientSet, h: float, gaussian: float):
    """One explicit Euler proposal from the interior of a ray.

    Returns the advanced SpiderState when the proposal stays positive, or a
    BoundaryContact carrying the negative proposal for the vertex policy.
    """
    if s.x <= 0:
        raise SimulationError("step_interior needs x > 0")
    if not math.isfinite(gaussian):
        raise SimulationError("non-finite gaussian increment")
    b = float(c.drift(s.i, s.t, s.x, s.l))
    sig = float(c.diffusion(s.i, s.t, s.x, s.l))
    if not (math.isfinite(b) and math.isfinite(sig)):
        raise SimulationError("non-finite coefficient value")
    y = s.x + b * h + sig * math.sqrt(h) * gaussian
    if y > 0:
        return SpiderState(s.t + h, y, s.i, s.l)
    return BoundaryContact(s.t, y, s.i, s.l, h)


def _pick_edge_scalar(c: CoefficientSet, t: float, l: float, u: float) -> int:
    weights = np.asarray(c.alpha_matrix(t, l), dtype=float)
    cum = np.cumsum(weights)
    return int(min(np.searchsorted(cum, u, side="right"), c.I - 1)) + 1


def resolve_vertex(s: BoundaryContact, c: CoefficientSet, policy: VertexPolicy,
                   stream: _rng.CounterStream) -> SpiderState:
    """Resolve a boundary contact according to the vertex policy.

    The ray is drawn from alpha evaluated at the pre-contact (t, l), before
    the local-time increment is booked.
    """
    if s.proposal > 0:
        raise SimulationError("resolve_vertex needs a nonpositive proposal")
    h = policy.h
    j = _pick_edge_scalar(c, s.t, s.l, stream.uniform())
    over = -s.proposal
    if policy.kind == "reflection":
        return SpiderState(s.t + h, over, j, s.l + 2.0 * over)
    # shell: reflected excursion on ray j until the first step at or above
    # delta_shell, then placed exactly there
    t = s.t + h
    x = over
    l = s.l + 2.0 * over
    while x < policy.delta_shell:
        b = float(c.drift(j, t, x, l))
        sig = float(c.diffusion(j, t, x, l))
        y = x + b * h + sig * math.sqrt(h) * stream.gaussian()
        if y <= 0:
            x = -y
            l += -2.0 * y
        elif y >= policy.delta_shell:
            x = policy.delta_shell
        else:
            x = y
        t += h
    return SpiderState(t, policy.delta_shell, j, l)


# ---------------------------------------------------------------------------
# vectorized engine
# ---------------------------------------------------------------------------


def _pick_edges(amat: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(amat, axis=1)
    idx = (u[:, None] > cum).sum(axis=1)
    return np.minimum(idx, amat.shape[1] - 1).astype(np.int64) + 1


def _eval_per_edge(c: CoefficientSet, fns_kind: str, edge, t, x, l) -> np.ndarray:
    out = np.empty_like(x)
    for e in range(1, c.I + 1):
        m = edge == e
        if m.any():
            if fns_kind == "b":
                out[m] = c.drift(e, t[m], x[m], l[m])
            else:
                out[m] = c.diffusion(e, t[m], x[m], l[m])
    return out


def run_batch(
    c: CoefficientSet,
    cfg: SimConfig,
    *,
    K: int,
    t0,
    x0,
    edge0,
    l0,
    path_ids: np.ndarray | None = None,
    seed: int | None = None,
    on_step: Callable | None = None,
    store: bool = False,
    gaussians: np.ndarray | None = None,
    stop_level: float | None = None,
) -> BatchResult | FirstHitResult:
    """Advance a batch of paths K steps on the uniform grid.

    ``on_step(k, t, x, edge, l, dl, contact)`` is called once per step with
    the left-endpoint state (edge already redrawn for paths departing the
    vertex), the local-time increment of the step and the contact mask.
    With ``stop_level`` set the batch runs in absorption mode: paths stop at
    the first grid point with x >= stop_level and a FirstHitResult is
    returned (on_step and store are not supported there).
    """
    cfg.check_against(c)
    seed = cfg.seed if seed is None else seed
    shape = np.broadcast_shapes(np.shape(t0), np.shape(x0), np.shape(edge0), np.shape(l0))
    n = shape[0] if shape else 1
    if path_ids is not None:
        path_ids = np.asarray(path_ids, dtype=np.uint64)
        if shape and path_ids.shape != shape:
            raise SimulationError("path_ids must match the batch size")
        n = path_ids.size
    else:
        path_ids = np.arange(n, dtype=np.uint64)
    t = np.broadcast_to(np.asarray(t0, dtype=np.float64), (n,)).copy()
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (n,)).copy()
    edge = np.broadcast_to(np.asarray(edge0, dtype=np.int64), (n,)).copy()
    l = np.broadcast_to(np.asarray(l0, dtype=np.float64), (n,)).copy()
    if np.any(x < 0) or np.any(l < 0) or np.any(edge < 1) or np.any(edge > c.I):
        raise SimulationError("invalid initial states")

    shell = cfg.policy == "shell"
    sq = math.sqrt(cfg.h)
    h = cfg.h
    dsh = cfg.delta_shell

    if gaussians is not None and gaussians.shape != (n, K):
        raise SimulationError(f"gaussians must have shape ({n}, {K})")

    if stop_level is not None:
        if on_step is not None or store:
            raise SimulationError("absorption mode does not support on_step/store")
        return _run_absorbing(c, cfg, K, t, x, edge, l, path_ids, seed, stop_level)

    if store:
        X = np.empty((n, K + 1))
        E = np.empty((n, K + 1), dtype=np.int64)
        L = np.empty((n, K + 1))
        C = np.zeros((n, K + 1), dtype=bool)
        G = np.empty((n, K))
        X[:, 0], E[:, 0], L[:, 0] = x, edge, l

    pending = x == 0.0
    shell_mode = np.zeros(n, dtype=bool)
    for k in range(K):
        base = np.uint64(_SLOTS * k)
        if pending.any():
            u = _rng.uniforms(seed, path_ids[pending], base + np.uint64(_DEPART_SLOT))
            amat = c.alpha_matrix(t[pending], l[pending])
            edge[pending] = _pick_edges(amat, u)
            if shell:
                shell_mode |= pending
            pending[:] = False
            if store:
                E[:, k] = edge  # departure ray is the label at this node
        if gaussians is None:
            g = _rng.gaussians(seed, path_ids, base + np.uint64(_GAUSS_SLOT))
        else:
            g = gaussians[:, k]
        bv = _eval_per_edge(c, "b", edge, t, x, l)
        sv = _eval_per_edge(c, "s", edge, t, x, l)
        if not (np.all(np.isfinite(bv)) and np.all(np.isfinite(sv))):
            raise SimulationError(f"non-finite coefficient at step {k}")
        y = x + bv * h + sv * sq * g
        contact = y <= 0.0
        over = np.where(contact, -y, 0.0)
        dl = 2.0 * over
        x_new = np.where(contact, over, y)
        if on_step is not None:
            # left-endpoint state: the ray redrawn at a contact applies only
            # from the next grid point on
            on_step(k, t, x, edge, l, dl, contact)
        if shell:
            enter = contact & ~shell_mode
            if enter.any():
                u = _rng.uniforms(seed, path_ids[enter], base + np.uint64(_CONTACT_SLOT))
                amat = c.alpha_matrix(t[enter], l[enter])
                edge[enter] = _pick_edges(amat, u)
                shell_mode |= enter
            exiting = shell_mode & (x_new >= dsh)
            x_new = np.where(exiting, dsh, x_new)
            shell_mode &= ~exiting
        else:
            if contact.any():
                u = _rng.uniforms(seed, path_ids[contact], base + np.uint64(_CONTACT_SLOT))
                amat = c.alpha_matrix(t[contact], l[contact])
                edge[contact] = _pick_edges(amat, u)
        x = x_new
        l = l + dl
        t = t + h
        if store:
            X[:, k + 1], E[:, k + 1], L[:, k + 1] = x, edge, l
            C[:, k + 1] = contact
            G[:, k] = g

    paths = None
    if store:
        paths = [
            SpiderPath(
                t0=float(np.asarray(t0).ravel()[p] if np.ndim(t0) else t0),
                h=h, x=X[p].copy(), edge=E[p].copy(), l=L[p].copy(),
                contact=C[p].copy(), gauss=G[p].copy(), policy=cfg.policy,
                seed=seed, path_index=int(path_ids[p]), delta_shell=dsh,
                sigma_bound=c.bounds.sigma_bound,
            )
            for p in range(n)
        ]
    return BatchResult(t=t, x=x, edge=edge, l=l, paths=paths)


def _run_absorbing(c, cfg, K, t, x, edge, l, path_ids, seed, level):
    n = x.size
    h = cfg.h
    sq = math.sqrt(h)
    dsh = cfg.delta_shell
    shell = cfg.policy == "shell"
    theta = np.full(n, np.nan)
    exit_edge = np.zeros(n, dtype=np.int64)
    exit_l = np.full(n, np.nan)
    done = x >= level
    theta[done] = t[done]
    exit_edge[done] = edge[done]
    exit_l[done] = l[done]
    active = np.flatnonzero(~done)
    pending = x == 0.0
    shell_mode = np.zeros(n, dtype=bool)
    for k in range(K):
        if active.size == 0:
            break
        base = np.uint64(_SLOTS * k)
        ids = path_ids[active]
        pa = pending[active]
        if pa.any():
            sel = active[pa]
            u = _rng.uniforms(seed, path_ids[sel], base + np.uint64(_DEPART_SLOT))
            amat = c.alpha_matrix(t[sel], l[sel])
            edge[sel] = _pick_edges(amat, u)
            if shell:
                shell_mode[sel] = True
            pending[sel] = False
        g = _rng.gaussians(seed, ids, base + np.uint64(_GAUSS_SLOT))
        ta, xa, ea, la = t[active], x[active], edge[active], l[active]
        bv = _eval_per_edge(c, "b", ea, ta, xa, la)
        sv = _eval_per_edge(c, "s", ea, ta, xa, la)
        y = xa + bv * h + sv * sq * g
        contact = y <= 0.0
        over = np.where(contact, -y, 0.0)
        x_new = np.where(contact, over, y)
        dl = 2.0 * over
        if shell:
            enter = contact & ~shell_mode[active]
            if enter.any():
                sel = active[enter]
                u = _rng.uniforms(seed, path_ids[sel], base + np.uint64(_CONTACT_SLOT))
                amat = c.alpha_matrix(t[sel], l[sel])
                edge[sel] = _pick_edges(amat, u)
                shell_mode[sel] = True
            exiting = shell_mode[active] & (x_new >= dsh)
            x_new = np.where(exiting, dsh, x_new)
            shell_mode[active[exiting]] = False
        else:
            if contact.any():
                sel = active[contact]
                u = _rng.uniforms(seed, path_ids[sel], base + np.uint64(_CONTACT_SLOT))
                amat = c.alpha_matrix(t[sel], l[sel])
                edge[sel] = _pick_edges(amat, u)
        x[active] = x_new
        l[active] = la + dl
        t[active] = ta + h
        hit = x_new >= level
        if hit.any():
            sel = active[hit]
            theta[sel] = t[sel]
            exit_edge[sel] = edge[sel]
            exit_l[sel] = l[sel]
            active = active[~hit]
    censored = np.isnan(theta)
    return FirstHitResult(theta=theta, edge=exit_edge, l=exit_l,
                          censored=censored, level=level)


# ---------------------------------------------------------------------------
# public batch operations
# ---------------------------------------------------------------------------


def simulate_path(c: CoefficientSet, init: SpiderState, cfg: SimConfig,
                  path_index: int = 0) -> SpiderPath:
    """One full stored trajectory; a pure function of (seed, path_index)."""
    K = cfg.n_steps(init.t)
    res = run_batch(
        c, cfg, K=K, t0=init.t, x0=init.x, edge0=init.i, l0=init.l,
        path_ids=np.array([path_index], dtype=np.uint64), store=True,
    )
    return res.paths[0]


def map_path_blocks(n_paths: int, workers: int, fn: Callable[[int, int], dict]):
    """Run fn(lo, hi) over path-index blocks, possibly on worker threads,
    and stitch per-path arrays back together in index order.

    Results are identical for any worker count because every path owns its
    random stream and blocks are merged positionally.
    """
    if n_paths == 0:
        return {}
    workers = max(1, int(workers))
    if workers == 1:
        return fn(0, n_paths)
    bounds = np.linspace(0, n_paths, workers + 1).astype(int)
    blocks = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda b: fn(b[0], b[1]), blocks))
    out = {}
    for key in parts[0]:
        vals = [p[key] for p in parts]
        if isinstance(vals[0], list):
            out[key] = [item for v in vals for item in v]
        else:
            out[key] = np.concatenate(vals)
    return out


def simulate_batch(c: CoefficientSet, init: SpiderState, cfg: SimConfig,
                   workers: int = 1) -> BatchResult:
    """cfg.n_paths independent paths from a common initial state."""
    K = cfg.n_steps(init.t)

    def block(lo, hi):
        res = run_batch(
            c, cfg, K=K, t0=init.t, x0=init.x, edge0=init.i, l0=init.l,
            path_ids=np.arange(lo, hi, dtype=np.uint64), store=cfg.store_paths,
        )
        out = {"t": res.t, "x": res.x, "edge": res.edge, "l": res.l}
        if cfg.store_paths:
            out["paths"] = res.paths
        return out

    if cfg.n_paths == 0:
        empty = np.empty(0)
        return BatchResult(t=empty, x=empty.copy(), edge=np.empty(0, dtype=np.int64),
                           l=empty.copy(), paths=[] if cfg.store_paths else None)
    parts = map_path_blocks(cfg.n_paths, workers, block)
    return BatchResult(t=parts["t"], x=parts["x"], edge=parts["edge"], l=parts["l"],
                       paths=parts.get("paths"))


def first_hit(c: CoefficientSet, init: SpiderState, cfg: SimConfig, level: float,
              workers: int = 1) -> FirstHitResult:
    """First grid time with x >= level for each path, censored at T."""
    if level < cfg.delta_shell:
        raise SimulationError("hitting level must be >= delta_shell")
    K = cfg.n_steps(init.t)

    def block(lo, hi):
        res = run_batch(
            c, cfg, K=K, t0=init.t, x0=init.x, edge0=init.i, l0=init.l,
            path_ids=np.arange(lo, hi, dtype=np.uint64), stop_level=level,
        )
        return {"theta": res.theta, "edge": res.edge, "l": res.l,
                "censored": res.censored}

    parts = map_path_blocks(max(cfg.n_paths, 1), workers, block)
    return FirstHitResult(theta=parts["theta"], edge=parts["edge"], l=parts["l"],
                          censored=parts["censored"], level=level)
