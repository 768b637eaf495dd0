"""Star network geometry, coefficient families and their admissibility checks.

The state space is a bundle of I half-lines glued at a single junction.  A
point is a pair (x, i) with x >= 0 and i the ray label in 1..I; every (0, i)
is the same junction point.  Coefficient families b_i, sigma_i depend on
(t, x, l) and the edge-selection weights alpha depend on (t, l), where l is
the junction local time of the process.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "EdgeIndex",
    "NetworkPoint",
    "CoefficientBounds",
    "CoefficientSet",
    "SamplingPlan",
    "ClauseResult",
    "ValidationReport",
    "TestFunction",
    "TfTerm",
    "distance",
    "validate_coefficients",
    "constant_coefficients",
]


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeIndex:
    """Ray label, 1-based."""

    value: int

    def __post_init__(self):
        if not isinstance(self.value, (int, np.integer)) or self.value < 1:
            raise NetworkError(f"edge index must be a positive integer, got {self.value!r}")


@dataclass(frozen=True)
class NetworkPoint:
    """Point (x, i) on the star; all (0, i) compare equal (the junction)."""

    x: float
    i: int

    def __post_init__(self):
        if self.x < 0:
            raise NetworkError(f"position must be nonnegative, got {self.x}")
        if self.i < 1:
            raise NetworkError(f"edge index must be >= 1, got {self.i}")

    def __eq__(self, other):
        if not isinstance(other, NetworkPoint):
            return NotImplemented
        if self.x == 0.0 and other.x == 0.0:
            return True
        return self.x == other.x and self.i == other.i

    def __hash__(self):
        return hash((self.x, 0 if self.x == 0.0 else self.i))

    @property
    def at_vertex(self) -> bool:
        return self.x == 0.0


def distance(p: NetworkPoint, q: NetworkPoint) -> float:
    """Tree metric: |x - y| on a common ray, x + y across rays."""
    if p.i == q.i or p.x == 0.0 or q.x == 0.0:
        return abs(p.x - q.x)
    return p.x + q.x


@dataclass(frozen=True)
class CoefficientBounds:
    """Admissibility constants: floor for alpha, floor for sigma, and the
    sup/Lipschitz ceilings for b, sigma, alpha."""

    a_lower: float
    sigma_lower: float
    b_bound: float
    sigma_bound: float
    alpha_lip: float

    def __post_init__(self):
        if not (0 < self.sigma_lower <= self.sigma_bound):
            raise NetworkError("need 0 < sigma_lower <= sigma_bound")
        if self.a_lower <= 0:
            raise NetworkError("need a_lower > 0")


@dataclass(frozen=True)
class CoefficientSet:
    """Per-edge drift/diffusion evaluators and the edge-selection weights.

    b[e] and sigma[e] map (t, x, l) -> real, alpha maps (t, l) -> weight
    vector of length I.  Evaluators must be pure and accept numpy arrays.
    """

    I: int
    b: tuple[Callable, ...]
    sigma: tuple[Callable, ...]
    alpha: Callable
    bounds: CoefficientBounds
    validation: "ValidationReport | None" = field(default=None, compare=False)

    def __post_init__(self):
        if self.I < 2:
            raise NetworkError(f"need at least two edges, got I={self.I}")
        if len(self.b) != self.I or len(self.sigma) != self.I:
            raise NetworkError("need one b and one sigma evaluator per edge")

    def drift(self, edge: int, t, x, l):
        return np.asarray(self.b[edge - 1](t, x, l), dtype=np.float64)

    def diffusion(self, edge: int, t, x, l):
        return np.asarray(self.sigma[edge - 1](t, x, l), dtype=np.float64)

    def alpha_matrix(self, t, l) -> np.ndarray:
        """Weights as an (n, I) array for 1-d inputs (or (I,) for scalars).

        The evaluator must return shape (n, I) for array inputs or (I,) for
        a constant family; nothing else is accepted (no transposition
        guessing, which would be ambiguous exactly when n == I).
        """
        t = np.asarray(t, dtype=np.float64)
        l = np.asarray(l, dtype=np.float64)
        out = np.asarray(self.alpha(t, l), dtype=np.float64)
        if t.ndim == 0:
            if out.shape not in ((self.I,), (1, self.I)):
                raise NetworkError(
                    f"alpha evaluator returned shape {out.shape}, expected ({self.I},)")
            return out.reshape(self.I)
        if out.shape == (self.I,):
            return np.broadcast_to(out, (t.size, self.I)).copy()
        if out.shape != (t.size, self.I):
            raise NetworkError(
                f"alpha evaluator returned shape {out.shape}, expected ({t.size}, {self.I})")
        return out


def constant_coefficients(
    I: int,
    sigma: float | Sequence[float] = 1.0,
    b: float | Sequence[float] = 0.0,
    alpha: Sequence[float] | None = None,
    bounds: CoefficientBounds | None = None,
) -> CoefficientSet:
    """Convenience constructor for constant-coefficient sets."""
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (I,)).copy()
    drift = np.broadcast_to(np.asarray(b, dtype=float), (I,)).copy()
    if alpha is None:
        alpha = np.full(I, 1.0 / I)
    al = np.asarray(alpha, dtype=float)
    if al.shape != (I,):
        raise NetworkError(f"alpha must have length {I}")
    if abs(al.sum() - 1.0) > 1e-12:
        raise NetworkError("alpha must sum to 1")
    if bounds is None:
        bounds = CoefficientBounds(
            a_lower=max(min(al) * 0.9, 1e-9),
            sigma_lower=min(sig) * 0.9,
            b_bound=max(np.max(np.abs(drift)), 1e-9),
            sigma_bound=max(sig),
            alpha_lip=1e-9,
        )

    def make_const(v):
        return lambda t, x, l: np.broadcast_to(np.float64(v), np.broadcast_shapes(
            np.shape(t), np.shape(x), np.shape(l))).copy()

    def alpha_fn(t, l, _al=al):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return _al.copy()
        return np.broadcast_to(_al, (t.size, I)).copy()

    return CoefficientSet(
        I=I,
        b=tuple(make_const(v) for v in drift),
        sigma=tuple(make_const(v) for v in sig),
        alpha=alpha_fn,
        bounds=bounds,
    )


@dataclass(frozen=True)
class SamplingPlan:
    """Grid over (t, x, l) on which the admissibility clauses are sampled."""

    t: np.ndarray
    x: np.ndarray
    l: np.ndarray

    @staticmethod
    def default(T: float = 1.0, x_max: float = 4.0, l_max: float = 4.0, n: int = 9) -> "SamplingPlan":
        return SamplingPlan(
            t=np.linspace(0.0, T, n),
            x=np.linspace(0.0, x_max, n),
            l=np.linspace(0.0, l_max, n),
        )

    def nonempty(self) -> bool:
        return self.t.size > 0 and self.x.size > 0 and self.l.size > 0


@dataclass(frozen=True)
class ClauseResult:
    name: str
    passed: bool
    worst: float
    limit: float
    where: tuple


@dataclass(frozen=True)
class ValidationReport:
    clauses: tuple[ClauseResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def clause(self, name: str) -> ClauseResult:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        lines = []
        for c in self.clauses:
            tag = "pass" if c.passed else "FAIL"
            lines.append(f"({c.name}) {tag}: worst {c.worst:.6g} vs limit {c.limit:.6g} at {c.where}")
        return "\n".join(lines)


def _max_quotient(values: np.ndarray, coords: np.ndarray, axis: int):
    """Largest |difference quotient| along one axis of a sampled field."""
    if values.shape[axis] < 2:
        return 0.0, ()
    dv = np.abs(np.diff(values, axis=axis))
    dc = np.diff(coords)
    shape = [1] * values.ndim
    shape[axis] = dc.size
    q = dv / dc.reshape(shape)
    idx = np.unravel_index(np.argmax(q), q.shape)
    return float(q[idx]), idx


def validate_coefficients(c: CoefficientSet, plan: SamplingPlan | None = None) -> ValidationReport:
    """Sampled check of the admissibility clauses.

    (A): alpha sums to one and every weight is >= a_lower.
    (E): every sigma_i >= sigma_lower.
    (R-i)/(R-ii): sup and difference quotients of b_i / sigma_i within bounds.
    (R-iii): difference quotients of alpha within alpha_lip.

    Passing is monotone in the plan: more sample points can only move a
    clause from pass to fail.
    """
    if c.I < 2:
        raise NetworkError("need at least two edges")
    if plan is None:
        plan = SamplingPlan.default()
    if not plan.nonempty():
        raise NetworkError("sampling plan is empty")
    tg, xg, lg = plan.t, plan.x, plan.l
    bounds = c.bounds

    # -- clause (A): weights on the (t, l) grid
    tt, ll = np.meshgrid(tg, lg, indexing="ij")
    amat = c.alpha_matrix(tt.ravel(), ll.ravel())
    if amat.shape != (tt.size, c.I):
        raise NetworkError(
            f"alpha evaluator returned wrong-length vector: {amat.shape[-1]} != {c.I}"
        )
    sums = amat.sum(axis=1)
    sum_dev = float(np.max(np.abs(sums - 1.0)))
    amin = float(np.min(amat))
    a_ok = sum_dev <= 1e-12 and amin >= bounds.a_lower
    idx = np.unravel_index(np.argmin(amat), amat.shape)
    clause_a = ClauseResult(
        "A", a_ok, worst=amin if sum_dev <= 1e-12 else -sum_dev, limit=bounds.a_lower,
        where=(float(tt.ravel()[idx[0]]), float(ll.ravel()[idx[0]]), int(idx[1]) + 1),
    )

    # -- per-edge fields on the (t, x, l) grid
    T3, X3, L3 = np.meshgrid(tg, xg, lg, indexing="ij")
    axis_names = ("t", "x", "l")
    sig_min = np.inf
    sig_min_where = ()
    sup_q = {"b": 0.0, "s": 0.0}
    sup_q_where = {"b": (), "s": ()}
    for e in range(1, c.I + 1):
        bf = c.drift(e, T3, X3, L3)
        sf = c.diffusion(e, T3, X3, L3)
        m = float(np.min(sf))
        if m < sig_min:
            sig_min = m
            w = np.unravel_index(np.argmin(sf), sf.shape)
            sig_min_where = (e, float(tg[w[0]]), float(xg[w[1]]), float(lg[w[2]]))
        for key, field_vals in (("b", bf), ("s", sf)):
            qs = [(float(np.max(np.abs(field_vals))), ("sup", e))]
            for axis, coords in ((0, tg), (1, xg), (2, lg)):
                q, where = _max_quotient(field_vals, coords, axis)
                qs.append((q, (axis_names[axis], e, where)))
            worst, where = max(qs, key=lambda p: p[0])
            if worst > sup_q[key]:
                sup_q[key], sup_q_where[key] = worst, where
    sup_q_b, sup_q_b_where = sup_q["b"], sup_q_where["b"]
    sup_q_s, sup_q_s_where = sup_q["s"], sup_q_where["s"]

    clause_e = ClauseResult("E", sig_min >= bounds.sigma_lower, worst=sig_min,
                            limit=bounds.sigma_lower, where=sig_min_where)
    clause_ri = ClauseResult("R-i", sup_q_b <= bounds.b_bound, worst=sup_q_b,
                             limit=bounds.b_bound, where=sup_q_b_where)
    clause_rii = ClauseResult("R-ii", sup_q_s <= bounds.sigma_bound, worst=sup_q_s,
                              limit=bounds.sigma_bound, where=sup_q_s_where)

    # -- clause (R-iii): alpha quotients on the (t, l) grid
    afield = c.alpha_matrix(T3[:, 0, :].ravel(), L3[:, 0, :].ravel()).reshape(
        tg.size, lg.size, c.I)
    worst_al = 0.0
    where_al = ()
    for axis, coords in ((0, tg), (1, lg)):
        q, where = _max_quotient(afield, coords, axis)
        if q > worst_al:
            worst_al, where_al = q, ("tl"[axis],) + tuple(where)
    clause_riii = ClauseResult("R-iii", worst_al <= bounds.alpha_lip, worst=worst_al,
                               limit=bounds.alpha_lip, where=where_al)

    return ValidationReport(clauses=(clause_a, clause_e, clause_ri, clause_rii, clause_riii))


# ---------------------------------------------------------------------------
# test functions with analytic derivatives
# ---------------------------------------------------------------------------


def _poly_val(coeffs: tuple[float, ...], z):
    out = np.zeros_like(np.asarray(z, dtype=np.float64))
    for c in reversed(coeffs):
        out = out * z + c
    return out


def _poly_der(coeffs: tuple[float, ...]) -> tuple[float, ...]:
    return tuple(k * c for k, c in enumerate(coeffs))[1:] or (0.0,)


@dataclass(frozen=True)
class TfTerm:
    """One product term: edge weight * P(x) * Q(l) * tau(t).

    tau is either a polynomial in t (time_poly) or sin(omega*t + phase).
    If the edge weights are not all equal, P must vanish at the vertex so
    the full function stays continuous there.
    """

    edge_coeffs: tuple[float, ...]
    x_poly: tuple[float, ...]
    l_poly: tuple[float, ...] = (1.0,)
    time_poly: tuple[float, ...] | None = None
    sin_omega: float | None = None
    sin_phase: float = 0.0

    def __post_init__(self):
        if self.time_poly is None and self.sin_omega is None:
            object.__setattr__(self, "time_poly", (1.0,))
        if self.time_poly is not None and self.sin_omega is not None:
            raise NetworkError("term takes either time_poly or sin_omega, not both")
        if len(set(self.edge_coeffs)) > 1 and self.x_poly[0] != 0.0:
            raise NetworkError("edge-dependent term must vanish at the vertex (x_poly[0] == 0)")

    def _tau(self, t):
        if self.time_poly is not None:
            return _poly_val(self.time_poly, t)
        return np.sin(self.sin_omega * np.asarray(t, dtype=np.float64) + self.sin_phase)

    def _dtau(self, t):
        if self.time_poly is not None:
            return _poly_val(_poly_der(self.time_poly), t)
        return self.sin_omega * np.cos(self.sin_omega * np.asarray(t, dtype=np.float64) + self.sin_phase)


@dataclass(frozen=True)
class TestFunction:
    """Smooth function on the network with analytic partial derivatives.

    Built from finite sums of separable terms, so d/dt, d/dx, d2/dx2 and
    d/dl are exact.  The vertex value and the vertex l-derivative are
    edge-independent by construction.
    """

    __test__ = False  # not a pytest class

    I: int
    terms: tuple[TfTerm, ...]

    def __post_init__(self):
        for term in self.terms:
            if len(term.edge_coeffs) != self.I:
                raise NetworkError("every term needs one coefficient per edge")

    def _acc(self, edge, t, x, l, px_fn, pl_fn, tau_fn):
        edge = np.asarray(edge)
        out = 0.0
        for term in self.terms:
            w = np.asarray(term.edge_coeffs, dtype=np.float64)[edge - 1]
            out = out + w * px_fn(term, x) * pl_fn(term, l) * tau_fn(term, t)
        return out

    def value(self, edge, t, x, l):
        return self._acc(edge, t, x, l,
                         lambda tm, z: _poly_val(tm.x_poly, z),
                         lambda tm, z: _poly_val(tm.l_poly, z),
                         lambda tm, z: tm._tau(z))

    def dt(self, edge, t, x, l):
        return self._acc(edge, t, x, l,
                         lambda tm, z: _poly_val(tm.x_poly, z),
                         lambda tm, z: _poly_val(tm.l_poly, z),
                         lambda tm, z: tm._dtau(z))

    def dx(self, edge, t, x, l):
        return self._acc(edge, t, x, l,
                         lambda tm, z: _poly_val(_poly_der(tm.x_poly), z),
                         lambda tm, z: _poly_val(tm.l_poly, z),
                         lambda tm, z: tm._tau(z))

    def dxx(self, edge, t, x, l):
        return self._acc(edge, t, x, l,
                         lambda tm, z: _poly_val(_poly_der(_poly_der(tm.x_poly)), z),
                         lambda tm, z: _poly_val(tm.l_poly, z),
                         lambda tm, z: tm._tau(z))

    def dl(self, edge, t, x, l):
        return self._acc(edge, t, x, l,
                         lambda tm, z: _poly_val(tm.x_poly, z),
                         lambda tm, z: _poly_val(_poly_der(tm.l_poly), z),
                         lambda tm, z: tm._tau(z))

    # vertex views (edge-independent where the class guarantees it)

    def value_vertex(self, t, l):
        return self.value(1, t, np.zeros_like(np.asarray(l, dtype=float)), l)

    def dl_vertex(self, t, l):
        return self.dl(1, t, np.zeros_like(np.asarray(l, dtype=float)), l)

    def dx_vertex(self, edge, t, l):
        return self.dx(edge, t, np.zeros_like(np.asarray(l, dtype=float)), l)

    def check_continuity(self, t, l, tol: float = 1e-12) -> bool:
        vals = [self.value(e, t, np.zeros_like(np.asarray(l, dtype=float)), l)
                for e in range(1, self.I + 1)]
        ref = vals[0]
        return all(np.max(np.abs(v - ref)) <= tol for v in vals[1:])

    def check_derivatives(self, rng: np.random.Generator, n: int = 100,
                          step: float = 1e-4, tol: float = 1e-6) -> float:
        """Largest gap between declared derivatives and central differences."""
        t = rng.uniform(0.1, 0.9, n)
        x = rng.uniform(0.1, 2.0, n)
        l = rng.uniform(0.1, 2.0, n)
        e = rng.integers(1, self.I + 1, n)
        worst = 0.0
        pairs = [
            (self.dt, lambda s: self.value(e, t + s, x, l)),
            (self.dx, lambda s: self.value(e, t, x + s, l)),
            (self.dl, lambda s: self.value(e, t, x, l + s)),
        ]
        for der, bump in pairs:
            fd = (bump(step) - bump(-step)) / (2 * step)
            worst = max(worst, float(np.max(np.abs(der(e, t, x, l) - fd))))
        fd2 = (self.value(e, t, x + step, l) - 2 * self.value(e, t, x, l)
               + self.value(e, t, x - step, l)) / step**2
        worst = max(worst, float(np.max(np.abs(self.dxx(e, t, x, l) - fd2))))
        if worst > tol:
            raise NetworkError(f"analytic derivatives disagree with finite differences by {worst}")
        return worst
