import numpy as np
import pytest

from spidersim.network import (
    CoefficientBounds,
    CoefficientSet,
    NetworkError,
    NetworkPoint,
    SamplingPlan,
    TestFunction,
    TfTerm,
    constant_coefficients,
    distance,
    validate_coefficients,
)


def test_distance_examples():
    assert distance(NetworkPoint(1, 1), NetworkPoint(2, 1)) == 1
    assert distance(NetworkPoint(1, 1), NetworkPoint(2, 2)) == 3
    assert distance(NetworkPoint(0, 1), NetworkPoint(0, 3)) == 0


def test_junction_equivalence():
    assert NetworkPoint(0, 1) == NetworkPoint(0, 7)
    assert NetworkPoint(0.5, 1) != NetworkPoint(0.5, 2)
    assert hash(NetworkPoint(0, 1)) == hash(NetworkPoint(0, 5))


def test_distance_is_a_metric_on_random_triples():
    rng = np.random.default_rng(3)
    pts = [NetworkPoint(float(x), int(e)) for x, e in
           zip(rng.uniform(0, 3, 60), rng.integers(1, 4, 60))]
    pts += [NetworkPoint(0.0, 1), NetworkPoint(0.0, 2)]
    for p in pts:
        assert distance(p, p) == 0
    for _ in range(400):
        p, q, r = (pts[i] for i in rng.integers(0, len(pts), 3))
        assert distance(p, q) >= 0
        assert distance(p, q) == distance(q, p)
        assert distance(p, r) <= distance(p, q) + distance(q, r) + 1e-12
        if distance(p, q) == 0:
            assert p == q


def test_validate_constant_coefficients_pass():
    c = constant_coefficients(
        2, sigma=1.0, b=0.0, alpha=[0.5, 0.5],
        bounds=CoefficientBounds(a_lower=0.4, sigma_lower=0.5, b_bound=0.1,
                                 sigma_bound=1.0, alpha_lip=0.1))
    report = validate_coefficients(c)
    assert report.passed
    assert all(cl.passed for cl in report.clauses)
    assert {cl.name for cl in report.clauses} == {"A", "E", "R-i", "R-ii", "R-iii"}


def test_validate_degenerate_alpha_fails_clause_a():
    c = constant_coefficients(2, alpha=[1.0, 0.0],
                              bounds=CoefficientBounds(0.1, 0.5, 1.0, 1.0, 1.0))
    report = validate_coefficients(c)
    assert not report.clause("A").passed
    assert not report.passed


def test_validate_vanishing_sigma_fails_clause_e():
    base = constant_coefficients(2)
    c = CoefficientSet(
        I=2,
        b=base.b,
        sigma=(lambda t, x, l: np.asarray(x, dtype=float), base.sigma[1]),
        alpha=base.alpha,
        bounds=CoefficientBounds(a_lower=0.4, sigma_lower=0.1, b_bound=1.0,
                                 sigma_bound=5.0, alpha_lip=1.0),
    )
    report = validate_coefficients(c)
    assert not report.clause("E").passed


def test_validate_rejects_wrong_alpha_length():
    base = constant_coefficients(2)
    c = CoefficientSet(I=2, b=base.b, sigma=base.sigma,
                       alpha=lambda t, l: np.full((np.size(t), 3), 1 / 3),
                       bounds=base.bounds)
    with pytest.raises(NetworkError):
        validate_coefficients(c)


def test_validate_rejects_single_edge():
    with pytest.raises(NetworkError):
        constant_coefficients(1)


def test_more_samples_never_rescue_a_failure():
    # Lipschitz-in-l violation visible only on the fine grid
    base = constant_coefficients(2)
    c = CoefficientSet(
        I=2, b=base.b,
        sigma=(lambda t, x, l: 1.0 + 0.9 * np.sin(8.0 * np.asarray(l)), base.sigma[1]),
        alpha=base.alpha,
        bounds=CoefficientBounds(a_lower=0.4, sigma_lower=0.05, b_bound=1.0,
                                 sigma_bound=2.0, alpha_lip=1.0),
    )
    coarse = validate_coefficients(c, SamplingPlan.default(n=3))
    fine = validate_coefficients(c, SamplingPlan.default(n=41))
    assert fine.clause("R-ii").worst >= coarse.clause("R-ii").worst
    if not coarse.passed:
        assert not fine.passed


def _battery_function():
    return TestFunction(I=2, terms=(
        TfTerm(edge_coeffs=(1.0, -0.5), x_poly=(0.0, 1.0, 0.25),
               l_poly=(1.0, 0.5), time_poly=(1.0, 2.0)),
        TfTerm(edge_coeffs=(0.3, 0.3), x_poly=(1.0, 0.0, 0.5),
               l_poly=(0.0, 1.0), sin_omega=1.7, sin_phase=0.2),
    ))


def test_test_function_vertex_continuity():
    f = _battery_function()
    t = np.linspace(0, 1, 7)
    l = np.linspace(0, 2, 7)
    assert f.check_continuity(t, l)
    # edge-dependent vertex values are rejected at construction
    with pytest.raises(NetworkError):
        TfTerm(edge_coeffs=(1.0, 2.0), x_poly=(1.0, 1.0))


def test_test_function_derivatives_match_finite_differences():
    f = _battery_function()
    worst = f.check_derivatives(np.random.default_rng(11), n=100, step=1e-4, tol=1e-6)
    assert worst <= 1e-6


def test_vertex_views_are_edge_independent():
    f = _battery_function()
    t = np.array([0.3, 0.9])
    l = np.array([0.0, 1.4])
    v1 = f.value(1, t, np.zeros(2), l)
    v2 = f.value(2, t, np.zeros(2), l)
    assert np.allclose(v1, v2, atol=1e-14)
    assert np.allclose(f.dl(1, t, np.zeros(2), l), f.dl(2, t, np.zeros(2), l), atol=1e-14)
    # slopes genuinely differ across edges at the vertex
    assert not np.allclose(f.dx_vertex(1, t, l), f.dx_vertex(2, t, l))
