import math

import numpy as np
import pytest

from spidersim.network import constant_coefficients
from spidersim.simulator import SimConfig, SpiderState, simulate_batch, simulate_path
from spidersim.verify import (
    EstimatorReport,
    StoppingSpec,
    atom_test,
    constant_function,
    identity_function,
    ito_convergence,
    ito_residual,
    ks_2samp,
    make_battery,
    martingale_residual,
    martingale_residual_paths,
    mean_exit_stats,
    normal_cdf,
    scattering_distribution,
    strong_markov_test,
)


def _c(I=2, alpha=None, b=0.0):
    return constant_coefficients(I, sigma=1.0, b=b, alpha=alpha)


def test_ito_residual_exact_for_constant_and_identity():
    c = _c()
    p = simulate_path(c, SpiderState(0.0, 0.2, 1, 0.0), SimConfig(h=1e-3, T=1.0, seed=3))
    assert ito_residual(p, c, constant_function(2, 4.0)) == 0.0
    assert ito_residual(p, c, identity_function(2)) < 1e-12
    assert p.contact.any()  # the identity check covered vertex visits


def test_ito_residual_shrinks_with_h_on_matched_skeletons():
    c = _c(I=3, alpha=[0.5, 0.3, 0.2])
    f = make_battery(3)[0]
    rep = ito_convergence(c, SpiderState(0.0, 0.3, 1, 0.0), f,
                          [1e-2, 1e-3, 1e-4], T=0.5, n_paths=24, seed=12)
    assert rep.passed
    vals = rep.estimates["mean_max_residual"]
    assert vals[0] > vals[1] > vals[2]


def test_martingale_residual_constant_function_is_exact():
    c = _c()
    cfg = SimConfig(h=2e-3, T=0.5, n_paths=50, seed=2)
    rep = martingale_residual(c, SpiderState(0.0, 0.1, 1, 0.0), cfg,
                              constant_function(2, 3.0), 0.0, 0.5)
    assert rep.estimates["mean"][0] == 0.0
    assert rep.passed


def test_martingale_streaming_matches_stored_paths():
    c = _c(I=2, alpha=[0.7, 0.3])
    cfg = SimConfig(h=2e-3, T=0.5, n_paths=40, seed=6, store_paths=True)
    init = SpiderState(0.0, 0.0, 1, 0.0)
    f = make_battery(2)[1]
    res = simulate_batch(c, init, cfg)
    per_path = martingale_residual_paths(res.paths, c, f, 0.0, 0.5)
    rep = martingale_residual(c, init, cfg, f, 0.0, 0.5)
    assert rep.estimates["mean"][0] == pytest.approx(per_path.mean(), abs=1e-12)


def test_martingale_residual_battery_passes():
    c = _c(I=2, alpha=[0.6, 0.4])
    cfg = SimConfig(h=1e-3, T=0.5, n_paths=3000, seed=8)
    rep = martingale_residual(c, SpiderState(0.0, 0.0, 1, 0.0), cfg,
                              make_battery(2), 0.0, 0.5)
    assert rep.passed, rep.estimates


def test_martingale_window_inside_horizon():
    c = _c()
    cfg = SimConfig(h=1e-2, T=0.5, n_paths=20, seed=2)
    rep = martingale_residual(c, SpiderState(0.0, 0.5, 1, 0.0), cfg,
                              identity_function(2), 0.1, 0.4)
    assert abs(rep.estimates["mean"][0]) < 0.2


def test_ks_two_sample_behaviour():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(2500)
    b = rng.standard_normal(2500)
    d, p = ks_2samp(a, b)
    assert p > 0.01
    d, p = ks_2samp(a, b + 1.0)
    assert p < 1e-10
    d, p = ks_2samp(a, a)
    assert d == 0.0 and p == 1.0


def test_normal_cdf():
    assert normal_cdf(0.0) == pytest.approx(0.5)
    assert normal_cdf(1.96) == pytest.approx(0.975, abs=1e-3)


def test_scattering_preconditions():
    c = _c()
    cfg = SimConfig(h=1e-5, T=0.05, delta_shell=0.02, seed=0)
    with pytest.raises(ValueError, match="delta"):
        scattering_distribution(c, 0.0, 0.0, 0.03, 10**4, cfg)
    with pytest.raises(ValueError, match="1e4"):
        scattering_distribution(c, 0.0, 0.0, 0.05, 100, cfg)


def test_scattering_symmetric_case():
    c = _c(I=2)
    cfg = SimConfig(h=1e-5, T=0.05, delta_shell=1e-3, seed=30)
    rep = scattering_distribution(c, 0.0, 0.0, 0.02, 12000, cfg)
    assert rep.passed
    assert rep.details["censored"] == 0
    assert sum(rep.estimates["freq"]) == pytest.approx(1.0)


def test_mean_exit_stats_driftless():
    c = _c()
    cfg = SimConfig(h=1e-5, T=0.2, seed=40)
    rep = mean_exit_stats(c, 0.0, 0.0, [0.04, 0.02], 3000, cfg)
    rows = rep.estimates["rows"]
    assert all(0.85 < r["l_ratio"] < 1.2 for r in rows)
    assert rep.details["theta_pass"]


def test_mean_exit_stats_drift_lowers_local_time():
    # outward drift helps the exit, so less local time is needed
    cfg = SimConfig(h=1e-5, T=0.2, seed=41)
    rep0 = mean_exit_stats(_c(), 0.0, 0.0, [0.02], 3000, cfg)
    rep1 = mean_exit_stats(_c(b=1.0), 0.0, 0.0, [0.02], 3000, cfg)
    assert (rep1.estimates["rows"][0]["l_ratio"]
            < rep0.estimates["rows"][0]["l_ratio"])


def test_atom_test_monotone_and_oracle():
    c = _c()
    cfg = SimConfig(h=5e-4, T=1.0, n_paths=8000, seed=50)
    res = simulate_batch(c, SpiderState(0.0, 0.0, 1, 0.0), cfg)
    oracle = lambda d: 2.0 * normal_cdf(d) - 1.0
    rep = atom_test(res.x, [0.1, 0.05, 0.02], oracle=oracle, seed=50)
    assert rep.passed, rep.details
    phat = rep.estimates["p_hat"]
    assert phat[0] >= phat[1] >= phat[2]


def test_atom_test_far_from_vertex():
    rep = atom_test(np.full(500, 3.0), [0.1, 0.05], seed=0)
    assert rep.estimates["p_hat"] == [0.0, 0.0]


def test_strong_markov_fixed_time():
    c = _c()
    cfg = SimConfig(h=1e-3, T=0.75, seed=60)
    rep = strong_markov_test(c, StoppingSpec("fixed_time", time=0.25), "x",
                             0.25, 2500, cfg, SpiderState(0.0, 0.5, 1, 0.0))
    assert rep.details["censored_frac"] == 0.0
    assert rep.passed, rep.estimates


def test_strong_markov_hitting_and_local_time_functional():
    c = _c(b=-0.5)
    cfg = SimConfig(h=1e-3, T=2.0, seed=61)
    rep = strong_markov_test(c, StoppingSpec("hitting", level=0.4), "l",
                             0.25, 2500, cfg, SpiderState(0.0, 0.8, 1, 0.0))
    assert rep.details["censored_frac"] < 0.2
    assert rep.passed, rep.estimates


def test_strong_markov_flags_excessive_censoring():
    c = _c()
    cfg = SimConfig(h=1e-3, T=0.5, seed=62)
    rep = strong_markov_test(c, StoppingSpec("hitting", level=3.5), "x",
                             0.25, 400, cfg, SpiderState(0.0, 0.2, 1, 0.0))
    assert rep.details["flagged"]
    assert not rep.passed


def test_report_json_round_trip():
    rep = EstimatorReport(name="demo", estimates={"v": np.float64(1.5)},
                          stderr={"v": np.float64(0.1)}, n=10, passed=True,
                          seed=3, details={"arr": np.arange(3)})
    doc = rep.to_json()
    assert doc["estimates"]["v"] == 1.5
    assert doc["details"]["arr"] == [0, 1, 2]
    assert doc["pass"] is True
