import json
import math

import jsonschema
import numpy as np
import pytest

from phi4flow.dynamics import Phi4Model, simulate
from phi4flow.estimators import (
    LAMBDA_GRID,
    REPORT_SCHEMA,
    CylinderFunctional,
    EstimateReport,
    ReplicaAllocator,
    SimSettings,
    absorption_coefficients,
    be_identity_check,
    be_s_grid,
    choose_lambda,
    contraction_rate,
    g_drift,
    gaussian_gap_ratio,
    gaussian_variance,
    heat_sobolev_norm,
    lambda_feasible,
    semigroup_gradient,
    shipped_functionals,
    smooth_test_function,
    smoothing_exponent,
    spectral_gap_estimate,
    verify_energy_inequality,
)
from phi4flow.noise import NoiseStream
from phi4flow.spectral import Field, TorusGrid, heat_semigroup
from phi4flow.stats import linear_fit
from phi4flow.stopping import StoppingConfig


def g_oracle(w1, w2, gv, c, lam, a):
    """Term-by-term evaluation of the drift, written out independently."""
    terms = [
        (1 / (2 * lam)) * w1 ** 2,
        ((1 + a) / (2 * lam ** ((1 + a) / 2))) * w1 ** (2 / (1 + a)) * gv ** (2 * a / (1 + a)),
        ((1 - a) / (2 ** (1 / (1 - a)) * lam ** (2 / (1 - a)))) * w1 ** (2 / (1 - a)),
        w2,
        (2 ** a) * ((2 - a) / (2 * lam ** (2 / (2 - a)))) * w2 ** (2 / (2 - a)),
        3 * c,
    ]
    return math.fsum(terms)


# -- drift and lambda ---------------------------------------------------------------

def test_g_drift_hand_values():
    assert g_drift(0, 0, 0, 0, 1.0, 0.5) == 0
    # 1/2 + 0 + 1/8 + 1 + sqrt(2) * 3/4
    want = 0.5 + 0.125 + 1.0 + math.sqrt(2) * 0.75
    assert abs(g_drift(1, 1, 0, 0, 1.0, 0.5) - want) <= 1e-12
    assert abs(want - 2.6857) < 1e-4
    assert abs(g_drift(1, 1, 1, 0, 1.0, 0.5) - 3.4357) < 1e-4
    with pytest.raises(ValueError):
        g_drift(1, 1, 0, 0, 0.0, 0.5)
    with pytest.raises(ValueError):
        g_drift(1, 1, 0, 0, 1.0, 1.0)


def test_g_drift_matches_oracle_and_is_monotone_in_lambda():
    rng = np.random.default_rng(0)
    for _ in range(200):
        w1, w2, gv, c = rng.uniform(0, 5, 4)
        lam, a = rng.uniform(0.01, 2), rng.uniform(0.01, 0.99)
        got = float(g_drift(w1, w2, gv, c, lam, a))
        assert abs(got - g_oracle(w1, w2, gv, c, lam, a)) <= 1e-12 * max(1.0, abs(got))
        assert g_drift(w1, w2, gv, c, 1.5 * lam, a) <= got * (1 + 1e-12)


def test_choose_lambda_feasibility():
    ch = choose_lambda(0.5)
    assert ch.lam in LAMBDA_GRID
    co = absorption_coefficients(ch.lam, 0.5)
    assert co["grad_I2"] <= 1 / 8 and co["grad_W2"] <= 1 / 8
    assert co["vJ_I2_I3"] <= 1 / 4 and co["vJ_I1"] <= 1 / 4
    below = LAMBDA_GRID[LAMBDA_GRID < ch.lam]
    assert all(lambda_feasible(lam, 0.5) for lam in below)
    above = LAMBDA_GRID[LAMBDA_GRID > ch.lam]
    assert not lambda_feasible(above[0], 0.5)
    with pytest.raises(ValueError):
        choose_lambda(0.0)


def test_c_alpha_profile():
    alphas = [0.001, 0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9]
    c = [choose_lambda(a).c_alpha for a in alphas]
    # grows without bound towards alpha = 1, tends to a finite limit as alpha -> 0
    assert all(b > a for a, b in zip(c, c[1:]))
    assert c[-1] > 1e10
    lam0 = choose_lambda(0.001).lam
    assert c[0] == pytest.approx(1 / (2 * lam0**2), rel=0.01)


# -- functionals and reports -------------------------------------------------------

def test_cylinder_gradient_matches_finite_differences():
    g = TorusGrid(16)
    rng = np.random.default_rng(1)
    u = g.project(g.fwd(rng.standard_normal((16, 16))))
    d = g.project(g.fwd(rng.standard_normal((16, 16))))
    for F in shipped_functionals(g):
        fd = (F.value(u + 1e-5 * d) - F.value(u - 1e-5 * d)) / 2e-5
        an = g.inner(F.gradient(u), d)
        assert abs(fd - an) <= 1e-6 * max(1.0, abs(an)), F.name
    with pytest.raises(ValueError):
        CylinderFunctional("x", g, np.array([d]), "cubic")
    with pytest.raises(ValueError):
        CylinderFunctional("x", g, np.array([d, d]), "quadratic", A=np.array([[1, 2], [0, 1]]))


def test_report_schema_and_serialization():
    rep = EstimateReport("demo", {"a": 1})
    rep.add_row(1.5, (1.0, 2.0), 10, t=0.1)
    rep.add_row(float("inf"), (np.float64(1.0), float("nan")), np.int64(3), t=0.2)
    rep.fits["slope"] = {"slope": -1.0}
    rep.add_verdict("x <= 1", True, 0.5)
    d = json.loads(rep.to_json())
    jsonschema.validate(d, REPORT_SCHEMA)
    assert d["rows"][1]["estimate"] is None
    assert rep.passed
    rep.add_verdict("y", False, None)
    assert not rep.passed
    csv = rep.to_csv().splitlines()
    assert csv[0] == "t,estimate,n,ci_low,ci_high"
    assert csv[1] == "0.1,1.5,10,1.0,2.0"
    bad = dict(d)
    bad["extra"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, REPORT_SCHEMA)


def test_replica_allocator_is_disjoint():
    a = ReplicaAllocator()
    r1, r2 = a.take(5), a.take(3)
    assert list(r1) == [0, 1, 2, 3, 4] and list(r2) == [5, 6, 7]


# -- energy inequality ----------------------------------------------------------------

def test_energy_inequality_potential_free_constant_mode():
    g = TorusGrid(16)
    cfg = StoppingConfig(math.inf, 0.1, 0.3)
    model = Phi4Model(1.0, coupling=0.0, renormalize=False)
    tr = simulate(g, model, np.zeros((16, 16)), 0.3, 1e-3, [NoiseStream(0, 0)], stopping=cfg)
    h = Field(g, np.ones((16, 16)))
    ch = verify_energy_inequality(tr, h, 0.25, 0.3)
    assert ch.passed
    # the heat flow is tight on the constant mode: only the drift integral is slack
    assert ch.interval_margin[0] >= 1 - 1e-12
    assert ch.chained_margin[0] >= 1 - 1e-12
    with pytest.raises(ValueError):
        verify_energy_inequality(simulate(g, model, np.zeros((16, 16)), 0.1, 1e-3,
                                          [NoiseStream(0, 0)]), h, 0.25, 0.3)


def test_energy_inequality_noisy_paths():
    g = TorusGrid(16)
    alpha = 0.3
    cfg = StoppingConfig(14.0, 0.1, alpha)
    f = Field.from_function(g, lambda x, y: np.sin(2 * np.pi * x) + 0.5 * np.cos(2 * np.pi * y))
    tr = simulate(g, Phi4Model(1.0), f, 0.3, 1e-3, [NoiseStream(5, r) for r in range(4)],
                  stopping=cfg)
    assert len(tr.restarts) >= 8
    h = Field.from_function(g, lambda x, y: np.cos(2 * np.pi * (x + y)) + 0.3)
    ch = verify_energy_inequality(tr, h, choose_lambda(alpha).lam, alpha)
    assert ch.passed, (ch.interval_margin, ch.chained_margin)
    assert np.all(np.isfinite(ch.c_empirical))


# -- operator norm fits ------------------------------------------------------------------

def test_potential_free_contraction_slope():
    sim = SimSettings(N=8, dt=1e-2, batch=2)
    rep = contraction_rate([2.0, 5.0], [0.1, 0.2, 0.3, 0.4], 2.0, 2, sim, coupling=0.0,
                           noise=False, budget=5)
    assert rep.fits["rates"] == pytest.approx([2.0, 5.0], abs=1e-6)
    assert abs(rep.fits["m_star_hat"]) <= 1e-6
    assert rep.passed
    with pytest.raises(ValueError):
        contraction_rate([2.0], [0.1, 0.2, 0.3], 2.0, 2, sim)


def test_heat_smoothing_exponent():
    g = TorusGrid(16)
    # brute-force multiplier sup over the active band
    brute = max((1 + (2 * np.pi) ** 2 * (a * a + b * b)) ** 0.25
                * math.exp(-0.01 * (1 + (2 * np.pi) ** 2 * (a * a + b * b)))
                for a in range(-7, 8) for b in range(-7, 8))
    assert heat_sobolev_norm(g, 1.0, 0.01, 0.5) == pytest.approx(brute, rel=1e-14)
    ts = [1e-4, 3e-4, 1e-3, 3e-3]
    sim = SimSettings(N=16, dt=1e-4, batch=1)
    rep = smoothing_exponent(1.0, 0.5, 0.05, ts, 2.0, 1, sim, coupling=0.0, noise=False,
                             budget=60)
    heat = -linear_fit(np.log(ts), [math.log(heat_sobolev_norm(g, 1.0, t, 0.5)) for t in ts]).slope
    # power iteration converges slowly on the nearly flat heat multiplier at short times
    assert rep.fits["exponent"]["exponent"] == pytest.approx(heat, abs=2e-3)
    assert abs(heat - 0.25) < 0.01
    rep0 = smoothing_exponent(1.0, 0.0, 0.05, ts, 2.0, 1, sim, coupling=0.0, noise=False,
                              budget=5)
    assert abs(rep0.fits["exponent"]["exponent"]) < 0.01
    with pytest.raises(ValueError):
        smoothing_exponent(1.0, 0.5, 0.2, ts, 2.0, 1, sim)


# -- semigroup gradient and BE identity ------------------------------------------------

def test_semigroup_gradient_t0_and_heat():
    g = TorusGrid(16)
    sim = SimSettings(N=16, dt=1e-3, batch=4)
    F = shipped_functionals(g)[1]
    f = Field.from_function(g, lambda x, y: np.sin(2 * np.pi * x))
    est = semigroup_gradient(F, f, 0.0, 8, sim)
    assert np.array_equal(est.mean, F.gradient(g.project(f.half)))
    lin = shipped_functionals(g)[0]
    est = semigroup_gradient(lin, f, 0.05, 4, sim, model=Phi4Model(2.0, coupling=0.0))
    want = heat_semigroup(Field.from_half(g, lin.hs[0]), 0.05, 2.0).half
    np.testing.assert_allclose(est.mean, want, atol=1e-13)
    other = semigroup_gradient(lin, f * 3.0, 0.05, 4, sim, model=Phi4Model(2.0, coupling=0.0))
    np.testing.assert_allclose(other.mean, est.mean, atol=1e-14)


def test_gradient_bound_constant_is_stable():
    # ||DP_t F|| <= C (t ^ 1)^{-(kappa+eps)/2} e^{-(m - m*) t} ||DF||_{H^-kappa} for linear F
    g = TorusGrid(8)
    sim = SimSettings(N=8, dt=2e-3, batch=16)
    m, kappa, eps, t = 5.0, 0.5, 0.1, 0.1
    rng = np.random.default_rng(3)
    ratios = []
    for k in range(10):
        modes = {(int(a), int(b)): float(c) for a, b, c in
                 zip(rng.integers(0, 3, 3), rng.integers(0, 3, 3), rng.uniform(0.2, 1, 3))}
        F = CylinderFunctional(f"lin{k}", g, np.array([smooth_test_function(g, modes)]), "linear")
        est = semigroup_gradient(F, np.zeros((8, 8)), t, 32, sim, model=Phi4Model(m),
                                 ids=range(32 * k, 32 * k + 32))
        lhs = math.sqrt(g.l2sq(est.mean))
        dfn = math.sqrt(float(np.sum(g.weights * (1 + g.k2) ** (-kappa) * np.abs(F.hs[0]) ** 2)))
        ratios.append(lhs / (t ** (-(kappa + eps) / 2) * math.exp(-m * t) * dfn))
    C = max(ratios[:5])
    assert max(ratios[5:]) <= 1.5 * C


def test_be_s_grid():
    s = be_s_grid(0.25, 8, 3)
    assert s[0] == 0 and s[-1] == 0.25 and np.all(np.diff(s) > 0)
    np.testing.assert_allclose(s[1:4], [0.25 / 64, 0.25 / 32, 0.25 / 16])


def test_be_gaussian_control_matches_closed_form():
    g = TorusGrid(16)
    sim = SimSettings(N=16, dt=2.5e-3, batch=50)
    F = shipped_functionals(g)[0]
    model = Phi4Model(2.0, coupling=0.0)
    t = 0.1
    res = be_identity_check(F, np.zeros((16, 16)), t, be_s_grid(t, 4, 2), 2000, sim, model,
                            outer=4, inner=2)
    exact = gaussian_variance(g, F.hs[0], 2.0, t)
    assert abs(res.lhs.mean - exact) <= 3 * res.lhs.se
    assert abs(res.rhs.mean - exact) <= 3 * res.rhs.se + 1e-12 * exact
    assert res.overlap
    tiny = be_identity_check(F, np.zeros((16, 16)), sim.dt, [0.0, sim.dt], 500, sim, model,
                             outer=4, inner=2)
    # both sides shrink linearly in t as t -> 0
    assert tiny.lhs.mean < 0.25 * exact and tiny.rhs.mean < 0.25 * exact and tiny.overlap
    with pytest.raises(ValueError):
        be_identity_check(F, np.zeros((16, 16)), t, [0.01, t], 10, sim, model)
    with pytest.raises(ValueError):
        be_identity_check(F, np.zeros((16, 16)), t, [0.0, t], 10, sim, model, inner=1)


def test_gaussian_variance_single_mode():
    g = TorusGrid(8)
    h = smooth_test_function(g, {(1, 0): 1.0})
    lam = 1.0 + (2 * np.pi) ** 2
    # cos(2 pi x) has squared L^2 norm 1/2 on the unit torus
    assert gaussian_variance(g, h, 1.0) == pytest.approx(0.5 / lam, rel=1e-13)
    assert gaussian_variance(g, h, 1.0, 0.3) == pytest.approx(0.5 * (1 - math.exp(-0.6 * lam)) / lam,
                                                              rel=1e-13)


# -- spectral gap ------------------------------------------------------------------------

def test_gap_closed_form_and_constant_functional():
    g = TorusGrid(8)
    F = shipped_functionals(g)[0]
    lam = 3.0 + (2 * np.pi) ** 2
    assert gaussian_gap_ratio(g, F, 3.0, 0.5) == pytest.approx((1 + (2 * np.pi) ** 2) ** 0.5 / lam,
                                                               rel=1e-13)
    with pytest.raises(ValueError):
        gaussian_gap_ratio(g, shipped_functionals(g)[1], 3.0, 0.5)
    const = CylinderFunctional("const", g, F.hs, "constant")
    sim = SimSettings(N=8, dt=5e-3, batch=4)
    est = spectral_gap_estimate([const, F], 3.0, 0.5, 0.5, 2.0, 4, sim, coupling=0.0, thin=4)
    assert est[0].var.mean == 0 and est[0].ratio == 0
    assert est[1].ratio > 0 and np.isfinite(est[1].ratio)
