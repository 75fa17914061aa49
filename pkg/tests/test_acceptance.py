"""The twelve acceptance criteria at their stated scale.

Each test records a one-line detail; conftest prints a pass/fail line per
criterion after the run.  The whole module takes roughly ten minutes on a
single core.
"""

import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from phi4flow.cli import main as cli_main
from phi4flow.dynamics import Phi4Model, coming_down_profile, simulate
from phi4flow.estimators import (
    SimSettings,
    be_identity_check,
    be_s_grid,
    choose_lambda,
    contraction_rate,
    gaussian_gap_ratio,
    gaussian_variance,
    shipped_functionals,
    smoothing_exponent,
    spectral_gap_estimate,
    verify_energy_inequality,
)
from phi4flow.linearization import (
    TangentFlow,
    adjoint_propagate,
    dense_matrix,
    finite_diff_check,
    operator_norm,
    propagate,
)
from phi4flow.noise import NoiseStream, c_t_infty, wick_moments
from phi4flow.spectral import Field, Sobolev, TorusGrid
from phi4flow.stopping import (
    StoppingConfig,
    calibrate_eta,
    exp_moment_growth,
    gamma_exponent,
    simulate_restarts,
    tail_estimate,
)

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
G32 = TorusGrid(32, 1.0)
ALPHA, THETA = 0.3, 0.5
BARRIER_DT = 0.02


def note(record_property, crit, detail):
    record_property("criterion", crit)
    record_property("detail", detail)


@pytest.fixture(scope="module")
def calibration():
    return calibrate_eta(G32, 1.0, ALPHA, 1000, base_seed=101, dt=BARRIER_DT)


def test_criterion_01_gaussian_sector(record_property):
    checks = wick_moments(G32, 1.0, 0.5, 0.5, 10_000, base_seed=1)
    z = {mc.name: mc.z for mc in checks}
    note(record_property, 1, " ".join(f"{k} z={v:+.2f}" for k, v in z.items()))
    assert all(mc.passes(3.0) for mc in checks), z


def test_criterion_02_renormalization_constant(record_property):
    g = TorusGrid(64, 1.0)
    ts = np.geomspace(1e-3, 1.0, 60)
    c = c_t_infty(g, 1.0, ts)
    prod = c * ts ** 0.25
    ratio = prod.max() / prod.min()
    mono_t = bool(np.all(np.diff(c) < 0))
    mono_m = bool(np.all(c_t_infty(g, 2.0, ts) < c) and np.all(c_t_infty(g, 4.0, ts) < c_t_infty(g, 2.0, ts)))
    note(record_property, 2, f"max/min of c t^(1/4) = {ratio:.3f}; monotone in t {mono_t}, in m {mono_m}")
    assert ratio < 10 and mono_t and mono_m


def test_criterion_03_barrier_calibration(record_property, calibration):
    cal = calibration
    note(record_property, 3, f"eta = {cal.eta:.2f}, p_hat = {cal.p_hat:.3f}, "
                             f"one-sided 95% upper = {cal.ci_upper:.4f}, n = {cal.n}")
    assert cal.n >= 1000 and cal.ci_upper < 0.25


def test_criterion_04_counting_tails(record_property, calibration):
    stop = StoppingConfig(calibration.eta, THETA, ALPHA)
    T = 5.0 + THETA + BARRIER_DT
    recs = simulate_restarts(G32, 1.0, T, BARRIER_DT, stop,
                             [NoiseStream(102, r) for r in range(1000)])
    bad, checked = [], 0
    for t in (1.0, 2.0, 5.0):
        n = 0
        while True:
            te = tail_estimate(recs, t, n, THETA)
            if te.count < 5:
                break
            checked += 1
            if not te.ci[0] <= te.bound:
                bad.append((t, n, te.p_hat, te.bound))
            n += 1
    # exponential moment with p c theta^gamma = ln 2 / 2 per restart
    p = 2.0
    gamma = gamma_exponent(ALPHA, 0.1)
    c = math.log(2) / (2 * p * THETA ** gamma)
    fit, _ = exp_moment_growth(recs, p, c, THETA, gamma, [1.0, 2.0, 3.0, 4.0, 5.0])
    lim = 2 * math.log(2) / THETA
    slack = 2 * fit.slope_se
    note(record_property, 4, f"{checked} tail levels, {len(bad)} above bound; exp-moment rate "
                             f"{fit.slope:.3f} vs {lim:.3f} + {slack:.3f}")
    assert not bad, bad
    assert fit.slope <= lim + slack


def test_criterion_05_energy_inequality(record_property, calibration):
    stop = StoppingConfig(calibration.eta, THETA, ALPHA)
    lc = choose_lambda(ALPHA)
    rng = np.random.default_rng(105)
    viol, mins, chained, restarts = 0, [], [], 0
    for b in range(20):
        tr = simulate(G32, Phi4Model(1.0), np.zeros((32, 32)), 1.0, 1e-3,
                      [NoiseStream(105, 10 * b + r) for r in range(10)], stopping=stop)
        restarts += len(tr.restarts)
        h = G32.fwd(rng.standard_normal((32, 32)))
        ec = verify_energy_inequality(tr, h, lc.lam, ALPHA, tol=0.05)
        viol += ec.violations
        mins.append(ec.interval_margin.min())
        chained.append(ec.chained_margin.min())
    note(record_property, 5, f"200 paths, {restarts} restarts, lambda = {lc.lam:.4f}: "
                             f"{viol} violations, min interval margin {min(mins):.4f}, "
                             f"min chained margin {min(chained):.3f}")
    assert viol == 0


def test_criterion_06_linearization(record_property):
    f = Field.from_function(G32, lambda x, y: np.sin(2 * np.pi * x) + 0.5 * np.cos(2 * np.pi * y))
    h = Field.from_function(G32, lambda x, y: np.cos(2 * np.pi * (x + y)) + 0.3 * np.sin(4 * np.pi * x))
    errs = [finite_diff_check(f, h, e, 0.25, 1e-3, NoiseStream(106, 0)).rel_error
            for e in (1e-3, 1e-4)]
    tr = simulate(G32, Phi4Model(1.0), f, 0.25, 1e-3, [NoiseStream(106, 1)])
    fl = TangentFlow(tr)
    rng = np.random.default_rng(6)
    H = G32.fwd(rng.standard_normal((50, 1, 32, 32)))
    K = G32.fwd(rng.standard_normal((50, 1, 32, 32)))
    a = G32.inner(propagate(H, fl, 0.0, 0.25), K)
    b = G32.inner(H, adjoint_propagate(K, fl, 0.0, 0.25))
    pair = float(np.max(np.abs(a - b) / np.abs(a)))
    free = simulate(G32, Phi4Model(2.0, coupling=0.0), f, 0.25, 1e-3, [NoiseStream(106, 2)])
    free_gap = max(abs(operator_norm(free, t, Sobolev(0.0), budget=5).values[0] - math.exp(-2.0 * t))
                   for t in (0.05, 0.1, 0.25))
    g16 = TorusGrid(16)
    f16 = Field.from_function(g16, lambda x, y: 2 * np.sin(2 * np.pi * x))
    tr16 = simulate(g16, Phi4Model(1.0), f16, 0.05, 1e-3, [NoiseStream(106, 3)])
    pw = operator_norm(tr16, 0.05, budget=400, tol=1e-13).values[0]
    sv = np.linalg.svd(dense_matrix(tr16, 0.0, 0.05), compute_uv=False)[0]
    svd_gap = abs(pw - sv) / sv
    note(record_property, 6, f"fd error {errs[0]:.2e} -> {errs[1]:.2e}; pairing gap {pair:.1e}; "
                             f"free norm gap {free_gap:.1e}; SVD gap {svd_gap:.1e}")
    assert errs[1] <= 1e-3 and errs[1] < errs[0]
    assert pair <= 1e-9 and free_gap <= 1e-10 and svd_gap <= 1e-6


def test_criterion_07_contraction(record_property):
    sim = SimSettings(N=16, dt=1e-3, base_seed=107, batch=16)
    rep = contraction_rate([5.0, 10.0, 20.0], [0.1, 0.2, 0.3, 0.4], 2.0, 16, sim, budget=30)
    r = rep.fits["rates"]
    free = contraction_rate([5.0, 10.0, 20.0], [0.1, 0.2, 0.3, 0.4], 2.0, 2, sim,
                            coupling=0.0, noise=False, budget=5)
    fgap = max(abs(a - m) for a, m in zip(free.fits["rates"], (5.0, 10.0, 20.0)))
    note(record_property, 7, f"rates {r[0]:.3f}, {r[1]:.3f}, {r[2]:.3f}; "
                             f"m_star_hat {rep.fits['m_star_hat']:.3f}; potential-free gap {fgap:.1e}")
    assert all(b > a for a, b in zip(r, r[1:])) and r[-1] > 0
    assert fgap <= 1e-6


def test_criterion_08_smoothing(record_property):
    sim = SimSettings(N=32, dt=1e-5, base_seed=108, batch=16)
    ts = [1e-4, 3e-4, 1e-3, 3e-3]
    half = smoothing_exponent(1.0, 0.5, 0.05, ts, 2.0, 32, sim, budget=30)
    zero = smoothing_exponent(1.0, 0.0, 0.05, ts, 2.0, 32, sim, budget=30)
    e5 = half.fits["exponent"]
    e0 = zero.fits["exponent"]
    note(record_property, 8, f"kappa=0.5: e = {e5['exponent']:.4f} (+/- {e5['ci_halfwidth']:.4f}) "
                             f"vs 0.375; kappa=0: e = {e0['exponent']:.4f}")
    assert e5["exponent"] <= 0.375 + e5["ci_halfwidth"]
    assert e0["exponent"] <= 0.05


def test_criterion_09_bakry_emery(record_property):
    g = TorusGrid(16)
    sim = SimSettings(N=16, dt=2.5e-3, base_seed=109, batch=32)
    F = [F for F in shipped_functionals(g) if F.name == "quadratic"][0]
    t = 0.25
    full = be_identity_check(F, np.zeros((16, 16)), t, be_s_grid(t), 2000, sim,
                             Phi4Model(10.0), outer=32, inner=8)
    lin = shipped_functionals(g)[0]
    gm = Phi4Model(10.0, coupling=0.0)
    gauss = be_identity_check(lin, np.zeros((16, 16)), t, be_s_grid(t), 2000, sim, gm,
                              outer=8, inner=2)
    exact = gaussian_variance(g, lin.hs[0], 10.0, t)
    zl = (gauss.lhs.mean - exact) / gauss.lhs.se
    rgap = abs(gauss.rhs.mean - exact)
    rtol = 3 * gauss.rhs.se + 1e-12 * exact
    note(record_property, 9, f"quadratic: lhs {full.lhs.mean:.3e} [{full.lhs.lo:.2e}, {full.lhs.hi:.2e}] "
                             f"rhs {full.rhs.mean:.3e} [{full.rhs.lo:.2e}, {full.rhs.hi:.2e}]; "
                             f"Gaussian lhs z {zl:+.2f}, rhs gap {rgap:.1e}")
    assert full.overlap
    assert abs(zl) <= 3 and rgap <= rtol


def test_criterion_10_spectral_gap(record_property):
    g = TorusGrid(16)
    sim = SimSettings(N=16, dt=2.5e-3, base_seed=110, batch=16)
    Fs = shipped_functionals(g)
    ratios = {F.name: [] for F in Fs}
    for m in (5.0, 10.0, 20.0):
        for r in spectral_gap_estimate(Fs, m, 0.5, 1.0, 20.0, 32, sim, thin=4):
            assert r.stationary, (r.name, m, r.z_halves)
            ratios[r.name].append(r.ratio)
    gauss = spectral_gap_estimate(Fs[:1], 5.0, 0.5, 1.0, 20.0, 32, sim, coupling=0.0, thin=4)[0]
    exact = gaussian_gap_ratio(g, Fs[0], 5.0, 0.5)
    z = (gauss.ratio - exact) / gauss.ratio_se
    dec = {k: all(b < a for a, b in zip(v, v[1:])) for k, v in ratios.items()}
    note(record_property, 10, "; ".join(f"{k} " + ", ".join(f"{x:.4f}" for x in v)
                                        for k, v in ratios.items())
         + f"; Gaussian z {z:+.2f}")
    assert all(np.isfinite(x) for v in ratios.values() for x in v)
    assert all(dec.values()), ratios
    assert abs(z) <= 3


def test_criterion_11_coming_down(record_property):
    prof = coming_down_profile([1.0, 10.0, 100.0], 4.0, 1.0, 1e-3, 8, grid=G32, base_seed=111,
                               fine_until=0.02, refine=32)
    ratios = {q: float(v.max() / v.min()) for q, v in prof.quantiles.items()}
    note(record_property, 11, ", ".join(f"q{q}: {r:.3f}" for q, r in ratios.items()))
    assert all(r < 2 for r in ratios.values())


def test_criterion_12_replay(record_property, tmp_path):
    cmd = {"calibrate": "calibrate", "contraction": "contraction", "spectral_gap": "spectral-gap",
           "be_check": "be-check", "coming_down": "coming-down", "verify": "verify"}
    results = []
    for name, sub in cmd.items():
        cfg = tmp_path / f"{name}.ini"
        shutil.copy(ROOT / "configs" / f"{name}.ini", cfg)
        out = tmp_path / name
        code = cli_main([sub, "--config", str(cfg), "--out", str(out)])
        assert code in (0, 1), (name, code)
        files = json.loads((out / "manifest.json").read_text())["files"]
        for w in (1, 4, 8):
            results.append((name, w, cli_main(["replay", str(out), "--workers", str(w)]), len(files)))
    failed = [(n, w) for n, w, code, _ in results if code != 0]
    note(record_property, 12, f"{len(results) - len(failed)}/{len(results)} replays bit-exact "
                              f"(6 configs x workers 1, 4, 8)")
    assert not failed, failed
