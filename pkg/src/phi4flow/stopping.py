"""Restart scheme for the Gaussian drivers and the counting process N(t).

A driver born at tau_{n-1} is restarted at

    tau_n = min(first grid time its Wick norms reach eta, tau_{n-1} + theta)

and N(t) = inf{n >= 1 : tau_n >= t}.  Barrier crossings are detected on
the time grid, so a crossing is reported at most one step late.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dynamics import Phi4Model, simulate
from .noise import (
    NoiseStream,
    OuState,
    WickTriple,
    as_streams,
    ou_factors,
    ou_increment,
    sup_norm_profile,
    white_fields,
    wick_besov_norms,
    wick_constant,
    wick_from_grid,
)
from .spectral import TorusGrid
from .stats import linear_fit, wilson

__all__ = [
    "StoppingConfig",
    "StoppingRecord",
    "gamma_exponent",
    "calibrate_eta",
    "run_with_restarts",
    "simulate_restarts",
    "tail_estimate",
    "exp_moment",
    "exp_moment_growth",
    "locate_theta0",
]


def gamma_exponent(alpha: float, eps: float) -> float:
    """gamma = (1 - alpha (1 + 2 eps)) / (1 + alpha)."""
    if not (alpha > 0 and eps > 0):
        raise ValueError("alpha and eps must be positive")
    if alpha * (1 + 2 * eps) >= 1:
        raise ValueError(f"need alpha (1 + 2 eps) < 1, got {alpha * (1 + 2 * eps)}")
    return (1 - alpha * (1 + 2 * eps)) / (1 + alpha)


@dataclass(frozen=True)
class StoppingConfig:
    eta: float
    theta: float
    alpha: float
    eps: float = 0.1

    def validate(self) -> "StoppingConfig":
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        g = gamma_exponent(self.alpha, self.eps)
        if not 0 < g < 1:
            raise ValueError(f"gamma = {g} outside (0, 1)")
        return self

    @property
    def gamma(self) -> float:
        return gamma_exponent(self.alpha, self.eps)


@dataclass
class StoppingRecord:
    """Restart times tau_1 < tau_2 < ... of one replica on [0, horizon]."""

    replica_id: int
    taus: np.ndarray
    capped: np.ndarray
    horizon: float

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.capped = np.asarray(self.capped, dtype=bool)

    def N(self, t: float) -> int:
        """inf {n >= 1 : tau_n >= t}."""
        if t <= 0:
            return 1
        k = int(np.searchsorted(self.taus, t - 1e-12, side="left"))
        if k >= len(self.taus):
            raise ValueError(f"t={t} lies beyond the last restart {self.taus[-1] if len(self.taus) else 0}")
        return k + 1

    def increments(self) -> np.ndarray:
        return np.diff(np.r_[0.0, self.taus])

    def check(self, theta: float, dt: float = 0.0) -> None:
        inc = self.increments()
        if np.any(inc <= 0):
            raise AssertionError("restart times not strictly increasing")
        if np.any(inc > theta + dt + 1e-12):
            raise AssertionError("restart interval exceeds the cap")

    def rows(self) -> list[tuple]:
        return [(self.replica_id, n + 1, float(t), bool(c))
                for n, (t, c) in enumerate(zip(self.taus, self.capped))]


def _records_from_restarts(restarts, R, dt, horizon, replica_ids):
    per = [[] for _ in range(R)]
    for r in restarts:
        per[r.replica].append((r.step, r.capped))
    out = []
    for j in range(R):
        steps = sorted(per[j])
        out.append(StoppingRecord(replica_ids[j], [s * dt for s, _ in steps],
                                  [c for _, c in steps], horizon))
    return out


def simulate_restarts(grid: TorusGrid, m: float, T: float, dt: float, config: StoppingConfig,
                      streams, return_norms: bool = False):
    """Run only the Gaussian drivers with restarts (the remainder is not
    needed to locate restart times).  Returns one StoppingRecord per stream,
    and optionally the (steps, R, 3) array of Wick norms at each grid time
    before any reset at that time.
    """
    config.validate()
    streams = as_streams(streams)
    R = len(streams)
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    cap = max(1, int(math.ceil(config.theta / dt - 1e-9)))
    c_tab = wick_constant(grid, m, np.arange(steps + 1) * dt)
    decay, _ = ou_factors(grid, m, dt)
    x = OuState.zero(grid, m, 0.0, (R,)).coeffs
    birth = np.zeros(R, dtype=np.int64)
    taus = [[] for _ in range(R)]
    capped = [[] for _ in range(R)]
    norms_rec = np.zeros((steps, R, 3)) if return_norms else None
    for i in range(steps):
        x = decay * x + ou_increment(grid, m, dt, white_fields(grid, streams))
        j = i + 1
        age = j - birth
        w1 = grid.inv(x)
        w2, w3 = wick_from_grid(w1, c_tab[age])
        nrm = wick_besov_norms(grid, WickTriple(w1, w2, w3, None, None), config.alpha)
        if return_norms:
            norms_rec[i] = nrm
        hit = nrm.max(axis=-1) >= config.eta
        cp = age >= cap
        fire = hit | cp
        if np.any(fire):
            for r in np.flatnonzero(fire):
                taus[r].append(j * dt)
                capped[r].append(bool(cp[r] and not hit[r]))
            x[fire] = 0.0
            birth = np.where(fire, j, birth)
    recs = [StoppingRecord(s.replica_id, taus[r], capped[r], T) for r, s in enumerate(streams)]
    return (recs, norms_rec) if return_norms else recs


def run_with_restarts(f, T: float, dt: float, config: StoppingConfig, stream,
                      model: Phi4Model | None = None, record: bool = True):
    """Full dynamics with driver restarts; returns (Trajectory, records)."""
    config.validate()
    model = model or Phi4Model()
    streams = as_streams(stream)
    grid = f.grid
    traj = simulate(grid, model, f, T, dt, streams, stopping=config, record=record)
    recs = _records_from_restarts(traj.restarts, len(streams), dt, T,
                                  [s.replica_id for s in streams])
    return traj, recs


# -- calibration --------------------------------------------------------------

@dataclass
class Calibration:
    eta: float
    p_hat: float
    ci_upper: float
    n: int
    alpha: float
    grid: TorusGrid
    step: float
    sups: np.ndarray

    def as_dict(self) -> dict:
        return {"eta": self.eta, "p_hat": self.p_hat, "ci_upper": self.ci_upper, "n": self.n,
                "alpha": self.alpha, "N": self.grid.N, "L": self.grid.L, "step": self.step}


def eta_from_sups(sups: np.ndarray, step: float = 0.05, target: float = 0.25,
                  conf: float = 0.95, max_eta: float = 1e3) -> tuple[float, float, float]:
    """Smallest eta on the grid {step, 2 step, ...} whose exceedance frequency
    has one-sided upper confidence bound below ``target``."""
    n = sups.size
    s = np.sort(sups)
    k_max = int(max_eta / step)
    for k in range(1, k_max + 1):
        eta = k * step
        hits = n - int(np.searchsorted(s, eta, side="left"))
        _, hi = wilson(hits, n, conf, sided=1)
        if hi < target:
            return eta, hits / n, hi
    raise RuntimeError(f"no barrier below {max_eta} meets the target")


def calibrate_eta(grid: TorusGrid, m: float, alpha: float, replicas: int, base_seed: int = 0,
                  dt: float = 0.01, step: float = 0.05, replica_offset: int = 0) -> Calibration:
    """Barrier eta with P(sup_{t <= 1} max_k ||:X^k:_{0,t}||_{-alpha} >= eta) < 1/4
    certified at one-sided 95% confidence."""
    if replicas < 400:
        raise ValueError(f"calibration needs at least 400 replicas, got {replicas}")
    streams = [NoiseStream(base_seed, replica_offset + r) for r in range(replicas)]
    prof = sup_norm_profile(streams, 1.0, dt, alpha, grid=grid, m=m)
    eta, p, hi = eta_from_sups(prof.sups, step)
    return Calibration(eta, p, hi, replicas, alpha, grid, step, prof.sups)


# -- counting process statistics ------------------------------------------------

@dataclass
class TailEstimate:
    t: float
    n: int
    p_hat: float
    ci: tuple[float, float]
    count: int
    samples: int
    bound: float

    @property
    def passes(self) -> bool:
        return self.ci[0] <= self.bound

    def as_dict(self) -> dict:
        return {"t": self.t, "n": self.n, "estimate": self.p_hat, "ci": list(self.ci),
                "count": self.count, "samples": self.samples, "bound": self.bound}


def tail_bound(n: int, t: float, theta: float) -> float:
    return 2.0 ** (-n) * math.exp(2 * math.log(2) / theta * t)


def tail_estimate(records, t: float, n: int, theta: float | None = None,
                  conf: float = 0.95) -> TailEstimate:
    """Empirical P(N(t) >= n) with a Wilson interval and the bound
    2^{-n} e^{(2 ln 2 / theta) t}."""
    Ns = np.array([r.N(t) for r in records])
    k = int(np.sum(Ns >= n))
    lo, hi = wilson(k, len(Ns), conf)
    b = tail_bound(n, t, theta) if theta is not None else float("nan")
    return TailEstimate(t, n, k / len(Ns), (lo, hi), k, len(Ns), b)


@dataclass
class ExpMoment:
    t: float
    estimate: float
    ci: tuple[float, float]
    log_estimate: float
    log_se: float
    n: int
    overflow: bool = False

    def as_dict(self) -> dict:
        return {"t": self.t, "estimate": self.estimate, "ci": list(self.ci),
                "log_estimate": self.log_estimate, "log_se": self.log_se, "n": self.n,
                "overflow": self.overflow}


def exp_moment(records, p: float, c: float, theta: float, gamma: float, t: float,
               conf: float = 0.95) -> ExpMoment:
    """E[exp(p c theta^gamma N(t))]^{1/p} with a delta-method interval.

    Computed in log space; if the exponent leaves the double range the
    estimate is flagged as overflow (theta above the empirical theta_0).
    """
    Ns = np.array([r.N(t) for r in records], dtype=float)
    a = p * c * theta**gamma
    e = a * Ns
    n = len(Ns)
    if np.max(e) > 700:
        return ExpMoment(t, float("inf"), (float("inf"), float("inf")), float("inf"),
                         float("inf"), n, True)
    emax = e.max()
    y = np.exp(e - emax)
    mu = y.mean()
    sd = y.std(ddof=1) if n > 1 else 0.0
    log_mean = emax + math.log(mu)
    # delta method for log of the mean, then scale by 1/p
    log_se = (sd / math.sqrt(n)) / mu if n > 1 else 0.0
    z = float(stats.norm.ppf(0.5 + conf / 2))
    est = math.exp(log_mean / p)
    ci = (math.exp((log_mean - z * log_se) / p), math.exp((log_mean + z * log_se) / p))
    return ExpMoment(t, est, ci, log_mean / p, log_se / p, n)


def exp_moment_growth(records, p: float, c: float, theta: float, gamma: float, t_grid):
    """Fit log E^{1/p}[...] against t; returns (fit, moments)."""
    moms = [exp_moment(records, p, c, theta, gamma, t) for t in t_grid]
    if any(mo.overflow for mo in moms):
        return None, moms
    fit = linear_fit(t_grid, [mo.log_estimate for mo in moms],
                     sigma=[max(mo.log_se, 1e-12) for mo in moms])
    return fit, moms


def locate_theta0(make_records, p: float, c: float, gamma: float, t_grid,
                  lo: float = 0.05, hi: float = 0.95, iters: int = 6) -> float:
    """Largest theta in [lo, hi] (by bisection) for which the exp-moment
    growth rate stays below 2 ln 2 / theta; ``make_records(theta)`` must
    return restart records simulated with cap theta."""

    def ok(theta):
        fit, _ = exp_moment_growth(make_records(theta), p, c, theta, gamma, t_grid)
        if fit is None:
            return False
        return fit.slope <= 2 * math.log(2) / theta + 2 * fit.slope_se

    if not ok(lo):
        return 0.0
    if ok(hi):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo
