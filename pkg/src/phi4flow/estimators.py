"""Monte Carlo estimators for the quantitative bounds on the linearized flow,
the Markov semigroup and the invariant measure.

Every estimator fans out over replicas in fixed-size chunks (chunk
composition depends only on the replica ids, never on the worker count),
maps the chunks through an optional executor and reduces in replica order,
so results are bit-identical for any degree of parallelism.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import Phi4Model, Trajectory, simulate
from .linearization import TangentFlow, operator_norm
from .noise import NoiseStream, c_t_infty
from .spectral import Field, Sobolev, TorusGrid, grad_l2sq, grad_sup
from .stats import LinearFit, MeanCI, batch_means, linear_fit, mean_ci

__all__ = [
    "SimSettings",
    "ReplicaAllocator",
    "CylinderFunctional",
    "EstimateReport",
    "REPORT_SCHEMA",
    "g_drift",
    "g_prefactors",
    "absorption_coefficients",
    "lambda_feasible",
    "LAMBDA_GRID",
    "choose_lambda",
    "verify_energy_inequality",
    "contraction_rate",
    "smoothing_exponent",
    "heat_sobolev_norm",
    "semigroup_gradient",
    "be_s_grid",
    "be_identity_check",
    "gaussian_variance",
    "spectral_gap_estimate",
    "gaussian_gap_ratio",
    "shipped_functionals",
]

SCHEMA_VERSION = "1.0"


# -- plumbing -------------------------------------------------------------------

@dataclass(frozen=True)
class SimSettings:
    """Discretization and replica bookkeeping shared by the estimators."""

    N: int = 16
    L: float = 1.0
    dt: float = 1e-3
    base_seed: int = 0
    batch: int = 16

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.N, self.L)


class ReplicaAllocator:
    """Hands out disjoint replica-id ranges under one base seed.

    Nested estimators draw their outer and inner replicas from separate
    ranges, so no two roles ever share a noise stream.
    """

    def __init__(self, start: int = 0):
        self.next = start

    def take(self, count: int) -> range:
        r = range(self.next, self.next + count)
        self.next += count
        return r


def _chunks(ids: Sequence[int], batch: int) -> list[list[int]]:
    ids = list(ids)
    return [ids[i:i + batch] for i in range(0, len(ids), batch)]


def _map(fn, tasks, executor=None):
    if executor is None:
        return [fn(t) for t in tasks]
    return list(executor.map(fn, tasks))


def _coeffs(grid: TorusGrid, f) -> np.ndarray:
    """Field, real samples or half-spectrum coefficients -> active coefficients."""
    if isinstance(f, Field):
        return grid.project(f.half)
    a = np.asarray(f)
    return grid.project(a if np.iscomplexobj(a) else grid.fwd(a))


def _streams(seed: int, ids) -> list[NoiseStream]:
    return [NoiseStream(seed, int(r)) for r in ids]


# -- cylinder functionals ----------------------------------------------------------

@dataclass
class CylinderFunctional:
    """F(u) = Fbar(u(h_1), ..., u(h_n)) with u(h) the L^2 pairing.

    ``kind`` selects Fbar: "linear" (a . y), "quadratic" (y^T A y / 2 + b . y),
    "tanh" (sum_i a_i tanh(y_i)) or "constant".  Test functions are stored as
    half-spectrum coefficients of shape (n, N, N//2+1).
    """

    name: str
    grid: TorusGrid
    hs: np.ndarray
    kind: str
    a: np.ndarray | None = None
    A: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic", "tanh", "constant"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        self.hs = self.grid.project(np.asarray(self.hs))
        n = self.hs.shape[0]
        self.a = np.ones(n) if self.a is None else np.asarray(self.a, dtype=float)
        if self.kind == "quadratic":
            self.A = np.eye(n) if self.A is None else np.asarray(self.A, dtype=float)
            if not np.allclose(self.A, self.A.T):
                raise ValueError("quadratic form must be symmetric")

    def pairings(self, u_hat: np.ndarray) -> np.ndarray:
        """y_i = <u, h_i>, shape (..., n)."""
        return self.grid.inner(u_hat[..., None, :, :], self.hs)

    def fbar(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return y @ self.a
        if self.kind == "quadratic":
            return 0.5 * np.einsum("...i,ij,...j->...", y, self.A, y) + y @ self.a
        if self.kind == "tanh":
            return np.tanh(y) @ self.a
        return np.zeros(y.shape[:-1])

    def fbar_grad(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return np.broadcast_to(self.a, y.shape)
        if self.kind == "quadratic":
            return y @ self.A + self.a
        if self.kind == "tanh":
            return self.a / np.cosh(y) ** 2
        return np.zeros_like(y)

    def value(self, u_hat: np.ndarray) -> np.ndarray:
        return self.fbar(self.pairings(u_hat))

    def gradient(self, u_hat: np.ndarray) -> np.ndarray:
        """DF(u) = sum_i d_i Fbar(y) h_i as half-spectrum coefficients."""
        g = self.fbar_grad(self.pairings(u_hat))
        return np.einsum("...i,ikl->...kl", g, self.hs)

    def __call__(self, u: Field) -> float:
        return float(self.value(u.half))


def smooth_test_function(grid: TorusGrid, modes: dict) -> np.ndarray:
    """Half-spectrum coefficients of sum over {(kx, ky): amplitude} of
    amplitude * cos(2 pi (kx x + ky y) / L)."""
    x, y = grid.points
    f = np.zeros((grid.N, grid.N))
    for (kx, ky), amp in modes.items():
        f += amp * np.cos(2 * np.pi * (kx * x + ky * y) / grid.L)
    return grid.fwd(f)


def shipped_functionals(grid: TorusGrid) -> list[CylinderFunctional]:
    """The functionals used by the shipped spectral-gap and BE experiments."""
    h1 = smooth_test_function(grid, {(1, 0): 1.0})
    h2 = smooth_test_function(grid, {(0, 1): 1.0, (1, 1): 0.5})
    h0 = smooth_test_function(grid, {(0, 0): 1.0})
    return [
        CylinderFunctional("linear", grid, np.array([h1]), "linear"),
        CylinderFunctional("quadratic", grid, np.array([h1, h2]), "quadratic",
                           a=np.zeros(2), A=np.array([[1.0, 0.5], [0.5, 1.0]])),
        CylinderFunctional("tanh", grid, np.array([h0, h2]), "tanh", a=np.array([1.0, 0.5])),
    ]


# -- reports --------------------------------------------------------------------

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EstimateReport",
    "type": "object",
    "required": ["schema_version", "experiment", "config", "rows", "fits", "verdicts"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"type": "string"},
        "experiment": {"type": "string"},
        "config": {"type": "object"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["estimate", "ci", "n"],
                "properties": {
                    "estimate": {"type": ["number", "null"]},
                    "ci": {"type": "array", "items": {"type": ["number", "null"]},
                           "minItems": 2, "maxItems": 2},
                    "n": {"type": "integer", "minimum": 0},
                },
            },
        },
        "fits": {"type": "object"},
        "verdicts": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["bound", "pass", "margin"],
                "properties": {
                    "bound": {"type": "string"},
                    "pass": {"type": "boolean"},
                    "margin": {"type": ["number", "null"]},
                },
            },
        },
    },
}


def _clean(obj):
    """Convert numpy scalars/arrays and non-finite floats for JSON output."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


@dataclass
class EstimateReport:
    experiment: str
    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)

    def add_row(self, estimate, ci, n, **keys):
        self.rows.append({**keys, "estimate": estimate, "ci": list(ci), "n": int(n)})

    def add_verdict(self, bound: str, passed: bool, margin=None, **extra):
        self.verdicts.append({"bound": bound, "pass": bool(passed), "margin": margin, **extra})

    @property
    def passed(self) -> bool:
        return all(v["pass"] for v in self.verdicts)

    def to_dict(self) -> dict:
        return _clean({"schema_version": SCHEMA_VERSION, **asdict(self)})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        keys: list[str] = []
        for r in self.rows:
            for k in r:
                if k != "ci" and k not in keys:
                    keys.append(k)
        lines = [",".join(keys + ["ci_low", "ci_high"])]
        for r in self.rows:
            vals = []
            for k in keys:
                v = r.get(k, "")
                vals.append(_fmt(v))
            ci = r.get("ci", [None, None])
            lines.append(",".join(vals + [_fmt(ci[0]), _fmt(ci[1])]))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- drift functional and lambda ----------------------------------------------------

def g_drift(w1_norm, w2_norm, grad_v_sup, c_inf, lam: float, alpha: float):
    """Growth rate g(s, t) of the energy estimate for the tangent flow.

    Arguments are Besov(-alpha) norms of W1 and W2, sup |grad v| and the
    counterterm constant; all may be arrays of matching shape.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    a = alpha
    w1 = np.asarray(w1_norm, dtype=float)
    w2 = np.asarray(w2_norm, dtype=float)
    gv = np.asarray(grad_v_sup, dtype=float)
    return (w1**2 / (2 * lam)
            + (1 + a) / (2 * lam ** ((1 + a) / 2)) * w1 ** (2 / (1 + a)) * gv ** (2 * a / (1 + a))
            + (1 - a) / (2 ** (1 / (1 - a)) * lam ** (2 / (1 - a))) * w1 ** (2 / (1 - a))
            + w2
            + 2**a * (2 - a) / (2 * lam ** (2 / (2 - a))) * w2 ** (2 / (2 - a))
            + 3 * np.asarray(c_inf, dtype=float))


def g_prefactors(lam: float, alpha: float) -> np.ndarray:
    """The lambda-dependent prefactors of g."""
    a = alpha
    return np.array([
        1 / (2 * lam),
        (1 + a) / (2 * lam ** ((1 + a) / 2)),
        (1 - a) / (2 ** (1 / (1 - a)) * lam ** (2 / (1 - a))),
        2**a * (2 - a) / (2 * lam ** (2 / (2 - a))),
    ])


def absorption_coefficients(lam: float, alpha: float) -> dict:
    """Coefficients moved onto ||grad J||^2 and ||v J||^2 by Young's inequality."""
    a = alpha
    return {
        "grad_I2": a * lam ** (1 / a),
        "grad_W2": a / 2 * lam ** (2 / a),
        "vJ_I2_I3": lam / 2 * 2,
        "vJ_I1": (1 - a) / 2 * lam ** (2 / (1 - a)),
    }


LAMBDA_GRID = 10.0 ** np.linspace(-4, 0, 401)


def lambda_feasible(lam: float, alpha: float) -> bool:
    c = absorption_coefficients(lam, alpha)
    return (c["grad_I2"] <= 0.125 and c["grad_W2"] <= 0.125
            and c["vJ_I2_I3"] <= 0.25 and c["vJ_I1"] <= 0.25)


@dataclass
class LambdaChoice:
    lam: float
    c_alpha: float
    alpha: float
    coefficients: dict


def choose_lambda(alpha: float) -> LambdaChoice:
    """Largest lambda on a fixed log grid for which the absorbed terms fit
    into (1/2)||grad J||^2 and (1/2)||v J||^2 with margin, and the resulting
    constant c(alpha) = max of g's lambda-dependent prefactors."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    feas = [lam for lam in LAMBDA_GRID if lambda_feasible(lam, alpha)]
    lam = float(max(feas))
    return LambdaChoice(lam, float(g_prefactors(lam, alpha).max()), alpha,
                        absorption_coefficients(lam, alpha))


# -- energy inequality ----------------------------------------------------------------

@dataclass
class EnergyCheck:
    """Margins RHS / LHS of the interval-wise energy inequality."""

    interval_margin: np.ndarray     # (R,) min over intervals and end times
    chained_margin: np.ndarray      # (R,) min over t of the chained L^2 bound
    c_empirical: np.ndarray         # (R,) smallest c making the N(t) form hold
    violations: int
    tol: float
    lam: float
    alpha: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _dissipation(flow: TangentFlow, J: np.ndarray, v_hat: np.ndarray):
    """||J||^2 and the pointwise densities of ||grad J||^2 (per Fourier mode,
    weights included) and ||v J||^2 (per padded-grid point, exact product)."""
    g = flow.grid
    pad = flow.ker.pad
    vj = pad.up(v_hat) * pad.up(J)
    dens_v = vj * vj * (g.L**2 / pad.M**2)
    dens_g = g.weights * g.k2 * np.abs(J) ** 2
    return g.l2sq(J), dens_g, dens_v


def _log_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Logarithmic mean (a - b) / (log a - log b), exact for exponential decay."""
    with np.errstate(divide="ignore", invalid="ignore"):
        la, lb = np.log(a), np.log(b)
        d = la - lb
        out = np.where(np.abs(d) > 1e-8, (a - b) / d, 0.5 * (a + b))
    return np.where((a > 0) & (b > 0), out, 0.0)


def _step_integral(ea, dg_a, dv_a, eb, dg_b, dv_b, dt):
    """int over one step of e^phi (||grad J||^2 + ||v J||^2), element-wise
    log-mean rule (exponentially fitted trapezoid)."""
    sg = np.sum(_log_mean(ea[:, None, None] * dg_a, eb[:, None, None] * dg_b), axis=(-2, -1))
    sv = np.sum(_log_mean(ea[:, None, None] * dv_a, eb[:, None, None] * dv_b), axis=(-2, -1))
    return dt * (sg + sv)


def verify_energy_inequality(traj: Trajectory, h, lam: float, alpha: float,
                             tol: float = 0.05, t_from: float = 0.0,
                             t_to: float | None = None) -> EnergyCheck:
    """Check the pathwise energy inequality of the tangent flow.

    On every restart interval [s, tau] and every grid time t in it,

        e^{phi(t)} ||J_t h||^2 + int_s^t e^{phi(r)} (||grad J_r h||^2 + ||v_r J_r h||^2) dr
            <= ||J_s h||^2,   phi(r) = 2 m (r - s) - 2 int_s^r g,

    with int g by the trapezoid rule and the dissipation integral by an
    element-wise logarithmic-mean rule (stiff high modes decay by orders of
    magnitude within one step, where the plain trapezoid grossly overshoots).
    Also reports the chained bound ||J_t h||^2 <= e^{-2mt + 2 int_0^t g} ||h||^2
    and the smallest c for which ||J_t h||^2 <= e^{-2mt + 2 c theta^gamma N(t)} ||h||^2
    holds on the path.  A violation is a margin below 1 / (1 + tol).
    """
    if traj.stopping is None or traj.wick_norms is None:
        raise ValueError("energy check needs a trajectory run with restarts")
    flow = TangentFlow(traj, cache=False)
    grid, dt, m = traj.grid, traj.dt, traj.model.m
    R = traj.replicas
    i0 = traj.index(t_from)
    i1 = traj.steps if t_to is None else traj.index(t_to)
    cfg = traj.stopping
    theta_g = cfg.theta ** cfg.gamma

    restart_at = np.zeros((traj.steps + 1, R), dtype=bool)
    for r in traj.restarts:
        restart_at[r.step, r.replica] = True

    def g_at(v_hat, w_norms, age_steps):
        gs = grad_sup(grid, v_hat)
        if traj.model.renormalize:
            ci = c_t_infty(grid, m, np.maximum(age_steps, 0.5) * dt)
        else:
            ci = np.zeros(R)
        return g_drift(w_norms[:, 0], w_norms[:, 1], gs, ci, lam, alpha)

    def left_v(i):
        v = traj.v_hat[i].copy()
        for r in np.flatnonzero(restart_at[i]):
            v[r] = traj.left[(i, int(r))][1]
        return v

    def age(i):
        return i - traj.birth[i]

    J = np.broadcast_to(h.half if isinstance(h, Field) else h, (R, grid.N, grid.N // 2 + 1))
    J = flow.forward(grid.project(J).copy(), 0, i0)
    h2 = grid.l2sq(J)

    nJ, dg, dv = _dissipation(flow, J, traj.v_hat[i0])
    norms0 = traj.wick_norms[i0] * (~restart_at[i0])[:, None]
    g_right = g_at(traj.v_hat[i0], norms0, age(i0))
    base = nJ.copy()
    A = np.zeros(R)                # int_s^r g on the current interval
    integ = np.zeros(R)            # int_s^r e^phi (...) dr
    s_time = np.full(R, i0 * dt)
    G_total = np.zeros(R)          # int_{t_from}^r g across intervals
    e_prev = np.ones(R)
    min_int = np.full(R, np.inf)
    min_chain = np.full(R, np.inf)
    c_emp = np.full(R, -np.inf)
    Nt = np.ones(R, dtype=int)
    for i in range(i0, i1):
        J = flow.step(i, J)
        j = i + 1
        rs = restart_at[j]
        # left limits at t_j
        v_left = left_v(j) if rs.any() else traj.v_hat[j]
        g_left = g_at(v_left, traj.wick_norms[j], np.where(rs, j - traj.birth[i], age(j)))
        nJ, dg_l, dv_l = _dissipation(flow, J, v_left)
        A = A + 0.5 * dt * (g_right + g_left)
        G_total = G_total + 0.5 * dt * (g_right + g_left)
        e_now = np.exp(2 * m * (j * dt - s_time) - 2 * A)
        integ = integ + _step_integral(e_prev, dg, dv, e_now, dg_l, dv_l, dt)
        lhs = e_now * nJ + integ
        min_int = np.minimum(min_int, base / lhs)
        chain = np.exp(-2 * m * (j - i0) * dt + 2 * G_total) * h2 / nJ
        min_chain = np.minimum(min_chain, chain)
        # N(t_j) = restarts strictly before t_j, plus one
        c_need = (np.log(nJ / h2) + 2 * m * (j - i0) * dt) / (2 * theta_g * Nt)
        c_emp = np.maximum(c_emp, c_need)
        Nt = Nt + rs
        dg, dv, e_prev = dg_l, dv_l, e_now
        # right limits at t_j
        if rs.any():
            norms_r = traj.wick_norms[j] * (~rs)[:, None]
            g_right = g_at(traj.v_hat[j], norms_r, age(j))
            nJr, dg_r, dv_r = _dissipation(flow, J, traj.v_hat[j])
            base = np.where(rs, nJr, base)
            A = np.where(rs, 0.0, A)
            integ = np.where(rs, 0.0, integ)
            s_time = np.where(rs, j * dt, s_time)
            e_prev = np.where(rs, 1.0, e_prev)
            dv = np.where(rs[:, None, None], dv_r, dv)
        else:
            g_right = g_left
    thresh = 1.0 / (1.0 + tol)
    viol = int(np.sum(min_int < thresh) + np.sum(min_chain < thresh))
    return EnergyCheck(min_int, min_chain, c_emp, viol, tol, lam, alpha)


# -- operator norm fits ------------------------------------------------------------------

def _moment_log(values: np.ndarray, p: float) -> tuple[float, float, float]:
    """(E^{1/p} X^p, log of it, delta-method SE of the log)."""
    x = np.asarray(values, dtype=float) ** p
    mu = x.mean()
    se = x.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else 0.0
    return mu ** (1 / p), math.log(mu) / p, (se / mu) / p if mu > 0 else float("inf")


@dataclass(frozen=True)
class _NormTask:
    N: int
    L: float
    dt: float
    model: Phi4Model
    seed: int
    ids: tuple
    t_grid: tuple
    kappa: float
    budget: int
    tol: float


def _norm_task(task: _NormTask) -> np.ndarray:
    grid = TorusGrid(task.N, task.L)
    T = max(task.t_grid)
    tr = simulate(grid, task.model, np.zeros((grid.N, grid.N)), T, task.dt,
                  _streams(task.seed, task.ids))
    fl = TangentFlow(tr)
    out = np.empty((len(task.t_grid), len(task.ids)))
    for k, t in enumerate(task.t_grid):
        on = operator_norm(fl, t, Sobolev(task.kappa), "power_iteration", task.budget,
                           seed=task.seed ^ 0x5EED, tol=task.tol)
        out[k] = on.values
    return out


def operator_norm_samples(model: Phi4Model, t_grid, replicas: int, sim: SimSettings,
                          kappa: float = 0.0, budget: int = 30, tol: float = 1e-6,
                          executor=None, ids=None) -> np.ndarray:
    """Per-replica ||J_{0,t}||_{L^2 -> H^kappa} for t in ``t_grid``: (len(t), replicas)."""
    ids = range(replicas) if ids is None else ids
    tasks = [_NormTask(sim.N, sim.L, sim.dt, model, sim.base_seed, tuple(c), tuple(t_grid),
                       kappa, budget, tol) for c in _chunks(ids, sim.batch)]
    return np.concatenate(_map(_norm_task, tasks, executor), axis=1)


def contraction_rate(m_list, t_grid, p: float, replicas: int, sim: SimSettings,
                     coupling: float = 1.0, noise: bool = True, budget: int = 30,
                     executor=None) -> EstimateReport:
    """Fit log E^{1/p} ||J_{0,t}||_{L^2 -> L^2} = a - r(m) t for each mass.

    m_star_hat = max_m (m - r(m)).
    """
    if len(t_grid) < 4:
        raise ValueError("contraction fit needs at least 4 time points")
    rep = EstimateReport("contraction", {"m_list": list(m_list), "t_grid": list(t_grid), "p": p,
                                         "replicas": replicas, **asdict(sim),
                                         "coupling": coupling, "noise": noise})
    rates = {}
    for m in m_list:
        model = Phi4Model(m, coupling=coupling, noise=noise, renormalize=noise)
        vals = operator_norm_samples(model, t_grid, replicas, sim, 0.0, budget, executor=executor)
        logs, ses = [], []
        for t, row in zip(t_grid, vals):
            est, lg, se = _moment_log(row, p)
            if not np.isfinite(est):
                rep.add_verdict(f"finite estimate m={m} t={t}", False, None)
            logs.append(lg)
            ses.append(se)
            rep.add_row(est, (math.exp(lg - 1.96 * se), math.exp(lg + 1.96 * se)), row.size,
                        m=m, t=t, log_estimate=lg, log_se=se)
        fit = linear_fit(t_grid, logs, sigma=[max(s, 1e-15) for s in ses])
        rates[m] = fit
        rep.fits[f"m={m}"] = {**fit.as_dict(), "rate": -fit.slope,
                              "rate_ci": [-fit.slope_ci()[1], -fit.slope_ci()[0]]}
    r = [-rates[m].slope for m in m_list]
    m_star = max(m - rm for m, rm in zip(m_list, r))
    rep.fits["m_star_hat"] = m_star
    rep.fits["rates"] = r
    inc = all(b > a for a, b in zip(r, r[1:]))
    rep.add_verdict("rate strictly increasing in m", inc,
                    min((b - a for a, b in zip(r, r[1:])), default=None))
    rep.add_verdict("rate positive at largest m", r[-1] > 0, r[-1])
    return rep


def heat_sobolev_norm(grid: TorusGrid, m: float, t: float, kappa: float) -> float:
    """||S_t||_{L^2 -> H^kappa} on the active band: max_k (1+|k|^2)^{kappa/2} e^{-t lam_k}."""
    lam = grid.lam(m)
    vals = (1 + grid.k2) ** (kappa / 2) * np.exp(-t * lam)
    return float(vals[grid.active].max())


def smoothing_exponent(m: float, kappa: float, alpha: float, t_grid, p: float, replicas: int,
                       sim: SimSettings, coupling: float = 1.0, noise: bool = True,
                       budget: int = 30, executor=None) -> EstimateReport:
    """Fit log E^{1/p} ||J_{0,t}||_{L^2 -> H^kappa} = a - e log t on short times."""
    if not alpha < (1 - kappa) / 5:
        raise ValueError(f"need alpha < (1 - kappa) / 5, got alpha={alpha}, kappa={kappa}")
    if not all(0 < t < 1 for t in t_grid):
        raise ValueError("short-time grid must lie in (0, 1)")
    model = Phi4Model(m, coupling=coupling, noise=noise, renormalize=noise)
    vals = operator_norm_samples(model, t_grid, replicas, sim, kappa, budget, executor=executor)
    rep = EstimateReport("smoothing", {"m": m, "kappa": kappa, "alpha": alpha,
                                       "t_grid": list(t_grid), "p": p, "replicas": replicas,
                                       **asdict(sim), "coupling": coupling, "noise": noise})
    logs, ses = [], []
    for t, row in zip(t_grid, vals):
        est, lg, se = _moment_log(row, p)
        logs.append(lg)
        ses.append(se)
        rep.add_row(est, (math.exp(lg - 1.96 * se), math.exp(lg + 1.96 * se)), row.size,
                    t=t, log_estimate=lg, log_se=se)
    fit = linear_fit(np.log(t_grid), logs, sigma=[max(s, 1e-15) for s in ses])
    e_hat = -fit.slope
    lo, hi = fit.slope_ci()
    half = (hi - lo) / 2
    bound = (kappa + 5 * alpha) / 2
    rep.fits["exponent"] = {**fit.as_dict(), "exponent": e_hat, "ci_halfwidth": half,
                            "bound": bound}
    rep.add_verdict("exponent <= (kappa + 5 alpha)/2 + CI", e_hat <= bound + half,
                    bound + half - e_hat)
    return rep


# -- semigroup gradient and Bakry-Emery --------------------------------------------------

@dataclass(frozen=True)
class _GradTask:
    N: int
    L: float
    dt: float
    model: Phi4Model
    seed: int
    ids: tuple
    t: float
    F: CylinderFunctional
    f: np.ndarray            # (R, N, Nh) or (N, Nh) initial coefficients


def _grad_task(task: _GradTask) -> np.ndarray:
    grid = TorusGrid(task.N, task.L)
    R = len(task.ids)
    f = task.f if task.f.ndim == 3 else np.broadcast_to(task.f, (R,) + task.f.shape)
    if task.t == 0:
        return task.F.gradient(grid.project(f))
    tr = simulate(grid, task.model, f, task.t, task.dt, _streams(task.seed, task.ids))
    u = tr.final_x + tr.final_v
    fl = TangentFlow(tr, cache=False)
    return fl.backward(task.F.gradient(u), 0, tr.steps)


@dataclass
class GradientEstimate:
    mean: np.ndarray          # DP_tF(f), half-spectrum coefficients
    se: np.ndarray            # per-coefficient standard errors (real and imaginary parts)
    samples: np.ndarray       # (replicas, N, Nh)

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def _gradient_samples(F, f_batch, t, ids, model, sim, executor=None) -> np.ndarray:
    grid = sim.grid
    chunks = _chunks(ids, sim.batch)
    tasks = []
    pos = 0
    for c in chunks:
        fc = f_batch[pos:pos + len(c)] if f_batch.ndim == 3 else f_batch
        pos += len(c)
        tasks.append(_GradTask(grid.N, grid.L, sim.dt, model, sim.base_seed, tuple(c), t, F, fc))
    return np.concatenate(_map(_grad_task, tasks, executor), axis=0)


def semigroup_gradient(F: CylinderFunctional, f, t: float, replicas: int, sim: SimSettings,
                       model: Phi4Model | None = None, executor=None,
                       ids=None) -> GradientEstimate:
    """DP_tF(f) = E[J*_{0,t} DF(u_t^f)] by Monte Carlo over replicas."""
    model = model or Phi4Model()
    grid = sim.grid
    f0 = _coeffs(grid, f)
    if t == 0:
        d = F.gradient(f0)
        return GradientEstimate(d, np.zeros(d.shape), d[None])
    ids = range(replicas) if ids is None else ids
    Y = _gradient_samples(F, f0, t, ids, model, sim, executor)
    n = Y.shape[0]
    se = (Y.real.std(axis=0, ddof=1) + 1j * Y.imag.std(axis=0, ddof=1)) / math.sqrt(n)
    return GradientEstimate(Y.mean(axis=0), se, Y)


def _ustat_sqnorm(grid: TorusGrid, Y: np.ndarray) -> float:
    """Unbiased estimate of ||E Y||^2 from iid samples Y_i (axis 0)."""
    n = Y.shape[0]
    S = Y.sum(axis=0)
    return float((grid.l2sq(S) - grid.l2sq(Y).sum()) / (n * (n - 1)))


@dataclass
class BECheck:
    t: float
    lhs: MeanCI
    rhs: MeanCI
    s_grid: np.ndarray
    integrand: np.ndarray
    integrand_se: np.ndarray
    quad_error: float

    @property
    def overlap(self) -> bool:
        return self.lhs.lo <= self.rhs.hi and self.rhs.lo <= self.lhs.hi


def be_s_grid(t: float, uniform: int = 8, refine: int = 3, ratio: float = 2.0) -> np.ndarray:
    """s-grid on [0, t]: ``uniform`` equal intervals, with the first one
    further split geometrically ``refine`` times towards s = 0."""
    h = t / uniform
    geo = h / ratio ** np.arange(refine, 0, -1)
    return np.unique(np.r_[0.0, geo, h * np.arange(1, uniform + 1)])


def _snap(x: float, dt: float) -> float:
    return round(x / dt) * dt


def _exp_trapezoid(y, x) -> float:
    """Trapezoid rule with the logarithmic mean on intervals where both ends
    are positive, exact for exponentially decaying integrands."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    a, b = y[:-1], y[1:]
    mean = np.where((a > 0) & (b > 0), _log_mean(a, b), 0.5 * (a + b))
    return float(np.sum(mean * np.diff(x)))


def be_identity_check(F: CylinderFunctional, f, t: float, s_grid, replicas: int,
                      sim: SimSettings, model: Phi4Model | None = None, outer: int = 64,
                      inner: int = 16, executor=None) -> BECheck:
    """Both sides of Var(F(u_t^f)) = 2 int_0^t P_{t-s} ||DP_sF||^2 (f) ds.

    LHS: sample variance of F(u_t^f) over ``replicas`` paths.
    RHS: for each s on the grid, ``outer`` samples x = u_{t-s}^f taken along
    common outer paths, and an unbiased U-statistic estimate of
    ||DP_sF(x)||^2 from ``inner`` fresh replicas started at x; the s-integral
    is an exponentially fitted trapezoid rule.  The quadrature error (full
    rule vs. the rule on every other node, Richardson-scaled) is folded into
    the RHS standard error.
    """
    model = model or Phi4Model()
    grid = sim.grid
    alloc = ReplicaAllocator()
    f0 = _coeffs(grid, f)
    raw = np.asarray(s_grid, dtype=float)
    if np.any(np.diff(raw) <= 0):
        raise ValueError("s-grid must be strictly increasing")
    # nodes finer than dt collapse onto the time grid
    s_grid = np.unique([_snap(s, sim.dt) for s in raw])
    if s_grid[0] != 0 or abs(s_grid[-1] - t) > 1e-12:
        raise ValueError("s-grid must increase from 0 to t on the time grid")
    if inner < 2:
        raise ValueError("nested estimate needs at least 2 inner replicas")

    # LHS
    lhs_vals = _final_values(F, f0, t, alloc.take(replicas), model, sim, executor)
    lhs = _variance_ci(lhs_vals)

    # outer paths to t, recorded at the needed times t - s
    out_ids = alloc.take(outer)
    xs = _outer_states(f0, t, [t - s for s in s_grid], out_ids, model, sim, executor)

    vals, ses = [], []
    for k, s in enumerate(s_grid):
        x = xs[k]  # (outer, N, Nh)
        if s == 0:
            d = F.gradient(x)
            q = grid.l2sq(d)
        else:
            ids = alloc.take(outer * inner)
            starts = np.repeat(x, inner, axis=0)
            Y = _gradient_samples(F, starts, s, ids, model, sim, executor)
            Y = Y.reshape((outer, inner) + Y.shape[1:])
            q = np.array([_ustat_sqnorm(grid, Y[j]) for j in range(outer)])
        vals.append(float(q.mean()))
        ses.append(float(q.std(ddof=1) / math.sqrt(q.size)))
    vals = np.array(vals)
    ses = np.array(ses)
    rhs = 2 * _exp_trapezoid(vals, s_grid)
    # trapezoid weights for the SE (outer samples shared across s: conservative sum)
    w = np.zeros(len(s_grid))
    d = np.diff(s_grid)
    w[:-1] += d / 2
    w[1:] += d / 2
    se_mc = 2 * float(np.sum(w * ses))
    coarse_idx = np.r_[0:len(s_grid):2]
    if coarse_idx[-1] != len(s_grid) - 1:
        coarse_idx = np.r_[coarse_idx, len(s_grid) - 1]
    coarse = 2 * _exp_trapezoid(vals[coarse_idx], s_grid[coarse_idx])
    quad = abs(rhs - coarse) / 3
    rhs_ci = MeanCI(rhs, math.hypot(se_mc, quad), outer)
    return BECheck(t, lhs, rhs_ci, s_grid, vals, ses, quad)


@dataclass(frozen=True)
class _ValueTask:
    N: int
    L: float
    dt: float
    model: Phi4Model
    seed: int
    ids: tuple
    t: float
    f: np.ndarray
    save_steps: tuple = ()


def _value_task(task: _ValueTask):
    grid = TorusGrid(task.N, task.L)
    R = len(task.ids)
    saved = {}
    want = set(task.save_steps)

    def cb(i, v, x, c_now):
        if i in want:
            saved[i] = x + v

    f = np.broadcast_to(task.f, (R,) + task.f.shape[-2:])
    tr = simulate(grid, task.model, f, task.t, task.dt, _streams(task.seed, task.ids),
                  record=False, callback=cb if want else None)
    if want:
        return np.stack([saved[i] for i in task.save_steps])
    return tr.final_x + tr.final_v


def _final_values(F, f0, t, ids, model, sim, executor):
    tasks = [_ValueTask(sim.N, sim.L, sim.dt, model, sim.base_seed, tuple(c), t, f0)
             for c in _chunks(ids, sim.batch)]
    u = np.concatenate(_map(_value_task, tasks, executor), axis=0)
    return F.value(u)


def _outer_states(f0, t, times, ids, model, sim, executor):
    steps = tuple(int(round(s / sim.dt)) for s in times)
    T = max(times)
    if T == 0:
        return np.broadcast_to(f0, (len(times), len(ids)) + f0.shape).copy()
    tasks = [_ValueTask(sim.N, sim.L, sim.dt, model, sim.base_seed, tuple(c), T, f0, steps)
             for c in _chunks(ids, sim.batch)]
    return np.concatenate(_map(_value_task, tasks, executor), axis=1)


def _variance_ci(x) -> MeanCI:
    """Sample variance with a normal-theory SE from the fourth central moment."""
    x = np.asarray(x, dtype=float)
    n = x.size
    v = x.var(ddof=1)
    m4 = np.mean((x - x.mean()) ** 4)
    se = math.sqrt(max(m4 - v**2 * (n - 3) / (n - 1), 0.0) / n)
    return MeanCI(float(v), se, n)


def gaussian_variance(grid: TorusGrid, h_hat: np.ndarray, m: float, t: float = math.inf) -> float:
    """Var <X_t, h> for the driver started at 0: sum_k |h_k|^2 (1 - e^{-2 lam t}) / lam."""
    lam = grid.lam(m)
    fac = 1.0 / lam if math.isinf(t) else -np.expm1(-2 * lam * t) / lam
    return float(np.sum(grid.weights * grid.active * np.abs(h_hat) ** 2 * fac))


# -- spectral gap ----------------------------------------------------------------------

def hminus_sq(grid: TorusGrid, c: np.ndarray, kappa: float) -> np.ndarray:
    return np.sum(grid.weights * (1 + grid.k2) ** (-kappa) * np.abs(c) ** 2, axis=(-2, -1))


@dataclass(frozen=True)
class _ChainTask:
    N: int
    L: float
    dt: float
    model: Phi4Model
    seed: int
    ids: tuple
    burn_steps: int
    run_steps: int
    thin: int
    Fs: tuple
    kappa: float


def _chain_task(task: _ChainTask):
    grid = TorusGrid(task.N, task.L)
    R = len(task.ids)
    nF = len(task.Fs)
    n_samp = task.run_steps // task.thin
    vals = np.zeros((nF, R, n_samp))
    dir_ = np.zeros((nF, R, n_samp))

    def cb(i, v, x, c_now):
        k = i - task.burn_steps
        if k > 0 and k % task.thin == 0:
            u = x + v
            j = k // task.thin - 1
            for a, F in enumerate(task.Fs):
                vals[a, :, j] = F.value(u)
                dir_[a, :, j] = hminus_sq(grid, F.gradient(u), task.kappa)

    T = (task.burn_steps + task.run_steps) * task.dt
    simulate(grid, task.model, np.zeros((grid.N, grid.N)), T, task.dt,
             _streams(task.seed, task.ids), record=False, callback=cb)
    return vals, dir_


@dataclass
class GapEstimate:
    name: str
    var: MeanCI
    dirichlet: MeanCI
    ratio: float
    ratio_se: float
    stationary: bool
    z_halves: float


def _var_from_series(x: np.ndarray, batches: int) -> tuple[MeanCI, float]:
    """Var of a stationary series pooled over chains with a batch-means SE,
    plus the two-half mean z statistic."""
    R, n = x.shape
    L = n // batches
    xb = x[:, : L * batches].reshape(R, batches, L)
    mu = x.mean()
    # batch estimates of the centred second moment
    v_b = ((xb - mu) ** 2).mean(axis=-1).ravel()
    var = MeanCI(float(v_b.mean()), float(v_b.std(ddof=1) / math.sqrt(v_b.size)), x.size)
    m_b = xb.mean(axis=-1)
    h = batches // 2
    a, b = m_b[:, :h].ravel(), m_b[:, h:].ravel()
    z = (a.mean() - b.mean()) / math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size + 1e-300)
    return var, float(z)


def spectral_gap_estimate(Fs, m: float, kappa: float, burn_in: float, run_length: float,
                          replicas: int, sim: SimSettings, coupling: float = 1.0,
                          thin: int = 10, batches: int = 10, z_max: float = 4.0,
                          executor=None) -> list[GapEstimate]:
    """Var_nu F and E_nu ||DF||^2_{H^-kappa} from long runs of the dynamics."""
    model = Phi4Model(m, coupling=coupling)
    burn = int(round(burn_in / sim.dt))
    run = int(round(run_length / sim.dt))
    tasks = [_ChainTask(sim.N, sim.L, sim.dt, model, sim.base_seed, tuple(c), burn, run, thin,
                        tuple(Fs), kappa) for c in _chunks(range(replicas), sim.batch)]
    res = _map(_chain_task, tasks, executor)
    vals = np.concatenate([r[0] for r in res], axis=1)
    dirs = np.concatenate([r[1] for r in res], axis=1)
    out = []
    for a, F in enumerate(Fs):
        var, z = _var_from_series(vals[a], batches)
        dmean = batch_means(dirs[a], batches)
        if dmean.mean == 0:
            ratio, rse = 0.0, 0.0
        else:
            ratio = var.mean / dmean.mean
            rse = abs(ratio) * math.hypot(var.se / max(var.mean, 1e-300), dmean.se / dmean.mean)
        out.append(GapEstimate(F.name, var, dmean, ratio, rse, abs(z) < z_max, z))
    return out


def gaussian_gap_ratio(grid: TorusGrid, F: CylinderFunctional, m: float, kappa: float) -> float:
    """Exact Var_nu F / E_nu ||DF||^2_{H^-kappa} for a linear F under the free field."""
    if F.kind != "linear":
        raise ValueError("closed form available for linear functionals only")
    h = np.einsum("i,ikl->kl", F.a, F.hs)
    return gaussian_variance(grid, h, m) / float(hminus_sq(grid, h, kappa))
