"""Remainder dynamics v = u - X and the full solution u.

The remainder solves

    (d/dt - Laplacian + m) v = -v^3 - 3 v^2 W1 - 3 v W2 - W3 + 3 c_inf (W1 + v)

where (W1, W2, W3) are the Wick powers of the Gaussian driver and c_inf is
the under-renormalization of a driver of the current age.  Time stepping is
exponential Euler: the linear part is solved exactly per mode and the
nonlinearity is frozen over the step.  Products involving v are evaluated
on a 2x padded grid, which makes every cubic term an exact truncated
convolution (and gives the linearized flow an exact discrete adjoint).

The engine works on a batch of R replicas at once; all arrays carry a
leading replica axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .noise import (
    NoiseStream,
    as_streams,
    c_t_infty,
    ou_factors,
    ou_increment,
    white_fields,
    wick_constant,
    wick_from_grid,
    wick_besov_norms,
    WickTriple,
)
from .spectral import Field, TorusGrid, grad_sup, lp_norm, save_snapshot

__all__ = [
    "Phi4Model",
    "RemainderState",
    "Trajectory",
    "BlowUpError",
    "v_step",
    "simulate",
    "evolve",
    "full_solution",
    "coming_down_profile",
    "gradient_profile",
    "save_checkpoint",
]

BLOWUP = 1e8


class BlowUpError(RuntimeError):
    """Raised when the remainder leaves the representable range."""

    def __init__(self, t: float, replicas):
        self.t = t
        self.replicas = list(replicas)
        super().__init__(f"remainder blew up at t={t:.6g} (replicas {self.replicas}); "
                         "reduce dt or N")


@dataclass(frozen=True)
class Phi4Model:
    """Model switches.

    coupling : prefactor of the whole nonlinearity (0 gives the Gaussian model)
    noise : drive with white noise; when off all Wick fields vanish
    renormalize : include the 3 c_inf (W1 + v) counterterm
    """

    m: float = 1.0
    coupling: float = 1.0
    noise: bool = True
    renormalize: bool = True

    def __post_init__(self):
        if not self.m > 0:
            # the zero mode has no stationary law without mass
            raise ValueError(f"mass must be positive, got {self.m}")


@dataclass
class RemainderState:
    """v_{s,t} for one or many replicas (half-spectrum coefficients)."""

    grid: TorusGrid
    v: np.ndarray
    t: float
    birth: np.ndarray | float
    m: float

    @property
    def field(self) -> Field:
        if self.v.ndim != 2:
            raise ValueError("field view needs an unbatched state")
        return Field.from_half(self.grid, self.v)


def _linear_factors(grid: TorusGrid, m: float, dt: float):
    lam = grid.lam(m)
    decay = np.exp(-lam * dt)
    phi1 = -np.expm1(-lam * dt) / lam
    return decay, phi1


class _Kernel:
    """Shared per-(grid, m, dt) precomputation for the nonlinear and tangent steps."""

    def __init__(self, grid: TorusGrid, model: Phi4Model, dt: float):
        self.grid = grid
        self.model = model
        self.dt = dt
        self.pad = grid.padded(2.0)
        self.decay, self.phi1 = _linear_factors(grid, model.m, dt)
        self.decay = np.where(grid.active, self.decay, 0.0)
        self.phi1 = np.where(grid.active, self.phi1, 0.0)

    def padded_wick(self, x_hat: np.ndarray, c_now):
        """W1 and W2 on the padded grid plus the active projection of W3."""
        g = self.grid
        w1 = g.inv(x_hat)
        w2, w3 = wick_from_grid(w1, c_now)
        w1p = self.pad.up(x_hat)
        w2p = self.pad.up(g.project(g.fwd(w2)))
        w3h = g.project(g.fwd(w3))
        return w1p, w2p, w3h

    def nonlinearity(self, v_hat, x_hat, c_now, c_inf, noise: bool):
        k = self.model.coupling
        vp = self.pad.up(v_hat)
        if noise:
            w1p, w2p, w3h = self.padded_wick(x_hat, c_now)
            v2 = vp * vp
            prod = -(v2 * vp) - 3.0 * v2 * w1p - 3.0 * vp * w2p
            out = self.pad.down(prod) - w3h
        else:
            out = self.pad.down(-(vp * vp * vp))
        ci = np.asarray(c_inf, dtype=float)[..., None, None]
        if np.any(ci):
            out = out + 3.0 * ci * (x_hat + v_hat)
        return k * out, vp

    def potential(self, v_hat, x_hat, c_now, noise: bool):
        """Padded-grid multiplier q with d/dv N = q + 3 c_inf (times coupling)."""
        vp = self.pad.up(v_hat)
        if noise:
            w1p, w2p, _ = self.padded_wick(x_hat, c_now)
            q = -3.0 * (vp * vp + 2.0 * vp * w1p + w2p)
        else:
            q = -3.0 * vp * vp
        return self.model.coupling * q


def v_step(state: RemainderState, wick: WickTriple | None, c_inf, dt: float,
           coupling: float = 1.0) -> RemainderState:
    """One exponential-Euler step of the remainder equation.

    ``wick`` holds the Wick fields at the state's time (``None`` for the
    noise-free equation) and ``c_inf`` the counterterm constant.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    grid = state.grid
    noise = wick is not None
    model = Phi4Model(state.m, coupling, noise, bool(np.any(c_inf)))
    ker = _Kernel(grid, model, dt)
    if noise:
        x_hat = grid.project(grid.fwd(wick.W1))
        c_now = wick.c_now
    else:
        x_hat = np.zeros_like(state.v)
        c_now = 0.0
    nl, vp = ker.nonlinearity(state.v, x_hat, c_now, c_inf, noise)
    v_new = ker.decay * state.v + ker.phi1 * nl
    _check_finite(v_new, grid, state.t + dt)
    return RemainderState(grid, v_new, state.t + dt, state.birth, state.m)


def _check_finite(v_hat, grid, t, vp=None):
    a = grid.inv(v_hat) if vp is None else vp
    big = np.max(np.abs(a), axis=(-2, -1))
    bad = ~(big <= BLOWUP)
    if np.any(bad):
        raise BlowUpError(t, np.flatnonzero(np.atleast_1d(bad)))


# -- trajectories -------------------------------------------------------------

@dataclass
class Restart:
    replica: int
    step: int
    capped: bool


@dataclass
class Trajectory:
    """Recorded path of a batch of replicas on the uniform grid t_i = i dt.

    ``v_hat[i]`` and ``x_hat[i]`` are the right limits at t_i (after any
    restart at that time); ``left`` keeps the pre-restart pair for replicas
    restarted at step i so u can be checked for continuity.  With stopping,
    ``wick_norms[i]`` holds the Besov(-alpha) norms of (W1, W2, W3) at t_i
    before any reset at that time.  Everything a
    tangent or adjoint pass needs (v, driver, c_now, c_inf per step) is here.
    """

    grid: TorusGrid
    model: Phi4Model
    dt: float
    steps: int
    v_hat: np.ndarray | None
    x_hat: np.ndarray | None
    c_now: np.ndarray
    c_inf: np.ndarray
    birth: np.ndarray
    restarts: list = field(default_factory=list)
    left: dict = field(default_factory=dict)
    stream_specs: list = field(default_factory=list)
    stopping: object = None
    final_v: np.ndarray | None = None
    final_x: np.ndarray | None = None
    wick_norms: np.ndarray | None = None

    @property
    def replicas(self) -> int:
        return self.c_now.shape[1]

    @property
    def T(self) -> float:
        return self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def index(self, t: float) -> int:
        i = int(round(t / self.dt))
        if i < 0 or i > self.steps or abs(i * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not on the trajectory grid (dt={self.dt}, T={self.T})")
        return i

    @property
    def recorded(self) -> bool:
        return self.v_hat is not None

    def restart_steps(self, replica: int) -> list[int]:
        return [r.step for r in self.restarts if r.replica == replica]

    def u_hat(self, i: int) -> np.ndarray:
        return self.x_hat[i] + self.v_hat[i]

    def select(self, replicas) -> "Trajectory":
        """Sub-trajectory restricted to the given replica indices."""
        idx = np.asarray(replicas)
        pos = {int(r): j for j, r in enumerate(idx)}
        return Trajectory(
            self.grid, self.model, self.dt, self.steps,
            None if self.v_hat is None else self.v_hat[:, idx],
            None if self.x_hat is None else self.x_hat[:, idx],
            self.c_now[:, idx], self.c_inf[:, idx], self.birth[:, idx],
            [Restart(pos[r.replica], r.step, r.capped) for r in self.restarts if r.replica in pos],
            {(i, pos[r]): val for (i, r), val in self.left.items() if r in pos},
            [self.stream_specs[int(r)] for r in idx] if self.stream_specs else [],
            self.stopping,
            None if self.final_v is None else self.final_v[idx],
            None if self.final_x is None else self.final_x[idx],
            None if self.wick_norms is None else self.wick_norms[:, idx],
        )


def _as_batch(grid: TorusGrid, f, R: int) -> np.ndarray:
    """Initial data as active half-spectrum coefficients of shape (R, N, N//2+1)."""
    if isinstance(f, Field):
        c = f.half
    else:
        a = np.asarray(f)
        if np.iscomplexobj(a):
            c = a
        else:
            c = grid.fwd(a)
    c = grid.project(c)
    if c.ndim == 2:
        c = np.broadcast_to(c, (R,) + c.shape)
    if c.shape[0] != R:
        raise ValueError(f"initial data batch {c.shape[0]} does not match {R} streams")
    return np.array(c)


def simulate(grid: TorusGrid, model: Phi4Model, f, T: float, dt: float, streams,
             stopping=None, record: bool = True, substeps: int = 1,
             callback: Callable | None = None, wick_scale: float = 1.0,
             x0=None, t0: float = 0.0) -> Trajectory:
    """Batch integrator behind ``evolve``.

    Parameters
    ----------
    f : Field, real (N, N) / (R, N, N) samples, or half-spectrum coefficients
        Initial condition u_0 (the driver starts at zero so v_0 = u_0).
    streams : sequence of NoiseStream
        One per replica; advanced in place.
    stopping : StoppingConfig, optional
        Enables restarts of the driver (see ``stopping.run_with_restarts``).
    record : bool
        Keep per-step coefficients (needed for tangent/adjoint passes).
    substeps : int
        Number of noise events per step (exact sub-step combination).
    callback : callable(i, v_hat, x_hat, c_now), optional
        Called at every grid time, including t = 0.
    x0, t0 : optional
        Continue a run without restarts: driver coefficients at the start and
        the driver's age t0 (grid times are then t0 + i dt).  Together with
        ``substeps`` this lets a run switch to a coarser step mid-way while
        consuming exactly the same noise path.
    """
    streams = as_streams(streams)
    R = len(streams)
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    if stopping is not None and not model.noise:
        raise ValueError("stopping requires the noise to be on")
    if (x0 is not None or t0 != 0) and stopping is not None:
        raise ValueError("continuation (x0, t0) is not supported with stopping")
    if t0 < 0:
        raise ValueError("t0 must be nonnegative")
    ker = _Kernel(grid, model, dt)
    v = _as_batch(grid, f, R)
    x = np.zeros_like(v) if x0 is None else grid.project(np.array(x0, dtype=complex))
    if x.shape != v.shape:
        raise ValueError("x0 does not match the batch shape")
    birth = np.zeros(R, dtype=np.int64)
    specs = [s.spec() for s in streams]

    # tables indexed by driver age in steps
    ages = np.arange(steps + 1)
    c_now_tab = wick_constant(grid, model.m, t0 + ages * dt) * wick_scale if model.noise \
        else np.zeros(steps + 1)
    if model.renormalize and model.noise:
        c_inf_tab = c_t_infty(grid, model.m, t0 + (ages + 0.5) * dt)
    else:
        c_inf_tab = np.zeros(steps + 1)
    sub_h = dt / substeps
    ou_decay, _ = ou_factors(grid, model.m, sub_h)

    c_now_rec = np.zeros((steps + 1, R))
    c_inf_rec = np.zeros((steps, R))
    birth_rec = np.zeros((steps + 1, R), dtype=np.int64)
    v_rec = np.empty((steps + 1,) + v.shape, dtype=complex) if record else None
    x_rec = np.empty((steps + 1,) + v.shape, dtype=complex) if record else None
    restarts: list[Restart] = []
    left: dict = {}
    cap_steps = barrier = None
    norms_rec = None
    if stopping is not None:
        norms_rec = np.zeros((steps + 1, R, 3))
        cap_steps = max(1, int(np.ceil(stopping.theta / dt - 1e-9)))
        barrier = stopping.eta

    def _store(i):
        c_now_rec[i] = c_now_tab[i - birth]
        birth_rec[i] = birth
        if record:
            v_rec[i] = v
            x_rec[i] = x
        if callback is not None:
            callback(i, v, x, c_now_rec[i])

    _store(0)
    for i in range(steps):
        age = i - birth
        c_now = c_now_tab[age]
        c_inf = c_inf_tab[age]
        c_inf_rec[i] = c_inf
        nl, vp = ker.nonlinearity(v, x, c_now, c_inf, model.noise)
        bad = ~(np.max(np.abs(vp), axis=(-2, -1)) <= BLOWUP)
        if np.any(bad):
            raise BlowUpError(i * dt, np.flatnonzero(bad))
        v = ker.decay * v + ker.phi1 * nl
        if model.noise:
            for _ in range(substeps):
                x = ou_decay * x + ou_increment(grid, model.m, sub_h, white_fields(grid, streams))
        if stopping is not None:
            j = i + 1
            age = j - birth
            w1 = grid.inv(x)
            w2, w3 = wick_from_grid(w1, c_now_tab[age])
            norms = wick_besov_norms(grid, WickTriple(w1, w2, w3, None, None), stopping.alpha)
            norms_rec[j] = norms
            hit = norms.max(axis=-1) >= barrier
            capped = age >= cap_steps
            fire = hit | capped
            for r in np.flatnonzero(fire):
                restarts.append(Restart(int(r), j, bool(capped[r] and not hit[r])))
                if record:
                    left[(j, int(r))] = (x[r].copy(), v[r].copy())
            if np.any(fire):
                v = v.copy()
                x = x.copy()
                v[fire] = x[fire] + v[fire]
                x[fire] = 0.0
                birth = np.where(fire, j, birth)
        _store(i + 1)

    vfinal = grid.inv(v)
    bad = ~(np.max(np.abs(vfinal), axis=(-2, -1)) <= BLOWUP)
    if np.any(bad):
        raise BlowUpError(steps * dt, np.flatnonzero(bad))
    return Trajectory(grid, model, dt, steps, v_rec, x_rec, c_now_rec, c_inf_rec, birth_rec,
                      restarts, left, specs, stopping, v, x, norms_rec)


def evolve(f: Field, T: float, dt: float, stream, stopping=None, m: float = 1.0,
           model: Phi4Model | None = None, record: bool = True, substeps: int = 1) -> Trajectory:
    """Integrate u = X + v from u_0 = f for one replica or a batch of streams."""
    model = model or Phi4Model(m)
    grid = f.grid if isinstance(f, Field) else None
    if grid is None:
        raise TypeError("evolve expects a Field initial condition")
    if stopping is not None:
        stopping.validate()
    return simulate(grid, model, f, T, dt, stream, stopping=stopping, record=record,
                    substeps=substeps)


def full_solution(traj: Trajectory, t: float, replica: int = 0) -> Field:
    """u(t) = X(t) + v(t) on a grid time (right limit at restart times)."""
    i = traj.index(t)
    if not traj.recorded:
        if i != traj.steps:
            raise ValueError("trajectory was not recorded; only the final time is available")
        c = traj.final_x[replica] + traj.final_v[replica]
    else:
        c = traj.u_hat(i)[replica]
    return Field.from_half(traj.grid, c)


def left_solution(traj: Trajectory, step: int, replica: int = 0) -> np.ndarray:
    """Coefficients of u just before a restart at ``step`` (for continuity checks)."""
    x, v = traj.left[(step, replica)]
    return x + v


# -- profiles -------------------------------------------------------------------

@dataclass
class ProfileStats:
    labels: list
    values: np.ndarray  # (len(labels), replicas)
    quantiles: dict = field(default_factory=dict)

    def quantile(self, q: float) -> np.ndarray:
        return np.quantile(self.values, q, axis=1)


def _profile(grid, model, f_batch, T, dt, streams, weight_fn, stat_fn,
             fine_until: float = 0.0, refine: int = 1):
    """sup over grid times t in (0, T] of weight_fn(t) * stat_fn(v_t).

    With ``fine_until > 0`` the run uses dt / refine up to that time and then
    dt with ``refine`` exact noise substeps, so the noise path is the same as
    for a run at dt / refine throughout.
    """
    sup = np.zeros(len(streams))

    def make_cb(t0, h):
        def cb(i, v, x, c_now):
            if i == 0:
                return
            val = weight_fn(t0 + i * h) * stat_fn(v)
            np.maximum(sup, val, out=sup)
        return cb

    if fine_until > 0 and refine > 1:
        h = dt / refine
        tr = simulate(grid, model, f_batch, fine_until, h, streams, record=False,
                      callback=make_cb(0.0, h))
        simulate(grid, model, tr.final_v, T - fine_until, dt, streams, record=False,
                 substeps=refine, callback=make_cb(fine_until, dt),
                 x0=tr.final_x, t0=fine_until)
    else:
        simulate(grid, model, f_batch, T, dt, streams, record=False, callback=make_cb(0.0, dt))
    return sup


def constant_profile(x, y):
    return np.ones_like(x)


def coming_down_profile(magnitudes, p: float, T: float, dt: float, replicas: int,
                        grid: TorusGrid | None = None, m: float = 1.0, noise: bool = True,
                        profile: Callable | None = None, base_seed: int = 0,
                        probs=(0.1, 0.5, 0.9), fine_until: float = 0.0,
                        refine: int = 1) -> ProfileStats:
    """sup_{t <= T} t^{1/2} ||v_{0,t}||_{L^p} for data f = magnitude * profile.

    The same noise replicas are reused for every magnitude (common random
    numbers), so spreads across magnitudes reflect the initial data only.
    Large data make the explicit cubic stiff at early times; ``fine_until``
    and ``refine`` resolve that stretch with dt / refine (see ``_profile``).
    """
    if T > 1 or np.isinf(p):
        raise ValueError("need T <= 1 and finite p")
    grid = grid or TorusGrid(32, 1.0)
    base = Field.from_function(grid, profile or constant_profile)
    model = Phi4Model(m, noise=noise)
    out = []
    for a in magnitudes:
        streams = [NoiseStream(base_seed, r) for r in range(replicas)]
        out.append(_profile(grid, model, base * float(a), T, dt, streams,
                            np.sqrt, lambda v: lp_norm(grid, grid.inv(v), p),
                            fine_until, refine))
    values = np.array(out)
    q = {pr: np.quantile(values, pr, axis=1) for pr in probs}
    return ProfileStats(list(magnitudes), values, q)


def gradient_profile(f: Field, T: float, dt: float, eps: float, replicas: int,
                     m: float = 1.0, noise: bool = True, base_seed: int = 0,
                     probs=(0.1, 0.5, 0.9)) -> ProfileStats:
    """sup_{t <= T} t^{1 + eps} ||grad v_{0,t}||_{L^inf} over replicas."""
    if not eps > 0 or T > 1:
        raise ValueError("need eps > 0 and T <= 1")
    grid = f.grid
    streams = [NoiseStream(base_seed, r) for r in range(replicas)]
    sup = _profile(grid, Phi4Model(m, noise=noise), f, T, dt, streams,
                   lambda t: t ** (1 + eps), lambda v: grad_sup(grid, v))
    values = sup[None, :]
    return ProfileStats([eps], values, {pr: np.quantile(sup, pr) for pr in probs})


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(traj: Trajectory, directory, replica: int = 0, every: int = 1) -> Path:
    """Manifest JSON plus per-step v and u snapshots for one replica."""
    if not traj.recorded:
        raise ValueError("checkpoint needs a recorded trajectory")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(0, traj.steps + 1, every):
        for name, c in (("v", traj.v_hat[i, replica]), ("u", traj.u_hat(i)[replica])):
            fn = f"{name}_{i:06d}.bin"
            save_snapshot(Field.from_half(traj.grid, c), d / fn)
            files.append(fn)
    manifest = {
        "grid": {"N": traj.grid.N, "L": traj.grid.L},
        "m": traj.model.m,
        "coupling": traj.model.coupling,
        "noise": traj.model.noise,
        "renormalize": traj.model.renormalize,
        "dt": traj.dt,
        "steps": traj.steps,
        "stream": list(traj.stream_specs[replica]) if traj.stream_specs else None,
        "restart_times": [s * traj.dt for s in traj.restart_steps(replica)],
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d
