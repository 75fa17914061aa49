"""Linearized flow J_{s,t} h along a recorded trajectory, its exact adjoint,
operator norms and finite-difference validation.

The tangent equation is stepped with the same exponential-Euler scheme and
the same padded products as the nonlinear run:

    J <- D J + Phi M_i J,   M_i x = trunc(q_i * pad(x)) + 3 c_inf_i x,

with D = e^{-lam dt}, Phi = (1 - e^{-lam dt}) / lam and q_i the padded-grid
potential -3 (v^2 + 2 v W1 + W2).  M_i is symmetric in L^2, so the adjoint
step is g <- D g + M_i (Phi g), applied in reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Phi4Model, Trajectory, _Kernel, simulate
from .noise import NoiseStream
from .spectral import Field, Sobolev, TorusGrid

__all__ = [
    "TangentFlow",
    "TangentField",
    "j_step",
    "propagate",
    "adjoint_propagate",
    "operator_norm",
    "OperatorNorm",
    "dense_matrix",
    "active_basis",
    "finite_diff_check",
]

_CACHE_BYTES = 512 * 2**20


class TangentFlow:
    """Step operators of the linearized equation along ``traj``.

    All replicas of the trajectory are handled at once: tangent arrays have
    shape (..., R, N, N//2+1) where R is the number of replicas and any
    further leading axes (probes) broadcast.  Potentials are cached when
    they fit in memory.
    """

    def __init__(self, traj: Trajectory, cache: bool | None = None):
        if not traj.recorded:
            raise ValueError("tangent passes need a recorded trajectory")
        self.traj = traj
        self.grid = traj.grid
        self.ker = _Kernel(traj.grid, traj.model, traj.dt)
        M = self.ker.pad.M
        need = traj.steps * traj.replicas * M * M * 8
        self._cache_on = (need <= _CACHE_BYTES) if cache is None else cache
        self._cache: dict[int, np.ndarray] = {}
        self._zero_potential = traj.model.coupling == 0

    def potential(self, i: int) -> np.ndarray | None:
        if self._zero_potential:
            return None
        q = self._cache.get(i)
        if q is None:
            tr = self.traj
            if tr.model.noise:
                q = self.ker.potential(tr.v_hat[i], tr.x_hat[i], tr.c_now[i], True)
            else:
                q = self.ker.potential(tr.v_hat[i], None, 0.0, False)
            if self._cache_on:
                self._cache[i] = q
        return q

    def apply_m(self, i: int, x: np.ndarray) -> np.ndarray:
        q = self.potential(i)
        if q is None:
            return np.zeros_like(x)
        out = self.ker.pad.down(q * self.ker.pad.up(x))
        c = self.traj.c_inf[i]
        if np.any(c):
            out = out + (3.0 * self.traj.model.coupling) * c[:, None, None] * x
        return out

    def step(self, i: int, J: np.ndarray) -> np.ndarray:
        return self.ker.decay * J + self.ker.phi1 * self.apply_m(i, J)

    def adjoint_step(self, i: int, g: np.ndarray) -> np.ndarray:
        return self.ker.decay * g + self.apply_m(i, self.ker.phi1 * g)

    def forward(self, h: np.ndarray, i0: int, i1: int) -> np.ndarray:
        J = self.grid.project(h)
        for i in range(i0, i1):
            J = self.step(i, J)
        return J

    def backward(self, g: np.ndarray, i0: int, i1: int) -> np.ndarray:
        G = self.grid.project(g)
        for i in range(i1 - 1, i0 - 1, -1):
            G = self.adjoint_step(i, G)
        return G

    def forward_path(self, h: np.ndarray, i0: int, i1: int) -> np.ndarray:
        """All J_{t_i0, t_i} h for i0 <= i <= i1, stacked on a leading axis."""
        J = self.grid.project(h)
        out = np.empty((i1 - i0 + 1,) + J.shape, dtype=complex)
        out[0] = J
        for i in range(i0, i1):
            J = self.step(i, J)
            out[i - i0 + 1] = J
        return out


@dataclass
class TangentField:
    """A tangent vector J h at grid time ``step`` along one trajectory."""

    coeffs: np.ndarray
    step: int
    flow: TangentFlow

    @property
    def t(self) -> float:
        return self.step * self.flow.traj.dt

    def field(self, replica: int = 0) -> Field:
        c = self.coeffs if self.coeffs.ndim == 2 else self.coeffs[..., replica, :, :]
        return Field.from_half(self.flow.grid, c)


def _batch(flow: TangentFlow, h) -> np.ndarray:
    R = flow.traj.replicas
    c = h.half if isinstance(h, Field) else np.asarray(h)
    if c.ndim == 2:
        c = np.broadcast_to(c, (R,) + c.shape)
    return c


def j_step(J: TangentField, step: int | None = None) -> TangentField:
    """Advance a tangent field by one recorded step."""
    if step is not None and step != J.step:
        raise ValueError(f"tangent field is at step {J.step}, record is for step {step}")
    if J.step >= J.flow.traj.steps:
        raise ValueError("no record beyond the final time")
    return TangentField(J.flow.step(J.step, J.coeffs), J.step + 1, J.flow)


def _flow(traj) -> TangentFlow:
    return traj if isinstance(traj, TangentFlow) else TangentFlow(traj)


def propagate(h, traj, t_from: float, t_to: float) -> np.ndarray:
    """J_{t_from, t_to} h for every replica, shape (R, N, N//2+1)."""
    fl = _flow(traj)
    i0, i1 = fl.traj.index(t_from), fl.traj.index(t_to)
    if i1 < i0:
        raise ValueError("t_to must not precede t_from")
    return fl.forward(_batch(fl, h), i0, i1)


def adjoint_propagate(g, traj, t_from: float, t_to: float) -> np.ndarray:
    """J*_{t_from, t_to} g: the L^2 adjoint of ``propagate`` over the same interval."""
    fl = _flow(traj)
    i0, i1 = fl.traj.index(t_from), fl.traj.index(t_to)
    if i1 < i0:
        raise ValueError("t_to must not precede t_from")
    return fl.backward(_batch(fl, g), i0, i1)


# -- operator norms ---------------------------------------------------------------

@dataclass
class OperatorNorm:
    """Per-replica norm estimates of J_{0,t} into the target space."""

    t: float
    target: object
    method: str
    values: np.ndarray
    converged: np.ndarray
    history: np.ndarray | None = None

    def moment(self, p: float = 2.0) -> float:
        return float(np.mean(self.values**p) ** (1.0 / p))


def _target_weight(grid: TorusGrid, target) -> np.ndarray:
    if target is None:
        target = Sobolev(0.0)
    if not isinstance(target, Sobolev):
        raise TypeError("operator norms support Sobolev targets only")
    if not 0 <= target.kappa < 1:
        raise ValueError(f"target order must lie in [0, 1), got {target.kappa}")
    return (1.0 + grid.k2) ** target.kappa


def operator_norm(traj, t: float, target=None, method: str = "power_iteration",
                  budget: int = 30, seed: int = 0, tol: float = 1e-6) -> OperatorNorm:
    """Estimate ||J_{0,t}||_{L^2 -> H^kappa} for each replica of ``traj``.

    probes : max Rayleigh quotient over ``budget`` random Gaussian directions.
    power_iteration : iterate J* Lambda^kappa J from a random start; the
        Rayleigh quotients are nondecreasing and converge to the squared norm.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    fl = _flow(traj)
    grid = fl.grid
    i1 = fl.traj.index(t)
    w = _target_weight(grid, target)
    R = fl.traj.replicas
    stream = NoiseStream(seed, 0)

    def rand(tag, shape):
        return grid.project(grid.fwd(stream.aux_normals(tag, shape + (grid.N, grid.N))))

    def unit(h):
        n = np.sqrt(grid.l2sq(h))
        return h / n[..., None, None]

    if method == "probes":
        h = unit(rand(0, (budget, R)))
        Jh = fl.forward(h, 0, i1)
        vals = np.sqrt(np.max(grid.inner(Jh, w * Jh), axis=0))
        return OperatorNorm(t, target, method, vals, np.ones(R, dtype=bool))
    if method != "power_iteration":
        raise ValueError(f"unknown method {method!r}")
    h = unit(rand(1, (R,)))
    hist = []
    prev = None
    converged = np.zeros(R, dtype=bool)
    for _ in range(budget):
        Jh = fl.forward(h, 0, i1)
        rq = grid.inner(Jh, w * Jh)
        hist.append(np.sqrt(np.maximum(rq, 0.0)))
        if prev is not None:
            converged = np.abs(hist[-1] - prev) <= tol * np.maximum(hist[-1], 1e-300)
            if np.all(converged):
                break
        prev = hist[-1]
        g = fl.backward(w * Jh, 0, i1)
        n = np.sqrt(grid.l2sq(g))
        if np.any(n == 0):
            break
        h = g / n[..., None, None]
    hist = np.array(hist)
    return OperatorNorm(t, target, method, hist[-1], converged, hist)


def dense_matrix(traj, t_from: float, t_to: float, replica: int = 0) -> np.ndarray:
    """J_{t_from,t_to} as a dense matrix in an orthonormal real basis of the
    active band (columnwise assembly); for small-grid oracles only."""
    fl = _flow(traj)
    grid = fl.grid
    basis = active_basis(grid)
    i0, i1 = fl.traj.index(t_from), fl.traj.index(t_to)
    R = fl.traj.replicas
    H = np.zeros((len(basis), R) + basis.shape[1:], dtype=complex)
    H[:, replica] = basis
    cols = fl.forward(H, i0, i1)[:, replica]
    return np.array([[grid.inner(b, c) for c in cols] for b in basis])


def active_basis(grid: TorusGrid) -> np.ndarray:
    """Orthonormal basis of real fields in the active band (half-spectrum coeffs)."""
    out = []
    h = grid.N // 2
    shape = (grid.N, grid.N // 2 + 1)
    for kx in range(-(h - 1), h):
        for ky in range(0, h):
            if ky == 0 and kx < 0:
                continue
            if ky == 0 and kx == 0:
                c = np.zeros(shape, complex)
                c[0, 0] = 1.0
                out.append(c)
                continue
            for val in (1.0, 1j):
                c = np.zeros(shape, complex)
                c[kx % grid.N, ky] = val / np.sqrt(2)
                if ky == 0:
                    c[-kx % grid.N, 0] = np.conj(val) / np.sqrt(2)
                out.append(c)
    return np.array(out)


# -- finite differences -----------------------------------------------------------

@dataclass
class FiniteDiffResult:
    eps: float
    rel_error: float
    fd: np.ndarray
    jh: np.ndarray


def finite_diff_check(f: Field, h: Field, eps: float, T: float, dt: float, stream,
                      model: Phi4Model | None = None, stopping=None) -> FiniteDiffResult:
    """Relative error between (v^{f + eps h}_T - v^f_T) / eps and J_{0,T} h.

    Both nonlinear runs consume the same noise (copies of ``stream``).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    model = model or Phi4Model()
    grid = f.grid
    streams = [stream.copy()] if isinstance(stream, NoiseStream) else [s.copy() for s in stream]
    base = simulate(grid, model, f, T, dt, streams, stopping=stopping)
    streams = [stream.copy()] if isinstance(stream, NoiseStream) else [s.copy() for s in stream]
    pert = simulate(grid, model, f + eps * h, T, dt, streams, stopping=stopping, record=False)
    fd = (pert.final_v - base.final_v) / eps
    jh = propagate(h, base, 0.0, base.T)
    err = np.sqrt(grid.l2sq(fd - jh) / grid.l2sq(jh))
    return FiniteDiffResult(eps, float(np.max(err)), fd, jh)
