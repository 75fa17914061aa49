"""Space-time white noise, the Ornstein-Uhlenbeck field and its Wick powers.

The Gaussian driver X solves (d/dt - Laplacian + m) X = sqrt(2) xi with
X = 0 at its birth time s.  Per Fourier mode this is a scalar OU process,
so it is advanced with the exact transition law for any step size.

Random numbers come from a counter-based generator (Philox) keyed by
(base_seed, replica_id).  Every draw is a pure function of
(base_seed, replica_id, event, lane); a ``NoiseStream`` only remembers the
next event index, which makes replays, restarts and parallel execution
trivially reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from .spectral import TorusGrid, besov_norm

__all__ = [
    "NoiseStream",
    "OuState",
    "WickTriple",
    "ou_step",
    "wick_constant",
    "make_wick",
    "c_t_infty",
    "restart",
    "sup_norm_profile",
    "wick_moments",
    "MomentCheck",
    "white_fields",
    "wick_besov_norms",
    "LANE_NOISE",
    "LANE_AUX",
]

LANE_NOISE = 0
LANE_AUX = 1

_MASK64 = (1 << 64) - 1


def _philox_raw(key0: int, key1: int, event: int, lane: int, n: int,
                bg: np.random.Philox | None = None) -> np.ndarray:
    """``n`` raw 64-bit words, a pure function of the key and counter words."""
    if bg is None:
        bg = np.random.Philox(key=[key0 & _MASK64, key1 & _MASK64])
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array([0, event, 0, lane], dtype=np.uint64),
            "key": np.array([key0 & _MASK64, key1 & _MASK64], dtype=np.uint64),
        },
        "buffer": np.zeros(4, dtype=np.uint64),
        "buffer_pos": 4,
        "has_uint32": 0,
        "uinteger": 0,
    }
    return bg.random_raw(n)


def _box_muller(raw: np.ndarray, n: int) -> np.ndarray:
    """Standard normals from rows of 2*ceil(n/2) raw words (last axis)."""
    half = raw.shape[-1] // 2
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(1.0 - u[..., :half]))  # 1 - u lies in (0, 1]
    ang = 2 * np.pi * u[..., half:]
    return np.concatenate([r * np.cos(ang), r * np.sin(ang)], axis=-1)[..., :n]


def _philox_normals(key0, key1, event, lane, n, bg=None) -> np.ndarray:
    return _box_muller(_philox_raw(key0, key1, event, lane, 2 * ((n + 1) // 2), bg), n)


@dataclass
class NoiseStream:
    """Counter-based Gaussian stream for one replica.

    Draws on the noise lane advance ``counter`` by one event each; auxiliary
    draws (probe directions, random test functions) use a separate lane and
    an explicit tag, and never touch the counter.
    """

    base_seed: int
    replica_id: int
    counter: int = 0
    _bg: np.random.Philox | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.base_seed <= _MASK64:
            raise ValueError(f"base_seed must fit in 64 bits, got {self.base_seed}")
        if self.replica_id < 0 or self.counter < 0:
            raise ValueError("replica_id and counter must be nonnegative")

    def _gen(self):
        if self._bg is None:
            self._bg = np.random.Philox(key=[self.base_seed, self.replica_id])
        return self._bg

    def normals_at(self, event: int, shape, lane: int = LANE_NOISE) -> np.ndarray:
        n = int(np.prod(shape))
        return _philox_normals(self.base_seed, self.replica_id, event, lane, n,
                               self._gen()).reshape(shape)

    def next_normals(self, shape) -> np.ndarray:
        out = self.normals_at(self.counter, shape, LANE_NOISE)
        self.counter += 1
        return out

    def aux_normals(self, tag: int, shape) -> np.ndarray:
        return self.normals_at(tag, shape, LANE_AUX)

    def spec(self) -> tuple[int, int, int]:
        return (self.base_seed, self.replica_id, self.counter)

    @classmethod
    def from_spec(cls, spec) -> "NoiseStream":
        return cls(int(spec[0]), int(spec[1]), int(spec[2]))

    def copy(self) -> "NoiseStream":
        return NoiseStream(self.base_seed, self.replica_id, self.counter)


def as_streams(stream) -> list[NoiseStream]:
    """Normalize a single stream or a sequence of streams to a list."""
    if isinstance(stream, NoiseStream):
        return [stream]
    return list(stream)


def white_fields(grid: TorusGrid, streams: list[NoiseStream], events=None) -> np.ndarray:
    """Stack of N x N standard normal fields, one per stream, shape (R, N, N).

    Without ``events`` each stream consumes its next noise event.
    """
    n = grid.N * grid.N
    if events is None:
        events = []
        for s in streams:
            events.append(s.counter)
            s.counter += 1
    raw = np.stack([_philox_raw(s.base_seed, s.replica_id, e, LANE_NOISE, n, s._gen())
                    for s, e in zip(streams, events)])
    return _box_muller(raw, n).reshape(len(streams), grid.N, grid.N)


# -- Gaussian sector ----------------------------------------------------------

def ou_factors(grid: TorusGrid, m: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Decay e^{-lam dt} and increment std sqrt((1 - e^{-2 lam dt}) / lam)."""
    lam = grid.lam(m)
    decay = np.exp(-lam * dt)
    std = np.sqrt(-np.expm1(-2 * lam * dt) / lam)
    return decay, np.where(grid.active, std, 0.0)


def ou_increment(grid: TorusGrid, m: float, dt: float, white: np.ndarray) -> np.ndarray:
    """Exact OU innovation over ``dt`` from white grid samples (..., N, N).

    rfft2(white) / N has unit-variance complex entries with the correct
    Hermitian couplings, so scaling by the per-mode std gives coefficients
    whose law matches the Galerkin-truncated SHE.
    """
    _, std = ou_factors(grid, m, dt)
    zeta = sfft.rfft2(white, axes=(-2, -1)) / grid.N
    return std * zeta


@dataclass
class OuState:
    """Gaussian driver X_{s,t} in half-spectrum coefficients.

    ``coeffs`` may carry leading replica axes; ``birth`` is then an array of
    the same leading shape (replicas restart at different times).
    """

    grid: TorusGrid
    m: float
    t: float
    coeffs: np.ndarray
    birth: np.ndarray | float = 0.0

    @property
    def elapsed(self):
        return np.maximum(self.t - np.asarray(self.birth, dtype=float), 0.0)

    @classmethod
    def zero(cls, grid: TorusGrid, m: float, t: float = 0.0, batch: tuple = ()) -> "OuState":
        if not m > 0:
            raise ValueError(f"mass must be positive, got {m}")
        c = np.zeros(tuple(batch) + (grid.N, grid.N // 2 + 1), dtype=complex)
        birth = np.full(batch, float(t)) if batch else float(t)
        return cls(grid, m, t, c, birth)


def ou_step(state: OuState, dt: float, stream, substeps: int = 1) -> OuState:
    """Advance the driver by ``dt`` with the exact per-mode transition.

    ``stream`` is a NoiseStream (unbatched state) or a sequence of streams,
    one per replica.  With ``substeps = k`` the step consumes k events, each
    an exact innovation over dt/k, combined exactly; a run at dt/k with
    ``substeps = 1`` therefore sees the same Brownian path.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    grid = state.grid
    streams = as_streams(stream)
    batched = state.coeffs.ndim == 3
    if (len(streams) != state.coeffs.shape[0]) if batched else len(streams) != 1:
        raise ValueError("one stream per replica required")
    h = dt / substeps
    decay, _ = ou_factors(grid, state.m, h)
    c = state.coeffs
    for _ in range(substeps):
        w = white_fields(grid, streams)
        if not batched:
            w = w[0]
        c = decay * c + ou_increment(grid, state.m, h, w)
    return replace(state, t=state.t + dt, coeffs=c)


def wick_constant(grid: TorusGrid, m: float, elapsed) -> np.ndarray | float:
    """Pointwise variance of X_{s,s+elapsed}: sum_k (1 - e^{-2 lam e}) / (lam L^2)."""
    e = np.asarray(elapsed, dtype=float)
    if np.any(e < 0):
        raise ValueError("elapsed time must be nonnegative")
    if not m > 0:
        raise ValueError(f"mass must be positive, got {m}")
    lam = grid.lam(m)
    w = grid.weights * grid.active / (lam * grid.L**2)
    out = np.tensordot(-np.expm1(-2.0 * np.multiply.outer(e, lam)), w, axes=2) if e.ndim else \
        float(np.sum(w * -np.expm1(-2.0 * lam * e)))
    return out


def c_t_infty(grid: TorusGrid, m: float, t) -> np.ndarray | float:
    """Tail constant c_{t,inf} = sum_k e^{-2 lam t} / (lam L^2).

    This is the stationary variance minus the variance at elapsed time t, the
    amount by which Wick powers of a driver of age t are under-renormalized.
    """
    tt = np.asarray(t, dtype=float)
    if np.any(tt <= 0):
        raise ValueError("c_t_infty needs t > 0")
    if not m > 0:
        raise ValueError(f"mass must be positive, got {m}")
    lam = grid.lam(m)
    w = grid.weights * grid.active / (lam * grid.L**2)
    if tt.ndim:
        return np.tensordot(np.exp(-2.0 * np.multiply.outer(tt, lam)), w, axes=2)
    return float(np.sum(w * np.exp(-2.0 * lam * tt)))


@dataclass
class WickTriple:
    """(X, :X^2:, :X^3:) as real grid samples, with c_now = Var X(x)."""

    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    c_now: np.ndarray | float
    elapsed: np.ndarray | float


def wick_from_grid(w1: np.ndarray, c) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(c, dtype=float)[..., None, None]
    sq = w1 * w1
    return sq - c, w1 * (sq - 3.0 * c)


def make_wick(state: OuState, scale: float = 1.0) -> WickTriple:
    """Lattice Wick powers of the driver.

    The products are taken pointwise on the grid (no dealiasing): only then
    is E :X^2:(x) = 0 exact at fixed N.  ``scale`` multiplies the constant and
    exists for fault-injection tests.
    """
    grid = state.grid
    w1 = grid.inv(state.coeffs)
    c = wick_constant(grid, state.m, state.elapsed) * scale
    w2, w3 = wick_from_grid(w1, c)
    return WickTriple(w1, w2, w3, c, state.elapsed)


def restart(stream, s: float, grid: TorusGrid | None = None, m: float = 0.0,
            state: OuState | None = None, mask=None) -> OuState:
    """Fresh driver born at time ``s``.

    The stream itself is not rewound: later draws use later counter values,
    so the restarted driver is independent of everything drawn before ``s``.
    With ``state`` and a boolean ``mask`` over replicas, only the selected
    replicas are reset.
    """
    if s < 0:
        raise ValueError(f"restart time must be nonnegative, got {s}")
    if state is None:
        if grid is None:
            raise ValueError("grid required for a new driver")
        n = len(as_streams(stream))
        batch = (n,) if not isinstance(stream, NoiseStream) else ()
        return OuState.zero(grid, m, s, batch)
    coeffs = state.coeffs.copy()
    birth = np.array(state.birth, dtype=float, copy=True)
    if mask is None:
        coeffs[...] = 0
        birth[...] = s
    else:
        coeffs[mask] = 0
        birth[mask] = s
    return OuState(state.grid, state.m, s, coeffs, birth if birth.ndim else float(birth))


def wick_besov_norms(grid: TorusGrid, wick: WickTriple, alpha: float) -> np.ndarray:
    """Besov(-alpha) norms of W1, W2, W3, stacked on a trailing axis of size 3."""
    fields = np.stack([wick.W1, wick.W2, wick.W3], axis=-3)
    return besov_norm(grid, grid.fwd(fields), -alpha)


@dataclass
class SupProfile:
    T: float
    alpha: float
    sups: np.ndarray  # (replicas,) running supremum at T
    quantiles: dict
    moments: dict


def sup_norm_profile(stream, T: float, dt: float, alpha: float, replicas: int | None = None,
                     grid: TorusGrid | None = None, m: float = 1.0,
                     probs=(0.5, 0.75, 0.9, 0.99), powers=(1, 2, 4)) -> SupProfile:
    """Distribution of sup_{t <= T} max_k ||:X^k:_{0,t}||_{-alpha} over replicas.

    ``stream`` is a base seed (replicas 0..replicas-1 are used) or an explicit
    sequence of NoiseStreams.
    """
    if not alpha > 0 or not T > 0:
        raise ValueError("need alpha > 0 and T > 0")
    grid = grid or TorusGrid(32, 1.0)
    if isinstance(stream, (int, np.integer)):
        streams = [NoiseStream(int(stream), r) for r in range(replicas)]
    else:
        streams = as_streams(stream)
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(T, 1):
        raise ValueError("dt must divide T")
    state = OuState.zero(grid, m, 0.0, (len(streams),))
    sup = np.zeros(len(streams))
    for _ in range(steps):
        state = ou_step(state, dt, streams)
        norms = wick_besov_norms(grid, make_wick(state), alpha)
        sup = np.maximum(sup, norms.max(axis=-1))
    q = {p: float(np.quantile(sup, p)) for p in probs}
    mo = {k: float(np.mean(sup**k)) for k in powers}
    return SupProfile(T, alpha, sup, q, mo)


@dataclass
class MomentCheck:
    """One Monte Carlo moment against its exact value."""

    name: str
    estimate: float
    se: float
    target: float

    @property
    def z(self) -> float:
        return (self.estimate - self.target) / self.se if self.se > 0 else float("inf")

    def passes(self, k: float = 3.0) -> bool:
        return abs(self.estimate - self.target) <= k * self.se


def wick_moments(grid: TorusGrid, m: float, t: float, dt: float, replicas: int,
                 base_seed: int = 0, scale: float = 1.0, batch: int = 500) -> list[MomentCheck]:
    """Pointwise moments of the driver's Wick powers at time t (started at 0).

    Spatial averages are taken per replica (stationarity in x), and the
    standard errors come from the spread across independent replicas.
    Targets: E X^2 = c, E :X^2: = 0, E (:X^2:)^2 = 2c^2, E (:X^3:)^2 = 6c^3,
    with c = wick_constant(t).  ``scale`` perturbs the constant used to
    form the Wick powers (fault injection).
    """
    steps = int(round(t / dt))
    if steps < 1 or abs(steps * dt - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"dt={dt} does not divide t={t}")
    c = float(wick_constant(grid, m, t))
    per = np.empty((replicas, 4))
    for lo in range(0, replicas, batch):
        ids = range(lo, min(lo + batch, replicas))
        streams = [NoiseStream(base_seed, r) for r in ids]
        st = OuState.zero(grid, m, 0.0, (len(streams),))
        for _ in range(steps):
            st = ou_step(st, dt, streams)
        w = make_wick(st, scale)
        per[lo:lo + len(streams)] = np.stack([
            np.mean(w.W1**2, axis=(-2, -1)), np.mean(w.W2, axis=(-2, -1)),
            np.mean(w.W2**2, axis=(-2, -1)), np.mean(w.W3**2, axis=(-2, -1))], axis=-1)
    mean = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / np.sqrt(replicas)
    names = ["var_X", "mean_W2", "mean_W2_sq", "mean_W3_sq"]
    targets = [c, 0.0, 2 * c**2, 6 * c**3]
    return [MomentCheck(n, float(a), float(s), tg) for n, a, s, tg in zip(names, mean, se, targets)]
