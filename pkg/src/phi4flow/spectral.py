"""Discrete torus geometry, spectral transforms and the norms used throughout.

Fourier coefficients are normalized to be unitary in L^2 of the torus
[0, L)^2: with basis functions e_k(x) = exp(i k_phys . x) / L the coefficient
of a grid function f is f_hat(k) = (L / N^2) * FFT(f)(k), so that sums of
squared coefficients equal integrals of squared samples.

Two storage layouts are used.  ``Field`` objects carry the full N x N
coefficient array (Hermitian symmetric).  The solver kernels work on the
real-FFT half spectrum of shape (..., N, N//2 + 1) with arbitrary leading
batch axes; ``TorusGrid`` provides the transforms for that layout.

The "active" band excludes the Nyquist lines |k_i| = N/2.  Dynamical fields
live in that band so that padded (dealiased) products and their adjoints are
exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

__all__ = [
    "TorusGrid",
    "Field",
    "Lp",
    "Sobolev",
    "BesovInfInf",
    "to_fourier",
    "to_real",
    "heat_semigroup",
    "norm",
    "multiply",
    "triple_product",
    "multiplicative_inequality_check",
    "save_snapshot",
    "load_snapshot",
]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform N x N grid on the torus of side ``L``."""

    N: int
    L: float = 1.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 8 or self.N % 2:
            raise ValueError(f"N must be an even integer >= 8, got {self.N}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @property
    def spacing(self) -> float:
        return self.L / self.N

    @property
    def points(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.N) * self.spacing
        return np.meshgrid(x, x, indexing="ij")

    # -- full layout ------------------------------------------------------
    @cached_property
    def k_full(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.fft.fftfreq(self.N, 1.0 / self.N).astype(int)
        return np.meshgrid(k, k, indexing="ij")

    @cached_property
    def k2_full(self) -> np.ndarray:
        kx, ky = self.k_full
        return (2 * np.pi / self.L) ** 2 * (kx**2 + ky**2)

    @cached_property
    def active_full(self) -> np.ndarray:
        kx, ky = self.k_full
        h = self.N // 2
        return (np.abs(kx) < h) & (np.abs(ky) < h)

    # -- half (rfft) layout -----------------------------------------------
    @cached_property
    def k_half(self) -> tuple[np.ndarray, np.ndarray]:
        kx = np.fft.fftfreq(self.N, 1.0 / self.N).astype(int)
        ky = np.arange(self.N // 2 + 1)
        return np.meshgrid(kx, ky, indexing="ij")

    @cached_property
    def k2(self) -> np.ndarray:
        """|k_phys|^2 on the half spectrum."""
        kx, ky = self.k_half
        return (2 * np.pi / self.L) ** 2 * (kx**2 + ky**2)

    @cached_property
    def kabs(self) -> np.ndarray:
        """Integer-lattice |k| on the half spectrum (indexes dyadic blocks)."""
        kx, ky = self.k_half
        return np.sqrt(kx**2 + ky**2)

    @cached_property
    def active(self) -> np.ndarray:
        kx, ky = self.k_half
        h = self.N // 2
        return (np.abs(kx) < h) & (ky < h)

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each half-spectrum entry in the full spectrum."""
        w = np.full((self.N, self.N // 2 + 1), 2.0)
        w[:, 0] = 1.0
        w[:, -1] = 1.0
        return w

    def lam(self, m: float) -> np.ndarray:
        """Symbol m + |k_phys|^2 of -Laplacian + m on the half spectrum."""
        return m + self.k2

    def fwd(self, a: np.ndarray) -> np.ndarray:
        """Real samples (..., N, N) -> unitary half-spectrum coefficients."""
        return sfft.rfft2(a, axes=(-2, -1)) * (self.L / self.N**2)

    def inv(self, c: np.ndarray) -> np.ndarray:
        """Unitary half-spectrum coefficients -> real samples."""
        return sfft.irfft2(c, s=(self.N, self.N), axes=(-2, -1)) * (self.N**2 / self.L)

    def project(self, c: np.ndarray) -> np.ndarray:
        """Zero everything outside the active band."""
        return np.where(self.active, c, 0)

    def inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """L^2 inner product of two half-spectrum coefficient arrays."""
        return np.sum(self.weights * (a.conj() * b).real, axis=(-2, -1))

    def l2sq(self, c: np.ndarray) -> np.ndarray:
        return np.sum(self.weights * np.abs(c) ** 2, axis=(-2, -1))

    # -- padded products --------------------------------------------------
    def padded(self, factor: float = 2.0) -> "Padding":
        return Padding(self, factor)

    # -- dyadic blocks ----------------------------------------------------
    @cached_property
    def block_masks(self) -> list[np.ndarray]:
        """Sharp annuli: j = -1 keeps |k| < 1, j >= 0 keeps 2^j <= |k| < 2^(j+1)."""
        kabs = self.kabs
        masks = [kabs < 1]
        j = 0
        while 2**j <= kabs.max():
            masks.append((kabs >= 2**j) & (kabs < 2 ** (j + 1)))
            j += 1
        return masks

    @cached_property
    def block_stack(self) -> np.ndarray:
        """Indicator arrays of the blocks j >= 0, shape (J, N, N//2+1)."""
        return np.array(self.block_masks[1:], dtype=float)

    def real_norm_sup(self, a: np.ndarray) -> np.ndarray:
        return np.max(np.abs(a), axis=(-2, -1))


class Padding:
    """Embedding of active coefficients into a finer grid for exact products.

    With factor 2 any product of up to three band-limited factors is free of
    aliasing after truncation; factor 3/2 covers binary products.
    """

    def __init__(self, grid: TorusGrid, factor: float = 2.0):
        M = int(np.ceil(grid.N * factor))
        M += M % 2
        self.grid = grid
        self.M = M
        h = grid.N // 2
        # rows kx = 0..h-1 and kx = -(h-1)..-1, columns ky = 0..h-1
        self._rows_src = np.r_[0:h, grid.N - h + 1 : grid.N]
        self._rows_dst = np.r_[0:h, M - h + 1 : M]
        self._cols = slice(0, h)

    def up(self, c: np.ndarray) -> np.ndarray:
        """Active coefficients -> real samples on the M x M grid."""
        g = self.grid
        out = np.zeros(c.shape[:-2] + (self.M, self.M // 2 + 1), dtype=complex)
        out[..., self._rows_dst, self._cols] = c[..., self._rows_src, self._cols]
        return sfft.irfft2(out, s=(self.M, self.M), axes=(-2, -1)) * (self.M**2 / g.L)

    def down(self, a: np.ndarray) -> np.ndarray:
        """Real samples on the M x M grid -> active coefficients (truncated)."""
        g = self.grid
        full = sfft.rfft2(a, axes=(-2, -1)) * (g.L / self.M**2)
        out = np.zeros(a.shape[:-2] + (g.N, g.N // 2 + 1), dtype=complex)
        out[..., self._rows_src, self._cols] = full[..., self._rows_dst, self._cols]
        return out


# -- norm kinds -----------------------------------------------------------

@dataclass(frozen=True)
class Lp:
    p: float = 2.0

    def __post_init__(self):
        if not self.p >= 1:
            raise ValueError(f"Lp needs p >= 1, got {self.p}")


@dataclass(frozen=True)
class Sobolev:
    kappa: float = 0.0


@dataclass(frozen=True)
class BesovInfInf:
    s: float = 0.0


# -- array-level norms (batched over leading axes) -------------------------

def lp_norm(grid: TorusGrid, a: np.ndarray, p: float = 2.0) -> np.ndarray:
    if np.isinf(p):
        return np.max(np.abs(a), axis=(-2, -1))
    return (np.mean(np.abs(a) ** p, axis=(-2, -1)) * grid.L**2) ** (1.0 / p)


def sobolev_norm(grid: TorusGrid, c: np.ndarray, kappa: float) -> np.ndarray:
    """H^kappa norm from half-spectrum coefficients."""
    w = grid.weights * (1.0 + grid.k2) ** kappa
    return np.sqrt(np.sum(w * np.abs(c) ** 2, axis=(-2, -1)))


def besov_norm(grid: TorusGrid, c: np.ndarray, s: float) -> np.ndarray:
    """B^s_{inf,inf} norm (sharp blocks) from half-spectrum coefficients."""
    # j = -1 is the mean: constant in space, no transform needed
    best = np.abs(c[..., 0, 0].real) / grid.L * 2.0 ** (-s)
    blocks = grid.inv(c[..., None, :, :] * grid.block_stack)
    sups = np.maximum(blocks.max(axis=(-2, -1)), -blocks.min(axis=(-2, -1)))
    scale = 2.0 ** (s * np.arange(grid.block_stack.shape[0]))
    return np.maximum(best, np.max(sups * scale, axis=-1))


def besov22_norm(grid: TorusGrid, c: np.ndarray, s: float) -> np.ndarray:
    """B^s_{2,2} norm with the same sharp blocks."""
    total = 0.0
    for j, mk in enumerate(grid.block_masks, start=-1):
        total = total + 2.0 ** (2 * j * s) * np.sum(
            grid.weights * mk * np.abs(c) ** 2, axis=(-2, -1)
        )
    return np.sqrt(total)


def grad_sup(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """sup_x |grad f(x)| via spectral differentiation."""
    kx, ky = grid.k_half
    k0 = 2 * np.pi / grid.L
    gx = grid.inv(1j * k0 * kx * grid.project(c))
    gy = grid.inv(1j * k0 * ky * grid.project(c))
    return np.sqrt(np.max(gx**2 + gy**2, axis=(-2, -1)))


def grad_l2sq(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    return np.sum(grid.weights * grid.k2 * np.abs(c) ** 2, axis=(-2, -1))


# -- Field ------------------------------------------------------------------

class Field:
    """A real function on the discretized torus.

    ``data`` holds N x N real samples when ``rep == "real"`` and the full
    N x N unitary Fourier coefficients when ``rep == "fourier"``.  Operations
    accept either representation and convert as needed.
    """

    __slots__ = ("grid", "data", "rep")

    def __init__(self, grid: TorusGrid, data, rep: str = "real"):
        data = np.asarray(data)
        if rep not in ("real", "fourier"):
            raise ValueError(f"unknown representation {rep!r}")
        if data.shape != (grid.N, grid.N):
            raise ValueError(f"expected shape {(grid.N, grid.N)}, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains NaN or Inf")
        self.grid = grid
        self.rep = rep
        self.data = data.astype(float if rep == "real" else complex)

    @classmethod
    def from_function(cls, grid: TorusGrid, fn) -> "Field":
        x, y = grid.points
        return cls(grid, np.broadcast_to(fn(x, y), (grid.N, grid.N)))

    @classmethod
    def zeros(cls, grid: TorusGrid) -> "Field":
        return cls(grid, np.zeros((grid.N, grid.N)))

    @classmethod
    def from_half(cls, grid: TorusGrid, c: np.ndarray) -> "Field":
        return cls(grid, grid.inv(c))

    @property
    def real(self) -> np.ndarray:
        return self.data if self.rep == "real" else to_real(self).data

    @property
    def half(self) -> np.ndarray:
        """Half-spectrum unitary coefficients (solver layout)."""
        return self.grid.fwd(self.real)

    def __add__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.grid, self.real + other.real)

    def __sub__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.grid, self.real - other.real)

    def __mul__(self, scalar: float) -> "Field":
        return Field(self.grid, self.real * scalar)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Field(N={self.grid.N}, L={self.grid.L}, rep={self.rep!r})"


def _check_same_grid(f: Field, g: Field):
    if f.grid != g.grid:
        raise ValueError(f"grid mismatch: {f.grid} vs {g.grid}")


def to_fourier(f: Field) -> Field:
    if f.rep == "fourier":
        return f
    g = f.grid
    return Field(g, np.fft.fft2(f.data) * (g.L / g.N**2), rep="fourier")


def to_real(f: Field) -> Field:
    if f.rep == "real":
        return f
    g = f.grid
    return Field(g, np.fft.ifft2(f.data).real * (g.N**2 / g.L))


def heat_semigroup(f: Field, t: float, m: float = 0.0) -> Field:
    """S_t f: multiply each mode by exp(-t (m + |k_phys|^2))."""
    if t < 0:
        raise ValueError(f"heat semigroup needs t >= 0, got {t}")
    if m < 0:
        raise ValueError(f"mass must be nonnegative, got {m}")
    c = to_fourier(f).data * np.exp(-t * (m + f.grid.k2_full))
    return Field(f.grid, c, rep="fourier")


def norm(f: Field, kind) -> float:
    g = f.grid
    if isinstance(kind, Lp):
        return float(lp_norm(g, f.real, kind.p))
    if isinstance(kind, Sobolev):
        c = to_fourier(f).data
        return float(np.sqrt(np.sum((1 + g.k2_full) ** kind.kappa * np.abs(c) ** 2)))
    if isinstance(kind, BesovInfInf):
        return float(besov_norm(g, f.half, kind.s))
    raise TypeError(f"unknown norm kind {kind!r}")


def multiply(f: Field, g: Field, dealias: bool = True) -> Field:
    """Product of two fields; with ``dealias`` the 3/2-padded product is
    truncated back to the active band."""
    _check_same_grid(f, g)
    if not dealias:
        return Field(f.grid, f.real * g.real)
    pad = f.grid.padded(1.5)
    prod = pad.up(f.grid.project(f.half)) * pad.up(f.grid.project(g.half))
    return Field.from_half(f.grid, pad.down(prod))


def triple_product(f: Field, g: Field, h: Field) -> Field:
    """Dealiased f*g*h (2x padding, exact truncated triple convolution)."""
    _check_same_grid(f, g)
    _check_same_grid(f, h)
    grid = f.grid
    pad = grid.padded(2.0)
    prod = pad.up(grid.project(f.half)) * pad.up(grid.project(g.half)) * pad.up(grid.project(h.half))
    return Field.from_half(grid, pad.down(prod))


@dataclass(frozen=True)
class ProductBound:
    product_norm: float
    f_norm: float
    g_norm: float

    @property
    def ratio(self) -> float:
        denom = self.f_norm * self.g_norm
        if denom == 0:
            return 0.0
        return self.product_norm / denom


def multiplicative_inequality_check(f: Field, g: Field, alpha: float, beta: float) -> ProductBound:
    """Measure both sides of ||fg||_{B^a_{2,2}} <~ ||f||_{B^a} ||g||_{B^b}."""
    if not (alpha < 0 < beta and alpha + beta > 0):
        raise ValueError(f"need alpha < 0 < beta with alpha + beta > 0, got {alpha}, {beta}")
    grid = f.grid
    fg = multiply(f, g)
    return ProductBound(
        float(besov22_norm(grid, fg.half, alpha)),
        float(besov_norm(grid, f.half, alpha)),
        float(besov_norm(grid, g.half, beta)),
    )


# -- snapshot format --------------------------------------------------------

_MAGIC = b"PHI4FLD\x00"
_VERSION = 1


def save_snapshot(f: Field, path) -> None:
    """Write the 16-byte header, N (u64), L (f64), then row-major f64 samples."""
    header = _MAGIC + struct.pack("<II", _VERSION, 0)
    body = struct.pack("<Qd", f.grid.N, f.grid.L)
    Path(path).write_bytes(header + body + np.ascontiguousarray(f.real, dtype="<f8").tobytes())


def snapshot_bytes(f: Field) -> bytes:
    header = _MAGIC + struct.pack("<II", _VERSION, 0)
    body = struct.pack("<Qd", f.grid.N, f.grid.L)
    return header + body + np.ascontiguousarray(f.real, dtype="<f8").tobytes()


def load_snapshot(path) -> Field:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a field snapshot")
    (version, _) = struct.unpack("<II", raw[8:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    N, L = struct.unpack("<Qd", raw[16:32])
    data = np.frombuffer(raw[32:], dtype="<f8")
    if data.size != N * N:
        raise ValueError(f"{path}: truncated snapshot")
    return Field(TorusGrid(int(N), L), data.reshape(N, N).astype(float))
