"""
Discretization substrate: space-time grids, real and complex fields,
Madelung decomposition, finite-difference operators and the quantum potential.

Everything here is one-dimensional. Fields are immutable; the underlying
arrays are copied on construction and marked read-only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    AmplitudeOverflow,
    GridTooSmall,
    InvalidField,
    InvalidGrid,
    NonpositiveDensity,
    ZeroAmplitude,
)

MASS_TOL = 1e-8
MIN_NX = 16
MIN_STENCIL = 5
ZERO_AMPLITUDE = 1e-300
MAX_LOG_AMPLITUDE = 300.0


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if not (self.hbar > 0 and self.mass > 0):
            raise ValueError(f"hbar and mass must be positive, got {self.hbar}, {self.mass}")

    @property
    def diffusion(self) -> float:
        """Diffusion coefficient hbar/m of the Nelson process."""
        return self.hbar / self.mass


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform 1-D spatial grid crossed with a uniform time grid.

    Parameters
    ----------
    x_min, x_max : float
        Closed spatial interval, both end points are grid nodes.
    n_x : int
        Number of spatial nodes (at least 16).
    t0, t1 : float
        Time horizon.
    n_t : int
        Number of time slices including both ends (at least 2).
    """

    x_min: float = -6.0
    x_max: float = 7.0
    n_x: int = 1024
    t0: float = 0.0
    t1: float = 1.0
    n_t: int = 513

    def __post_init__(self):
        if int(self.n_x) != self.n_x or int(self.n_t) != self.n_t:
            raise InvalidGrid("n_x and n_t must be integers")
        if self.n_x < MIN_NX:
            raise GridTooSmall(f"n_x={self.n_x} < {MIN_NX}")
        if self.n_t < 2:
            raise GridTooSmall(f"n_t={self.n_t} < 2")
        if not self.x_min < self.x_max:
            raise InvalidGrid(f"x_min={self.x_min} must be below x_max={self.x_max}")
        if not self.t0 < self.t1:
            raise InvalidGrid(f"t0={self.t0} must be below t1={self.t1}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / (self.n_t - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.n_t)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights on the spatial nodes."""
        w = np.full(self.n_x, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    def integrate(self, values, axis: int = -1):
        """Trapezoid rule in x along ``axis``."""
        values = np.asarray(values)
        return np.tensordot(values, self.weights, axes=([axis], [0]))

    def refined(self) -> "SpaceTimeGrid":
        """Grid with dx and dt both halved (every old node kept)."""
        return SpaceTimeGrid(self.x_min, self.x_max, 2 * self.n_x - 1,
                             self.t0, self.t1, 2 * self.n_t - 1)

    def slice_index(self, t: float, tol: float = 1e-9) -> int:
        k = int(round((t - self.t0) / self.dt))
        if not 0 <= k < self.n_t or abs(self.t0 + k * self.dt - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"t={t} is not a slice of this grid")
        return k


def _frozen_copy(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RealField:
    """Real function sampled on the spatial nodes at one time slice.

    With ``density=True`` the values must be strictly positive and integrate
    to one within ``MASS_TOL``.
    """

    grid: SpaceTimeGrid
    values: np.ndarray
    density: bool = False

    def __post_init__(self):
        vals = _frozen_copy(self.values, float)
        if vals.shape != (self.grid.n_x,):
            raise InvalidField(f"expected shape ({self.grid.n_x},), got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidField("field has non-finite values")
        if self.density:
            if np.any(vals <= 0):
                raise NonpositiveDensity("density must be strictly positive")
            mass = self.grid.integrate(vals)
            if abs(mass - 1.0) > MASS_TOL:
                raise InvalidField(f"density integrates to {mass!r}, not 1")
        object.__setattr__(self, "values", vals)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    def integral(self) -> float:
        return float(self.grid.integrate(self.values))

    def normalized(self) -> "RealField":
        """Rescale to unit mass and flag as a density."""
        return RealField(self.grid, self.values / self.integral(), density=True)


@dataclass(frozen=True)
class WaveField:
    """Complex wavefunction sampled on the spatial nodes at one time slice."""

    grid: SpaceTimeGrid
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        vals = _frozen_copy(self.values, complex)
        if vals.shape != (self.grid.n_x,):
            raise InvalidField(f"expected shape ({self.grid.n_x},), got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidField("wavefunction has non-finite values")
        if self.normalized:
            norm = self.grid.integrate(np.abs(vals) ** 2)
            if abs(norm - 1.0) > MASS_TOL:
                raise InvalidField(f"wavefunction norm is {norm!r}, not 1")
        object.__setattr__(self, "values", vals)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x


@dataclass(frozen=True)
class MadelungPair:
    """Log-amplitude ``R`` and phase action ``S`` with psi = exp(R + iS/hbar)."""

    R: RealField
    S: RealField

    def __post_init__(self):
        if self.R.grid != self.S.grid:
            raise InvalidField("R and S live on different grids")

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.R.grid


@dataclass(frozen=True)
class FieldSeries:
    """A field on every time slice of ``grid``; values have shape (n_t, n_x).

    Indexing returns a :class:`RealField` or :class:`WaveField` depending on
    the dtype. ``unit_mass`` marks every slice as a density (real) or a
    normalized wavefunction (complex).
    """

    grid: SpaceTimeGrid
    values: np.ndarray
    unit_mass: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        raw = np.asarray(self.values)
        dtype = complex if np.iscomplexobj(raw) else float
        vals = _frozen_copy(raw, dtype)
        if vals.shape != (self.grid.n_t, self.grid.n_x):
            raise InvalidField(
                f"expected shape ({self.grid.n_t}, {self.grid.n_x}), got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidField("series has non-finite values")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_fields(cls, fields: Sequence[RealField] | Sequence[WaveField]) -> "FieldSeries":
        fields = list(fields)
        if not fields:
            raise InvalidField("empty field sequence")
        grid = fields[0].grid
        flags = {getattr(f, "density", getattr(f, "normalized", False)) for f in fields}
        return cls(grid, np.stack([f.values for f in fields]), unit_mass=flags == {True})

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, k: int):
        if self.is_complex:
            return WaveField(self.grid, self.values[k], normalized=self.unit_mass)
        return RealField(self.grid, self.values[k], density=self.unit_mass)

    def __iter__(self) -> Iterator:
        for k in range(len(self)):
            yield self[k]


@dataclass(frozen=True)
class MadelungSeries:
    """Madelung pair on every slice: R and S as real series."""

    R: FieldSeries
    S: FieldSeries

    def __len__(self) -> int:
        return len(self.R)

    def __getitem__(self, k: int) -> MadelungPair:
        return MadelungPair(self.R[k], self.S[k])

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.R.grid


# ---------------------------------------------------------------------------
# finite differences on the last axis


def _check_stencil(n: int) -> None:
    if n < MIN_STENCIL:
        raise GridTooSmall(f"need at least {MIN_STENCIL} points, got {n}")


def grad_array(values, dx: float) -> np.ndarray:
    """Central differences inside, second-order one-sided at the two ends."""
    values = np.asarray(values)
    _check_stencil(values.shape[-1])
    return np.gradient(values, dx, axis=-1, edge_order=2)


def laplacian_array(values, dx: float) -> np.ndarray:
    """Three-point Laplacian inside, four-point one-sided second order at the ends."""
    f = np.asarray(values)
    _check_stencil(f.shape[-1])
    out = np.empty_like(f)
    out[..., 1:-1] = f[..., 2:] - 2.0 * f[..., 1:-1] + f[..., :-2]
    out[..., 0] = 2.0 * f[..., 0] - 5.0 * f[..., 1] + 4.0 * f[..., 2] - f[..., 3]
    out[..., -1] = 2.0 * f[..., -1] - 5.0 * f[..., -2] + 4.0 * f[..., -3] - f[..., -4]
    return out / dx**2


def laplacian_ratio_from_log(log_amp, dx: float) -> np.ndarray:
    """Evaluate ``laplacian(exp(r)) / exp(r)`` from ``r`` without forming exp(r).

    Same stencil as :func:`laplacian_array`; only differences of ``r`` are
    exponentiated, so deep tails neither underflow nor lose relative precision.
    """
    r = np.asarray(log_amp, dtype=float)
    _check_stencil(r.shape[-1])
    out = np.empty_like(r)
    mid = r[..., 1:-1]
    out[..., 1:-1] = np.exp(r[..., 2:] - mid) - 2.0 + np.exp(r[..., :-2] - mid)
    r0 = r[..., :1]
    out[..., :1] = (2.0 - 5.0 * np.exp(r[..., 1:2] - r0) + 4.0 * np.exp(r[..., 2:3] - r0)
                    - np.exp(r[..., 3:4] - r0))
    rn = r[..., -1:]
    out[..., -1:] = (2.0 - 5.0 * np.exp(r[..., -2:-1] - rn) + 4.0 * np.exp(r[..., -3:-2] - rn)
                     - np.exp(r[..., -4:-3] - rn))
    return out / dx**2


def time_derivative(values, dt: float) -> np.ndarray:
    """d/dt along axis 0: central inside, second-order one-sided at t0 and t1."""
    values = np.asarray(values)
    if values.shape[0] < 3:
        raise GridTooSmall("time derivative needs at least 3 slices")
    return np.gradient(values, dt, axis=0, edge_order=2)


def gradient(f: RealField) -> RealField:
    return RealField(f.grid, grad_array(f.values, f.grid.dx))


def laplacian(f: RealField) -> RealField:
    return RealField(f.grid, laplacian_array(f.values, f.grid.dx))


# ---------------------------------------------------------------------------
# Madelung decomposition


def madelung_decompose(psi: WaveField, constants: PhysicalConstants = PhysicalConstants()) -> MadelungPair:
    """Split psi into log-amplitude R and phase action S.

    The phase is unwrapped continuously from the leftmost node, where it is
    taken in (-pi, pi]; S is therefore fixed up to a global 2*pi*hbar.
    """
    amp = np.abs(psi.values)
    if np.any(amp < ZERO_AMPLITUDE):
        raise ZeroAmplitude(f"|psi| vanishes at {int(np.sum(amp < ZERO_AMPLITUDE))} nodes")
    R = np.log(amp)
    phase = np.unwrap(np.angle(psi.values))
    return MadelungPair(RealField(psi.grid, R), RealField(psi.grid, constants.hbar * phase))


def madelung_compose(pair: MadelungPair, constants: PhysicalConstants = PhysicalConstants()) -> WaveField:
    R, S = pair.R.values, pair.S.values
    if np.any(R > MAX_LOG_AMPLITUDE):
        raise AmplitudeOverflow(f"log-amplitude exceeds {MAX_LOG_AMPLITUDE}")
    psi = np.exp(R + 1j * S / constants.hbar)
    norm = pair.grid.integrate(np.abs(psi) ** 2)
    return WaveField(pair.grid, psi, normalized=abs(norm - 1.0) <= MASS_TOL)


def madelung_decompose_series(psis: FieldSeries,
                              constants: PhysicalConstants = PhysicalConstants()) -> MadelungSeries:
    """Slice-wise decomposition with the anchor phase also unwrapped in time.

    Without the time unwrap, neighbouring slices could differ by 2*pi*hbar and
    poison time derivatives of S.
    """
    vals = psis.values
    amp = np.abs(vals)
    if np.any(amp < ZERO_AMPLITUDE):
        raise ZeroAmplitude("|psi| vanishes somewhere in the series")
    phase = np.unwrap(np.angle(vals), axis=1)
    anchor = phase[:, 0]
    phase += (np.unwrap(anchor) - anchor)[:, None]
    grid = psis.grid
    return MadelungSeries(FieldSeries(grid, np.log(amp)),
                          FieldSeries(grid, constants.hbar * phase))


def compose_series(pairs: MadelungSeries, constants: PhysicalConstants = PhysicalConstants()) -> FieldSeries:
    R, S = pairs.R.values, pairs.S.values
    if np.any(R > MAX_LOG_AMPLITUDE):
        raise AmplitudeOverflow(f"log-amplitude exceeds {MAX_LOG_AMPLITUDE}")
    psi = np.exp(R + 1j * S / constants.hbar)
    norms = pairs.grid.integrate(np.abs(psi) ** 2)
    return FieldSeries(pairs.grid, psi, unit_mass=bool(np.all(np.abs(norms - 1.0) <= MASS_TOL)))


def density(psi: WaveField) -> RealField:
    """rho = |psi|^2; flagged as a density only when psi is normalized."""
    return RealField(psi.grid, np.abs(psi.values) ** 2, density=psi.normalized)


# ---------------------------------------------------------------------------
# action and quantum potential


def finite_action(psis: FieldSeries | Sequence[WaveField]) -> tuple[float, bool]:
    """Approximate the integral of |grad psi|^2 over space and time.

    Rectangle rule in x, trapezoid in t. Returns the value and whether it is
    finite.
    """
    if not isinstance(psis, FieldSeries):
        psis = FieldSeries.from_fields(psis)
    if len(psis) < 2:
        raise GridTooSmall("finite_action needs at least 2 time slices")
    grid = psis.grid
    with np.errstate(all="ignore"):
        g = grad_array(psis.values, grid.dx)
        per_slice = np.sum(np.abs(g) ** 2, axis=1) * grid.dx
        value = float(np.trapezoid(per_slice, dx=grid.dt)) if hasattr(np, "trapezoid") \
            else float(np.trapz(per_slice, dx=grid.dt))
    return value, bool(math.isfinite(value))


def quantum_potential_from_log_density(log_rho, dx: float,
                                       constants: PhysicalConstants = PhysicalConstants()) -> np.ndarray:
    return -(constants.hbar**2 / (2.0 * constants.mass)) * laplacian_ratio_from_log(0.5 * np.asarray(log_rho), dx)


def quantum_potential(rho: RealField, constants: PhysicalConstants = PhysicalConstants()) -> RealField:
    """-(hbar^2/2m) * laplacian(sqrt(rho)) / sqrt(rho), invariant under rho -> c*rho."""
    if np.any(rho.values <= 0):
        raise NonpositiveDensity("quantum potential needs rho > 0 everywhere")
    q = quantum_potential_from_log_density(np.log(rho.values), rho.grid.dx, constants)
    return RealField(rho.grid, q)


# ---------------------------------------------------------------------------
# CSV interchange: ``x,value`` for real fields, ``x,re,im`` for complex ones


def write_field_csv(path, f: RealField | WaveField) -> Path:
    path = Path(path)
    x = f.grid.x
    if isinstance(f, WaveField):
        data = np.column_stack([x, f.values.real, f.values.imag])
        header = ["x", "re", "im"]
    else:
        data = np.column_stack([x, f.values])
        header = ["x", "value"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([format(v, ".17g") for v in row] for row in data)
    return path


def read_field_csv(path, grid: SpaceTimeGrid | None = None):
    """Read a field CSV; returns ``(x, values)`` or a field when ``grid`` is given."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    x = body[:, 0]
    if header == ["x", "re", "im"]:
        values = body[:, 1] + 1j * body[:, 2]
    elif header == ["x", "value"]:
        values = body[:, 1]
    else:
        raise InvalidField(f"unrecognised CSV header {header}")
    if grid is None:
        return x, values
    if len(x) != grid.n_x or not np.allclose(x, grid.x, rtol=0, atol=1e-12 * (1 + abs(grid.x_max))):
        raise InvalidField("CSV abscissa does not match the grid")
    return WaveField(grid, values) if np.iscomplexobj(values) else RealField(grid, values)


def export_series(directory, name: str, series: FieldSeries,
                  slices: Iterable[int] | None = None) -> list[Path]:
    """Write ``<name>_<slice>.csv`` for the requested slices (default: all)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    idx = range(len(series)) if slices is None else slices
    return [write_field_csv(directory / f"{name}_{k}.csv", series[k]) for k in idx]
