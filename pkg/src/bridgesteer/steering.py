"""
Controlled quantum evolution built from a Schrödinger bridge.

Given the reference pair (R, S) and the bridge potentials (phi, phihat):

    S~ = S + hbar R + (hbar/2) log(phi / phihat),
    R~ = (1/2) log(phi phihat),
    psi~ = exp(R~ + i S~ / hbar),

and the controlling potential

    V_c = V - V_i + (hbar^2/m) [lap sqrt(rho~)/sqrt(rho~) - lap sqrt(rho)/sqrt(rho)].

All Laplacian ratios are evaluated from logarithms, so nothing underflows in
the Gaussian tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridTooSmall, InvalidField, NonpositiveDensity, NonpositivePhi
from .grid_field import (
    FieldSeries,
    MadelungSeries,
    PhysicalConstants,
    RealField,
    SpaceTimeGrid,
    grad_array,
    laplacian_array,
    laplacian_ratio_from_log,
    MASS_TOL,
    time_derivative,
)

# max |residual| / (dx^2 + dt^2) for the plane wave exp(i(2 pi x - 2 pi^2 t))
# on the default grid; see calibrate_plane_wave
PLANE_WAVE_MOMENTUM = 2.0 * math.pi
PLANE_WAVE_C = 122.57180572458212


def _as_table(values, grid: SpaceTimeGrid) -> np.ndarray:
    """Broadcast a potential (None, scalar, RealField, FieldSeries, array) to (n_t, n_x)."""
    shape = (grid.n_t, grid.n_x)
    if values is None:
        return np.zeros(shape)
    if isinstance(values, (RealField, FieldSeries)):
        if values.grid != grid:
            raise InvalidField("potential lives on a different grid")
        values = values.values
    arr = np.asarray(values, dtype=float)
    return np.array(np.broadcast_to(arr, shape))


def _log_values(series, what: str) -> np.ndarray:
    vals = np.asarray(series.values if hasattr(series, "values") else series, dtype=float)
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise NonpositivePhi(f"{what} must be strictly positive")
    return np.log(vals)


@dataclass(frozen=True)
class ControlledEvolution:
    grid: SpaceTimeGrid
    reference: MadelungSeries
    R_tilde: FieldSeries
    S_tilde: FieldSeries
    log_rho_tilde: np.ndarray
    constants: PhysicalConstants
    V: np.ndarray | None = None
    V_i: np.ndarray | None = None
    V_c: FieldSeries | None = None

    @property
    def tilde(self) -> MadelungSeries:
        return MadelungSeries(self.R_tilde, self.S_tilde)

    @property
    def rho_tilde(self) -> FieldSeries:
        return FieldSeries(self.grid, np.exp(self.log_rho_tilde), unit_mass=self.normalized)

    @property
    def normalized(self) -> bool:
        mass = self.grid.integrate(np.exp(self.log_rho_tilde))
        return bool(np.all(np.abs(mass - 1.0) <= MASS_TOL))

    @property
    def psi_tilde(self) -> FieldSeries:
        vals = np.exp(self.R_tilde.values + 1j * self.S_tilde.values / self.constants.hbar)
        return FieldSeries(self.grid, vals, unit_mass=self.normalized)

    @property
    def V_total(self) -> FieldSeries:
        """V_i + V_c, the potential that drives psi~."""
        if self.V_c is None:
            raise ValueError("controlling potential not computed yet")
        return FieldSeries(self.grid, _as_table(self.V_i, self.grid) + self.V_c.values)

    def with_potentials(self, V, V_i=None) -> "ControlledEvolution":
        """Attach the reference and ambient potentials and compute V_c."""
        V_tab = _as_table(V, self.grid)
        Vi_tab = _as_table(V_i, self.grid)
        log_rho = 2.0 * self.reference.R.values
        Vc = control_potential_log(V_tab, Vi_tab, log_rho, self.log_rho_tilde, self.grid, self.constants)
        return ControlledEvolution(self.grid, self.reference, self.R_tilde, self.S_tilde,
                                   self.log_rho_tilde, self.constants, V_tab, Vi_tab,
                                   FieldSeries(self.grid, Vc))

    def drift(self) -> np.ndarray:
        """(1/m) grad S~ + (hbar/m) grad R~ on the grid."""
        c = self.constants
        dx = self.grid.dx
        return grad_array(self.S_tilde.values, dx) / c.mass + c.diffusion * grad_array(self.R_tilde.values, dx)


def assemble_tilde_log(pairs: MadelungSeries, log_phi: np.ndarray, log_phi_hat: np.ndarray,
                       constants: PhysicalConstants = PhysicalConstants()) -> ControlledEvolution:
    grid = pairs.grid
    shape = (grid.n_t, grid.n_x)
    log_phi = np.asarray(log_phi, dtype=float)
    log_phi_hat = np.asarray(log_phi_hat, dtype=float)
    if log_phi.shape != shape or log_phi_hat.shape != shape:
        raise InvalidField("phi and phihat must cover every slice of the reference grid")
    if not (np.all(np.isfinite(log_phi)) and np.all(np.isfinite(log_phi_hat))):
        raise NonpositivePhi("phi and phihat must be strictly positive")
    hbar = constants.hbar
    S_t = pairs.S.values + hbar * pairs.R.values + 0.5 * hbar * (log_phi - log_phi_hat)
    log_rho_t = log_phi + log_phi_hat
    return ControlledEvolution(grid, pairs, FieldSeries(grid, 0.5 * log_rho_t),
                               FieldSeries(grid, S_t), log_rho_t, constants)


def assemble_tilde(pairs: MadelungSeries, phi: FieldSeries, phi_hat: FieldSeries,
                   constants: PhysicalConstants = PhysicalConstants()) -> ControlledEvolution:
    """Build S~, R~, rho~ and psi~ from the reference pair and the bridge potentials."""
    return assemble_tilde_log(pairs, _log_values(phi, "phi"), _log_values(phi_hat, "phihat"),
                              constants)


def control_potential_log(V, V_i, log_rho, log_rho_tilde, grid: SpaceTimeGrid,
                          constants: PhysicalConstants = PhysicalConstants()) -> np.ndarray:
    k = constants.hbar**2 / constants.mass
    dx = grid.dx
    lap_t = laplacian_ratio_from_log(0.5 * np.asarray(log_rho_tilde), dx)
    lap_r = laplacian_ratio_from_log(0.5 * np.asarray(log_rho), dx)
    return _as_table(V, grid) - _as_table(V_i, grid) + k * (lap_t - lap_r)


def control_potential(V, V_i, rho: FieldSeries, rho_tilde: FieldSeries,
                      constants: PhysicalConstants = PhysicalConstants()) -> FieldSeries:
    """Controlling potential on every slice.

    ``V`` and ``V_i`` may be None (zero), scalars, single-slice RealFields or
    full FieldSeries.  The bracket equals -(2m/hbar^2) times the quantum
    potential difference, so the prefactor hbar^2/m doubles it.
    """
    grid = rho.grid
    for name, r in (("rho", rho), ("rho_tilde", rho_tilde)):
        if np.any(np.asarray(r.values) <= 0):
            raise NonpositiveDensity(f"{name} must be strictly positive")
    Vc = control_potential_log(V, V_i, np.log(rho.values), np.log(rho_tilde.values), grid, constants)
    return FieldSeries(grid, Vc)


# ---------------------------------------------------------------------------
# residual verifiers


@dataclass(frozen=True)
class MadelungResiduals:
    continuity: np.ndarray
    hamilton_jacobi: np.ndarray

    def max_abs(self, interior: bool = True) -> tuple[float, float]:
        s = slice(1, -1) if interior else slice(None)
        return (float(np.max(np.abs(self.continuity[:, s]))),
                float(np.max(np.abs(self.hamilton_jacobi[:, s]))))


def madelung_residuals(pairs: MadelungSeries, V, constants: PhysicalConstants = PhysicalConstants()) -> MadelungResiduals:
    """Residuals of the continuity and quantum Hamilton-Jacobi equations for (R, S)."""
    grid = pairs.grid
    if grid.n_t < 3:
        raise GridTooSmall("madelung_residuals needs at least 3 time slices")
    R, S = pairs.R.values, pairs.S.values
    m, hbar, dx = constants.mass, constants.hbar, grid.dx
    Rx, Sx = grad_array(R, dx), grad_array(S, dx)
    cont = time_derivative(R, grid.dt) + Rx * Sx / m + laplacian_array(S, dx) / (2 * m)
    hj = (time_derivative(S, grid.dt) + Sx**2 / (2 * m) + _as_table(V, grid)
          - hbar**2 / (2 * m) * (Rx**2 + laplacian_array(R, dx)))
    return MadelungResiduals(cont, hj)


def extract_potential(pairs: MadelungSeries, constants: PhysicalConstants = PhysicalConstants()) -> FieldSeries:
    """Potential that makes (R, S) solve the Hamilton-Jacobi equation, slice by slice."""
    grid = pairs.grid
    R, S = pairs.R.values, pairs.S.values
    m, hbar, dx = constants.mass, constants.hbar, grid.dx
    Rx, Sx = grad_array(R, dx), grad_array(S, dx)
    V = (-time_derivative(S, grid.dt) - Sx**2 / (2 * m)
         + hbar**2 / (2 * m) * (Rx**2 + laplacian_array(R, dx)))
    return FieldSeries(grid, V)


def quadratic_fit(field: RealField | np.ndarray, grid: SpaceTimeGrid | None = None):
    """Least-squares quadratic in x; returns (coefficients high-to-low, max abs misfit)."""
    if isinstance(field, RealField):
        grid, values = field.grid, field.values
    else:
        values = np.asarray(field)
    coef = np.polyfit(grid.x, values, 2)
    misfit = float(np.max(np.abs(np.polyval(coef, grid.x) - values)))
    return coef, misfit


@dataclass(frozen=True)
class SchrodingerReport:
    max_residual: float
    threshold: float
    scale: float
    residual: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.threshold

    @property
    def ratio(self) -> float:
        """Max residual over dx^2 + dt^2."""
        return self.max_residual / self.scale


def schrodinger_residual(psi: np.ndarray, V_total: np.ndarray, grid: SpaceTimeGrid,
                         constants: PhysicalConstants = PhysicalConstants()) -> np.ndarray:
    """d psi/dt - (i hbar/2m) lap psi + (i/hbar) V psi on every node."""
    hbar, m = constants.hbar, constants.mass
    return (time_derivative(psi, grid.dt) - 1j * hbar / (2 * m) * laplacian_array(psi, grid.dx)
            + 1j / hbar * V_total * psi)


def verify_schrodinger(psi_tilde: FieldSeries, V_total, constants: PhysicalConstants = PhysicalConstants(),
                       C: float = PLANE_WAVE_C) -> SchrodingerReport:
    """Max interior residual of the controlled Schrödinger equation against C (dx^2 + dt^2)."""
    grid = psi_tilde.grid
    if grid.n_t < 3:
        raise GridTooSmall("verify_schrodinger needs at least 3 time slices")
    r = schrodinger_residual(psi_tilde.values, _as_table(V_total, grid), grid, constants)
    scale = grid.dx**2 + grid.dt**2
    worst = float(np.max(np.abs(r[:, 1:-1])))
    return SchrodingerReport(worst, C * scale, scale, r)


def plane_wave(grid: SpaceTimeGrid, p: float = PLANE_WAVE_MOMENTUM,
               constants: PhysicalConstants = PhysicalConstants()) -> FieldSeries:
    hbar, m = constants.hbar, constants.mass
    x, t = grid.x[None, :], grid.t[:, None]
    return FieldSeries(grid, np.exp(1j * (p * x - p**2 * t / (2 * m)) / hbar))


def calibrate_plane_wave(grid: SpaceTimeGrid | None = None, p: float = PLANE_WAVE_MOMENTUM,
                         constants: PhysicalConstants = PhysicalConstants()) -> float:
    """Max residual / (dx^2 + dt^2) of an exact free plane wave."""
    grid = grid or SpaceTimeGrid()
    return verify_schrodinger(plane_wave(grid, p, constants), 0.0, constants, C=math.inf).ratio


@dataclass(frozen=True)
class EndpointReport:
    modulus_t0: float
    modulus_t1: float
    phase_slope_t0: float
    phase_slope_t1: float
    phase_offset_t0: float
    phase_offset_t1: float


def endpoint_checks(ev: ControlledEvolution, log_rho0: np.ndarray, log_rho1: np.ndarray,
                    target_S0=0.0, target_S1=0.0, cutoff: float = 1e-10) -> EndpointReport:
    """Modulus and phase at both ends, on the region where rho exceeds ``cutoff`` of its peak.

    The phase check reports the largest deviation of S~ - S_target from its
    mean there (a global constant is allowed) together with that constant.
    """
    grid = ev.grid
    out = []
    for k, lr, target in ((0, log_rho0, target_S0), (-1, log_rho1, target_S1)):
        lr = np.asarray(lr, float)
        mask = lr >= lr.max() + math.log(cutoff)
        mod_err = np.max(np.abs(np.exp(ev.R_tilde.values[k][mask]) - np.exp(0.5 * lr[mask])))
        dS = ev.S_tilde.values[k][mask] - np.broadcast_to(np.asarray(target, float), (grid.n_x,))[mask]
        offset = float(np.mean(dS))
        out.append((float(mod_err), float(np.max(np.abs(dS - offset))), offset))
    (m0, s0, o0), (m1, s1, o1) = out
    return EndpointReport(m0, m1, s0, s1, o0, o1)
