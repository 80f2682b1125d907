"""
Closed-form Gaussian bridge: shifting the mean of a Gaussian packet by +1.

Units are hbar = m = 1. The reference evolution is a coherent Gaussian

    R(x, t) = -omega/2 (x - m(t))^2,   S(x, t) = c x + d(t),
    m(t) = m1 + m2 t,  c = m2,  d(t) = d1 t,

and the Schrödinger system is solved by the exponential-quadratic ansatz

    phi     = exp(alpha x^2 + beta x + gamma),
    phi_hat = exp(alpha_hat x^2 + beta_hat x + gamma_hat),

with alpha = 0 and alpha_hat = -omega.  The constants m1, m2, beta0, gamma0,
d0, d1 are fixed by the product boundary conditions together with phase
matching at both ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DegenerateDenominator
from .grid_field import FieldSeries, PhysicalConstants, SpaceTimeGrid

CSV_HEADER = ("omega", "m1", "m2", "beta0", "gamma0", "d0", "d1",
              "res_u1", "res_u2", "res_u3", "res_u4")
RESIDUAL_GATE = 1e-9
ODE_GATE = 1e-6


@dataclass(frozen=True)
class GaussianConfig:
    omega: float = math.pi
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    t0: float = 0.0
    t1: float = 1.0

    def __post_init__(self):
        if not (self.omega > 0 and math.isfinite(self.omega)):
            raise ConfigError(f"omega must be positive and finite, got {self.omega}")
        if self.constants != PhysicalConstants(1.0, 1.0):
            raise ConfigError("the Gaussian example is formulated for hbar = m = 1")
        if (self.t0, self.t1) != (0.0, 1.0):
            raise ConfigError("the Gaussian example runs on t in [0, 1]")


@dataclass(frozen=True)
class SolvedConstants:
    omega: float
    m1: float
    m2: float
    beta0: float
    gamma0: float
    d0: float
    d1: float

    def values(self) -> tuple[float, float, float, float, float, float]:
        return (self.m1, self.m2, self.beta0, self.gamma0, self.d0, self.d1)

    def residuals(self) -> dict[str, float]:
        return phase_matching_residuals(self)

    def csv_row(self) -> list[str]:
        r = self.residuals()
        nums = (self.omega, *self.values(), r["u1"], r["u2"], r["u3"], r["u4"])
        return [format(v, ".17g") for v in nums]


@dataclass(frozen=True)
class ReferenceParams:
    """Mean line m(t) = m1 + m2 t, drift constant c and phase offsets."""

    m1: float
    m2: float
    c: float
    d0: float
    d1: float

    def __post_init__(self):
        if self.c != self.m2:
            raise ConfigError("the drift constant must equal the mean velocity m2")
        if self.d0 != 0.0:
            raise ConfigError("d(0) must vanish")

    @classmethod
    def from_constants(cls, k: SolvedConstants) -> "ReferenceParams":
        return cls(m1=k.m1, m2=k.m2, c=k.m2, d0=k.d0, d1=k.d1)

    def mean(self, t):
        return self.m1 + self.m2 * np.asarray(t, dtype=float)

    def d(self, t):
        return self.d1 * np.asarray(t, dtype=float)


def _denominator(omega: float) -> float:
    e = math.exp(omega)
    D = 2.0 - 2.0 * e + omega + omega * e
    if abs(D) < 1e-12:
        raise DegenerateDenominator(f"D(omega={omega}) = {D}")
    return D


def solve_constants(omega: float = math.pi) -> SolvedConstants:
    """Closed-form constants of the Gaussian example for a given omega > 0."""
    if not (omega > 0 and math.isfinite(omega)):
        raise ConfigError(f"omega must be positive and finite, got {omega}")
    e = math.exp(omega)
    D = _denominator(omega)
    # e - 1 via expm1 keeps m1 and gamma0 accurate for small omega
    em1 = math.expm1(omega)
    return SolvedConstants(
        omega=omega,
        m1=-em1 / D,
        m2=omega * (e + 1.0) / D,
        beta0=-2.0 * omega / D,
        gamma0=0.5 * omega * em1**2 / D**2,
        d0=0.0,
        d1=-omega * (1.0 + e) * (1.0 - e + omega + omega * e) / D**2,
    )


def phase_matching_residuals(k: SolvedConstants) -> dict[str, float]:
    """Residuals of the four phase-matching equations and the beta0 relation."""
    w = k.omega
    coef = BridgeCoefficients(k)
    beta1 = coef.beta(1.0)
    gamma1 = coef.gamma(1.0)
    M = k.m1 + k.m2
    return {
        "u1": float(k.m2 + w * k.m1 + k.beta0),
        "u2": float(k.gamma0 - 0.5 * w * k.m1**2 + k.d0),
        "u3": float(k.m2 + w * M + beta1 - w),
        "u4": float(-0.5 * w * M**2 + gamma1 + 0.5 * w + k.d1),
        "beta0": float(k.beta0 - 2.0 * w * (1.0 + k.m1 * math.exp(-w) - M)
                       / (math.exp(w) - math.exp(-w))),
    }


@dataclass(frozen=True)
class BridgeCoefficients:
    """Time-dependent coefficients of the phi / phi_hat ansatz.

    ``gamma0`` defaults to the phase-matched value but may be overridden; the
    terminal identity gamma(1) + gamma_hat(1) = -omega holds for any choice.
    """

    k: SolvedConstants
    gamma0: float | None = None

    def __post_init__(self):
        if self.gamma0 is None:
            object.__setattr__(self, "gamma0", self.k.gamma0)

    @property
    def omega(self) -> float:
        return self.k.omega

    @property
    def beta0(self) -> float:
        return self.k.beta0

    def _m(self, t):
        return self.k.m1 + self.k.m2 * np.asarray(t, dtype=float)

    def alpha(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def alpha_hat(self, t):
        return np.full_like(np.asarray(t, dtype=float), -self.omega)

    def beta(self, t):
        return self.beta0 * np.exp(self.omega * np.asarray(t, dtype=float))

    def beta_hat(self, t):
        t = np.asarray(t, dtype=float)
        w = self.omega
        return 2.0 * w * self._m(t) - np.exp(-w * t) * (self.beta0 + 2.0 * w * self.k.m1)

    def gamma(self, t):
        t = np.asarray(t, dtype=float)
        w, b0 = self.omega, self.beta0
        return (self.gamma0 + b0**2 / (4.0 * w) * -np.expm1(2.0 * w * t)
                + b0 * (self.k.m1 - np.exp(w * t) * self._m(t)))

    def gamma_hat(self, t):
        t = np.asarray(t, dtype=float)
        w, b0 = self.omega, self.beta0
        u = np.exp(w * t) * self._m(t) - self.k.m1
        e2 = np.exp(-2.0 * w * t)
        return -self.gamma0 + (b0**2 * -np.expm1(-2.0 * w * t)
                               + 4.0 * b0 * w * e2 * u
                               - 4.0 * w**2 * e2 * u**2) / (4.0 * w)


def _grid_eval(f: Callable, grid: SpaceTimeGrid) -> np.ndarray:
    return f(grid.x[None, :], grid.t[:, None])


@dataclass(frozen=True)
class GaussianBridgeSolution:
    """Closed-form reference evolution and Schrödinger-system solution.

    Densities are unnormalized (peak value one) unless ``normalized=True`` is
    requested, in which case the factor sqrt(omega/pi) is applied.
    """

    config: GaussianConfig
    constants: SolvedConstants
    reference: ReferenceParams
    coefficients: BridgeCoefficients

    @classmethod
    def from_config(cls, config: GaussianConfig | None = None) -> "GaussianBridgeSolution":
        config = config or GaussianConfig()
        k = solve_constants(config.omega)
        return cls(config, k, ReferenceParams.from_constants(k), BridgeCoefficients(k))

    @classmethod
    def from_omega(cls, omega: float = math.pi) -> "GaussianBridgeSolution":
        return cls.from_config(GaussianConfig(omega=omega))

    @property
    def omega(self) -> float:
        return self.config.omega

    @property
    def log_normalizer(self) -> float:
        """log of the factor that turns exp(-omega (x-a)^2) into a unit-mass density."""
        return 0.5 * math.log(self.omega / math.pi)

    # reference evolution -----------------------------------------------------

    def reference_R(self, x, t):
        x, t = np.asarray(x, float), np.asarray(t, float)
        return -0.5 * self.omega * (x - self.reference.mean(t)) ** 2

    def reference_S(self, x, t):
        x, t = np.asarray(x, float), np.asarray(t, float)
        return self.reference.c * x + self.reference.d(t)

    def reference_psi(self, x, t, normalized: bool = False):
        shift = 0.5 * self.log_normalizer if normalized else 0.0
        return np.exp(self.reference_R(x, t) + shift + 1j * self.reference_S(x, t))

    def reference_drift(self, x, t):
        """grad S + grad R = c - omega (x - m(t))."""
        x, t = np.asarray(x, float), np.asarray(t, float)
        return self.reference.c - self.omega * (x - self.reference.mean(t))

    def reference_potential(self, x, t):
        """Potential that makes the reference evolution a Schrödinger solution.

        Obtained from the quantum Hamilton-Jacobi equation; quadratic in x and
        centred on the moving mean, hence time-dependent.
        """
        x, t = np.asarray(x, float), np.asarray(t, float)
        w, c = self.omega, self.reference.c
        return 0.5 * w**2 * (x - self.reference.mean(t)) ** 2 - 0.5 * w - 0.5 * c**2 - self.reference.d1

    # Schrödinger system --------------------------------------------------------

    def log_phi(self, x, t):
        x = np.asarray(x, float)
        c = self.coefficients
        return c.alpha(t) * x**2 + c.beta(t) * x + c.gamma(t)

    def log_phi_hat(self, x, t):
        x = np.asarray(x, float)
        c = self.coefficients
        return c.alpha_hat(t) * x**2 + c.beta_hat(t) * x + c.gamma_hat(t)

    def phi(self, x, t):
        return np.exp(self.log_phi(x, t))

    def phi_hat(self, x, t):
        return np.exp(self.log_phi_hat(x, t))

    def log_bridge_density(self, x, t, normalized: bool = False):
        shift = self.log_normalizer if normalized else 0.0
        return self.log_phi(x, t) + self.log_phi_hat(x, t) + shift

    def bridge_density(self, x, t, normalized: bool = False):
        return np.exp(self.log_bridge_density(x, t, normalized))

    def bridge_mean(self, t):
        c = self.coefficients
        return (c.beta(t) + c.beta_hat(t)) / (2.0 * self.omega)

    def bridge_drift(self, x, t):
        """Reference drift plus grad log phi = beta(t)."""
        return self.reference_drift(x, t) + self.coefficients.beta(t)

    def psi_tilde(self, x, t, normalized: bool = False):
        """Controlled wavefunction exp(R~ + i S~)."""
        lp, lph = self.log_phi(x, t), self.log_phi_hat(x, t)
        S_t = self.reference_S(x, t) + self.reference_R(x, t) + 0.5 * (lp - lph)
        R_t = 0.5 * (lp + lph) + (0.5 * self.log_normalizer if normalized else 0.0)
        return np.exp(R_t + 1j * S_t)

    # gridded views ---------------------------------------------------------------

    def tabulate(self, name: str, grid: SpaceTimeGrid, **kw) -> np.ndarray:
        """Evaluate one of the (x, t) methods on every grid node, shape (n_t, n_x)."""
        f = getattr(self, name)
        return _grid_eval(lambda x, t: f(x, t, **kw), grid)

    def series(self, name: str, grid: SpaceTimeGrid, **kw) -> FieldSeries:
        return FieldSeries(grid, self.tabulate(name, grid, **kw))


@dataclass(frozen=True)
class OdeResidualReport:
    max_residuals: dict[str, float]
    constraints: dict[str, float]
    step: float
    threshold: float = ODE_GATE

    @property
    def passed(self) -> bool:
        return all(v < self.threshold for v in self.max_residuals.values())


def _ddt(f: Callable, t: np.ndarray, h: float) -> np.ndarray:
    # five-point central stencil; gamma has a large third derivative near t=1
    return (f(t - 2 * h) - 8 * f(t - h) + 8 * f(t + h) - f(t + 2 * h)) / (12.0 * h)


def verify_ode_systems(solution: GaussianBridgeSolution, n_check: int = 101,
                       step: float = 1e-4) -> OdeResidualReport:
    """Substitute the coefficients into both ODE triples and difference in time."""
    if n_check < 10:
        raise ValueError("n_check must be at least 10")
    c = solution.coefficients
    w = solution.omega
    cc = solution.reference.c
    t = np.linspace(0.0, 1.0, n_check)
    m = solution.reference.mean(t)
    a, ah = c.alpha(t), c.alpha_hat(t)
    b, bh = c.beta(t), c.beta_hat(t)
    res = {
        "alpha": _ddt(c.alpha, t, step) - 2 * a * w + 2 * a**2,
        "beta": _ddt(c.beta, t, step) + 2 * a * cc + 2 * a * w * m - w * b + 2 * a * b,
        "gamma": _ddt(c.gamma, t, step) + cc * b + w * b * m + 0.5 * b**2 + a,
        "alpha_hat": _ddt(c.alpha_hat, t, step) - 2 * ah * w - 2 * ah**2,
        "beta_hat": _ddt(c.beta_hat, t, step) + 2 * ah * cc + 2 * ah * w * m - w * bh - 2 * ah * bh,
        "gamma_hat": _ddt(c.gamma_hat, t, step) - w + cc * bh + w * bh * m - 0.5 * bh**2 - ah,
    }
    return OdeResidualReport(
        max_residuals={k: float(np.max(np.abs(v))) for k, v in res.items()},
        constraints=boundary_constraints(c),
        step=step,
    )


def boundary_constraints(c: BridgeCoefficients) -> dict[str, float]:
    """Signed residuals of the endpoint sums imposed by the product boundary conditions."""
    w = c.omega
    return {
        "alpha_t0": float(c.alpha(0.0) + c.alpha_hat(0.0) + w),
        "beta_t0": float(c.beta(0.0) + c.beta_hat(0.0)),
        "gamma_t0": float(c.gamma(0.0) + c.gamma_hat(0.0)),
        "alpha_t1": float(c.alpha(1.0) + c.alpha_hat(1.0) + w),
        "beta_t1": float(c.beta(1.0) + c.beta_hat(1.0) - 2 * w),
        "gamma_t1": float(c.gamma(1.0) + c.gamma_hat(1.0) + w),
    }
