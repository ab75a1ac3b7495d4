"""Shared domain types for finite-resolution work measurements.

Conventions (hbar = 1): the drive energy scale kappa is fixed to 1
internally, so times are reported in 1/kappa and energies in kappa.
The measuring pointer is a free particle of mass m prepared at t_p in
a Gaussian of momentum width sigma_p (position width 1/sigma_p).  Its
displacement is read out once at t_m and converted to work through
the coupling lam, W = x / lam, so work-distribution peaks sit at the
window-weighted energy integrals of the drive.

Sampling windows are Gaussian,

    g(t) = exp(-t^2 / delta^2) / (sqrt(pi) delta),

and the two-time sampling profile is f(t) = g(t - t_f) - g(t - t_i).
In closed-form time integrals the window support is treated as
[t0 - 6 delta, t0 + 6 delta]; the neglected tail is below 1e-15.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)

#: Half-width of the effective window support, in units of delta.
WINDOW_SUPPORT_SIGMAS = 6.0


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class ToleranceError(RuntimeError):
    """A numerical routine could not meet its accuracy target."""


class CoverageError(ValueError):
    """A sampled distribution does not cover enough probability mass."""


class GridAliasWarning(UserWarning):
    """Momentum-grid truncation or spacing may distort the transform."""


def _readonly(a):
    out = np.array(a)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ProtocolSchedule:
    """Ordered protocol times t_p < t_i < t_f < t_m and window width delta.

    t_p is the preparation time of the system-pointer product state, t_i
    and t_f the centers of the two sampling windows, and t_m the time of
    the final pointer position measurement.
    """

    t_p: float
    t_i: float
    t_f: float
    t_m: float
    delta: float

    def __post_init__(self):
        if not (self.t_p < self.t_i <= self.t_f < self.t_m):
            raise ValueError(
                "schedule must satisfy t_p < t_i <= t_f < t_m, got "
                f"t_p={self.t_p}, t_i={self.t_i}, t_f={self.t_f}, t_m={self.t_m}"
            )
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def windows_disjoint(self) -> bool:
        """Whether the two sampling windows have negligible overlap."""
        return (self.t_f - self.t_i) > 6.0 * self.delta

    @property
    def is_degenerate(self) -> bool:
        """t_i == t_f, i.e. the sampling profile vanishes identically."""
        return self.t_i == self.t_f

    def window_bounds(self, center, pad=WINDOW_SUPPORT_SIGMAS):
        """Effective support of the window centered at `center`, clipped
        to [t_p, t_m]."""
        lo = max(self.t_p, center - pad * self.delta)
        hi = min(self.t_m, center + pad * self.delta)
        return lo, hi

    def reversed(self) -> "ProtocolSchedule":
        """Schedule of the time-reversed protocol, reflected about the
        midpoint of [t_p, t_m]."""
        pivot = self.t_p + self.t_m
        return ProtocolSchedule(
            t_p=self.t_p,
            t_i=pivot - self.t_f,
            t_f=pivot - self.t_i,
            t_m=self.t_m,
            delta=self.delta,
        )

    @classmethod
    def figure_defaults(cls) -> "ProtocolSchedule":
        """Reference schedule: t_i = 2, t_f = 3, t_m = 4, delta = 0.2
        (kappa units), preparation at t_p = 0."""
        return cls(t_p=0.0, t_i=2.0, t_f=3.0, t_m=4.0, delta=0.2)


@dataclass(frozen=True)
class ApparatusSpec:
    """Free-particle pointer: mass, momentum width and work coupling.

    sigma_p is the momentum-space width of the initial Gaussian; the
    position width is 1/sigma_p.  lam converts pointer displacement to
    work and must be nonzero.
    """

    mass: float
    sigma_p: float
    lam: float = 1.0

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if self.sigma_p <= 0:
            raise ValueError(f"sigma_p must be positive, got {self.sigma_p}")
        if self.lam == 0:
            raise ValueError("lam must be nonzero")

    @property
    def sigma_x(self) -> float:
        return 1.0 / self.sigma_p

    def scaled(self, s: float) -> "ApparatusSpec":
        """Apparatus moved toward the ideal-measurement limit by factor
        s < 1: momentum width grows as 1/s while the dispersion rate
        sigma_p^2/m shrinks as s^2."""
        return ApparatusSpec(mass=self.mass / s**4, sigma_p=self.sigma_p / s, lam=self.lam)

    @classmethod
    def figure_defaults(cls) -> "ApparatusSpec":
        """Pointer with m = 1000 sigma_p^2 / kappa and peak width
        1/(lam sigma_p) = 0.2 kappa."""
        sigma_p = 5.0
        return cls(mass=1000.0 * sigma_p**2, sigma_p=sigma_p, lam=1.0)


@dataclass(frozen=True)
class DrivenQubit:
    """Two-level atom in a linearly ramped field rotating about z.

    kappa sets the ramp scale (field magnitude kappa^2 t), omega the
    rotation rate and theta the polar angle.  The drive commutes with
    itself at different times only for theta in {0, pi}.
    """

    kappa: float = 1.0
    omega: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")

    @property
    def self_commuting(self) -> bool:
        return math.sin(self.theta) == 0.0

    def level_energies(self, t):
        """Instantaneous eigenvalues (+kappa^2 t, -kappa^2 t)."""
        e = self.kappa**2 * np.asarray(t, dtype=float)
        return np.stack([e, -e])

    def spectral_counterpart(self) -> "SpectralSystem":
        """Fixed-basis system with the same spectrum; valid as a stand-in
        for the full drive only when theta is 0 or pi."""
        k2 = self.kappa**2
        sign = math.cos(self.theta)  # +1 at theta=0, -1 at theta=pi
        return SpectralSystem(
            levels=(lambda t: sign * k2 * np.asarray(t, float),
                    lambda t: -sign * k2 * np.asarray(t, float)),
            labels=("0", "1"),
        )


def qubit_hamiltonian(q: DrivenQubit, t: float) -> np.ndarray:
    """Drive Hamiltonian at time t: traceless Hermitian 2x2 with
    eigenvalues +-kappa^2 t."""
    b = q.kappa**2 * t
    st, ct = math.sin(q.theta), math.cos(q.theta)
    phase = complex(math.cos(q.omega * t), math.sin(q.omega * t))
    off = b * st * phase.conjugate()
    return np.array([[b * ct, off], [off.conjugate(), -b * ct]], dtype=complex)


def qubit_hamiltonian_rate(q: DrivenQubit, t: float) -> np.ndarray:
    """Analytic time derivative of the drive Hamiltonian."""
    k2 = q.kappa**2
    st, ct = math.sin(q.theta), math.cos(q.theta)
    wt = q.omega * t
    phase = complex(math.cos(wt), -math.sin(wt))
    # d/dt [ b(t) e^{-i w t} ] with b = kappa^2 t
    off = k2 * st * phase * (1.0 - 1.0j * q.omega * t)
    return np.array([[k2 * ct, off], [off.conjugate(), -k2 * ct]], dtype=complex)


@dataclass(frozen=True)
class SpectralSystem:
    """Self-commuting system: fixed basis, time-dependent spectrum.

    levels holds one callable per basis state mapping time to energy;
    callables must accept scalars and ndarrays alike.
    """

    levels: tuple
    labels: tuple = ()

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError("at least one energy trajectory is required")
        if self.labels and len(self.labels) != len(self.levels):
            raise ValueError("labels must match the number of levels")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(n) for n in range(len(self.levels))))

    @property
    def dimension(self) -> int:
        return len(self.levels)

    def energies(self, t) -> np.ndarray:
        """Spectrum at time(s) t, shape (N,) or (N, len(t))."""
        return np.stack([np.asarray(level(t), dtype=float) for level in self.levels])

    def validate_on(self, schedule: ProtocolSchedule, samples: int = 64) -> None:
        """Check every trajectory is finite on [t_p, t_m]."""
        ts = np.linspace(schedule.t_p, schedule.t_m, samples)
        values = self.energies(ts)
        if not np.all(np.isfinite(values)):
            bad = [self.labels[n] for n in np.nonzero(~np.isfinite(values).all(axis=1))[0]]
            raise ValueError(f"energy trajectories not finite on the schedule: {bad}")

    def hamiltonian(self, t) -> np.ndarray:
        return np.diag(self.energies(t)).astype(complex)


@dataclass(frozen=True)
class SystemState:
    """Pure amplitude vector or density matrix in the fixed basis."""

    amplitudes: np.ndarray | None = None
    density: np.ndarray | None = None

    def __post_init__(self):
        if (self.amplitudes is None) == (self.density is None):
            raise ValueError("provide exactly one of amplitudes or density")
        if self.amplitudes is not None:
            amp = np.asarray(self.amplitudes, dtype=complex)
            norm = float(np.vdot(amp, amp).real)
            if abs(norm - 1.0) > 1e-9:
                raise ValueError(f"pure state norm must be 1, got {norm}")
            object.__setattr__(self, "amplitudes", _readonly(amp))
        else:
            rho = np.asarray(self.density, dtype=complex)
            if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
                raise ValueError("density matrix must be square")
            if abs(np.trace(rho).real - 1.0) > 1e-9 or abs(np.trace(rho).imag) > 1e-12:
                raise ValueError(f"density matrix trace must be 1, got {np.trace(rho)}")
            if not np.allclose(rho, rho.conj().T, atol=1e-10):
                raise ValueError("density matrix must be Hermitian")
            if np.linalg.eigvalsh(rho).min() < -1e-10:
                raise ValueError("density matrix must be positive semidefinite")
            object.__setattr__(self, "density", _readonly(rho))

    @classmethod
    def pure(cls, *amplitudes) -> "SystemState":
        return cls(amplitudes=np.asarray(amplitudes, dtype=complex))

    @classmethod
    def mixed(cls, density) -> "SystemState":
        return cls(density=density)

    @property
    def is_pure(self) -> bool:
        return self.amplitudes is not None

    @property
    def dimension(self) -> int:
        return len(self.amplitudes) if self.is_pure else self.density.shape[0]

    def as_density(self) -> np.ndarray:
        if self.is_pure:
            return np.outer(self.amplitudes, self.amplitudes.conj())
        return np.array(self.density)

    def diagonal(self) -> np.ndarray:
        """Level populations in the fixed basis."""
        if self.is_pure:
            return np.abs(self.amplitudes) ** 2
        return np.real(np.diag(self.density)).copy()


@dataclass(frozen=True)
class WorkDistribution:
    """Sampled work density on a grid, with provenance metadata."""

    w: np.ndarray
    density: np.ndarray
    time: float
    engine: str = ""
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        w = _readonly(np.asarray(self.w, dtype=float))
        d = _readonly(np.asarray(self.density, dtype=float))
        if w.shape != d.shape or w.ndim != 1:
            raise ValueError("w and density must be 1-d arrays of equal length")
        if len(w) < 2 or np.any(np.diff(w) <= 0):
            raise ValueError("work grid must be strictly increasing")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "density", d)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.w))

    def mean(self) -> float:
        return float(np.trapezoid(self.w * self.density, self.w))

    def normalization_defect(self) -> float:
        return abs(self.integral() - 1.0)

    def check(self, coverage_tol: float = 1e-4) -> None:
        """Raise unless the density is nonnegative and the grid holds
        all but coverage_tol of the mass."""
        if self.density.min() < -1e-12:
            raise ValueError(f"negative density: min {self.density.min():.3e}")
        defect = self.normalization_defect()
        if defect > coverage_tol:
            raise CoverageError(
                f"distribution integrates to 1 +- {defect:.3e}, "
                f"exceeding coverage tolerance {coverage_tol:.1e}"
            )


def window_value(schedule: ProtocolSchedule, t):
    """Gaussian sampling window g(t), unit area over the real line."""
    d = schedule.delta
    t = np.asarray(t, dtype=float)
    out = np.exp(-((t / d) ** 2)) / (math.sqrt(math.pi) * d)
    return out if out.ndim else float(out)


def sampling_function(schedule: ProtocolSchedule, t):
    """Two-window sampling profile f(t) = g(t - t_f) - g(t - t_i).

    Integrates to zero over the real line; identically zero for the
    degenerate schedule t_i == t_f.
    """
    t = np.asarray(t, dtype=float)
    out = window_value(schedule, t - schedule.t_f) - window_value(schedule, t - schedule.t_i)
    return out if out.ndim else float(out)


def apparatus_momentum_amplitude(a: ApparatusSpec, p, t: float, t_p: float):
    """Momentum amplitude of the freely evolving pointer at time t >= t_p.

    The momentum density is stationary; free evolution only adds the
    kinetic phase that disperses the position density.
    """
    p = np.asarray(p, dtype=float)
    width = (1.0 / a.sigma_p**2) + 1.0j * (t - t_p) / a.mass
    out = np.exp(-0.5 * width * p**2) / math.sqrt(math.sqrt(math.pi) * a.sigma_p)
    return out if out.ndim else complex(out)


def peak_width(a: ApparatusSpec, t, t_p: float):
    """Dispersion width Sigma(t) of the measured work peaks.

    Equals sigma_p * |1/sigma_p^2 + i (t - t_p)/m| / lam: the initial
    value 1/(lam sigma_p) at t = t_p, growing monotonically as the
    pointer disperses.
    """
    dt = np.asarray(t, dtype=float) - t_p
    out = np.sqrt(1.0 / a.sigma_p**2 + (a.sigma_p * dt / a.mass) ** 2) / abs(a.lam)
    return out if out.ndim else float(out)
