"""Momentum-grid solver for the driven two-level atom.

The joint system-pointer state is expanded over the fixed basis and the
pointer momentum, |psi(t)> = sum_n int dp c_n(t, p) |n>|p>, which turns
the Schroedinger equation into independent 2-component ODEs per grid
point:

    i dc_j/dt = p^2/(2m) c_j + [1 + lam f(t) p] sum_k H_jk(t) c_k.

The kinetic phase is absorbed exactly by c = exp(-i p^2 (t - t_p)/2m) b,
so the working equation i db/dt = [1 + lam f(t) p] H(t) b has a
p-independent generator wherever f is negligible: outside the window
supports all grid points share a single 2x2 propagator.  Inside the
windows the full vectorized system is integrated with an adaptive
explicit Runge-Kutta scheme.

The work density is the squared pointer-position amplitude mapped to
W = x / lam,

    P(W, t) = |lam|/(2 pi) sum_n | int dp c_n(t, p) e^{i lam W p} |^2,

evaluated by direct quadrature on the grid so arbitrary work grids are
supported.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.integrate import solve_ivp

from .core import (
    ApparatusSpec,
    DrivenQubit,
    GridAliasWarning,
    ProtocolSchedule,
    SystemState,
    ToleranceError,
    WorkDistribution,
    apparatus_momentum_amplitude,
    peak_width,
    qubit_hamiltonian,
    sampling_function,
)

#: Eigenvalue weight below which a mixture component is dropped.
MIXTURE_WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances for every ODE solve in the pipeline."""

    rtol: float = 1e-9
    atol: float = 1e-11
    method: str = "DOP853"


@dataclass(frozen=True)
class MomentumGrid:
    """Uniform midpoint grid, symmetric about p = 0."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or len(p) < 8:
            raise ValueError("momentum grid must be a 1-d array with >= 8 points")
        dp = np.diff(p)
        if not np.allclose(dp, dp[0], rtol=1e-12, atol=0.0):
            raise ValueError("momentum grid must be uniform")
        if abs(p[0] + p[-1]) > 1e-9 * abs(p[-1]):
            raise ValueError("momentum grid must be symmetric about zero")
        p = np.array(p)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def size(self) -> int:
        return len(self.p)

    @property
    def dp(self) -> float:
        return float(self.p[1] - self.p[0])

    @property
    def p_max(self) -> float:
        return float(self.p[-1] + 0.5 * self.dp)

    @classmethod
    def build(cls, a: ApparatusSpec, n: int = 4096, p_max_factor: float = 8.0,
              w_max_target: float | None = None) -> "MomentumGrid":
        """Midpoint grid covering p_max_factor momentum widths.

        If w_max_target is given the spacing must resolve the fastest
        work phase, dp <= pi / (lam * w_max_target).
        """
        p_max = p_max_factor * a.sigma_p
        dp = 2.0 * p_max / n
        if w_max_target is not None and dp > math.pi / (abs(a.lam) * w_max_target):
            raise ValueError(
                f"dp = {dp:.4g} cannot resolve work values up to {w_max_target:.4g}; "
                f"need dp <= {math.pi / (abs(a.lam) * w_max_target):.4g}"
            )
        p = -p_max + dp * (np.arange(n) + 0.5)
        return cls(p=p)

    def refined(self) -> "MomentumGrid":
        """Grid with doubled extent and halved spacing."""
        dp = 0.5 * self.dp
        p_max = 2.0 * self.p_max
        n = int(round(2.0 * p_max / dp))
        return MomentumGrid(p=-p_max + dp * (np.arange(n) + 0.5))


@dataclass(frozen=True)
class CoefficientField:
    """Joint-state coefficients c_n(t, p) at a fixed time."""

    c: np.ndarray
    grid: MomentumGrid
    time: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=complex)
        if c.shape != (2, self.grid.size):
            raise ValueError(f"coefficients must have shape (2, {self.grid.size})")
        c = np.array(c)
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    def grid_norm(self) -> float:
        """Total probability sum_n sum_k |c_n|^2 dp."""
        return float(np.sum(np.abs(self.c) ** 2) * self.grid.dp)

    def pointwise_norm(self) -> np.ndarray:
        """Per-grid-point probability |c_0|^2 + |c_1|^2."""
        return np.sum(np.abs(self.c) ** 2, axis=0)

    def reduced_density(self) -> np.ndarray:
        """System state after tracing out the pointer."""
        return (self.c @ self.c.conj().T) * self.grid.dp


@dataclass
class CoefficientTrajectory:
    """Checkpointed solution of the coupled coefficient equations."""

    fields: list
    probe_times: np.ndarray | None = None
    reduced_states: np.ndarray | None = None
    initial_norm: float = float("nan")
    max_pointwise_drift: float = 0.0

    @property
    def final(self) -> CoefficientField:
        return self.fields[-1]

    @property
    def norm_drift(self) -> float:
        return abs(self.final.grid_norm() - self.initial_norm)

    def field_at(self, t: float) -> CoefficientField:
        for f in self.fields:
            if abs(f.time - t) <= 1e-12 * max(1.0, abs(t)):
                return f
        raise KeyError(f"no checkpoint stored at t = {t}")


def _propagate_state(q: DrivenQubit, psi, t0: float, t1: float,
                     options: SolverOptions) -> np.ndarray:
    """System-only Schroedinger solve of a pure state from t0 to t1
    (either direction)."""
    psi = np.asarray(psi, dtype=complex)
    if t0 == t1:
        return psi.copy()

    def rhs(t, y):
        return -1j * (qubit_hamiltonian(q, t) @ y)

    sol = solve_ivp(rhs, (t0, t1), psi, method=options.method,
                    rtol=options.rtol, atol=options.atol, dense_output=False)
    if not sol.success:
        raise ToleranceError(f"system-only solve failed: {sol.message}")
    return sol.y[:, -1]


def system_propagator(q: DrivenQubit, t0: float, t1: float,
                      options: SolverOptions, t_eval=None):
    """Propagator U(t0 -> t) of the bare drive; returns the final 2x2
    matrix, or the stack over t_eval when given."""
    if t_eval is None:
        times = np.array([t1])
    else:
        times = np.asarray(t_eval, dtype=float)

    def rhs(t, y):
        return (-1j * (qubit_hamiltonian(q, t) @ y.reshape(2, 2))).ravel()

    sol = solve_ivp(rhs, (t0, t1), np.eye(2, dtype=complex).ravel(),
                    method=options.method, rtol=options.rtol, atol=options.atol,
                    t_eval=times)
    if not sol.success:
        raise ToleranceError(f"propagator solve failed: {sol.message}")
    stack = sol.y.T.reshape(-1, 2, 2)
    return stack if t_eval is not None else stack[-1]


def prepare_initial_coefficients(q: DrivenQubit, target: SystemState,
                                 schedule: ProtocolSchedule, a: ApparatusSpec,
                                 grid: MomentumGrid,
                                 options: SolverOptions = SolverOptions()) -> CoefficientField:
    """Product state at t_p whose free system evolution reaches `target`
    at the first sampling time t_i."""
    if not target.is_pure or target.dimension != 2:
        raise ValueError("target must be a pure two-level state; "
                         "decompose mixed states into pure components")
    psi_tp = _propagate_state(q, target.amplitudes, schedule.t_i, schedule.t_p, options)
    psi_tp = psi_tp / math.sqrt(float(np.vdot(psi_tp, psi_tp).real))
    envelope = apparatus_momentum_amplitude(a, grid.p, schedule.t_p, schedule.t_p)
    return CoefficientField(c=psi_tp[:, None] * envelope[None, :], grid=grid,
                            time=schedule.t_p)


def _window_segments(schedule: ProtocolSchedule, t0: float, t1: float):
    """Partition [t0, t1] into window and gap segments.

    Window segments cover the merged 6-delta supports of the two
    sampling pulses; in the gaps the coupling is below 1e-15 of its
    peak and is dropped.
    """
    supports = []
    for center in (schedule.t_i, schedule.t_f):
        lo = center - 6.0 * schedule.delta
        hi = center + 6.0 * schedule.delta
        if hi > t0 and lo < t1:
            supports.append([max(lo, t0), min(hi, t1)])
    supports.sort()
    merged = []
    for lo, hi in supports:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    segments = []
    cursor = t0
    for lo, hi in merged:
        if lo > cursor:
            segments.append((cursor, lo, False))
        segments.append((lo, hi, True))
        cursor = hi
    if cursor < t1:
        segments.append((cursor, t1, False))
    return segments


def _mandated_checkpoints(schedule: ProtocolSchedule, t0: float, t1: float):
    marks = [schedule.t_i - 6 * schedule.delta, schedule.t_i + 6 * schedule.delta,
             schedule.t_f - 6 * schedule.delta, schedule.t_f + 6 * schedule.delta]
    return [m for m in marks if t0 < m < t1]


def evolve_coefficients(field: CoefficientField, q: DrivenQubit,
                        schedule: ProtocolSchedule, a: ApparatusSpec, t_end: float,
                        options: SolverOptions = SolverOptions(),
                        checkpoint_times=(), probe_times=None) -> CoefficientTrajectory:
    """Integrate the coupled coefficient equations from the field's time
    to t_end.

    Checkpoint fields are stored at the window edges, at requested
    checkpoint_times and at t_end.  If probe_times is given, reduced
    system states are accumulated there without storing full fields.
    """
    if t_end > schedule.t_m:
        raise ValueError("t_end must not exceed the measurement time t_m")
    t0 = field.time
    if t_end <= t0:
        raise ValueError("t_end must exceed the field's time")
    grid = field.grid
    p = grid.p
    npts = grid.size

    checkpoint_set = sorted(set(_mandated_checkpoints(schedule, t0, t_end))
                            | set(float(t) for t in checkpoint_times if t0 < t <= t_end)
                            | {t_end})
    probes = None if probe_times is None else np.asarray(probe_times, dtype=float)
    if probes is not None and (probes.min() < t0 or probes.max() > t_end):
        raise ValueError("probe times must lie within the evolution span")

    # Rotating frame: b = exp(+i p^2 (t - t_p)/2m) c removes the kinetic phase.
    def kinetic_phase(t):
        return np.exp(-0.5j * p**2 * (t - schedule.t_p) / a.mass)

    b = field.c * np.conj(kinetic_phase(t0))
    norms0 = np.sum(np.abs(b) ** 2, axis=0)
    initial_norm = float(norms0.sum() * grid.dp)

    lam = a.lam

    def window_rhs(t, y):
        bb = y.reshape(2, npts)
        hb = qubit_hamiltonian(q, t) @ bb
        hb *= 1.0 + lam * sampling_function(schedule, t) * p
        hb *= -1j
        return hb.ravel()

    collected = {}   # time -> b array
    reduced = {} if probes is not None else None

    def take(t, bt):
        if any(abs(t - ck) < 1e-13 for ck in checkpoint_set):
            collected[t] = bt.copy()
        if reduced is not None:
            hits = np.nonzero(np.abs(probes - t) < 1e-13)[0]
            for h in hits:
                reduced[h] = (bt @ bt.conj().T) * grid.dp

    wanted = np.unique(np.concatenate([
        np.asarray(checkpoint_set, dtype=float),
        probes if probes is not None else np.empty(0),
    ]))

    for seg_a, seg_b, in_window in _window_segments(schedule, t0, t_end):
        seg_times = wanted[(wanted > seg_a + 1e-13) & (wanted < seg_b - 1e-13)]
        t_eval = np.unique(np.concatenate([seg_times, [seg_b]]))
        if in_window:
            sol = solve_ivp(window_rhs, (seg_a, seg_b), b.ravel(),
                            method=options.method, rtol=options.rtol,
                            atol=options.atol, t_eval=t_eval)
            if not sol.success:
                drift = np.abs(np.sum(np.abs(b) ** 2, axis=0) - norms0)
                worst = p[int(np.argmax(drift))]
                raise ToleranceError(
                    f"window solve failed near t = {sol.t[-1] if len(sol.t) else seg_a:.6g} "
                    f"(worst grid point p = {worst:.4g}): {sol.message}"
                )
            for j, t in enumerate(sol.t):
                bt = sol.y[:, j].reshape(2, npts)
                take(t, bt)
            b = sol.y[:, -1].reshape(2, npts).copy()
        else:
            # Coupling negligible: one shared 2x2 propagator for all p.
            props = system_propagator(q, seg_a, seg_b, options, t_eval=t_eval)
            for j, t in enumerate(t_eval):
                take(t, props[j] @ b)
            b = props[-1] @ b
        take(seg_b, b)

    fields = [CoefficientField(c=collected[t] * kinetic_phase(t), grid=grid, time=t)
              for t in sorted(collected)]
    reduced_states = None
    if reduced is not None:
        reduced_states = np.stack([reduced[j] for j in range(len(probes))])

    drift = np.abs(np.sum(np.abs(b) ** 2, axis=0) - norms0)
    return CoefficientTrajectory(
        fields=fields,
        probe_times=probes,
        reduced_states=reduced_states,
        initial_norm=initial_norm,
        max_pointwise_drift=float(drift.max()),
    )


def reduced_system_state_numeric(field: CoefficientField) -> np.ndarray:
    """System density matrix traced over the pointer; Hermitian with
    unit trace up to solver tolerance."""
    rho = field.reduced_density()
    return 0.5 * (rho + rho.conj().T)


def exchange_modes(q: DrivenQubit, schedule: ProtocolSchedule) -> np.ndarray:
    """Classically expected work values E_n(t_f) - E_m(t_i), sorted."""
    e_i = q.level_energies(schedule.t_i)
    e_f = q.level_energies(schedule.t_f)
    return np.sort(np.unique((e_f[:, None] - e_i[None, :]).ravel()))


def default_qubit_work_grid(q: DrivenQubit, schedule: ProtocolSchedule,
                            a: ApparatusSpec, t: float, n: int = 4096,
                            pad: float = 8.0) -> np.ndarray:
    """Work grid spanning every energy-exchange mode +- pad peak widths."""
    modes = exchange_modes(q, schedule)
    sigma = peak_width(a, t, schedule.t_p)
    return np.linspace(modes.min() - pad * sigma, modes.max() + pad * sigma, n)


def work_distribution_numeric(field: CoefficientField, a: ApparatusSpec, w,
                              chunk: int = 256) -> WorkDistribution:
    """Work density from the coefficients at the field's time.

    Direct quadrature of the Fourier sum per work value; the lam
    Jacobian of W = x / lam is included so the density integrates to
    the field's norm.
    """
    w = np.asarray(w, dtype=float)
    p = field.grid.p
    dp = field.grid.dp

    edge = float(np.max(np.abs(field.c[:, [0, -1]])))
    bulk = float(np.max(np.abs(field.c)))
    if bulk > 0 and edge > 1e-8 * bulk:
        warnings.warn(
            f"momentum grid truncation leaks {edge / bulk:.2e} of the peak amplitude",
            GridAliasWarning, stacklevel=2,
        )
    w_alias = math.pi / (abs(a.lam) * dp)
    if np.max(np.abs(w)) > w_alias:
        warnings.warn(
            f"work grid extends beyond the alias-free range |W| <= {w_alias:.4g}",
            GridAliasWarning, stacklevel=2,
        )

    density = np.empty_like(w)
    scale = abs(a.lam) * dp * dp / (2.0 * math.pi)
    ct = field.c.T  # (npts, 2)
    for start in range(0, len(w), chunk):
        block = w[start:start + chunk]
        kernel = np.exp(1j * a.lam * block[:, None] * p[None, :])
        amps = kernel @ ct  # (nb, 2)
        density[start:start + chunk] = scale * np.sum(np.abs(amps) ** 2, axis=1)
    params = {"engine": "numeric", "t": field.time, "n_p": field.grid.size,
              "p_max": field.grid.p_max, "dp": dp}
    return WorkDistribution(w=w, density=density, time=field.time,
                            engine="numeric", params=params)


def _pure_components(state: SystemState):
    """Decompose a state into (weight, pure SystemState) pairs."""
    if state.is_pure:
        return [(1.0, state)]
    vals, vecs = np.linalg.eigh(state.as_density())
    comps = []
    for k in range(len(vals)):
        if vals[k] > MIXTURE_WEIGHT_FLOOR:
            comps.append((float(vals[k]), SystemState.pure(*vecs[:, k])))
    total = sum(wt for wt, _ in comps)
    return [(wt / total, comp) for wt, comp in comps]


def solve_work_distribution(q: DrivenQubit, state: SystemState,
                            schedule: ProtocolSchedule, a: ApparatusSpec,
                            t: float | None = None, grid: MomentumGrid | None = None,
                            w=None, options: SolverOptions = SolverOptions(),
                            n_w: int = 4096):
    """Full pipeline: prepare, evolve to t (default t_m) and transform.

    Mixed states are run as convex combinations of pure components,
    which is exact by linearity of the joint evolution.  Returns the
    distribution and the list of per-component trajectories.
    """
    t = schedule.t_m if t is None else t
    if grid is None:
        grid = MomentumGrid.build(a)
    if w is None:
        w = default_qubit_work_grid(q, schedule, a, t, n=n_w)

    density = np.zeros(len(w))
    trajectories = []
    drift = 0.0
    for weight, comp in _pure_components(state):
        initial = prepare_initial_coefficients(q, comp, schedule, a, grid, options)
        traj = evolve_coefficients(initial, q, schedule, a, t, options)
        dist = work_distribution_numeric(traj.final, a, w)
        density += weight * dist.density
        trajectories.append(traj)
        drift = max(drift, traj.norm_drift)
    params = {"engine": "numeric", "t": t, "n_p": grid.size, "p_max": grid.p_max,
              "norm_drift": drift, "rtol": options.rtol, "atol": options.atol}
    return WorkDistribution(w=np.asarray(w, float), density=density, time=t,
                            engine="numeric", params=params), trajectories


def mixed_state_distribution(q: DrivenQubit, weights, components,
                             schedule: ProtocolSchedule, a: ApparatusSpec,
                             t: float | None = None, grid: MomentumGrid | None = None,
                             w=None, options: SolverOptions = SolverOptions()) -> WorkDistribution:
    """Work density of a classical mixture of pure preparations."""
    weights = np.asarray(weights, dtype=float)
    if weights.min() < 0 or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("mixture weights must be convex")
    if len(weights) != len(components):
        raise ValueError("one weight per component is required")
    t = schedule.t_m if t is None else t
    if grid is None:
        grid = MomentumGrid.build(a)
    if w is None:
        w = default_qubit_work_grid(q, schedule, a, t)
    density = np.zeros(len(w))
    for weight, comp in zip(weights, components):
        if weight == 0.0:
            continue
        dist, _ = solve_work_distribution(q, comp, schedule, a, t, grid, w, options)
        density += weight * dist.density
    return WorkDistribution(w=np.asarray(w, float), density=density, time=t,
                            engine="numeric", params={"engine": "numeric", "t": t,
                                                      "mixture": tuple(weights)})


def grid_convergence_gap(q: DrivenQubit, state: SystemState,
                         schedule: ProtocolSchedule, a: ApparatusSpec,
                         t: float | None = None, grid: MomentumGrid | None = None,
                         w=None, options: SolverOptions = SolverOptions()) -> float:
    """Sup-norm change of the work density under doubling the momentum
    extent and halving the spacing."""
    if grid is None:
        grid = MomentumGrid.build(a)
    t = schedule.t_m if t is None else t
    if w is None:
        w = default_qubit_work_grid(q, schedule, a, t)
    coarse, _ = solve_work_distribution(q, state, schedule, a, t, grid, w, options)
    fine, _ = solve_work_distribution(q, state, schedule, a, t, grid.refined(), w, options)
    return float(np.max(np.abs(coarse.density - fine.density)))


def converged_work_distribution(q: DrivenQubit, state: SystemState,
                                schedule: ProtocolSchedule, a: ApparatusSpec,
                                t: float | None = None, grid: MomentumGrid | None = None,
                                w=None, options: SolverOptions = SolverOptions(),
                                linf_tol: float = 1e-5, max_rounds: int = 3):
    """Work density on a momentum grid refined until grid doubling
    changes it by at most linf_tol."""
    if grid is None:
        grid = MomentumGrid.build(a)
    t = schedule.t_m if t is None else t
    if w is None:
        w = default_qubit_work_grid(q, schedule, a, t)
    current, _ = solve_work_distribution(q, state, schedule, a, t, grid, w, options)
    for _ in range(max_rounds):
        refined_grid = grid.refined()
        refined, _ = solve_work_distribution(q, state, schedule, a, t, refined_grid, w, options)
        gap = float(np.max(np.abs(current.density - refined.density)))
        if gap <= linf_tol:
            current.params["grid_gap"] = gap  # type: ignore[index]
            return current, gap
        grid, current = refined_grid, refined
    raise ToleranceError(
        f"momentum grid did not converge to {linf_tol:.1e} within {max_rounds} refinements"
    )
