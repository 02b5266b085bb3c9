"""Coupled exponential-nonlinearity functionals and their descent minimizer.

Two presentations of the same energy are implemented: the general rank-N
form driven by the SU(N+1) coupling matrix, and the two-field reduced
form Phi_eps used throughout the concentration analysis,

  Phi_eps(u1, u2) = (1/3) integral(|grad u1|^2 + |grad u2|^2
                                   + grad u1 . grad u2) dx
                    + (4 pi - eps) integral(u1 + u2) dV_g
                    - (4 pi - eps) [log integral e^{u1} dV_g
                                    + log integral e^{u2} dV_g].

They agree under the linear substitution v1 = (2 u1 + u2)/3,
v2 = (u1 + 2 u2)/3 with both masses 4 pi - eps; the test suite asserts
this identity on random states.

The minimizer is preconditioned gradient descent: search direction
-(I - Delta_0)^{-1} (dx-gradient), Armijo backtracking, renormalization
every iteration (harmless by shift invariance), with blow-up ceiling,
stagnation detection, and a nonincreasing energy trace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spectral
from .errors import ConfigError, GridMismatchError, SolverError
from .geometry import Metric
from .spectral import ScalarField

__all__ = [
    "CartanMatrix", "TodaState", "DescentReport", "SolverOptions",
    "phi_general", "phi_eps", "phi_eps_gradient", "el_residual",
    "normalize_state", "minimize_phi_eps", "masses_admissible",
]

FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class CartanMatrix:
    """SU(N+1) coupling matrix: 2 on the diagonal, -1 off it, else 0."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigError("coupling matrix must be square")
        n = a.shape[0]
        expect = self.su(n).a
        if not np.array_equal(a, expect):
            raise ConfigError("matrix is not the SU(N+1) coupling matrix")
        if np.min(np.linalg.eigvalsh(a.astype(float))) <= 0:
            raise ConfigError("coupling matrix must be positive definite")

    @classmethod
    def su(cls, rank: int) -> "CartanMatrix":
        if rank < 1:
            raise ConfigError(f"rank must be positive, got {rank}")
        a = 2 * np.eye(rank, dtype=int) \
            - np.eye(rank, k=1, dtype=int) - np.eye(rank, k=-1, dtype=int)
        obj = cls.__new__(cls)
        object.__setattr__(obj, "a", a)
        return obj

    @property
    def rank(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class TodaState:
    """Tuple of fields with their mass parameters."""

    u: tuple[ScalarField, ...]
    masses: tuple[float, ...]

    def __post_init__(self):
        if len(self.u) != len(self.masses):
            raise ConfigError("one mass per field required")
        grids = {f.grid for f in self.u}
        if len(grids) != 1:
            raise GridMismatchError("all state fields must share one grid")

    @property
    def grid(self) -> TorusGrid:
        return self.u[0].grid

    @property
    def rank(self) -> int:
        return len(self.u)


@dataclass
class DescentReport:
    """Outcome of a descent run, including the blow-up bookkeeping."""

    iterations: int
    energy_trace: list[float]
    grad_norm: float
    el_residual: float | None
    maxima: list[float]
    means: list[float]
    s: list[float | None]
    blown_up: bool
    stagnated: bool
    converged: bool
    stop_reason: str

    def to_record(self) -> dict:
        rec = {
            "iterations": self.iterations,
            "energy_initial": self.energy_trace[0] if self.energy_trace else float("nan"),
            "energy_final": self.energy_trace[-1] if self.energy_trace else float("nan"),
            "grad_norm": self.grad_norm,
            "el_residual": self.el_residual,
            "blown_up": self.blown_up,
            "stagnated": self.stagnated,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
        }
        for i, (m, mb, si) in enumerate(zip(self.maxima, self.means, self.s), start=1):
            rec[f"max_u{i}"] = m
            rec[f"mean_u{i}"] = mb
            rec[f"s{i}"] = si
        return rec


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 5000
    grad_tol: float = 1e-8
    ceiling: float = 40.0
    step0: float = 1.0
    backtrack: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 60
    stagnation_window: int = 50
    stagnation_decrease: float = 1e-14


def masses_admissible(masses) -> bool:
    """True iff every mass is at most 4 pi (boundedness-below criterion)."""
    return bool(np.all(np.asarray(masses, dtype=float) <= FOUR_PI))


def _log_int_exp(values: np.ndarray, metric: Metric) -> float:
    """log integral e^{values} dV_g, evaluated max-shifted (never overflows)."""
    t = values + metric.phi.values
    m = float(np.max(t))
    return m + float(np.log(np.mean(np.exp(t - m))))


def normalize_state(state: TodaState, metric: Metric) -> TodaState:
    """Shift each field so that integral e^{u_i} dV_g = 1."""
    shifted = tuple(
        ScalarField(f.grid, f.values - _log_int_exp(f.values, metric))
        for f in state.u)
    return TodaState(u=shifted, masses=state.masses)


def phi_general(state: TodaState, cartan: CartanMatrix, metric: Metric) -> float:
    """The rank-N functional.

    (1/2) sum_ij a_ij [ integral grad u_i . grad u_j dx
                        + 2 M_i integral u_j dV_g ]
    - sum_i M_i log integral exp(sum_j a_ij u_j) dV_g
    """
    if state.rank != cartan.rank:
        raise ConfigError(
            f"state rank {state.rank} != matrix rank {cartan.rank}")
    a = cartan.a
    u = state.u
    masses = state.masses
    total = 0.0
    for i in range(state.rank):
        for j in range(state.rank):
            if a[i, j] == 0:
                continue
            total += 0.5 * a[i, j] * (
                spectral.dirichlet_form(u[i], u[j])
                + 2.0 * masses[i] * float(np.mean(u[j].values * metric.weight)))
    for i in range(state.rank):
        combo = sum(a[i, j] * u[j].values for j in range(state.rank)
                    if a[i, j] != 0)
        total -= masses[i] * _log_int_exp(combo, metric)
    return total


def _check_eps(eps: float, allow_zero: bool = True) -> None:
    lo_ok = eps >= 0.0 if allow_zero else eps > 0.0
    if not (lo_ok and eps < FOUR_PI):
        raise ConfigError(f"eps must lie in {'[0' if allow_zero else '(0'}, 4 pi), got {eps}")


def phi_eps(u1: ScalarField, u2: ScalarField, eps: float, metric: Metric) -> float:
    """The reduced two-field functional at regularization eps."""
    _check_eps(eps)
    rho = FOUR_PI - eps
    d = (spectral.dirichlet_form(u1, u1) + spectral.dirichlet_form(u2, u2)
         + spectral.dirichlet_form(u1, u2)) / 3.0
    mean_term = rho * float(np.mean((u1.values + u2.values) * metric.weight))
    log_term = rho * (_log_int_exp(u1.values, metric)
                      + _log_int_exp(u2.values, metric))
    return d + mean_term - log_term


def _phi_eps_core(u1v, u2v, eps, metric, grid):
    """Energy and dx-gradients from raw value arrays; shares the FFTs."""
    rho = FOUR_PI - eps
    n2 = grid.n ** 2
    m1 = np.fft.fft2(u1v) / n2
    m2 = np.fft.fft2(u2v) / n2
    kx, ky = grid.deriv_freqs()
    mult = 4.0 * np.pi ** 2 * (kx ** 2 + ky ** 2)
    d11 = float(np.real(np.sum(mult * m1 * np.conj(m1))))
    d22 = float(np.real(np.sum(mult * m2 * np.conj(m2))))
    d12 = float(np.real(np.sum(mult * m1 * np.conj(m2))))
    energy = (d11 + d22 + d12) / 3.0 \
        + rho * float(np.mean((u1v + u2v) * metric.weight)) \
        - rho * (_log_int_exp(u1v, metric) + _log_int_exp(u2v, metric))

    kx2, ky2 = grid.freqs()
    lap_mult = -4.0 * np.pi ** 2 * (kx2 ** 2 + ky2 ** 2)
    lap_a = np.fft.ifft2(lap_mult * (2.0 * m1 + m2)).real * n2
    lap_b = np.fft.ifft2(lap_mult * (m1 + 2.0 * m2)).real * n2

    grads = []
    for uv, lap in ((u1v, lap_a), (u2v, lap_b)):
        t = uv + metric.phi.values
        mshift = float(np.max(t))
        e = np.exp(t - mshift)
        z = float(np.mean(e))
        grads.append(-lap / 3.0 + rho * (metric.weight - e / z))
    return energy, grads


def phi_eps_gradient(u1: ScalarField, u2: ScalarField, eps: float,
                     metric: Metric) -> tuple[ScalarField, ScalarField]:
    """L^2(dV_g) gradient fields of Phi_eps.

    A state with vanishing gradient and unit exponential integrals
    satisfies  -Delta_g u_i = (8 pi - 2 eps) e^{u_i}
                              - (4 pi - eps) e^{u_other} - (4 pi - eps).
    """
    _check_eps(eps)
    grid = u1.grid
    _, grads_dx = _phi_eps_core(u1.values, u2.values, eps, metric, grid)
    inv_w = 1.0 / metric.weight
    return (ScalarField(grid, grads_dx[0] * inv_w),
            ScalarField(grid, grads_dx[1] * inv_w))


def el_residual(u1: ScalarField, u2: ScalarField, eps: float,
                metric: Metric, norm_tol: float = 1e-6) -> float:
    """Sup-norm Euler-Lagrange residual of the normalized state.

    max over i of sup | -Delta_g u_i - [(8 pi - 2 eps) e^{u_i}
                                        - (4 pi - eps) e^{u_other}
                                        - (4 pi - eps)] |.
    """
    _check_eps(eps)
    for f in (u1, u2):
        drift = _log_int_exp(f.values, metric)
        if abs(drift) > norm_tol:
            raise ConfigError(
                f"state not normalized: log integral e^u dV_g = {drift:.3e}")
    rho = FOUR_PI - eps
    grid = u1.grid
    out = 0.0
    e1 = np.exp(u1.values)
    e2 = np.exp(u2.values)
    for f, ea, eb in ((u1, e1, e2), (u2, e2, e1)):
        lap = spectral.laplacian0(f)
        if metric.is_flat:
            lap_g = lap.values
        else:
            inv_w = ScalarField(grid, 1.0 / metric.weight)
            lap_g = spectral.product_dealiased(inv_w, lap).values
        res = -lap_g - (2.0 * rho * ea - rho * eb - rho)
        out = max(out, float(np.max(np.abs(res))))
    return out


def _precondition(g: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Apply (I - Delta_0)^{-1} in mode space."""
    kx, ky = grid.freqs()
    mult = 1.0 + 4.0 * np.pi ** 2 * (kx ** 2 + ky ** 2)
    return np.fft.ifft2(np.fft.fft2(g) / mult).real


@dataclass
class RawDescent:
    """Low-level descent outcome on raw arrays."""

    state: list[np.ndarray]
    energy_trace: list[float]
    iterations: int
    grad_norm: float
    converged: bool
    blown_up: bool
    stagnated: bool
    stop_reason: str


def run_descent(init: list[np.ndarray], grid: TorusGrid, energy_and_grad,
                project, grad_norm_of, ceiling_of,
                opts: SolverOptions) -> RawDescent:
    """Generic preconditioned descent with Armijo backtracking.

    energy_and_grad(state) -> (E, [dx-gradient arrays]);
    project(state) -> state (energy-neutral renormalization);
    grad_norm_of(state, grads) -> float used for the stopping test;
    ceiling_of(state) -> float compared against opts.ceiling.
    """
    state = project([np.array(x, dtype=float) for x in init])
    energy, grads = energy_and_grad(state)
    if not np.isfinite(energy):
        raise SolverError("non-finite energy at the initial point", trace=[energy])
    trace = [energy]
    gnorm = grad_norm_of(state, grads)
    step = opts.step0
    stagnant = 0
    converged = blown_up = stagnated = False
    reason = "max_iter"
    it = 0
    while it < opts.max_iter:
        if gnorm <= opts.grad_tol:
            converged, reason = True, "grad_tol"
            break
        if ceiling_of(state) > opts.ceiling:
            blown_up, reason = True, "ceiling"
            break
        direction = [-_precondition(g, grid) for g in grads]
        slope = sum(float(np.mean(g * d)) for g, d in zip(grads, direction))
        if slope >= 0.0:
            stagnated, reason = True, "nondescent"
            break
        s = step
        accepted = False
        for _ in range(opts.max_backtracks):
            trial = project([x + s * d for x, d in zip(state, direction)])
            e_trial, g_trial = energy_and_grad(trial)
            if not np.isfinite(e_trial):
                s *= opts.backtrack
                continue
            if e_trial <= energy + opts.armijo * s * slope:
                accepted = True
                break
            s *= opts.backtrack
        it += 1
        if not accepted:
            stagnated, reason = True, "line_search"
            break
        decrease = energy - e_trial
        state, energy, grads = trial, e_trial, g_trial
        trace.append(energy)
        gnorm = grad_norm_of(state, grads)
        step = min(s * 2.0, opts.step0 * 16.0)
        if decrease < opts.stagnation_decrease:
            stagnant += 1
            if stagnant >= opts.stagnation_window:
                stagnated, reason = True, "stagnation"
                break
        else:
            stagnant = 0
    else:
        if gnorm <= opts.grad_tol:
            converged, reason = True, "grad_tol"
    if not np.isfinite(energy):
        raise SolverError("descent reached non-finite energy", trace=trace)
    return RawDescent(state=state, energy_trace=trace, iterations=it,
                      grad_norm=gnorm, converged=converged, blown_up=blown_up,
                      stagnated=stagnated, stop_reason=reason)


def minimize_phi_eps(init: TodaState, eps: float, metric: Metric,
                     opts: SolverOptions | None = None
                     ) -> tuple[TodaState, DescentReport]:
    """Minimize Phi_eps from the given state; eps must be positive."""
    _check_eps(eps, allow_zero=False)
    opts = opts or SolverOptions()
    if init.rank != 2:
        raise ConfigError("the reduced functional takes exactly two fields")
    grid = init.grid
    inv_w = 1.0 / metric.weight

    def energy_and_grad(state):
        return _phi_eps_core(state[0], state[1], eps, metric, grid)

    def project(state):
        return [x - _log_int_exp(x, metric) for x in state]

    def grad_norm_of(state, grads):
        return max(float(np.max(np.abs(g * inv_w))) for g in grads)

    def ceiling_of(state):
        return max(float(np.max(x)) for x in state)

    raw = run_descent([f.values for f in init.u], grid, energy_and_grad,
                      project, grad_norm_of, ceiling_of, opts)

    fields = tuple(ScalarField(grid, x) for x in raw.state)
    final = TodaState(u=fields, masses=init.masses)
    resid = None
    if not raw.blown_up:
        resid = el_residual(fields[0], fields[1], eps, metric)
    maxima = [float(np.max(x)) for x in raw.state]
    means = [float(np.mean(x * metric.weight)) for x in raw.state]
    s_vals = [1.0 + mb / m if m > 0 else None for m, mb in zip(maxima, means)]
    report = DescentReport(
        iterations=raw.iterations, energy_trace=raw.energy_trace,
        grad_norm=raw.grad_norm, el_residual=resid, maxima=maxima,
        means=means, s=s_vals, blown_up=raw.blown_up,
        stagnated=raw.stagnated, converged=raw.converged,
        stop_reason=raw.stop_reason)
    return final, report
