"""Green's functions with prescribed log singularities on the torus.

Two systems are solved on a unit-area conformal torus:

* case "one" (two marked points): the linear system
      -Delta_g G1 = 8 pi delta_{p1} - 4 pi delta_{p2} - 4 pi,
      -Delta_g G2 = 8 pi delta_{p2} - 4 pi delta_{p1} - 4 pi,
  with integral G_j dV_g = 0;

* case "two" (one marked point): the nonlinear system
      -Delta_g G2 = 8 pi e^{G2} - 4 pi delta_p - 4 pi,
      -Delta_g G1 = 8 pi delta_p - 4 pi e^{G2} - 4 pi,
  with integral e^{G2} dV_g = 1 and integral G1 dV_g = 0.

Deltas are handled analytically in mode space — never as discrete
stencils — via a Gaussian-screened (Ewald-style) split of the flat-torus
Green's function: the real-space part is a 3x3 periodic-image sum of
(1/4 pi) E1(r^2 / 2 eta^2) (a strict superset of the nearest image,
exact to machine precision for every admissible eta), and the remainder
is band-limited by construction, so local expansion constants come out
clean.  All singular fields are represented as

    G(x) = sum_i strength_i * V(x - p_i) + band(x) + const,

where V is the image sum; values, gradients, and weighted integrals are
evaluated from this form analytically or by exact mode sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import exp1

from . import spectral
from .errors import ConfigError, ResolutionError, SolverError
from .functional import DescentReport, SolverOptions, run_descent
from .geometry import Metric, polyfit_disc
from .spectral import ScalarField, TorusGrid

__all__ = [
    "FlatGreen", "SingularField", "GreenPair", "LocalExpansion",
    "flat_green", "green_pair_case1", "green_pair_case2",
    "local_expansion", "extract_expansions", "expansion_trace_residual",
    "equation_residuals",
]

EULER_GAMMA = 0.5772156649015328606
_IMAGE_OFFSETS = np.array([(mx, my) for mx in (-1, 0, 1) for my in (-1, 0, 1)],
                          dtype=float)


def _e1_plus_log(z: np.ndarray) -> np.ndarray:
    """E1(z) + log z, the entire part of the exponential integral.

    Series -gamma + sum (-1)^{k+1} z^k / (k k!) below 0.5, exp1 + log above;
    both branches are accurate to machine precision on their ranges.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 0.5
    zs = z[small]
    acc = np.full_like(zs, -EULER_GAMMA)
    term = np.ones_like(zs)
    for k in range(1, 18):
        term = term * (-zs) / k
        acc -= term / k
    out[small] = acc
    zl = z[~small]
    out[~small] = exp1(zl) + np.log(zl)
    return out


def _exp_neg_e1(z: np.ndarray) -> np.ndarray:
    """exp(-E1(z)), vanishing linearly at z = 0; stable on [0, inf)."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 0.5
    zs = z[small]
    acc = np.zeros_like(zs)
    term = np.ones_like(zs)
    for k in range(1, 18):
        term = term * (-zs) / k
        acc += term / k
    out[small] = zs * math.exp(EULER_GAMMA) * np.exp(acc)
    out[~small] = np.exp(-exp1(z[~small]))
    return out


def split_width(grid: TorusGrid) -> float:
    """Gaussian screening width: small enough that the screened source is
    band-limited to round-off, large enough that images beyond the 3x3
    block contribute below machine precision."""
    return 2.8 / grid.n


def _image_sum(points: np.ndarray, p, eta: float) -> np.ndarray:
    """sum over 3x3 images of (1/4 pi) E1(r^2 / 2 eta^2); +inf at the source."""
    d = spectral.wrap_offset(np.atleast_2d(points) - np.asarray(p))
    r2 = ((d[:, None, :] + _IMAGE_OFFSETS[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore"):
        vals = exp1(r2 / (2.0 * eta * eta))
    return vals.sum(axis=1) / (4.0 * math.pi)


def _image_sum_regular(points: np.ndarray, p, eta: float) -> np.ndarray:
    """Image sum plus (1/2 pi) log r of the nearest image (finite at p)."""
    d = spectral.wrap_offset(np.atleast_2d(points) - np.asarray(p))
    r2 = (d ** 2).sum(axis=1)
    z_near = r2 / (2.0 * eta * eta)
    out = (_e1_plus_log(z_near) + math.log(2.0 * eta * eta)) / (4.0 * math.pi)
    offs = np.array([o for o in _IMAGE_OFFSETS if o[0] != 0.0 or o[1] != 0.0])
    far = ((d[:, None, :] + offs[None, :, :]) ** 2).sum(axis=2)
    out += exp1(far / (2.0 * eta * eta)).sum(axis=1) / (4.0 * math.pi)
    return out


def _image_gradient(points: np.ndarray, p, eta: float) -> np.ndarray:
    """Analytic gradient of the image sum; shape (m, 2)."""
    d = spectral.wrap_offset(np.atleast_2d(points) - np.asarray(p))
    dall = d[:, None, :] + _IMAGE_OFFSETS[None, :, :]
    r2 = (dall ** 2).sum(axis=2)
    z = r2 / (2.0 * eta * eta)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = -np.exp(-z) / (2.0 * math.pi * r2)
    return (w[:, :, None] * dall).sum(axis=1)


def _screened_remainder_modes(grid: TorusGrid, p, eta: float) -> np.ndarray:
    """Modes of the band-limited remainder R_p: (4 pi^2 k^2) R = gamma_p,
    zero mode fixed so the assembled flat Green's function has zero mean."""
    kx, ky = grid.freqs()
    k2 = kx ** 2 + ky ** 2
    phase = np.exp(-2j * np.pi * (kx * p[0] + ky * p[1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = phase * np.exp(-2.0 * np.pi ** 2 * eta ** 2 * k2) / (4.0 * np.pi ** 2 * k2)
    out[0, 0] = -eta * eta / 2.0
    return out


def _point_green_mean_mult(grid: TorusGrid, eta: float) -> np.ndarray:
    """Multiplier M(k) with integral(V(x-p) w(x) dx) = Re sum_k M e^{-2 pi i k p} conj(what)."""
    kx, ky = grid.freqs()
    k2 = kx ** 2 + ky ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (1.0 - np.exp(-2.0 * np.pi ** 2 * eta ** 2 * k2)) / (4.0 * np.pi ** 2 * k2)
    out[0, 0] = eta * eta / 2.0
    return out


class SingularField:
    """Field with log singularities: sum_i s_i V(x - p_i) + band(x) + const.

    Near p_i the field behaves like a_i log r with a_i = -s_i / 2 pi.
    """

    def __init__(self, grid: TorusGrid, points, strengths,
                 band_modes: np.ndarray, const: float = 0.0):
        self.grid = grid
        self.eta = split_width(grid)
        self.points = [np.asarray(p, dtype=float) for p in points]
        self.strengths = [float(s) for s in strengths]
        self.band = ScalarField.from_modes(grid, band_modes)
        self.const = float(const)

    @property
    def log_coefficients(self) -> list[float]:
        return [-s / (2.0 * math.pi) for s in self.strengths]

    def eval(self, pts: np.ndarray) -> np.ndarray:
        """Values at arbitrary points (infinite at the singular points)."""
        pts = np.atleast_2d(pts)
        out = spectral.eval_at(self.band, pts) + self.const
        for p, s in zip(self.points, self.strengths):
            out = out + s * _image_sum(pts, p, self.eta)
        return out

    def eval_regular(self, pts: np.ndarray, idx: int) -> np.ndarray:
        """Values minus a_idx log r_idx (finite at p_idx, singular at others)."""
        pts = np.atleast_2d(pts)
        out = spectral.eval_at(self.band, pts) + self.const
        for j, (p, s) in enumerate(zip(self.points, self.strengths)):
            if j == idx:
                out = out + s * _image_sum_regular(pts, p, self.eta)
            else:
                out = out + s * _image_sum(pts, p, self.eta)
        return out

    def eval_gradient(self, pts: np.ndarray) -> np.ndarray:
        """Analytic/spectral gradient at arbitrary points; (m, 2)."""
        pts = np.atleast_2d(pts)
        out = spectral.eval_gradient_at(self.band, pts)
        for p, s in zip(self.points, self.strengths):
            out = out + s * _image_gradient(pts, p, self.eta)
        return out

    def image_values(self, pts: np.ndarray) -> np.ndarray:
        """Only the singular (image-sum) part: sum_i s_i V(x - p_i)."""
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0])
        for p, s in zip(self.points, self.strengths):
            out = out + s * _image_sum(pts, p, self.eta)
        return out

    def image_gradients(self, pts: np.ndarray) -> np.ndarray:
        """Gradient of the image-sum part only; shape (m, 2)."""
        pts = np.atleast_2d(pts)
        out = np.zeros((pts.shape[0], 2))
        for p, s in zip(self.points, self.strengths):
            out = out + s * _image_gradient(pts, p, self.eta)
        return out

    def grid_values(self) -> np.ndarray:
        """Raw grid values (+inf at grid-aligned singular points)."""
        X, Y = self.grid.mesh()
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        out = self.band.values.ravel() + self.const + self.image_values(pts)
        return out.reshape(self.grid.n, self.grid.n)

    def grid_regular_values(self) -> np.ndarray:
        """Grid values of the field minus every nearest-image log term."""
        X, Y = self.grid.mesh()
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        out = self.band.values.ravel() + self.const
        for p, s in zip(self.points, self.strengths):
            out = out + s * _image_sum_regular(pts, p, self.eta)
        return out.reshape(self.grid.n, self.grid.n)

    def singular_exp_values(self, scale_check: float = -4.0 * math.pi) -> np.ndarray:
        """Grid values of exp(sum_i s_i V_i), stable when all s_i = -4 pi.

        Only the strength -4 pi (log coefficient +2) is supported: then
        exp(-V) is the entire function exp(-E1) and the product vanishes
        quadratically at the singular point instead of overflowing.
        """
        X, Y = self.grid.mesh()
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        out = np.ones(pts.shape[0])
        for p, s in zip(self.points, self.strengths):
            if abs(s - scale_check) > 1e-12:
                raise ConfigError("stable exponential needs strength -4 pi")
            d = spectral.wrap_offset(pts - p)
            r2 = ((d[:, None, :] + _IMAGE_OFFSETS[None, :, :]) ** 2).sum(axis=2)
            z = r2 / (2.0 * self.eta * self.eta)
            out = out * np.prod(_exp_neg_e1(z), axis=1)
        return out.reshape(self.grid.n, self.grid.n)

    def integral_against(self, weight_values: np.ndarray) -> float:
        """integral of (field * weight) dx, exact in mode space.

        The singular parts are integrated by Parseval with their analytic
        Fourier coefficients, so no quadrature ever touches a log term.
        Accurate to the spectral tail of the weight.
        """
        w_modes = np.conj(np.fft.fft2(weight_values)) / self.grid.n ** 2
        mult = _point_green_mean_mult(self.grid, self.eta)
        total = self.const * float(np.real(w_modes[0, 0]))
        total += float(np.real(np.sum(self.band.modes * w_modes)))
        for p, s in zip(self.points, self.strengths):
            val = spectral.eval_modes_at(self.grid, mult * w_modes,
                                         -np.asarray(p)[None, :])[0]
            total += s * float(np.real(val))
        return total

    def mean_dVg(self, metric: Metric) -> float:
        """integral of the field against dV_g (Parseval, no quadrature)."""
        return self.integral_against(metric.weight)

    def shifted(self, c: float) -> "SingularField":
        return SingularField(self.grid, self.points, self.strengths,
                             self.band.modes, self.const + c)


class FlatGreen:
    """Flat-torus Green's function: -Delta_0 G0(., p) = delta_p - 1, zero mean."""

    def __init__(self, p, grid: TorusGrid):
        self.source = np.asarray(p, dtype=float)
        self.grid = grid
        self.eta = split_width(grid)
        self._field = SingularField(grid, [self.source], [1.0],
                                    _screened_remainder_modes(grid, self.source, self.eta))
        self.smooth_part = ScalarField(grid, self._field.grid_regular_values())
        self.robin = float(self._field.eval_regular(self.source[None, :], 0)[0])

    def eval(self, pts: np.ndarray) -> np.ndarray:
        return self._field.eval(pts)

    def eval_regular(self, pts: np.ndarray) -> np.ndarray:
        """G0 + (1/2 pi) log r (nearest image); tends to the Robin constant."""
        return self._field.eval_regular(pts, 0)

    def mean(self) -> float:
        """integral of G0 dx; zero by construction."""
        return float(self._field.band.modes[0, 0].real) + self.eta ** 2 / 2.0


def flat_green(p, grid: TorusGrid) -> FlatGreen:
    """Construct the flat-torus Green's function with source p."""
    return FlatGreen(p, grid)


@dataclass(frozen=True)
class LocalExpansion:
    """Quadratic data of a Green's function's regular part at a singular point.

    G = a log r + A + lambda x + mu y + alpha x^2 + beta y^2 + gamma xy + O(r^3)
    in locally normalized coordinates (rescaled by e^{phi(p)/2}; `scale`
    records the factor).  The off-source equation forces alpha + beta = 2 pi.
    """

    point: tuple[float, float]
    a: float
    A: float
    lam: float
    mu: float
    alpha: float
    beta: float
    gamma: float
    scale: float
    fit_residual: float


@dataclass
class GreenPair:
    """The two coupled Green's functions with their expansion bookkeeping."""

    case_tag: str
    points: list[np.ndarray]
    metric: Metric
    G1: SingularField
    G2: SingularField
    mean_G2: float | None = None
    exp_G2_values: np.ndarray | None = None  # case two: grid values of e^{G2}
    descent: DescentReport | None = None
    expansions: dict = dc_field(default_factory=dict)

    @property
    def grid(self) -> TorusGrid:
        return self.metric.grid

    def field(self, which: int) -> SingularField:
        if which not in (1, 2):
            raise ConfigError(f"field index must be 1 or 2, got {which}")
        return self.G1 if which == 1 else self.G2

    def expansion(self, which: int, point_index: int) -> LocalExpansion:
        key = (which, point_index)
        if key not in self.expansions:
            raise ConfigError(f"expansion {key} not extracted yet")
        return self.expansions[key]


def _metric_correction_modes(metric: Metric) -> np.ndarray:
    """Modes of q with Delta_0 q = e^phi - 1 (zero for the flat torus)."""
    grid = metric.grid
    if metric.is_flat:
        return np.zeros((grid.n, grid.n), dtype=complex)
    rhs = ScalarField(grid, metric.weight - 1.0)
    return spectral.solve_poisson0(rhs).modes


def green_pair_case1(p1, p2, metric: Metric) -> GreenPair:
    """Solve the linear two-point system with zero dV_g means.

    Each G_j is 8 pi Ghat(., own point) - 4 pi Ghat(., other) + const,
    where Ghat is the metric Green's function (flat part plus the smooth
    conformal correction).  Source strengths are set analytically, so the
    total right-hand-side mass 8 pi - 4 pi - 4 pi = 0 holds identically.
    """
    grid = metric.grid
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    sep = float(np.sqrt((spectral.wrap_offset(p1 - p2) ** 2).sum()))
    if sep < 16.0 * grid.h:
        raise ResolutionError(
            f"point separation {sep:.4f} below 16 h = {16 * grid.h:.4f}")
    eta = split_width(grid)
    r1 = _screened_remainder_modes(grid, p1, eta)
    r2 = _screened_remainder_modes(grid, p2, eta)
    q = _metric_correction_modes(metric)
    s_own, s_other = 8.0 * math.pi, -4.0 * math.pi
    G1 = SingularField(grid, [p1, p2], [s_own, s_other],
                       s_own * r1 + s_other * r2 + 4.0 * math.pi * q)
    G2 = SingularField(grid, [p1, p2], [s_other, s_own],
                       s_other * r1 + s_own * r2 + 4.0 * math.pi * q)
    G1 = G1.shifted(-G1.mean_dVg(metric))
    G2 = G2.shifted(-G2.mean_dVg(metric))
    return GreenPair(case_tag="one", points=[p1, p2], metric=metric,
                     G1=G1, G2=G2)


def green_pair_case2(p, metric: Metric, opts: SolverOptions | None = None,
                     require_convergence: bool = False) -> GreenPair:
    """Solve the one-point nonlinear system.

    G2 is written as s + v with s = -4 pi Ghat(., p) carrying the 2 log r
    singularity; v minimizes

        F(v) = 1/2 integral |grad v|^2 dx + 8 pi integral v dV_g
               - 8 pi log integral e^{v+s} dV_g,

    whose critical points give -Delta_g (s+v) = 8 pi e^{s+v-logZ} - ... ,
    i.e. exactly the G2 equation after the Z-normalization shift.  The
    8 pi coefficient is critical for the log-exp functional, so descent
    convergence is empirical: the report is attached and, unless
    require_convergence is set, a non-converged run still returns (the
    caller decides how to treat it).

    Descent starts from v = 0; on stagnation it restarts once from a
    smoothed copy of -s (singularity clipped at 4h, Gaussian low-pass at
    scale 2h) — the second of the two documented deterministic starts.
    """
    grid = metric.grid
    p = np.asarray(p, dtype=float)
    opts = opts or SolverOptions(max_iter=10000, step0=4.0)
    eta = split_width(grid)
    rp = _screened_remainder_modes(grid, p, eta)
    q = _metric_correction_modes(metric)
    s_band = -4.0 * math.pi * (rp + q)
    s_sing = SingularField(grid, [p], [-4.0 * math.pi], s_band)
    # stable grid values of e^{s}: entire product times band exponential
    es = s_sing.singular_exp_values() * np.exp(s_sing.band.values)
    weight = metric.weight
    kx, ky = grid.freqs()
    lap_mult = -4.0 * np.pi ** 2 * (kx ** 2 + ky ** 2)
    n2 = grid.n ** 2

    def log_z(v):
        mv = float(np.max(v))
        return mv + math.log(float(np.mean(np.exp(v - mv) * es * weight)))

    def energy_and_grad(state):
        v = state[0]
        modes = np.fft.fft2(v) / n2
        kxd, kyd = grid.deriv_freqs()
        dmult = 4.0 * np.pi ** 2 * (kxd ** 2 + kyd ** 2)
        dir2 = float(np.real(np.sum(dmult * modes * np.conj(modes))))
        lz = log_z(v)
        energy = 0.5 * dir2 + 8.0 * math.pi * float(np.mean(v * weight)) \
            - 8.0 * math.pi * lz
        lap = np.fft.ifft2(lap_mult * modes).real * n2
        mv = float(np.max(v))
        dens = np.exp(v - mv) * es * weight
        dens = dens / float(np.mean(dens))
        grad = -lap + 8.0 * math.pi * (weight - dens)
        return energy, [grad]

    def project(state):
        return [state[0] - log_z(state[0])]

    def grad_norm_of(state, grads):
        return float(np.max(np.abs(grads[0] / weight)))

    def ceiling_of(state):
        return float(np.max(state[0]))

    raw = run_descent([np.zeros((grid.n, grid.n))], grid, energy_and_grad,
                      project, grad_norm_of, ceiling_of, opts)
    if not raw.converged:
        # second documented start: -s with the log singularity clipped
        X, Y = grid.mesh()
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        s_reg = s_sing.grid_regular_values()
        d = spectral.wrap_offset(pts - p)
        r_near = np.sqrt((d ** 2).sum(axis=1)).reshape(grid.n, grid.n)
        v0 = -(s_reg + 2.0 * np.log(np.maximum(r_near, 4.0 * grid.h)))
        v0_modes = np.fft.fft2(v0) / n2
        k2 = kx ** 2 + ky ** 2
        v0 = np.fft.ifft2(v0_modes * np.exp(-(2.0 * np.pi * 2.0 * grid.h) ** 2
                                            * k2)).real * n2
        raw2 = run_descent([v0], grid, energy_and_grad, project,
                           grad_norm_of, ceiling_of, opts)
        if raw2.converged or raw2.energy_trace[-1] < raw.energy_trace[-1]:
            raw = raw2
    if require_convergence and not raw.converged:
        raise SolverError(
            f"nonlinear Green solve did not converge ({raw.stop_reason})",
            trace=raw.energy_trace)

    v = raw.state[0]
    shift = log_z(v)  # residual normalization shift (projected, so ~0)
    G2 = SingularField(grid, [p], [-4.0 * math.pi],
                       s_band + np.fft.fft2(v) / n2, const=-shift)
    eg2 = np.exp(v - shift) * es
    mean_g2 = G2.mean_dVg(metric)

    # linear G1 equation: -Delta_0 G1 = 8 pi delta_p - 4 pi e^{G2+phi} - 4 pi e^phi
    rhs = 4.0 * math.pi * eg2 * weight + 4.0 * math.pi * weight - 8.0 * math.pi
    w1 = spectral.solve_poisson0(ScalarField(grid, rhs), mean_tol=1e-7)
    G1 = SingularField(grid, [p], [8.0 * math.pi], 8.0 * math.pi * rp + w1.modes)
    G1 = G1.shifted(-G1.mean_dVg(metric))

    maxima = [float(np.max(v))]
    means = [float(np.mean(v * weight))]
    report = DescentReport(
        iterations=raw.iterations, energy_trace=raw.energy_trace,
        grad_norm=raw.grad_norm, el_residual=None, maxima=maxima,
        means=means, s=[None], blown_up=raw.blown_up,
        stagnated=raw.stagnated, converged=raw.converged,
        stop_reason=raw.stop_reason)
    return GreenPair(case_tag="two", points=[p], metric=metric, G1=G1, G2=G2,
                     mean_G2=mean_g2, exp_G2_values=eg2, descent=report)


def local_expansion(pair: GreenPair, which: int, at, rho_fit: float | None = None
                    ) -> LocalExpansion:
    """Least-squares quadratic data of G_which at one of the pair's points.

    The log term is subtracted analytically; the remainder is fitted on
    the disc of radius rho_fit (default 8h) with a full degree-3 basis so
    the cubic content does not bias A, lambda, mu, alpha, beta, gamma;
    the cubic coefficients are then discarded.  Coefficients are reported
    in locally normalized coordinates (see MetricExpansion).
    """
    grid = pair.grid
    at = np.asarray(at, dtype=float)
    if rho_fit is None:
        rho_fit = 8.0 * grid.h
    if not (6.0 * grid.h <= rho_fit <= 16.0 * grid.h):
        raise ConfigError(f"rho_fit must lie in [6h, 16h], got {rho_fit:.4g}")
    idx = None
    for j, pj in enumerate(pair.points):
        if np.linalg.norm(spectral.wrap_offset(at - pj)) < 1e-12:
            idx = j
            break
    if idx is None:
        raise ConfigError("expansion point is not one of the pair's points")
    g = pair.field(which)

    X, Y = grid.mesh()
    dx = spectral.wrap_offset(X - at[0]).ravel()
    dy = spectral.wrap_offset(Y - at[1]).ravel()
    mask = dx ** 2 + dy ** 2 <= rho_fit ** 2
    pts = np.stack([X.ravel()[mask], Y.ravel()[mask]], axis=1)
    vals = g.eval_regular(pts, idx)
    coef, rms = polyfit_disc(dx[mask], dy[mask], vals, rho_fit)
    c = _local_scale(pair.metric, at)
    a = g.log_coefficients[idx]
    A, lam, mu = coef[0], coef[1], coef[2]
    al, be, ga = coef[3], coef[4], coef[5]
    exp = LocalExpansion(
        point=(float(at[0]), float(at[1])), a=a,
        A=float(A - a * math.log(c)),
        lam=float(lam / c), mu=float(mu / c),
        alpha=float(al / c ** 2), beta=float(be / c ** 2),
        gamma=float(ga / c ** 2), scale=float(c), fit_residual=float(rms))
    pair.expansions[(which, idx)] = exp
    return exp


def _local_scale(metric: Metric, at: np.ndarray) -> float:
    if metric.is_flat:
        return 1.0
    phi_p = float(spectral.eval_at(metric.phi, at[None, :])[0])
    return math.exp(phi_p / 2.0)


def extract_expansions(pair: GreenPair, rho_fit: float | None = None) -> None:
    """Fit every (field, point) combination and cache it on the pair."""
    for which in (1, 2):
        for pj in pair.points:
            local_expansion(pair, which, pj, rho_fit)


def expansion_trace_residual(exp: LocalExpansion) -> float:
    """|alpha + beta - 2 pi|: the off-source equation forces the quadratic
    trace of the regular part to equal 2 pi in normalized coordinates."""
    return abs(exp.alpha + exp.beta - 2.0 * math.pi)


def _fd_laplacian(eval_fn, pts: np.ndarray, h_loc: float) -> np.ndarray:
    """4th-order cross-stencil Laplacian of a point-evaluable field."""
    ex = np.array([1.0, 0.0])
    ey = np.array([0.0, 1.0])
    center = eval_fn(pts)
    out = np.zeros(pts.shape[0])
    for e in (ex, ey):
        acc = (-eval_fn(pts + 2 * h_loc * e) + 16.0 * eval_fn(pts + h_loc * e)
               - 30.0 * center
               + 16.0 * eval_fn(pts - h_loc * e) - eval_fn(pts - 2 * h_loc * e))
        out += acc / (12.0 * h_loc * h_loc)
    return out


def residual_sample_points(pair: GreenPair, count: int, seed: int = 7,
                           margin: float | None = None) -> np.ndarray:
    """Deterministic uniform samples outside the 8h discs around the points."""
    grid = pair.grid
    if margin is None:
        margin = 8.0 * grid.h
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        cand = rng.random(2)
        if all(np.linalg.norm(spectral.wrap_offset(cand - pj)) > margin
               for pj in pair.points):
            out.append(cand)
    return np.array(out)


def equation_residuals(pair: GreenPair, count: int = 200, seed: int = 7,
                       h_loc: float = 1e-4) -> dict:
    """Independent finite-difference check of the defining equations.

    Samples points off the 8h discs, applies a 4th-order stencil with its
    own spacing h_loc to the evaluated fields (never the spectral
    Laplacian of the same representation), and returns the sup-norms of
    the equation residuals plus the dV_g means.
    """
    pts = residual_sample_points(pair, count, seed)
    metric = pair.metric
    if metric.is_flat:
        inv_w = np.ones(pts.shape[0])
    else:
        inv_w = np.exp(-spectral.eval_at(metric.phi, pts))
    lap1 = _fd_laplacian(pair.G1.eval, pts, h_loc) * inv_w
    lap2 = _fd_laplacian(pair.G2.eval, pts, h_loc) * inv_w
    out = {"mean_G1": pair.G1.mean_dVg(metric)}
    if pair.case_tag == "one":
        out["residual_G1"] = float(np.max(np.abs(-lap1 + 4.0 * math.pi)))
        out["residual_G2"] = float(np.max(np.abs(-lap2 + 4.0 * math.pi)))
        out["mean_G2"] = pair.G2.mean_dVg(metric)
    else:
        eg2 = np.exp(pair.G2.eval(pts))
        out["residual_G1"] = float(np.max(np.abs(
            -lap1 + 4.0 * math.pi * eg2 + 4.0 * math.pi)))
        out["residual_G2"] = float(np.max(np.abs(
            -lap2 - 8.0 * math.pi * eg2 + 4.0 * math.pi)))
        out["exp_mean_G2"] = float(np.mean(pair.exp_G2_values * metric.weight))
    return out
