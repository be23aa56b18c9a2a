"""Oscillatory states: amplitudes, phases, and the eikonal construction.

A state is a(x) e^{i phi(x)/h} attached to the graph {(x, grad phi(x))}.
Monochromatic phases (|grad phi| constant) are built from data on a geodesic
arc Sigma: a profile u with |u'| < 1 induces unit covectors

    v_u(s) = u'(s) T(s) + sqrt(1 - u'(s)^2) nu(s)

and the phase extends off Sigma by transport along characteristics,
phi(flow_tau(y, v_u(y))) = u(y) + tau. Evaluation inverts the characteristic
map (s, tau) -> x with a damped 2d Newton using the closed-form Jacobi
fields; gradients are the transported unit covectors, exactly of norm one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss

from hypwave.disk import (
    DiskPoint,
    GeometryError,
    distance_z,
    flow_arc_z,
    geodesic_offsets_z,
    mobius_apply_z,
    mobius_deriv_z,
    translate_to,
)
from hypwave.flow import WavefrontShape, riccati_evolve, jacobian_along


class DomainError(GeometryError):
    """Data violates an admissibility bound (e.g. |u'| >= 1)."""


class OutOfDomainError(GeometryError):
    """Evaluation point is outside the validated collar."""


class CollarError(GeometryError):
    """Requested collar is too wide for injective characteristics."""


# ---------------------------------------------------------------------------
# amplitudes


@dataclass(frozen=True)
class BumpAmplitude:
    """Compactly supported bump a(x) = A (1 - (d(x,c)/R)^2)^3 for d < R."""

    center: complex
    radius: float
    height: float = 1.0

    def __call__(self, z):
        d = distance_z(np.asarray(z, dtype=complex), self.center)
        t = np.minimum(d / self.radius, 1.0)
        return self.height * np.where(d < self.radius, (1.0 - t * t) ** 3, 0.0)

    @cached_property
    def l2_mass(self) -> float:
        """||a||^2 over the surface, by radial Gauss-Legendre quadrature."""
        x, w = leggauss(160)
        r = 0.5 * self.radius * (x + 1.0)
        wr = 0.5 * self.radius * w
        prof = (1.0 - (r / self.radius) ** 2) ** 6
        return float(self.height ** 2 * 2.0 * np.pi * np.sum(prof * np.sinh(r) * wr))

    def support_contains(self, z) -> np.ndarray:
        return distance_z(np.asarray(z, dtype=complex), self.center) < self.radius


# ---------------------------------------------------------------------------
# the hypersurface Sigma and transverse profiles


@dataclass(frozen=True)
class TrigProfile:
    """u(s) = sum_k amp_k sin(freq_k s + phase_k), with exact derivatives."""

    terms: tuple  # of (amp, freq, phase)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return sum(a * np.sin(f * s + p) for a, f, p in self.terms)

    def d1(self, s):
        s = np.asarray(s, dtype=float)
        return sum(a * f * np.cos(f * s + p) for a, f, p in self.terms)

    def d2(self, s):
        s = np.asarray(s, dtype=float)
        return sum(-a * f * f * np.sin(f * s + p) for a, f, p in self.terms)

    def slope_bound(self) -> float:
        return float(sum(abs(a * f) for a, f, _ in self.terms))


@dataclass(frozen=True)
class GeodesicArc:
    """Unit-speed geodesic arc through `anchor` toward `direction_angle`,
    parametrized by s in [-half_length, half_length]."""

    anchor: complex = 0j
    direction_angle: float = 0.0
    half_length: float = 1.2

    @cached_property
    def _chart(self):
        # isometry sending the x-axis setup at 0 to (anchor, direction)
        ta, tb = translate_to(np.asarray(self.anchor, dtype=complex))
        ra, rb = np.exp(0.5j * self.direction_angle), 0j
        a = ta * ra + tb * np.conj(rb)
        b = ta * rb + tb * np.conj(ra)
        return a, b

    def point(self, s):
        a, b = self._chart
        return mobius_apply_z(a, b, np.tanh(np.asarray(s, dtype=float) / 2.0) + 0j)

    def tangent_normal(self, s):
        """Hyperbolic-unit tangent and left normal, as chart vectors."""
        a, b = self._chart
        s = np.asarray(s, dtype=float)
        z0 = np.tanh(s / 2.0) + 0j
        fac0 = (1.0 - np.abs(z0) ** 2) / 2.0
        dm = mobius_deriv_z(a, b, z0)
        T = dm * fac0
        zz = mobius_apply_z(a, b, z0)
        scale = (1.0 - np.abs(zz) ** 2) / (2.0 * np.abs(T))
        T = T * scale
        return T, 1j * T


@dataclass(frozen=True)
class HypersurfaceData:
    """Arc Sigma, unit normal side, and profile u with |u'| < 1."""

    arc: GeodesicArc
    profile: TrigProfile

    def __post_init__(self):
        s = np.linspace(-self.arc.half_length, self.arc.half_length, 4001)
        worst = float(np.max(np.abs(self.profile.d1(s))))
        if worst >= 1.0 or self.profile.slope_bound() >= 1.0:
            raise DomainError(f"profile slope reaches {worst:.4f}; need |u'| < 1")

    def covectors(self, s):
        """Unit covectors v_u(s); tangential part u'(s), normal part
        sqrt(1 - u'^2).  Norm is one by construction."""
        up = self.profile.d1(s)
        T, N = self.arc.tangent_normal(s)
        return self.arc.point(s), up * T + np.sqrt(1.0 - up * up) * N

    def initial_shape(self, s):
        """Riccati shape of the emitted wavefront: u'' / (1 - u'^2)."""
        up = self.profile.d1(s)
        return self.profile.d2(s) / (1.0 - up * up)

    def shape_margin(self, mode: str, n: int = 2001) -> float:
        from hypwave.flow import transversality_margin
        s = np.linspace(-self.arc.half_length, self.arc.half_length, n)
        return transversality_margin(self.initial_shape(s), mode)


def unit_covectors(data: HypersurfaceData, s):
    """Covector field on Sigma (the momentum initial condition)."""
    return data.covectors(s)


# ---------------------------------------------------------------------------
# eikonal extension


@dataclass
class EikonalPhase:
    """Phase with |grad| = 1 on a collar around Sigma, by characteristics.

    Evaluation solves flow_tau(sigma(s), v_u(s)) = x for (s, tau); then
    value = u(s) + tau and the gradient is the arrival unit covector.
    """

    data: HypersurfaceData
    collar: float = 0.3
    newton_tol: float = 1e-13
    max_iter: int = 60

    def __post_init__(self):
        shapes = np.abs(self.data.initial_shape(
            np.linspace(-self.data.arc.half_length, self.data.arc.half_length, 2001)))
        if float(np.max(shapes)) >= 1.0:
            # J(tau) = cosh + u0 sinh can vanish for |u0| > 1 at negative tau
            worst = float(np.max(shapes))
            t_star = float(np.arctanh(1.0 / worst))
            if self.collar >= t_star:
                raise CollarError(f"collar {self.collar} exceeds first focal time {t_star:.4f}")
        self._check_injectivity()

    def _check_injectivity(self, n_s=160, n_tau=17):
        L = self.data.arc.half_length
        s = np.linspace(-L, L, n_s)
        tau = np.linspace(-self.collar, self.collar, n_tau)
        S, TAU = np.meshgrid(s, tau, indexing="ij")
        z = self.char_point(S.ravel(), TAU.ravel())
        sb, tb = self._invert(z, np.repeat(s, n_tau), np.tile(tau, n_s))
        ok = (np.abs(sb - S.ravel()) < 1e-8) & (np.abs(tb - TAU.ravel()) < 1e-8)
        if not np.all(ok):
            raise CollarError("characteristic crossing detected inside the collar")

    def char_point(self, s, tau):
        return self.char_point_dir(s, tau)[0]

    def char_point_dir(self, s, tau):
        y, v = self.data.covectors(np.asarray(s, dtype=float))
        left = np.broadcast_to(np.asarray(tau, dtype=float), y.shape).copy()
        z = np.array(y, copy=True)
        vv = np.array(v, copy=True)
        while np.any(np.abs(left) > 1e-15):
            dt = np.clip(left, -1.0, 1.0)
            act = np.abs(left) > 1e-15
            zn, vn = flow_arc_z(z[act], vv[act], dt[act])
            z[act] = zn
            vv[act] = vn
            left -= dt
        return z, vv

    def _initial_guess(self, z):
        p0 = self.data.arc.point(np.zeros(1))[0]
        T0, _ = self.data.arc.tangent_normal(np.zeros(1))
        qp = (z - p0) / (1.0 - np.conj(p0) * z)
        u = T0[0] / np.abs(T0[0])
        zeta = qp * np.conj(u)
        r2 = np.abs(zeta) ** 2
        foot = np.arctanh(np.clip(2.0 * zeta.real / (1.0 + r2), -1 + 1e-16, 1 - 1e-16))
        perp = np.arcsinh(2.0 * zeta.imag / (1.0 - r2))
        L = self.data.arc.half_length
        return np.clip(foot, -L, L), np.clip(perp, -self.collar, self.collar)

    def _invert(self, z, s0=None, tau0=None):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        if s0 is None:
            s, tau = self._initial_guess(z)
        else:
            s, tau = np.array(s0, dtype=float, copy=True), np.array(tau0, dtype=float, copy=True)
        L = self.data.arc.half_length
        prof = self.data.profile
        alive = np.ones(z.shape, dtype=bool)
        res = np.full(z.shape, np.inf)
        for _ in range(self.max_iter):
            y, vv = self.char_point_dir(s, tau)
            w = (y - z) / (1.0 - np.conj(z) * y)
            res = 2.0 * np.arctanh(np.abs(w))
            done = res < self.newton_tol
            if np.all(done | ~alive):
                break
            dT = (1.0 - np.abs(z) ** 2) / (1.0 - np.conj(z) * y) ** 2
            along = dT * vv
            along = along / np.abs(along)
            rvec = np.where(res > 0, np.where(np.abs(w) > 0, w / np.where(np.abs(w) == 0, 1.0, np.abs(w)), 0) * res, 0)
            up = prof.d1(s)
            ww = np.sqrt(1.0 - up * up)
            u0 = prof.d2(s) / (1.0 - up * up)
            Jperp = -ww * (np.cosh(tau) + u0 * np.sinh(tau))
            col_s = up * along + Jperp * (1j * along)
            det = col_s.real * along.imag - col_s.imag * along.real
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            ds = (-rvec.real * along.imag + along.real * rvec.imag) / det
            dtau = (col_s.real * (-rvec.imag) + col_s.imag * rvec.real) / det
            f = np.minimum(1.0, 0.5 / np.maximum(np.abs(ds), 1e-30))
            f = np.minimum(f, 0.5 / np.maximum(np.abs(dtau), 1e-30))
            upd = alive & ~done
            s = np.where(upd, s + f * ds, s)
            tau = np.where(upd, tau + f * dtau, tau)
            off = (np.abs(s) > L + 0.2) | (np.abs(tau) > self.collar + 0.2)
            alive &= ~off
        ok = (res < 1e-10) & (np.abs(s) <= L + 1e-9) & (np.abs(tau) <= self.collar + 1e-9)
        if not np.all(ok):
            raise OutOfDomainError(f"{int(np.sum(~ok))} point(s) outside the validated collar")
        return s, tau

    # phase protocol -------------------------------------------------------

    def value(self, z):
        s, tau = self._invert(z)
        return self.data.profile(s) + tau

    def gradient(self, z):
        """Chart vector of the unit covector field (exact, |grad| = 1)."""
        s, tau = self._invert(z)
        _, vv = self.char_point_dir(s, tau)
        return vv

    def gradient_norm(self, z):
        return np.ones(np.atleast_1d(np.asarray(z)).shape)

    def hessian(self, z):
        """Covariant Hessian, rank one transverse to the gradient line:
        H = u(tau) e_perp (x) e_perp with u the evolved Riccati shape.
        Returned as 2x2 matrices acting on hyperbolic-orthonormal
        components (along, perp)."""
        s, tau = self._invert(z)
        u0 = self.data.initial_shape(s)
        th = np.tanh(tau)
        u = np.atleast_1d((u0 + th) / (1.0 + u0 * th))
        H = np.zeros((u.size, 2, 2))
        H[:, 1, 1] = u
        return H

    def wavefront_shape(self, z) -> WavefrontShape:
        s, tau = self._invert(z)
        u0 = self.data.initial_shape(s)
        th = np.tanh(tau)
        return WavefrontShape(float((u0 + th) / (1.0 + u0 * th)))


def eikonal_extend(data: HypersurfaceData, collar: float = 0.3) -> EikonalPhase:
    """Unit-gradient phase on a collar about Sigma (characteristic method)."""
    return EikonalPhase(data, collar)


# ---------------------------------------------------------------------------
# polychromatic chart phases


def _conformal_log_factor(z):
    # omega with metric e^{2 omega} |dz|^2; omega = log(2/(1-|z|^2))
    r2 = np.abs(z) ** 2
    wx = 2.0 * z.real / (1.0 - r2)
    wy = 2.0 * z.imag / (1.0 - r2)
    return wx, wy


@dataclass(frozen=True)
class ChartPolynomialPhase:
    """Sheared chart phase  a x + b y + c (x^2 - y^2)/2 + d x y  on a disk
    of Euclidean radius `chart_radius` about 0."""

    coeffs: tuple = (1.6, 0.3, 0.35, -0.2)
    chart_radius: float = 0.45

    def _derivs(self, z):
        a, b, c, d = self.coeffs
        x, y = z.real, z.imag
        px = a + c * x + d * y
        py = b - c * y + d * x
        return px, py

    def value(self, z):
        a, b, c, d = self.coeffs
        z = np.asarray(z, dtype=complex)
        x, y = z.real, z.imag
        return a * x + b * y + 0.5 * c * (x * x - y * y) + d * x * y

    def gradient(self, z):
        """Metric gradient as a chart vector: ((1-r^2)/2)^2 (phi_x + i phi_y)."""
        z = np.asarray(z, dtype=complex)
        px, py = self._derivs(z)
        fac = ((1.0 - np.abs(z) ** 2) / 2.0) ** 2
        return fac * (px + 1j * py)

    def gradient_norm(self, z):
        z = np.asarray(z, dtype=complex)
        px, py = self._derivs(z)
        return (1.0 - np.abs(z) ** 2) / 2.0 * np.hypot(px, py)

    def covariant_hessian_chart(self, z):
        """Covariant Hessian in chart coordinates (lower indices)."""
        a, b, c, d = self.coeffs
        z = np.asarray(z, dtype=complex)
        px, py = self._derivs(z)
        wx, wy = _conformal_log_factor(z)
        wx, wy, px, py = (np.atleast_1d(q) for q in (wx, wy, px, py))
        H = np.zeros((np.atleast_1d(z).size, 2, 2))
        pxx, pxy, pyy = c, d, -c
        H[:, 0, 0] = pxx - (wx * px - wy * py)
        H[:, 0, 1] = pxy - (wy * px + wx * py)
        H[:, 1, 0] = H[:, 0, 1]
        H[:, 1, 1] = pyy - (wy * py - wx * px)
        return H

    def transverse_shape(self, z):
        """Riccati shape of the level-line field: H(e_perp, e_perp)/|grad|."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        px, py = self._derivs(z)
        g = np.hypot(px, py)
        ex, ey = -py / g, px / g           # Euclidean unit, perpendicular
        fac = (1.0 - np.abs(z) ** 2) / 2.0  # chart length of a unit vector
        H = self.covariant_hessian_chart(z)
        quad = (H[:, 0, 0] * ex * ex + 2 * H[:, 0, 1] * ex * ey + H[:, 1, 1] * ey * ey)
        return quad * fac * fac / self.gradient_norm(z)

    def lam_range(self, n: int = 721):
        th = np.linspace(0, 2 * np.pi, n)
        rr = np.linspace(0, self.chart_radius, 60)
        Z = rr[:, None] * np.exp(1j * th)[None, :]
        g = self.gradient_norm(Z)
        return float(g.min()), float(g.max())


@dataclass(frozen=True)
class RadialPhase:
    """phi = (slope/2) d(z, center)^2 on an annulus d in [d_lo, d_hi]."""

    center: complex = 0.25 + 0.1j
    slope: float = 1.0
    d_lo: float = 0.7
    d_hi: float = 1.3

    def value(self, z):
        d = distance_z(np.asarray(z, dtype=complex), self.center)
        return 0.5 * self.slope * d * d

    def gradient(self, z):
        z = np.asarray(z, dtype=complex)
        d = distance_z(z, self.center)
        w = (z - self.center) / (1.0 - np.conj(self.center) * z)
        u = np.where(np.abs(w) > 0, w / np.where(np.abs(w) == 0, 1.0, np.abs(w)), 0)
        # unit radial direction at z: push the chart direction through T_center
        ta, tb = translate_to(np.asarray(self.center, dtype=complex))
        dirv = mobius_deriv_z(ta, tb, w) * u
        dirv = dirv / np.abs(dirv)
        fac = (1.0 - np.abs(z) ** 2) / 2.0
        return self.slope * d * dirv * fac

    def gradient_norm(self, z):
        return self.slope * distance_z(np.asarray(z, dtype=complex), self.center)

    def transverse_shape(self, z):
        d = distance_z(np.asarray(z, dtype=complex), self.center)
        # tangential Hessian of d^2/2 is d coth d; shape = coth(d)
        return 1.0 / np.tanh(d)

    def lam_range(self):
        return self.slope * self.d_lo, self.slope * self.d_hi


# ---------------------------------------------------------------------------
# states and energy measures


@dataclass(frozen=True)
class MonochromaticState:
    """a e^{i lam psi / h} with psi the eikonal extension of (Sigma, u).

    `speed` scales the unit-gradient phase, so |grad phi| = speed."""

    data: HypersurfaceData
    amplitude: BumpAmplitude
    speed: float = 1.0
    collar: float = 0.3

    @cached_property
    def phase(self) -> EikonalPhase:
        return eikonal_extend(self.data, self.collar)

    @property
    def lam_range(self):
        return 0.95 * self.speed, 1.05 * self.speed

    def phase_value(self, z):
        return self.speed * self.phase.value(z)

    def admissible(self) -> bool:
        return self.data.shape_margin("unstable_neutral") > 0.0


@dataclass(frozen=True)
class PolychromaticState:
    """a e^{i phi / h} for a chart phase with varying |grad phi|."""

    phase: object
    amplitude: BumpAmplitude

    @property
    def lam_range(self):
        return self.phase.lam_range()

    def phase_value(self, z):
        return self.phase.value(z)


@dataclass(frozen=True)
class EnergyMeasure:
    """Push-forward of |a|^2 dx under x -> |grad phi(x)|, as weighted atoms."""

    lam: np.ndarray
    weights: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    def support_interval(self):
        return float(self.lam.min()), float(self.lam.max())


def _support_quadrature(amplitude: BumpAmplitude, n_quad: int):
    """Polar quadrature nodes/weights for integrals of |a|^2 over its support."""
    if n_quad <= 0:
        raise ValueError("quadrature resolution must be positive")
    x, w = leggauss(n_quad)
    r = 0.5 * amplitude.radius * (x + 1.0)
    wr = 0.5 * amplitude.radius * w
    n_th = max(16, 2 * n_quad)
    th = 2.0 * np.pi * np.arange(n_th) / n_th
    wth = 2.0 * np.pi / n_th
    R, TH = np.meshgrid(r, th, indexing="ij")
    ta, tb = translate_to(np.asarray(amplitude.center, dtype=complex))
    zloc = np.tanh(R / 2.0) * np.exp(1j * TH)
    z = mobius_apply_z(ta, tb, zloc)
    wt = (np.sinh(R) * wr[:, None] * wth).ravel()
    return z.ravel(), wt


def energy_measure(state, n_quad: int = 48, n_atoms: int = 64, edges=None) -> EnergyMeasure:
    """Energy measure of a state, by quadrature and binning of |grad phi|.

    Explicit bin `edges` override the automatic n_atoms binning (useful for
    comparisons against an external histogram)."""
    amp = state.amplitude
    z, wt = _support_quadrature(amp, n_quad)
    a2 = amp(z) ** 2
    keep = a2 > 0
    z, wt, a2 = z[keep], wt[keep], a2[keep]
    if isinstance(state, MonochromaticState):
        lam = np.full(z.shape, state.speed)
    else:
        lam = np.asarray(state.phase.gradient_norm(z))
    w = a2 * wt
    spread = lam.max() - lam.min()
    if edges is None:
        if spread < 1e-12:
            return EnergyMeasure(np.array([float(lam[0])]), np.array([float(np.sum(w))]))
        edges = np.linspace(lam.min(), lam.max() + 1e-15, n_atoms + 1)
    else:
        edges = np.asarray(edges, dtype=float)
    nb = edges.size - 1
    idx = np.clip(np.digitize(lam, edges) - 1, 0, nb - 1)
    weights = np.bincount(idx, weights=w, minlength=nb)
    centers = 0.5 * (edges[:-1] + edges[1:])
    keep = weights > 0
    return EnergyMeasure(centers[keep], weights[keep])
