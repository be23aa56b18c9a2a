"""Geodesic flow on the cotangent bundle and wavefront transport laws.

Momentum is identified with a tangent vector through the metric. The flow
moves the base point at speed lam = |xi| along the geodesic; transverse
wavefront data obeys the curvature -1 closed forms

    u' = lam (1 - u^2),        u = J'/J  (Riccati shape),
    J(t) = cosh(lam t) + u0 sinh(lam t)  (transverse Jacobian, J(0) = 1).

The stable/unstable lines are the Riccati fixed points u = -1 / u = +1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hypwave.disk import (
    DiskPoint,
    TangentVector,
    GeometryError,
    flow_arc_z,
    hyperbolic_norm_z,
)


@dataclass(frozen=True)
class PhasePoint:
    """Base point plus momentum vector; speed is the momentum's norm."""

    base: DiskPoint
    xi: TangentVector

    def __post_init__(self):
        if self.xi.base != self.base:
            raise GeometryError("momentum is not based at the base point")

    @property
    def speed(self) -> float:
        return self.xi.norm


@dataclass(frozen=True)
class WavefrontShape:
    """Riccati variable: geodesic curvature of the transported wavefront."""

    u: float

    def __post_init__(self):
        if not np.isfinite(self.u):
            raise GeometryError("wavefront shape must be finite")


@dataclass(frozen=True)
class RiccatiBlowup:
    """Focal-point marker for shapes below the stable line (u0 < -1)."""

    u0: float
    t_blowup: float


@dataclass(frozen=True)
class SplittingBasis:
    """Unstable/stable/neutral directions at a phase point.

    Vectors live in the Fermi frame along the geodesic: coordinates
    (dx_along, dx_perp, dxi_along, dxi_perp) with dx in hyperbolic length
    units and dxi in momentum units. The flow direction E0 is (lam,0,0,0)
    scaled to unit length; E_hat0 = (0,0,lam,0) is the radial momentum
    direction; E+/- are the transverse Jacobi modes with shape u = +-1.
    """

    speed: float
    e_plus: np.ndarray
    e_minus: np.ndarray
    e_zero: np.ndarray
    e_hat_zero: np.ndarray


def geodesic_flow(rho: PhasePoint, t: float) -> PhasePoint:
    """Flow for time t; base advances by arc length speed*t."""
    lam = rho.speed
    if lam <= 0:
        raise GeometryError("geodesic flow requires positive speed")
    zn, vn = flow_arc_z(rho.base.z, rho.xi.v, lam * t)
    p = DiskPoint(complex(zn))
    return PhasePoint(p, TangentVector(p, complex(lam * vn)))


def flow_arc_batch(z, v, arc, step=1.5, reduce_fn=None):
    """Unit-speed flow of point/direction arrays by (array of) arc lengths,
    in bounded steps.  If reduce_fn is given it is applied after each step
    (used to stay inside the fundamental domain on long flights)."""
    z = np.array(z, dtype=complex, copy=True)
    v = np.array(v, dtype=complex, copy=True)
    left = np.broadcast_to(np.asarray(arc, dtype=float), z.shape).copy()
    extras = None
    while np.any(np.abs(left) > 1e-15):
        dt = np.clip(left, -step, step)
        act = np.abs(left) > 1e-15
        zn, vn = flow_arc_z(z[act], v[act], dt[act])
        z[act] = zn
        v[act] = vn
        if reduce_fn is not None:
            z, v, extras = reduce_fn(z, v, extras)
        left -= dt
    return z, v, extras


def riccati_evolve(u0, t: float, lam: float = 1.0):
    """Closed-form solution of u' = lam (1 - u^2) from u(0) = u0.

    Accepts WavefrontShape or float/array u0. For u0 > -1 the solution is
    global and tends to +1. For u0 < -1 a focal point occurs at
    t* = artanh(-1/u0)/lam; scalar inputs then return RiccatiBlowup.
    """
    u0v = u0.u if isinstance(u0, WavefrontShape) else u0
    u0a = np.asarray(u0v, dtype=float)
    ta = np.asarray(t, dtype=float)
    scalar = (np.isscalar(u0) or isinstance(u0, WavefrontShape)) and ta.ndim == 0
    th = np.tanh(lam * ta)
    denom = 1.0 + u0a * th
    if scalar and float(u0a) < -1.0 and float(ta) > 0:
        t_star = float(np.arctanh(-1.0 / float(u0a)) / lam)
        if float(ta) >= t_star:
            return RiccatiBlowup(float(u0a), t_star)
    out = (u0a + th) / denom
    if scalar:
        return WavefrontShape(float(out)) if isinstance(u0, WavefrontShape) else float(out)
    return out


def jacobian_along(u0, t: float, lam: float = 1.0):
    """Transverse Jacobian J(t) = cosh(lam t) + u0 sinh(lam t); J(0) = 1.

    Raises GeometryError (carrying the focal time) if J vanishes on [0, t].
    """
    u0v = u0.u if isinstance(u0, WavefrontShape) else u0
    u0a = np.asarray(u0v, dtype=float)
    scalar = u0a.ndim == 0
    J = np.cosh(lam * t) + u0a * np.sinh(lam * t)
    if t > 0:
        bad = (u0a < -1.0) & (np.tanh(lam * t) >= -1.0 / np.where(u0a < -1.0, u0a, -np.inf))
        if np.any(bad):
            t_star = np.arctanh(-1.0 / u0a[bad].ravel()[0]) / lam
            raise GeometryError(f"transverse Jacobian vanishes at t = {t_star:.6g}")
    return float(J) if scalar else J


def splitting_at(rho: PhasePoint) -> SplittingBasis:
    """Closed-form Anosov splitting at a phase point, in the Fermi frame.

    In constant curvature -1 the contraction/expansion factors are exactly
    e^{-+ lam t} with prefactor 1. The neutral pair (E0, E_hat0) carries the
    shear block [[1, lam t], [0, 1]].
    """
    lam = rho.speed
    if lam <= 0:
        raise GeometryError("splitting requires positive speed")
    # transverse Jacobi mode with shape u: dx_perp = 1, dxi_perp = lam * u
    e_plus = np.array([0.0, 1.0, 0.0, lam]) / np.sqrt(1.0 + lam ** 2)
    e_minus = np.array([0.0, 1.0, 0.0, -lam]) / np.sqrt(1.0 + lam ** 2)
    e_zero = np.array([1.0, 0.0, 0.0, 0.0])
    e_hat_zero = np.array([0.0, 0.0, lam, 0.0])
    return SplittingBasis(lam, e_plus, e_minus, e_zero, e_hat_zero)


def pushforward_factor(basis: SplittingBasis, which: str, t: float) -> float:
    """Growth factor of d(flow) on the requested invariant line."""
    lam = basis.speed
    if which == "plus":
        return float(np.exp(lam * t))
    if which == "minus":
        return float(np.exp(-lam * t))
    if which == "zero":
        return 1.0
    raise ValueError(f"unknown direction {which!r}")


def transversality_margin(shapes, mode: str) -> float:
    """Distance of sampled wavefront shapes from the degenerate lines.

    mode "stable": min |u + 1| (tangency to the stable direction at 0);
    mode "unstable_neutral": min |u - 1|. A zero margin rejects the data.
    """
    vals = [s.u if isinstance(s, WavefrontShape) else float(s) for s in np.atleast_1d(shapes)]
    if len(vals) == 0:
        raise ValueError("empty shape sample")
    u = np.asarray(vals, dtype=float)
    if mode == "stable":
        return float(np.min(np.abs(u + 1.0)))
    if mode == "unstable_neutral":
        return float(np.min(np.abs(u - 1.0)))
    raise ValueError(f"unknown transversality mode {mode!r}")
