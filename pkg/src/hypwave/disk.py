"""Poincare disk geometry and the Bolza surface deck group.

Points are complex numbers z with |z| < 1; the metric is ds = 2|dz|/(1-|z|^2)
(curvature -1). Tangent vectors are stored as complex numbers in the
Euclidean chart; their hyperbolic norm at z is 2|v|/(1-|z|^2). Isometries
are Mobius maps z -> (a z + b)/(conj(b) z + conj(a)) with |a|^2 - |b|^2 = 1.

All core functions broadcast over numpy arrays of points/vectors; the small
dataclasses wrap single values for the typed API. The Bolza surface is the
quotient by the group generated by eight side-pairing translations of the
regular octagon with vertex angle pi/4 centered at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

BOUNDARY_GUARD = 1e-12
SU11_TOL = 1e-12

# Regular octagon with vertex angle pi/4: side pairings are translations of
# length 2*arccosh(1+sqrt(2)) whose axes pass through the origin at angles
# k*pi/4. cosh(ell/2) = 1 + sqrt(2) = cot^2(pi/8)^(1/2)... derived from the
# right triangle (pi/8, pi/8, pi/2): cosh(center-to-vertex) = cot^2(pi/8).
_COSH_HALF = 1.0 + np.sqrt(2.0)
_SINH_HALF = np.sqrt(_COSH_HALF * _COSH_HALF - 1.0)

GEN_A = np.array([_COSH_HALF + 0j] * 8)
GEN_B = np.concatenate([
    _SINH_HALF * np.exp(1j * np.arange(4) * np.pi / 4.0),
    -_SINH_HALF * np.exp(1j * np.arange(4) * np.pi / 4.0),
])
# index k in 0..3: translation toward angle k*pi/4; index k+4 is its inverse.

#: hyperbolic area of the Bolza surface (Gauss-Bonnet, genus 2)
SURFACE_AREA = 4.0 * np.pi

#: distance from the octagon center to a vertex
VERTEX_RADIUS = float(np.arccosh(_COSH_HALF * _COSH_HALF))

#: shortest translation length of the deck group
SYSTOLE = 2.0 * float(np.arccosh(_COSH_HALF))


class GeometryError(ValueError):
    """Raised for invalid geometric data (boundary violations, bad norms)."""


class ResourceError(RuntimeError):
    """Raised when an enumeration would exceed its element budget."""


# ---------------------------------------------------------------------------
# array-level primitives


def mobius_apply_z(a, b, z):
    """Apply the Mobius map with matrix [[a, b], [conj(b), conj(a)]] to z."""
    return (a * z + b) / (np.conj(b) * z + np.conj(a))


def mobius_deriv_z(a, b, z):
    """Complex derivative of the Mobius map at z (pushforward of vectors)."""
    return 1.0 / (np.conj(b) * z + np.conj(a)) ** 2


def mobius_compose(a1, b1, a2, b2):
    """Matrix product: the map (a1,b1) applied after (a2,b2)."""
    return a1 * a2 + b1 * np.conj(b2), a1 * b2 + b1 * np.conj(a2)


def mobius_inverse(a, b):
    return np.conj(a), -b


def distance_z(z, w):
    """Hyperbolic distance between points of the open disk."""
    return 2.0 * np.arctanh(np.abs((z - w) / (1.0 - np.conj(z) * w)))


def hyperbolic_norm_z(z, v):
    """Hyperbolic norm of the chart vector v based at z."""
    return 2.0 * np.abs(v) / (1.0 - np.abs(z) ** 2)


def translate_to(z):
    """Mobius map taking 0 to z along the geodesic through both."""
    c = 1.0 / np.sqrt(1.0 - np.abs(z) ** 2)
    return c + 0j * z, c * z


def exp_map_z(z, v):
    """Exponential map: follow the geodesic from z with initial vector v
    for hyperbolic length |v|.  Accepts arrays; v = 0 returns z."""
    z = np.asarray(z, dtype=complex)
    v = np.asarray(v, dtype=complex)
    s = hyperbolic_norm_z(z, v)
    small = s < 1e-300
    u = np.where(small, 1.0, v / np.where(small, 1.0, np.abs(v)))
    z0 = np.tanh(s / 2.0) * u
    out = (z0 + z) / (1.0 + np.conj(z) * z0)
    return np.where(small, z, out)


def flow_arc_z(z, v, s):
    """Geodesic flow by signed arc length s; v is only a direction (any
    nonzero scale).  Returns the new point and the unit-speed velocity."""
    v0 = v / (1.0 - np.abs(z) ** 2)
    u = v0 / np.abs(v0)
    z0 = np.tanh(np.asarray(s) / 2.0) * u
    vn0 = 0.5 / np.cosh(np.asarray(s) / 2.0) ** 2 * u
    zn = (z0 + z) / (1.0 + np.conj(z) * z0)
    dT = (1.0 - np.abs(z) ** 2) / (1.0 + np.conj(z) * z0) ** 2
    return zn, dT * vn0


def geodesic_offsets_z(z, v, q):
    """Perpendicular distance from q to the oriented geodesic through (z, v)
    and the signed arc position of the foot, measured from z.

    Uses hyperboloid coordinates after moving (z, v) to (0, +x): for the
    x-axis geodesic, sinh(d_perp) = 2|y|/(1-r^2) and tanh(foot) = 2x/(1+r^2).
    """
    qp = (q - z) / (1.0 - np.conj(z) * q)
    u = v / np.abs(v)
    zeta = qp * np.conj(u)
    r2 = np.abs(zeta) ** 2
    sperp = 2.0 * np.abs(zeta.imag) / (1.0 - r2)
    foot = np.arctanh(np.clip(2.0 * zeta.real / (1.0 + r2), -1.0 + 1e-16, 1.0 - 1e-16))
    return np.arcsinh(sperp), foot


def reduce_z(z, v=None, track_matrix=True):
    """Reduce points into the Dirichlet octagon about 0.

    Greedy side-pairing descent: while some neighbor center g_k(0) is closer
    to z than 0 is, replace z by g_k^{-1} z. Returns (z_red, v_red, Wa, Wb)
    where the composite W satisfies z = W(z_red); v (optional direction data)
    is pushed through the same maps. Distance to 0 strictly decreases, so
    the loop terminates for any interior point.
    """
    z = np.array(z, dtype=complex, copy=True)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    if v is not None:
        v = np.atleast_1d(np.array(v, dtype=complex, copy=True))
    Wa = np.ones(z.shape, dtype=complex)
    Wb = np.zeros(z.shape, dtype=complex)
    for _ in range(512):
        d0 = distance_z(z, 0j)
        dn = distance_z(z[..., None], NEIGHBOR_CENTERS)
        k = np.argmin(dn, axis=-1)
        improving = dn[np.arange(z.size), k] < d0 - 1e-14
        if not np.any(improving):
            break
        kk = k[improving]
        ia, ib = GEN_A[(kk + 4) % 8], GEN_B[(kk + 4) % 8]
        zb = z[improving]
        z[improving] = mobius_apply_z(ia, ib, zb)
        if v is not None:
            v[improving] = mobius_deriv_z(ia, ib, zb) * v[improving]
        if track_matrix:
            ga, gb = GEN_A[kk], GEN_B[kk]
            Wa[improving], Wb[improving] = mobius_compose(Wa[improving], Wb[improving], ga, gb)
    else:
        raise GeometryError("fundamental-domain reduction did not converge")
    if scalar:
        return z[0], (None if v is None else v[0]), Wa[0], Wb[0]
    return z, v, Wa, Wb


NEIGHBOR_CENTERS = mobius_apply_z(GEN_A, GEN_B, 0j)


def in_fundamental_domain(z, tol=1e-12):
    """Closed Dirichlet-domain membership: no neighbor center is closer."""
    d0 = distance_z(np.asarray(z, dtype=complex), 0j)
    dn = distance_z(np.asarray(z, dtype=complex)[..., None], NEIGHBOR_CENTERS)
    return np.all(dn >= d0[..., None] - tol, axis=-1)


def matrix_word(a, b, max_steps=256):
    """Recover a generator word for the deck element (a, b).

    Reduces gamma(0) back to 0 while recording the side pairings used;
    gamma = gens[i0] * gens[i1] * ... for the returned index tuple. The
    arrival threshold is far below the orbit separation (the systole) but
    above the float drift of long matrix products.
    """
    z = mobius_apply_z(a, b, 0j)
    word = []
    for _ in range(max_steps):
        if distance_z(z, 0j) < 1e-5:
            return tuple(word)
        dn = distance_z(z, NEIGHBOR_CENTERS)
        k = int(np.argmin(dn))
        if dn[k] >= distance_z(z, 0j) - 1e-14:
            raise GeometryError("word recovery stalled off the orbit of 0")
        z = mobius_apply_z(*mobius_inverse(GEN_A[k], GEN_B[k]), z)
        word.append(k)
    raise GeometryError("word recovery exceeded step budget")


def word_matrix(word):
    """Compose a generator-index word into a single Mobius matrix."""
    a, b = 1.0 + 0j, 0j
    for k in word:
        a, b = mobius_compose(a, b, GEN_A[k], GEN_B[k])
    return a, b


# ---------------------------------------------------------------------------
# typed wrappers


@dataclass(frozen=True)
class DiskPoint:
    """A point of the open Poincare disk."""

    z: complex

    def __post_init__(self):
        if abs(self.z) >= 1.0 - BOUNDARY_GUARD:
            raise GeometryError(f"point too close to the ideal boundary: |z|={abs(self.z)}")


@dataclass(frozen=True)
class MobiusMap:
    """Disk isometry with matrix [[a, b], [conj(b), conj(a)]], det = 1."""

    a: complex
    b: complex

    def __post_init__(self):
        scale = max(1.0, abs(self.a) ** 2 + abs(self.b) ** 2)
        if abs(abs(self.a) ** 2 - abs(self.b) ** 2 - 1.0) > SU11_TOL * scale:
            raise GeometryError("matrix is not unit-determinant indefinite-unitary")

    def __call__(self, p: DiskPoint) -> DiskPoint:
        return mobius_apply(self, p)

    def compose(self, other: "MobiusMap") -> "MobiusMap":
        a, b = mobius_compose(self.a, self.b, other.a, other.b)
        n = np.sqrt(abs(a) ** 2 - abs(b) ** 2)
        return MobiusMap(a / n, b / n)

    def inverse(self) -> "MobiusMap":
        return MobiusMap(np.conj(self.a), -self.b)

    @staticmethod
    def identity() -> "MobiusMap":
        return MobiusMap(1.0 + 0j, 0j)

    @staticmethod
    def rotation(theta: float) -> "MobiusMap":
        return MobiusMap(np.exp(0.5j * theta), 0j)


@dataclass(frozen=True)
class TangentVector:
    """Chart vector v at a base point; hyperbolic norm 2|v|/(1-|z|^2)."""

    base: DiskPoint
    v: complex

    @property
    def norm(self) -> float:
        return float(hyperbolic_norm_z(self.base.z, self.v))

    def normalized(self) -> "TangentVector":
        n = self.norm
        if n == 0.0:
            raise GeometryError("cannot normalize the zero vector")
        return TangentVector(self.base, self.v / n)


@dataclass(frozen=True)
class Frame:
    """Orthonormal frame (e1, e2) at a base point."""

    base: DiskPoint
    e1: TangentVector
    e2: TangentVector

    @staticmethod
    def standard(p: DiskPoint) -> "Frame":
        """Conformally scaled coordinate frame: e1 along +x, e2 along +y."""
        fac = (1.0 - abs(p.z) ** 2) / 2.0
        return Frame(p, TangentVector(p, fac + 0j), TangentVector(p, fac * 1j))

    def vector(self, y) -> TangentVector:
        y1, y2 = float(y[0]), float(y[1])
        return TangentVector(self.base, y1 * self.e1.v + y2 * self.e2.v)

    def components(self, w: TangentVector):
        """Coefficients of w in (e1, e2), via the hyperbolic inner product."""
        z = self.base.z
        g = (2.0 / (1.0 - abs(z) ** 2)) ** 2
        def ip(u, v):
            return g * (u.real * v.real + u.imag * v.imag)
        return np.array([ip(w.v, self.e1.v), ip(w.v, self.e2.v)])


def mobius_apply(m: MobiusMap, p: DiskPoint) -> DiskPoint:
    return DiskPoint(complex(mobius_apply_z(m.a, m.b, p.z)))


def mobius_push(m: MobiusMap, w: TangentVector) -> TangentVector:
    z = w.base.z
    return TangentVector(mobius_apply(m, w.base), complex(mobius_deriv_z(m.a, m.b, z) * w.v))


def hyperbolic_distance(p: DiskPoint, q: DiskPoint) -> float:
    return float(distance_z(p.z, q.z))


def exp_map(p: DiskPoint, w: TangentVector) -> DiskPoint:
    if w.base != p:
        raise GeometryError("vector is not based at the given point")
    return DiskPoint(complex(exp_map_z(p.z, w.v)))


def widetilde_exp(frame: Frame, y) -> DiskPoint:
    """Chart map y -> exp(y1 e1 + y2 e2) attached to an orthonormal frame."""
    return exp_map(frame.base, frame.vector(y))


# ---------------------------------------------------------------------------
# deck group


@dataclass
class DeckGroup:
    """The Bolza side-pairing group acting on the disk.

    generators[k] for k < 4 translates by the octagon diameter toward angle
    k*pi/4; generators[k+4] is the inverse. The single defining relation is
    g0 g1^-1 g2 g3^-1 g0^-1 g1 g2^-1 g3 = id (the vertex cycle of the
    octagon, sides visited in steps of five).
    """

    generators: tuple = field(default_factory=lambda: tuple(
        MobiusMap(complex(GEN_A[k]), complex(GEN_B[k])) for k in range(8)))
    relation_word: tuple = (0, 5, 2, 7, 4, 1, 6, 3)
    _cache: dict = field(default_factory=dict, repr=False)

    def relation_defect(self) -> float:
        """Distance of the relation-word product from +-identity."""
        a, b = word_matrix(self.relation_word)
        return float(min(abs(a - 1.0) + abs(b), abs(a + 1.0) + abs(b)))

    def reduce(self, p: DiskPoint):
        """Map p to its fundamental-domain representative.

        Returns (representative, word) with word a tuple of generator
        indices such that applying them in order to the representative
        recovers p.
        """
        z, _, wa, wb = reduce_z(p.z)
        word = matrix_word(wa, wb) if distance_z(mobius_apply_z(wa, wb, 0j), 0j) > 1e-9 else ()
        return DiskPoint(complex(z)), word

    def apply_word(self, word, p: DiskPoint) -> DiskPoint:
        a, b = word_matrix(word)
        return DiskPoint(complex(mobius_apply_z(a, b, p.z)))

    def enumerate(self, radius: float, max_elements: int = 2_000_000):
        """All deck elements that move the origin at most `radius`.

        Returns a list of (MobiusMap, word) sorted by displacement then
        word. Breadth-first closure with slack 2*VERTEX_RADIUS guarantees
        every element within `radius` is reached through stored prefixes.
        """
        if radius < 0:
            raise GeometryError("radius must be nonnegative")
        key = round(float(radius), 9)
        if key in self._cache:
            return self._cache[key]
        slack = radius + 2.0 * VERTEX_RADIUS + 1e-9
        elems = {(1.0, 0.0, 0.0, 0.0): (1 + 0j, 0j)}
        frontier_a = np.array([1 + 0j])
        frontier_b = np.array([0j])
        while frontier_a.size:
            na = (frontier_a[:, None] * GEN_A[None, :] + frontier_b[:, None] * np.conj(GEN_B)[None, :]).ravel()
            nb = (frontier_a[:, None] * GEN_B[None, :] + frontier_b[:, None] * np.conj(GEN_A)[None, :]).ravel()
            flip = (na.real < 0) | ((np.abs(na.real) < 1e-12) & (na.imag < 0))
            na = np.where(flip, -na, na)
            nb = np.where(flip, -nb, nb)
            disp = distance_z(mobius_apply_z(na, nb, 0j), 0j)
            ok = disp <= slack
            na, nb = na[ok], nb[ok]
            keep_a, keep_b = [], []
            for a, b in zip(na, nb):
                k = (round(a.real, 6), round(a.imag, 6), round(b.real, 6), round(b.imag, 6))
                if k in elems:
                    continue
                elems[k] = (a, b)
                keep_a.append(a)
                keep_b.append(b)
                if len(elems) > max_elements:
                    raise ResourceError("deck enumeration exceeded element budget")
            frontier_a = np.array(keep_a, dtype=complex)
            frontier_b = np.array(keep_b, dtype=complex)
        out = []
        for a, b in elems.values():
            if distance_z(mobius_apply_z(a, b, 0j), 0j) <= radius + 1e-9:
                word = matrix_word(a, b)
                n = np.sqrt(abs(a) ** 2 - abs(b) ** 2)
                out.append((MobiusMap(complex(a / n), complex(b / n)), word))
        out.sort(key=lambda mw: (len(mw[1]), mw[1]))
        self._cache[key] = out
        return out

    def lift_matrices(self, radius: float):
        """(a, b) arrays for all deck elements with displacement <= radius."""
        elems = self.enumerate(radius)
        a = np.array([m.a for m, _ in elems])
        b = np.array([m.b for m, _ in elems])
        return a, b


@lru_cache(maxsize=1)
def bolza_group() -> DeckGroup:
    return DeckGroup()
