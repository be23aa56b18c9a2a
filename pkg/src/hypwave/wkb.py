"""Wavefront transport of oscillatory states and their local plane-wave models.

The evolved state at time t is a finite sum over arrival branches at an
observation point: sheets of the transported graph over the quotient
surface, indexed by source position and deck word. Each branch carries

    phase   = speed * (u(s) + tau) + t * speed^2 / 2
    amp     = a(source) / sqrt(J),   J = cosh(arc) + u_src sinh(arc)

with arc = speed * t the hyperbolic path length. Branches are found by
marching a fine family of characteristics (with repeated reduction into the
fundamental octagon, so coordinates never approach the ideal boundary),
seeding candidate crossings per lift of the observation point, and polishing
with a damped two-parameter Newton that uses the closed-form Jacobi fields.

Grouping by arrival direction and unit-ball sampling turn a branch table
into the frozen-coefficient plane-wave model observed at scale h^alpha.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hypwave.disk import (
    DiskPoint,
    Frame,
    GeometryError,
    ResourceError,
    bolza_group,
    distance_z,
    flow_arc_z,
    geodesic_offsets_z,
    mobius_apply_z,
    mobius_compose,
    mobius_deriv_z,
    mobius_inverse,
    NEIGHBOR_CENTERS,
    GEN_A,
    GEN_B,
)
from hypwave.flow import WavefrontShape, jacobian_along, riccati_evolve
from hypwave.states import MonochromaticState, PolychromaticState

MARCH_STEP = 1.5
DEFAULT_DS = 0.2
NEWTON_MAX_ITER = 48


class BranchSearchError(GeometryError):
    """Raised when the branch search cannot be set up consistently."""


class ClusterError(ValueError):
    """Direction grouping is ambiguous at the requested tolerance."""


# ---------------------------------------------------------------------------
# batched reduction that records composite matrices and generator words


def _reduce_tracked(z, v, Wa, Wb, words=None):
    """In-place style Dirichlet reduction; composes W so that
    z_original = W(z_reduced) and optionally appends generator indices."""
    for _ in range(512):
        d0 = distance_z(z, 0j)
        dn = distance_z(z[:, None], NEIGHBOR_CENTERS[None, :])
        k = np.argmin(dn, axis=1)
        improving = dn[np.arange(z.size), k] < d0 - 1e-14
        if not np.any(improving):
            return z, v, Wa, Wb
        kk = k[improving]
        ia, ib = GEN_A[(kk + 4) % 8], GEN_B[(kk + 4) % 8]
        zb = z[improving]
        z[improving] = mobius_apply_z(ia, ib, zb)
        v[improving] = mobius_deriv_z(ia, ib, zb) * v[improving]
        Wa[improving], Wb[improving] = mobius_compose(
            Wa[improving], Wb[improving], GEN_A[kk], GEN_B[kk])
        if words is not None:
            for idx, gk in zip(np.where(improving)[0], kk):
                words[idx].append(int(gk))
    raise GeometryError("tracked reduction did not converge")


def _flow_reduced(z, v, arc, words=None):
    """Flow by per-ray arc lengths with interleaved reduction. Returns the
    reduced endpoints, directions, composite matrices, and optional words."""
    z = np.array(z, dtype=complex, copy=True)
    v = np.array(v, dtype=complex, copy=True)
    Wa = np.ones(z.shape, dtype=complex)
    Wb = np.zeros(z.shape, dtype=complex)
    left = np.broadcast_to(np.asarray(arc, dtype=float), z.shape).astype(float).copy()
    z, v, Wa, Wb = _reduce_tracked(z, v, Wa, Wb, words)
    while np.any(np.abs(left) > 1e-15):
        dt = np.clip(left, -MARCH_STEP, MARCH_STEP)
        act = np.abs(left) > 1e-15
        zn, vn = flow_arc_z(z[act], v[act], dt[act])
        z[act] = zn
        v[act] = vn
        z, v, Wa, Wb = _reduce_tracked(z, v, Wa, Wb, words)
        left -= dt
    return z, v, Wa, Wb


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class Ray:
    """One transported characteristic sample."""

    source: complex
    params: tuple            # (s, tau) for monochromatic, chart (x, y) else
    arrival: complex         # reduced position
    direction: complex       # chart direction at the arrival, unit speed
    speed: float
    action: float
    shape: WavefrontShape | None
    jacobian: float | None
    word: tuple
    blowup_time: float | None = None


@dataclass(frozen=True)
class BranchRecord:
    """One sheet of the evolved state over the observation point."""

    xi: tuple                # covector components in the observation frame
    phase: float
    amplitude: float
    source: complex
    word: tuple
    jacobian: float
    params: tuple            # (s, tau) source coordinates
    residual: float


@dataclass
class BranchTable:
    x0: DiskPoint
    frame: Frame
    t: float
    speed: float
    branches: list
    counters: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.branches)

    @property
    def mass_sum(self) -> float:
        return float(sum(b.amplitude ** 2 for b in self.branches))

    def xi_array(self) -> np.ndarray:
        return np.array([b.xi for b in self.branches]).reshape(-1, 2)

    def amplitude_array(self) -> np.ndarray:
        return np.array([b.amplitude for b in self.branches])


@dataclass(frozen=True)
class WaveClass:
    xi: tuple
    B: complex
    beta: float
    size: int


@dataclass
class LocalWaveModel:
    h: float
    x0: DiskPoint
    t: float
    classes: list

    @property
    def N(self) -> int:
        return len(self.classes)

    def beta_array(self):
        return np.array([c.beta for c in self.classes])

    def xi_array(self):
        return np.array([c.xi for c in self.classes]).reshape(-1, 2)

    def arg_array(self):
        return np.array([np.angle(c.B) for c in self.classes])


# ---------------------------------------------------------------------------
# the marching propagator (monochromatic fast path)


_MARCH_CACHE: dict = {}


class _MonoPropagator:
    """Caches the characteristic march per arc length and finds branches.

    The march depends only on the hypersurface data and the arc length, so
    the cache is shared between states that differ only in speed/amplitude.
    """

    def __init__(self, state: MonochromaticState):
        self.state = state
        L = state.data.arc.half_length
        self.s_lo, self.s_hi = -L, L
        self.tau_max = state.amplitude.radius + 0.02
        if state.collar < state.amplitude.radius:
            raise BranchSearchError("phase collar does not cover the amplitude support")
        s = np.linspace(-L, L, 2001)
        bound = float(np.max(np.abs(state.data.initial_shape(s))))
        self.u0_bound = min(bound * 1.02 + 1e-3, 0.999)

    # -- march ------------------------------------------------------------

    def march(self, arc: float, ds_target: float = DEFAULT_DS):
        key = (self.state.data, round(arc, 10), round(ds_target, 10))
        if key in _MARCH_CACHE:
            return _MARCH_CACHE[key]
        Jmax = np.cosh(arc) + self.u0_bound * np.sinh(arc)
        n = int((self.s_hi - self.s_lo) * Jmax / ds_target) + 64
        if n > 40_000_000:
            raise ResourceError(f"march would need {n} rays; reduce arc or coarsen")
        s = np.linspace(self.s_lo, self.s_hi, n)
        y, v = self.state.data.covectors(s)
        z, vv, _, _ = _flow_reduced(y, v, arc)
        while len(_MARCH_CACHE) >= 6:
            _MARCH_CACHE.pop(next(iter(_MARCH_CACHE)))
        _MARCH_CACHE[key] = (s, z, vv)
        return s, z, vv

    # -- branch search ----------------------------------------------------

    def _lift_points(self, x0: complex):
        radius = 2.46 + (DEFAULT_DS + self.tau_max + 0.25) + float(distance_z(x0, 0j)) + 0.1
        a, b = bolza_group().lift_matrices(radius)
        return a, b, mobius_apply_z(a, b, x0)

    def _seeds(self, s, z, v, lifts, ds_target):
        within = ds_target + self.tau_max + 0.25
        seeds_s, seeds_tau = [], []
        chunk = 400_000
        n = z.size
        for i0 in range(0, n, chunk):
            zz = z[i0:i0 + chunk]
            vv = v[i0:i0 + chunk]
            dd = distance_z(zz[:, None], lifts[None, :])
            near = dd < within
            loc = np.zeros_like(near)
            loc[1:-1] = near[1:-1] & (dd[1:-1] <= dd[:-2]) & (dd[1:-1] <= dd[2:])
            loc[0] = near[0]
            loc[-1] = near[-1]
            ii, jj = np.where(loc)
            if ii.size == 0:
                continue
            sperp, foot = geodesic_offsets_z(zz[ii], vv[ii], lifts[jj])
            ok = (sperp < 2.5 * ds_target) & (np.abs(foot) < self.tau_max + 0.15)
            seeds_s.append(s[i0 + ii[ok]])
            seeds_tau.append(foot[ok])
        if not seeds_s:
            return np.array([]), np.array([])
        return np.concatenate(seeds_s), np.concatenate(seeds_tau)

    def _newton(self, s_par, tau, arc, lifts, tol):
        """Damped batched Newton on (s, tau): reduced arrival == nearest lift."""
        prof = self.state.data.profile
        alive = np.ones(s_par.shape, dtype=bool)
        res = np.full(s_par.shape, np.inf)
        jbest = np.zeros(s_par.shape, dtype=int)
        zz = np.zeros(s_par.shape, dtype=complex)
        vv = np.zeros(s_par.shape, dtype=complex)
        for _ in range(NEWTON_MAX_ITER):
            y0, v0 = self.state.data.covectors(s_par)
            zz, vv, _, _ = _flow_reduced(y0, v0, tau + arc)
            dd = distance_z(zz[:, None], lifts[None, :])
            jbest = np.argmin(dd, axis=1)
            q = lifts[jbest]
            w = (zz - q) / (1.0 - np.conj(q) * zz)
            res = 2.0 * np.arctanh(np.abs(w))
            done = res < tol * 0.5
            if np.all(done | ~alive):
                break
            dTq = (1.0 - np.abs(q) ** 2) / (1.0 - np.conj(q) * zz) ** 2
            along = dTq * vv
            along = along / np.abs(along)
            rvec = np.where(np.abs(w) > 0, w / np.where(np.abs(w) == 0, 1.0, np.abs(w)), 0) * res
            up = prof.d1(s_par)
            ww = np.sqrt(1.0 - up * up)
            u0 = prof.d2(s_par) / (1.0 - up * up)
            Jperp = -ww * (np.cosh(tau + arc) + u0 * np.sinh(tau + arc))
            col_s = up * along + Jperp * (1j * along)
            det = col_s.real * along.imag - col_s.imag * along.real
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            ds = (-rvec.real * along.imag + along.real * rvec.imag) / det
            dtau = (col_s.real * (-rvec.imag) + col_s.imag * rvec.real) / det
            f = np.minimum(1.0, 0.5 / np.maximum(np.abs(ds * Jperp), 1e-30))
            f = np.minimum(f, 0.3 / np.maximum(np.abs(dtau), 1e-30))
            upd = alive & ~done
            s_par = np.where(upd, s_par + f * ds, s_par)
            tau = np.where(upd, tau + f * dtau, tau)
            alive &= ~((s_par < self.s_lo - 0.05) | (s_par > self.s_hi + 0.05)
                       | (np.abs(tau) > self.tau_max + 0.3))
        return s_par, tau, res, alive, jbest, zz, vv

    def find_branches(self, x0: complex, t: float, tol: float, ds_target: float = DEFAULT_DS):
        state = self.state
        arc = state.speed * t
        s, z, v = self.march(arc, ds_target)
        la, lb, lifts = self._lift_points(x0)
        s_par, tau = self._seeds(s, z, v, lifts, ds_target)
        counters = {"seeds": int(s_par.size), "newton_failed": 0, "outside_support": 0}
        if s_par.size == 0:
            return BranchTable(DiskPoint(complex(x0)), Frame.standard(DiskPoint(complex(x0))),
                               t, state.speed, [], counters)
        s_par, tau, res, alive, jbest, zz, vv = self._newton(s_par, tau, arc, lifts, tol)
        ok = alive & (res < tol) & (np.abs(tau) <= self.tau_max)
        counters["newton_failed"] = int(np.sum(alive & (res >= tol)))
        s_par, tau, jbest = s_par[ok], tau[ok], jbest[ok]
        zz, vv, res = zz[ok], vv[ok], res[ok]
        # dedupe converged roots
        key = np.round(s_par, 8) + 1j * np.round(tau, 5)
        _, iu = np.unique(key, return_index=True)
        s_par, tau, jbest = s_par[iu], tau[iu], jbest[iu]
        zz, vv, res = zz[iu], vv[iu], res[iu]
        # sources and amplitudes
        y0, v0 = self.state.data.covectors(s_par)
        zsrc = y0.copy()
        left = tau.copy()
        vsrc = v0.copy()
        while np.any(np.abs(left) > 1e-15):
            dt = np.clip(left, -1.0, 1.0)
            act = np.abs(left) > 1e-15
            zn, vn = flow_arc_z(zsrc[act], vsrc[act], dt[act])
            zsrc[act] = zn
            vsrc[act] = vn
            left -= dt
        a_val = state.amplitude(zsrc)
        inside = a_val > 0.0
        counters["outside_support"] = int(np.sum(~inside))
        s_par, tau, jbest = s_par[inside], tau[inside], jbest[inside]
        zz, vv, res, zsrc, a_val = zz[inside], vv[inside], res[inside], zsrc[inside], a_val[inside]
        # transported data
        prof = state.data.profile
        up = prof.d1(s_par)
        u0 = prof.d2(s_par) / (1.0 - up * up)
        th = np.tanh(tau)
        u_src = (u0 + th) / (1.0 + u0 * th)
        J = np.cosh(arc) + u_src * np.sinh(arc)
        b = a_val / np.sqrt(J)
        phase = state.speed * (prof(s_par) + tau) + t * state.speed ** 2 / 2.0
        # arrival covectors pulled back to x0
        ia, ib = mobius_inverse(la[jbest], lb[jbest])
        v_obs = mobius_deriv_z(ia, ib, zz) * vv
        theta = np.angle(v_obs)
        # final deck words
        words = [[] for _ in range(s_par.size)]
        y0, v0 = state.data.covectors(s_par)
        _, _, Wa, Wb = _flow_reduced(y0, v0, tau + arc, words)
        ga, gb = mobius_compose(Wa, Wb, la[jbest], lb[jbest])
        records = []
        for i in range(s_par.size):
            word = _word_of(ga[i], gb[i])
            records.append(BranchRecord(
                xi=(float(state.speed * np.cos(theta[i])), float(state.speed * np.sin(theta[i]))),
                phase=float(phase[i]),
                amplitude=float(b[i]),
                source=complex(zsrc[i]),
                word=word,
                jacobian=float(J[i]),
                params=(float(s_par[i]), float(tau[i])),
                residual=float(res[i]),
            ))
        records.sort(key=lambda r: (r.word, r.params[0]))
        p0 = DiskPoint(complex(x0))
        return BranchTable(p0, Frame.standard(p0), t, state.speed, records, counters)


def _word_of(a, b):
    from hypwave.disk import matrix_word
    return matrix_word(a, b)


_PROPAGATORS: dict = {}


def _propagator(state):
    key = state
    if key not in _PROPAGATORS:
        if len(_PROPAGATORS) > 8:
            _PROPAGATORS.clear()
        _PROPAGATORS[key] = _MonoPropagator(state)
    return _PROPAGATORS[key]


# ---------------------------------------------------------------------------
# public operations


def propagate_bundle(state, t: float, n_rays: int = 1024):
    """Transport a source grid for time t; returns a list of Ray records.

    Monochromatic states use characteristic coordinates (s, tau) over the
    amplitude support; chart states use a polar grid. Rays that hit a focal
    point before t are tagged with their blowup time instead of aborting.
    """
    if n_rays < 64:
        raise ValueError("need at least 64 rays")
    if t < 0:
        raise ValueError("bundle transport runs forward in time")
    rays = []
    if isinstance(state, MonochromaticState):
        amp = state.amplitude
        prof = state.data.profile
        s_c, _ = _support_center_params(state)
        half = amp.radius * 1.12 + 0.02
        n_s = int(np.sqrt(n_rays * half / amp.radius))
        n_tau = max(5, n_rays // max(n_s, 1)) | 1    # odd: the grid contains tau = 0
        L = state.data.arc.half_length
        s_grid = np.linspace(max(-L, s_c - half), min(L, s_c + half), n_s)
        tau_grid = np.linspace(-amp.radius, amp.radius, n_tau)
        S, TAU = np.meshgrid(s_grid, tau_grid, indexing="ij")
        S, TAU = S.ravel(), TAU.ravel()
        y0, v0 = state.data.covectors(S)
        zsrc = _flow_plain(y0, v0, TAU)
        arc = state.speed * t
        words = [[] for _ in range(S.size)]
        z, v, _, _ = _flow_reduced(y0, v0, TAU + arc, words)
        up = prof.d1(S)
        u0 = prof.d2(S) / (1.0 - up * up)
        th = np.tanh(TAU)
        u_src = (u0 + th) / (1.0 + u0 * th)
        u_arr = riccati_evolve(u_src, arc, 1.0)
        J = np.cosh(arc) + u_src * np.sinh(arc)
        Sact = state.speed * (prof(S) + TAU) + t * state.speed ** 2 / 2.0
        for i in range(S.size):
            rays.append(Ray(
                source=complex(zsrc[i]), params=(float(S[i]), float(TAU[i])),
                arrival=complex(z[i]), direction=complex(v[i]), speed=state.speed,
                action=float(Sact[i]), shape=WavefrontShape(float(u_arr[i])),
                jacobian=float(J[i]), word=tuple(words[i])))
        return rays
    if isinstance(state, PolychromaticState):
        amp = state.amplitude
        n_r = max(8, int(np.sqrt(n_rays / 3)))
        n_th = max(16, n_rays // n_r)
        from hypwave.disk import translate_to
        rr = amp.radius * (np.arange(1, n_r + 1) - 0.5) / n_r
        th = 2 * np.pi * np.arange(n_th) / n_th
        R, TH = np.meshgrid(rr, th, indexing="ij")
        ta, tb = translate_to(np.asarray(amp.center, dtype=complex))
        y = mobius_apply_z(ta, tb, np.tanh(R.ravel() / 2.0) * np.exp(1j * TH.ravel()))
        grad = np.asarray(state.phase.gradient(y))
        lam = np.asarray(state.phase.gradient_norm(y))
        u0 = np.asarray(state.phase.transverse_shape(y))
        phi0 = np.asarray(state.phase.value(y))
        arc = lam * t
        words = [[] for _ in range(y.size)]
        z, v, _, _ = _flow_reduced(y, grad, arc, words)
        for i in range(y.size):
            if u0[i] < -1.0 and np.tanh(arc[i]) >= -1.0 / u0[i]:
                t_star = float(np.arctanh(-1.0 / u0[i]) / max(lam[i], 1e-300))
                rays.append(Ray(complex(y[i]), (float(R.ravel()[i]), float(TH.ravel()[i])),
                                complex(z[i]), complex(v[i]), float(lam[i]),
                                float(phi0[i] + t * lam[i] ** 2 / 2), None, None,
                                tuple(words[i]), blowup_time=t_star))
                continue
            J = float(np.cosh(arc[i]) + u0[i] * np.sinh(arc[i]))
            u_arr = float(riccati_evolve(float(u0[i]), float(arc[i]), 1.0))
            rays.append(Ray(complex(y[i]), (float(R.ravel()[i]), float(TH.ravel()[i])),
                            complex(z[i]), complex(v[i]), float(lam[i]),
                            float(phi0[i] + t * lam[i] ** 2 / 2),
                            WavefrontShape(u_arr), J, tuple(words[i])))
        return rays
    raise TypeError(f"unsupported state type {type(state).__name__}")


def _flow_plain(z, v, arc):
    z = np.array(z, dtype=complex, copy=True)
    v = np.array(v, dtype=complex, copy=True)
    left = np.asarray(arc, dtype=float).copy()
    while np.any(np.abs(left) > 1e-15):
        dt = np.clip(left, -1.0, 1.0)
        act = np.abs(left) > 1e-15
        zn, vn = flow_arc_z(z[act], v[act], dt[act])
        z[act] = zn
        v[act] = vn
        left -= dt
    return z


def _support_center_params(state: MonochromaticState):
    """(s, tau) coordinates of the amplitude center."""
    s, tau = state.phase._invert(np.array([state.amplitude.center], dtype=complex))
    return float(s[0]), float(tau[0])


def find_branches(state, x0, t: float, tol: float = 1e-9,
                  ds_target: float = DEFAULT_DS) -> BranchTable:
    """All arrival branches of the evolved state over x0, Newton-polished.

    tol bounds the hyperbolic distance between each branch arrival and x0.
    """
    if not (1e-12 <= tol <= 1e-6):
        raise ValueError("tol must lie in [1e-12, 1e-6]")
    x0c = x0.z if isinstance(x0, DiskPoint) else complex(x0)
    if isinstance(state, MonochromaticState):
        return _propagator(state).find_branches(x0c, t, tol, ds_target)
    if isinstance(state, PolychromaticState):
        return _find_branches_chart(state, x0c, t, tol)
    raise TypeError(f"unsupported state type {type(state).__name__}")


def _find_branches_chart(state: PolychromaticState, x0: complex, t: float, tol: float):
    """Generic branch search for chart phases on a source grid (modest t).

    Newton runs on chart coordinates with finite-difference Jacobians; the
    stretch budget guards against use deep in the exponential regime.
    """
    lam_hi = state.lam_range[1]
    stretch = np.exp(lam_hi * t)
    n_side = int(np.sqrt(stretch) * 40) + 48
    if n_side > 3000:
        raise ResourceError("chart-state branch search is limited to short times")
    amp = state.amplitude
    from hypwave.disk import translate_to
    g = np.linspace(-amp.radius, amp.radius, n_side)
    X, Y = np.meshgrid(g, g, indexing="ij")
    keep = X ** 2 + Y ** 2 < (amp.radius * 1.0) ** 2
    loc = (np.tanh(np.hypot(X[keep], Y[keep]) / 2.0)
           * np.exp(1j * np.arctan2(Y[keep], X[keep])))
    ta, tb = translate_to(np.asarray(amp.center, dtype=complex))
    y = mobius_apply_z(ta, tb, loc)
    park = np.stack([X[keep], Y[keep]], axis=1)

    def arrive(ys):
        grad = np.asarray(state.phase.gradient(ys))
        lam = np.asarray(state.phase.gradient_norm(ys))
        z, v, Wa, Wb = _flow_reduced(ys, grad, lam * t)
        return z

    z = arrive(y)
    group = bolza_group()
    radius = 2.46 + 0.8 + float(distance_z(x0, 0j)) + 0.1
    la, lb = group.lift_matrices(radius)
    lifts = mobius_apply_z(la, lb, x0)
    dd = distance_z(z[:, None], lifts[None, :])
    dmin = dd.min(axis=1)
    cell = 2.0 * amp.radius / n_side * (stretch * 1.3 + 1.0)
    cand = np.where(dmin < max(3.0 * cell, 0.05))[0]
    found = {}
    counters = {"seeds": int(cand.size), "newton_failed": 0, "outside_support": 0}
    hstep = max(1e-9, 1e-12 * stretch)
    for idx in cand:
        p = park[idx].copy()
        okflag = False
        for _ in range(60):
            ys = _chart_point(amp.center, p)
            zc = arrive(np.array([ys]))[0]
            ddl = distance_z(zc, lifts)
            jq = int(np.argmin(ddl))
            q = lifts[jq]
            w = (zc - q) / (1.0 - np.conj(q) * zc)
            r = 2.0 * np.arctanh(np.abs(w))
            if r < tol:
                okflag = True
                break
            rvec = np.array([(w / abs(w) * r).real, (w / abs(w) * r).imag])
            Jm = np.zeros((2, 2))
            for kdir in range(2):
                pp = p.copy()
                pp[kdir] += hstep
                zp = arrive(np.array([_chart_point(amp.center, pp)]))[0]
                wp = (zp - q) / (1.0 - np.conj(q) * zp)
                rp = 2.0 * np.arctanh(np.abs(wp))
                vecp = np.array([(wp / abs(wp) * rp).real if abs(wp) > 0 else 0.0,
                                 (wp / abs(wp) * rp).imag if abs(wp) > 0 else 0.0])
                Jm[:, kdir] = (vecp - rvec) / hstep
            try:
                step = np.linalg.solve(Jm, -rvec)
            except np.linalg.LinAlgError:
                break
            n = np.linalg.norm(step)
            lim = 0.5 / max(stretch, 1.0)
            if n > lim:
                step *= lim / n
            p = p + step
            if np.hypot(*p) > amp.radius * 1.2:
                break
        if not okflag:
            counters["newton_failed"] += 1
            continue
        ys = _chart_point(amp.center, p)
        a_val = float(amp(np.array([ys]))[0])
        if a_val <= 0:
            counters["outside_support"] += 1
            continue
        lam = float(np.asarray(state.phase.gradient_norm(np.array([ys])))[0])
        u0 = float(np.asarray(state.phase.transverse_shape(np.array([ys])))[0])
        J = float(jacobian_along(u0, t, lam))
        phi0 = float(np.asarray(state.phase.value(np.array([ys])))[0])
        grad = np.asarray(state.phase.gradient(np.array([ys])))
        words = [[]]
        zf, vf, Wa, Wb = _flow_reduced(np.array([ys]), grad, np.array([lam * t]), words)
        ga, gb = mobius_compose(Wa[0], Wb[0], la[jq], lb[jq])
        iaq, ibq = mobius_inverse(la[jq], lb[jq])
        v_obs = mobius_deriv_z(iaq, ibq, zf[0]) * vf[0]
        thb = np.angle(v_obs)
        key = (round(p[0], 8), round(p[1], 8))
        found[key] = BranchRecord(
            xi=(float(lam * np.cos(thb)), float(lam * np.sin(thb))),
            phase=float(phi0 + t * lam ** 2 / 2.0),
            amplitude=float(a_val / np.sqrt(J)),
            source=complex(ys), word=_word_of(ga, gb), jacobian=J,
            params=(float(p[0]), float(p[1])), residual=float(r))
    records = sorted(found.values(), key=lambda rec: (rec.word, rec.params))
    p0 = DiskPoint(complex(x0))
    return BranchTable(p0, Frame.standard(p0), t, 0.0, records, counters)


def _chart_point(center, p):
    from hypwave.disk import translate_to
    ta, tb = translate_to(np.asarray(center, dtype=complex))
    r = np.hypot(p[0], p[1])
    if r == 0:
        return complex(mobius_apply_z(ta, tb, 0j))
    return complex(mobius_apply_z(ta, tb, np.tanh(r / 2.0) * (p[0] + 1j * p[1]) / r))


# ---------------------------------------------------------------------------
# direction grouping and local sampling


def group_branches(table: BranchTable, h: float, dir_tol: float = 1e-6) -> LocalWaveModel:
    """Collapse branches with coinciding arrival covectors into wave classes.

    Classes are runs of sorted direction angles with consecutive gaps below
    dir_tol (radians, at the table's common speed). A run whose angular
    diameter exceeds 4 * dir_tol means chained near-tolerance links; that is
    reported as an error asking for a smaller tolerance.
    """
    if table.M == 0:
        return LocalWaveModel(h, table.x0, table.t, [])
    xi = table.xi_array()
    theta = np.arctan2(xi[:, 1], xi[:, 0])
    speed = np.hypot(xi[:, 0], xi[:, 1])
    order = np.argsort(theta)
    th_sorted = theta[order]
    gaps = np.diff(th_sorted)
    breaks = np.where(gaps > dir_tol)[0]
    groups = np.split(order, breaks + 1)
    # circular wrap: first and last group may be one class
    if len(groups) > 1 and (th_sorted[-1] - th_sorted[0]) < 2 * np.pi - dir_tol:
        if (th_sorted[0] + 2 * np.pi - th_sorted[-1]) <= dir_tol:
            groups[0] = np.concatenate([groups[-1], groups[0]])
            groups.pop()
    classes = []
    for gidx in groups:
        th_g = theta[gidx]
        ref = th_g[0]
        spread = np.ptp(np.mod(th_g - ref + np.pi, 2 * np.pi) - np.pi)
        if spread > 4 * dir_tol:
            raise ClusterError("ambiguous direction clustering; reduce dir_tol")
        b = np.array([table.branches[i].amplitude for i in gidx])
        ph = np.array([table.branches[i].phase for i in gidx])
        B = np.sum(b * np.exp(1j * np.mod(ph / h, 2 * np.pi)))
        mean_th = ref + np.sum(b * (np.mod(th_g - ref + np.pi, 2 * np.pi) - np.pi)) / np.sum(b)
        lam = float(np.sum(b * speed[gidx]) / np.sum(b))
        classes.append(WaveClass(
            xi=(float(lam * np.cos(mean_th)), float(lam * np.sin(mean_th))),
            B=complex(B), beta=float(abs(B)), size=int(gidx.size)))
    classes.sort(key=lambda c: np.arctan2(c.xi[1], c.xi[0]))
    return LocalWaveModel(h, table.x0, table.t, classes)


def sample_local_limit(model: LocalWaveModel, alpha: float, points, n_samples: int,
                       rng: np.random.Generator):
    """Sample the frozen-coefficient local model at scale h^alpha.

    Draws n_samples points uniformly in the Euclidean unit ball; row k is
    y -> sum_j beta_j exp(i xi_j . y + i theta_j(x_k)) evaluated at the given
    chart points, with theta_j(x) = Arg(B_j) + h^(alpha-1) xi_j . x.
    """
    if not (0.5 < alpha < 1.0):
        raise ValueError("alpha must lie in (1/2, 1)")
    if model.N < 1:
        raise ValueError("model has no wave classes")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    beta = model.beta_array()
    xi = model.xi_array()
    arg = model.arg_array()
    K = model.h ** (alpha - 1.0)
    r = np.sqrt(rng.uniform(0.0, 1.0, n_samples))
    a = rng.uniform(0.0, 2.0 * np.pi, n_samples)
    xtilde = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    out = np.empty((n_samples, pts.shape[0]), dtype=complex)
    plane = np.exp(1j * (pts @ xi.T))          # (P, N)
    chunk = max(1, int(4e6 / max(model.N, 1)))
    for i0 in range(0, n_samples, chunk):
        xt = xtilde[i0:i0 + chunk]
        phases = arg[None, :] + K * (xt @ xi.T)
        zj = beta[None, :] * np.exp(1j * phases)          # (c, N)
        out[i0:i0 + chunk] = zj @ plane.T
    return out


def sample_local_limit_exact(state, x0, t: float, h: float, alpha: float, points,
                             n_samples: int, rng: np.random.Generator, tol: float = 1e-9):
    """Exact-mode check: re-derive the branch sum at each sampled base point.

    Evaluates sum_j b_j(x) e^{i phi_j(x)/h} at x = exp-chart(x0, h^alpha xt)
    offset by h * y, with a fresh branch table per evaluation point. Only
    sensible at small scale; used to validate the frozen model.
    """
    x0c = x0.z if isinstance(x0, DiskPoint) else complex(x0)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    frame = Frame.standard(DiskPoint(x0c))
    r = np.sqrt(rng.uniform(0.0, 1.0, n_samples))
    aa = rng.uniform(0.0, 2.0 * np.pi, n_samples)
    xt = np.stack([r * np.cos(aa), r * np.sin(aa)], axis=1)
    out = np.empty((n_samples, pts.shape[0]), dtype=complex)
    from hypwave.disk import widetilde_exp
    for k in range(n_samples):
        for p in range(pts.shape[0]):
            y = h ** alpha * xt[k] + h * pts[p]
            xe = widetilde_exp(frame, y)
            tab = find_branches(state, xe, t, tol)
            vals = np.array([b.amplitude * np.exp(1j * np.mod(b.phase / h, 2 * np.pi))
                             for b in tab.branches])
            out[k, p] = vals.sum()
    return out


# ---------------------------------------------------------------------------
# projectability onset


@dataclass(frozen=True)
class T0Estimate:
    t0: float
    checked_pairs: int
    grid: tuple


@dataclass(frozen=True)
class T0Failure:
    reason: str
    pair: tuple


def detect_T0(state, t_grid, pair_samples: int = 300, rng: np.random.Generator | None = None,
              n_rays: int = 48):
    """First grid time from which all sampled ray pairs spread apart.

    Rays are lifted (no quotient reduction); the criterion is that the base
    distance of every sampled pair increases along the rest of the grid and
    all transverse Jacobians stay positive.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    if t_grid.size < 2:
        raise ValueError("need at least two grid times")
    rng = rng or np.random.default_rng(0)
    same_geodesic = None
    if isinstance(state, MonochromaticState):
        amp = state.amplitude
        s_c, _ = _support_center_params(state)
        s_grid = np.linspace(s_c - amp.radius, s_c + amp.radius, n_rays)
        L = state.data.arc.half_length
        s_grid = np.clip(s_grid, -L, L)
        tau_grid = np.linspace(-amp.radius * 0.9, amp.radius * 0.9, 5)
        S, TAU = np.meshgrid(s_grid, tau_grid, indexing="ij")
        S, TAU = S.ravel(), TAU.ravel()
        y0, v0 = state.data.covectors(S)
        zz0, vv0 = _flow_with_dir(y0, v0, TAU)
        lam = np.full(S.shape, state.speed)
        up = state.data.profile.d1(S)
        u00 = state.data.profile.d2(S) / (1.0 - up * up)
        th = np.tanh(TAU)
        u0 = (u00 + th) / (1.0 + u00 * th)
        same_geodesic = lambda i, j: np.abs(S[i] - S[j]) < 1e-9
    elif isinstance(state, PolychromaticState):
        amp = state.amplitude
        from hypwave.disk import translate_to
        rr = amp.radius * np.sqrt(rng.uniform(0.02, 1.0, n_rays * 4))
        thr = rng.uniform(0, 2 * np.pi, n_rays * 4)
        ta, tb = translate_to(np.asarray(amp.center, dtype=complex))
        zz0 = mobius_apply_z(ta, tb, np.tanh(rr / 2.0) * np.exp(1j * thr))
        vv0 = np.asarray(state.phase.gradient(zz0))
        lam = np.asarray(state.phase.gradient_norm(zz0))
        u0 = np.asarray(state.phase.transverse_shape(zz0))
    else:
        raise TypeError(f"unsupported state type {type(state).__name__}")
    n = zz0.size
    i = rng.integers(0, n, pair_samples)
    j = rng.integers(0, n, pair_samples)
    keep = i != j
    if same_geodesic is not None:
        # pairs on one characteristic keep constant distance; they are
        # excluded from the expansion criterion
        keep &= ~same_geodesic(i, j)
    i, j = i[keep], j[keep]
    dists = np.empty((t_grid.size, i.size))
    for k, t in enumerate(t_grid):
        zi = _flow_plain(zz0[i], vv0[i], lam[i] * t)
        zj = _flow_plain(zz0[j], vv0[j], lam[j] * t)
        dists[k] = distance_z(zi, zj)
    # Jacobian positivity over the grid
    for k, t in enumerate(t_grid):
        Jk = np.cosh(lam * t) + u0 * np.sinh(lam * t)
        if np.any(Jk <= 0):
            bad = int(np.argmax(Jk <= 0))
            return T0Failure("transverse Jacobian vanished", (bad, bad))
    increasing = np.diff(dists, axis=0) > 0
    ok_from = np.ones(t_grid.size, dtype=bool)
    for k in range(t_grid.size - 1):
        ok_from[k] = bool(np.all(increasing[k:]))
    ok_from[-1] = ok_from[-2] if t_grid.size >= 2 else True
    hits = np.where(ok_from[:-1])[0]
    if hits.size == 0:
        worst = int(np.argmin(np.sum(increasing, axis=0)))
        return T0Failure("no grid time after which all pairs spread",
                         (int(i[worst]), int(j[worst])))
    return T0Estimate(float(t_grid[hits[0]]), int(i.size), tuple(float(t) for t in t_grid))


def _flow_with_dir(z, v, arc):
    z = np.array(z, dtype=complex, copy=True)
    v = np.array(v, dtype=complex, copy=True)
    left = np.asarray(arc, dtype=float).copy()
    while np.any(np.abs(left) > 1e-15):
        dt = np.clip(left, -1.0, 1.0)
        act = np.abs(left) > 1e-15
        zn, vn = flow_arc_z(z[act], v[act], dt[act])
        z[act] = zn
        v[act] = vn
        left -= dt
    return z, v


# ---------------------------------------------------------------------------
# serialization (complex numbers as [re, im])


def _cplx(c):
    return [float(np.real(c)), float(np.imag(c))]


def branch_table_to_dict(table: BranchTable) -> dict:
    return {
        "x0": _cplx(table.x0.z),
        "t": float(table.t),
        "speed": float(table.speed),
        "M": table.M,
        "counters": {k: int(v) for k, v in sorted(table.counters.items())},
        "mass_sum": table.mass_sum,
        "branches": [
            {
                "xi": [float(b.xi[0]), float(b.xi[1])],
                "phase": float(b.phase),
                "b": float(b.amplitude),
                "source": _cplx(b.source),
                "deck_word": list(b.word),
                "J": float(b.jacobian),
                "params": [float(b.params[0]), float(b.params[1])],
            }
            for b in table.branches
        ],
    }


BRANCH_CSV_HEADER = ["j", "deck_word", "y_re", "y_im", "xi_1", "xi_2", "phase", "b", "J"]


def branch_table_csv_rows(table: BranchTable):
    rows = []
    for j, b in enumerate(table.branches):
        rows.append([
            j,
            "-".join(str(k) for k in b.word) if b.word else "e",
            repr(float(np.real(b.source))),
            repr(float(np.imag(b.source))),
            repr(float(b.xi[0])),
            repr(float(b.xi[1])),
            repr(float(b.phase)),
            repr(float(b.amplitude)),
            repr(float(b.jacobian)),
        ])
    return rows


def local_model_to_dict(model: LocalWaveModel) -> dict:
    return {
        "h": float(model.h),
        "x0": _cplx(model.x0.z),
        "t": float(model.t),
        "N": model.N,
        "classes": [
            {
                "xi": [float(c.xi[0]), float(c.xi[1])],
                "B": _cplx(c.B),
                "beta": float(c.beta),
                "size": int(c.size),
            }
            for c in model.classes
        ],
    }
