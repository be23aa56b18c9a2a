"""States: covector fields, the eikonal extension, chart phases, energy."""

import numpy as np
import pytest

from hypwave.disk import distance_z, geodesic_offsets_z
from hypwave.states import (
    BumpAmplitude,
    ChartPolynomialPhase,
    CollarError,
    DomainError,
    GeodesicArc,
    HypersurfaceData,
    MonochromaticState,
    OutOfDomainError,
    PolychromaticState,
    RadialPhase,
    TrigProfile,
    eikonal_extend,
    energy_measure,
    unit_covectors,
)


def flat_data(half_length=0.6):
    return HypersurfaceData(GeodesicArc(half_length=half_length), TrigProfile(()))


def wavy_data(half_length=0.6):
    return HypersurfaceData(GeodesicArc(half_length=half_length),
                            TrigProfile(((0.12, 1.7, 0.4), (0.05, 2.9, 1.0))))


# -- covectors ---------------------------------------------------------------


def test_constant_profile_gives_normal_field():
    data = flat_data()
    s = np.linspace(-0.5, 0.5, 11)
    y, v = unit_covectors(data, s)
    _, N = data.arc.tangent_normal(s)
    assert np.allclose(v, N, atol=1e-14)


def test_covector_components_at_half_slope():
    # u'(s0) = 0.5 gives components (0.5, sqrt(0.75)) in the (T, nu) frame
    data = HypersurfaceData(GeodesicArc(half_length=1.0), TrigProfile(((0.5 / 1.3, 1.3, 0.0),)))
    s0 = 0.0
    assert data.profile.d1(s0) == pytest.approx(0.5)
    y, v = unit_covectors(data, np.array([s0]))
    T, N = data.arc.tangent_normal(np.array([s0]))
    ct = (v * np.conj(T)).real / np.abs(T) ** 2
    cn = (v * np.conj(N)).real / np.abs(N) ** 2
    assert ct[0] == pytest.approx(0.5, abs=1e-12)
    assert cn[0] == pytest.approx(np.sqrt(0.75), abs=1e-12)


def test_covectors_unit_norm_everywhere():
    data = wavy_data()
    s = np.linspace(-0.6, 0.6, 1000)
    y, v = unit_covectors(data, s)
    norms = 2.0 * np.abs(v) / (1.0 - np.abs(y) ** 2)
    assert np.max(np.abs(norms - 1.0)) < 1e-10


def test_slope_bound_enforced():
    with pytest.raises(DomainError):
        HypersurfaceData(GeodesicArc(half_length=0.6), TrigProfile(((0.9, 1.3, 0.0),)))


# -- eikonal ------------------------------------------------------------------


def test_eikonal_flat_is_signed_distance():
    # u = 0 on a geodesic arc: the phase is the signed distance to the arc
    phase = eikonal_extend(flat_data(0.8), collar=0.3)
    rng = np.random.default_rng(2)
    s = rng.uniform(-0.6, 0.6, 100)
    tau = rng.uniform(-0.28, 0.28, 100)
    z = phase.char_point(s, tau)
    vals = phase.value(z)
    # distance to the x-axis geodesic, signed by the y side
    p0 = 0j
    T0 = np.full(z.shape, 0.5 + 0j)
    perp, _ = geodesic_offsets_z(np.full(z.shape, p0), T0, z)
    signed = np.sign(z.imag) * perp
    assert np.max(np.abs(vals - signed)) < 1e-8


def test_eikonal_gradient_norm_fd():
    phase = eikonal_extend(wavy_data(), collar=0.3)
    rng = np.random.default_rng(3)
    s = rng.uniform(-0.5, 0.5, 1000)
    tau = rng.uniform(-0.27, 0.27, 1000)
    z = phase.char_point(s, tau)
    step = 1e-5
    gx = (phase.value(z + step) - phase.value(z - step)) / (2 * step)
    gy = (phase.value(z + 1j * step) - phase.value(z - 1j * step)) / (2 * step)
    norm = (1.0 - np.abs(z) ** 2) / 2.0 * np.hypot(gx, gy)
    assert np.max(np.abs(norm - 1.0)) < 1e-8


def test_eikonal_characteristic_identity():
    data = wavy_data()
    phase = eikonal_extend(data, collar=0.3)
    s = np.linspace(-0.5, 0.5, 40)
    tau = np.full(40, 0.3 * 0.9)
    z = phase.char_point(s, tau)
    got = phase.value(z)
    want = data.profile(s) + tau
    assert np.max(np.abs(got - want)) < 1e-12


def test_eikonal_gradient_is_exact_unit():
    phase = eikonal_extend(wavy_data(), collar=0.3)
    z = phase.char_point(np.array([0.2]), np.array([0.1]))
    g = phase.gradient(z)
    assert abs(2 * np.abs(g[0]) / (1 - np.abs(z[0]) ** 2) - 1.0) < 1e-12


def test_eikonal_out_of_domain():
    phase = eikonal_extend(flat_data(0.4), collar=0.2)
    with pytest.raises(OutOfDomainError):
        phase.value(np.array([0.9 + 0.3j]))


def test_collar_too_wide_for_focusing_profile():
    # |u''| large enough that |u0| > 1 somewhere: finite focal time
    data = HypersurfaceData(GeodesicArc(half_length=0.6),
                            TrigProfile(((0.28, 2.4, np.pi / 2),)))
    u0max = np.max(np.abs(data.initial_shape(np.linspace(-0.6, 0.6, 500))))
    t_star = np.arctanh(1.0 / u0max)
    assert u0max > 1.0
    with pytest.raises(CollarError):
        eikonal_extend(data, collar=t_star + 0.05)
    eikonal_extend(data, collar=0.2)   # narrow collar is fine


def test_hessian_shape_matches_riccati_transport():
    # the transverse Hessian eigenvalue along a characteristic follows the
    # closed-form shape evolution
    from hypwave.flow import riccati_evolve
    data = wavy_data()
    phase = eikonal_extend(data, collar=0.3)
    s0 = 0.21
    u0 = float(data.initial_shape(np.array([s0]))[0])
    for tau in (0.05, 0.15, 0.25):
        z = phase.char_point(np.array([s0]), np.array([tau]))
        H = phase.hessian(z)
        assert H[0, 1, 1] == pytest.approx(riccati_evolve(u0, tau, 1.0), abs=1e-7)


def test_hessian_fd_along_geodesics():
    # second derivative of the phase along a transverse geodesic equals the
    # Riccati shape; along the gradient line it vanishes
    from hypwave.disk import exp_map_z
    data = wavy_data()
    phase = eikonal_extend(data, collar=0.3)
    z = phase.char_point(np.array([0.1]), np.array([0.12]))
    g = phase.gradient(z)
    e_along = g[0] / np.abs(g[0]) * (1 - np.abs(z[0]) ** 2) / 2.0
    e_perp = 1j * e_along
    h = 1e-4
    for e, want in ((e_perp, float(phase.hessian(z)[0, 1, 1])), (e_along, 0.0)):
        vals = [float(phase.value(np.array([exp_map_z(z[0], k * h * e)]))[0])
                for k in (-1, 0, 1)]
        d2 = (vals[0] - 2 * vals[1] + vals[2]) / h ** 2
        assert d2 == pytest.approx(want, abs=5e-4)


# -- chart phases --------------------------------------------------------------


def test_sheared_phase_gradient_fd():
    ph = ChartPolynomialPhase()
    rng = np.random.default_rng(5)
    z = (rng.uniform(-0.3, 0.3, 50) + 1j * rng.uniform(-0.3, 0.3, 50))
    step = 1e-6
    gx = (ph.value(z + step) - ph.value(z - step)) / (2 * step)
    gy = (ph.value(z + 1j * step) - ph.value(z - 1j * step)) / (2 * step)
    grad = ph.gradient(z)
    fac = ((1.0 - np.abs(z) ** 2) / 2.0) ** 2
    assert np.max(np.abs(grad - fac * (gx + 1j * gy))) < 1e-8
    norm = (1.0 - np.abs(z) ** 2) / 2.0 * np.hypot(gx, gy)
    assert np.max(np.abs(ph.gradient_norm(z) - norm)) < 1e-8


def test_sheared_phase_shape_fd():
    # transverse second derivative along a geodesic vs the closed form
    from hypwave.disk import exp_map_z
    ph = ChartPolynomialPhase()
    z0 = 0.21 - 0.13j
    g = ph.gradient(np.array([z0]))[0]
    lam = float(ph.gradient_norm(np.array([z0]))[0])
    e_perp = 1j * g / abs(g) * (1 - abs(z0) ** 2) / 2.0
    h = 1e-4
    vals = [float(ph.value(exp_map_z(z0, k * h * e_perp))) for k in (-1, 0, 1)]
    d2 = (vals[0] - 2 * vals[1] + vals[2]) / h ** 2
    assert float(ph.transverse_shape(np.array([z0]))[0]) == pytest.approx(d2 / lam, abs=1e-5)


def test_radial_phase_properties():
    ph = RadialPhase(center=0.1 + 0.05j, slope=1.1, d_lo=0.6, d_hi=1.2)
    z = np.array([0.45 + 0.3j])
    d = float(distance_z(z, ph.center)[0])
    assert float(ph.gradient_norm(z)[0]) == pytest.approx(1.1 * d, rel=1e-12)
    assert float(ph.transverse_shape(z)[0]) == pytest.approx(1.0 / np.tanh(d), rel=1e-12)
    lo, hi = ph.lam_range()
    assert lo == pytest.approx(1.1 * 0.6)


def test_radial_phase_gradient_fd():
    ph = RadialPhase(center=0.1 + 0.05j, slope=0.9)
    z = np.array([0.4 + 0.25j, -0.2 + 0.35j])
    step = 1e-6
    gx = (ph.value(z + step) - ph.value(z - step)) / (2 * step)
    gy = (ph.value(z + 1j * step) - ph.value(z - 1j * step)) / (2 * step)
    fac = ((1.0 - np.abs(z) ** 2) / 2.0) ** 2
    assert np.max(np.abs(ph.gradient(z) - fac * (gx + 1j * gy))) < 1e-7


# -- amplitude and energy -------------------------------------------------------


def test_bump_support_and_mass():
    amp = BumpAmplitude(0.1 + 0.05j, 0.4, 1.3)
    assert amp(np.array([0.1 + 0.05j]))[0] == pytest.approx(1.3)
    far = np.array([0.8 + 0.3j])
    assert amp(far)[0] == 0.0
    # quadrature mass vs a dense Riemann sum over the support annuli
    r = np.linspace(0, 0.4, 40001)
    prof = (1.0 - (r / 0.4) ** 2) ** 6
    riemann = 1.3 ** 2 * 2 * np.pi * np.trapezoid(prof * np.sinh(r), r)
    assert amp.l2_mass == pytest.approx(riemann, rel=1e-6)


def test_energy_measure_monochromatic_atom(small_state):
    em = energy_measure(small_state)
    assert em.lam.size == 1
    assert em.lam[0] == pytest.approx(small_state.speed)
    assert em.mass == pytest.approx(small_state.amplitude.l2_mass, rel=1e-6)


def test_energy_measure_polychromatic_binning():
    ph = RadialPhase(center=0j, slope=1.0, d_lo=0.6, d_hi=1.4)
    amp = BumpAmplitude(complex(np.tanh(0.5)), 0.35)   # annulus around d = 1
    state = PolychromaticState(ph, amp)
    edges = np.linspace(0.64, 1.36, 13)
    em = energy_measure(state, n_quad=256, edges=edges)
    assert em.mass == pytest.approx(amp.l2_mass, rel=1e-6)
    # independent oracle: dense Cartesian chart grid with hyperbolic area
    c = amp.center
    half = 0.26
    g = np.linspace(-half, half, 2401)
    X, Y = np.meshgrid(c.real + g, c.imag + g, indexing="ij")
    z = (X + 1j * Y).ravel()
    cell = (g[1] - g[0]) ** 2
    w = amp(z) ** 2 * (2.0 / (1.0 - np.abs(z) ** 2)) ** 2 * cell
    keep = w > 0
    lam = ph.gradient_norm(z[keep])
    hist_o = np.histogram(lam, bins=edges, weights=w[keep])[0]
    hist_o = hist_o / hist_o.sum()
    idx = np.clip(np.digitize(em.lam, edges) - 1, 0, 11)
    hist_e = np.bincount(idx, weights=em.weights, minlength=12)
    hist_e = hist_e / hist_e.sum()
    assert 0.5 * np.sum(np.abs(hist_o - hist_e)) < 1e-3


def test_admissibility_flag(small_state):
    assert small_state.admissible()
    assert small_state.data.shape_margin("unstable_neutral") > 0
