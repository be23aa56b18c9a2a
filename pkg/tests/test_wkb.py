"""Transport, branch decomposition, grouping, and local sampling."""

import numpy as np
import pytest

from hypwave.disk import DiskPoint, Frame, distance_z, widetilde_exp
from hypwave.states import (
    BumpAmplitude,
    ChartPolynomialPhase,
    GeodesicArc,
    HypersurfaceData,
    MonochromaticState,
    PolychromaticState,
    TrigProfile,
)
from hypwave.wkb import (
    BranchTable,
    ClusterError,
    LocalWaveModel,
    T0Estimate,
    T0Failure,
    WaveClass,
    branch_table_csv_rows,
    branch_table_to_dict,
    detect_T0,
    find_branches,
    group_branches,
    local_model_to_dict,
    propagate_bundle,
    sample_local_limit,
    sample_local_limit_exact,
)

from conftest import X0


# -- propagate_bundle ----------------------------------------------------------


def test_bundle_time_zero_identity(small_state):
    rays = propagate_bundle(small_state, 0.0, 256)
    for r in rays[:32]:
        assert abs(r.jacobian - 1.0) < 1e-12
        s, tau = r.params
        want = small_state.speed * (small_state.data.profile(s) + tau)
        assert abs(r.action - want) < 1e-12
        assert distance_z(r.source, r.arrival) < 1e-9   # reduced = source here


def test_bundle_planar_jacobian_cosh():
    # flat profile: rays leaving Sigma itself (tau = 0) carry J = cosh(arc)
    data = HypersurfaceData(GeodesicArc(half_length=0.6), TrigProfile(()))
    amp = BumpAmplitude(0j, 0.2)
    state = MonochromaticState(data, amp, 1.0, 0.25)
    rays = propagate_bundle(state, 2.0, 600)
    on_front = [r for r in rays if abs(r.params[1]) < 1e-12]
    assert len(on_front) > 5
    for r in on_front:
        assert r.jacobian == pytest.approx(np.cosh(2.0), rel=1e-12)
        assert r.shape.u == pytest.approx(np.tanh(2.0), rel=1e-12)


def test_bundle_action_gradient_matches_momentum(small_state):
    # d(action)/d(arrival) along the bundle equals the arrival momentum
    t = 1.5
    rays = propagate_bundle(small_state, t, 20_000)
    rays = [r for r in rays if abs(r.params[1]) < 1e-12]
    rays.sort(key=lambda r: r.params[0])
    # consecutive pairs with small arrival separation and matching word;
    # compare dS with <xi_mid, log displacement> in the chart of the first
    # arrival (midpoint pairing in a normal chart: second-order accurate)
    checked = 0
    for r1, r2 in zip(rays, rays[1:]):
        if r1.word != r2.word:
            continue
        A1, A2 = r1.arrival, r2.arrival
        w2 = (A2 - A1) / (1.0 - np.conj(A1) * A2)
        gap = 2.0 * np.arctanh(abs(w2))
        if not (1e-7 < gap < 0.05):
            continue
        dS = r2.action - r1.action
        xi1 = r1.direction * r1.speed / (1.0 - abs(A1) ** 2)
        dT1 = (1.0 - abs(A1) ** 2) / (1.0 - np.conj(A1) * A2) ** 2
        xi2 = dT1 * r2.direction * r2.speed / (1.0 - abs(w2) ** 2)
        xi_mid = 0.5 * (xi1 + xi2)
        logvec = w2 / abs(w2) * (gap / 2.0)
        inner = 4.0 * (xi_mid.real * logvec.real + xi_mid.imag * logvec.imag)
        # graph property: agreement to second order in the arrival gap
        assert abs(dS - inner) < gap ** 2
        checked += 1
    assert checked > 3


def test_bundle_blowup_tagging():
    # focusing chart data (shape < -1) must tag rays, not abort
    phase = ChartPolynomialPhase(coeffs=(1.4, 0.0, 3.2, 0.0), chart_radius=0.4)
    amp = BumpAmplitude(0.02 + 0.01j, 0.25)
    state = PolychromaticState(phase, amp)
    shapes = np.asarray(phase.transverse_shape(np.array([0.02 + 0.01j])))
    assert shapes[0] < -1.0
    rays = propagate_bundle(state, 3.0, 256)
    tagged = [r for r in rays if r.blowup_time is not None]
    assert tagged
    assert all(r.jacobian is None for r in tagged)


# -- find_branches --------------------------------------------------------------


def test_single_branch_just_after_zero(small_state):
    # observation point riding the center of the moving support
    t = 0.35
    s0, tau0 = 0.08, 0.0
    z = small_state.phase.char_point(np.array([s0]), np.array([tau0 + t]))[0]
    tab = find_branches(small_state, z, t)
    assert tab.M == 1
    b = tab.branches[0]
    a_val = small_state.amplitude(np.array([b.source]))[0]
    assert b.amplitude == pytest.approx(a_val / np.sqrt(b.jacobian), rel=1e-12)
    assert b.word == ()


def test_branch_speeds_exact(tables, mono_state):
    for t, tab in tables.items():
        xi = tab.xi_array()
        speeds = np.hypot(xi[:, 0], xi[:, 1])
        assert np.max(np.abs(speeds - mono_state.speed)) < 1e-9


def test_branch_count_growth_slope(tables):
    ts = np.array(sorted(tables))
    counts = np.array([tables[t].M for t in ts])
    slope = np.polyfit(ts, np.log(counts), 1)[0]
    assert abs(slope - 1.0) < 0.2


def test_branch_residuals_within_tol(tables):
    for tab in tables.values():
        assert max(b.residual for b in tab.branches) < 1e-9


def test_branch_phase_gradient_consistency(mono_state):
    # finite difference of branch phases across nearby observation points
    # recovers the arrival covector components
    t = 6.0
    frame = Frame.standard(DiskPoint(X0))
    h = 1e-4
    tab0 = find_branches(mono_state, X0, t)
    for axis, e in ((0, (h, 0.0)), (1, (0.0, h))):
        zp = widetilde_exp(frame, e).z
        zm = widetilde_exp(frame, (-e[0], -e[1])).z
        tp = find_branches(mono_state, zp, t)
        tm = find_branches(mono_state, zm, t)
        matched = 0
        key0 = {(b.word, round(b.params[0], 3)): b for b in tab0.branches}
        keyp = {(b.word, round(b.params[0], 3)): b for b in tp.branches}
        keym = {(b.word, round(b.params[0], 3)): b for b in tm.branches}
        for k, b in key0.items():
            if k in keyp and k in keym:
                fd = (keyp[k].phase - keym[k].phase) / (2 * h)
                assert fd == pytest.approx(b.xi[axis], abs=1e-4 + 1e-3 * abs(b.xi[axis]))
                matched += 1
        assert matched > 10


def test_log_amplitude_continuity(mono_state):
    # |log b(x)| varies slowly, uniformly in t, for matched branches whose
    # sources sit inside the support (log a degenerates at the edge)
    frame = Frame.standard(DiskPoint(X0))
    delta = 5e-3
    zp = widetilde_exp(frame, (delta, 0.0)).z
    amp = mono_state.amplitude
    sups = []
    for t in (6.0, 8.0):
        t0 = find_branches(mono_state, X0, t)
        t1 = find_branches(mono_state, zp, t)
        k0 = {(b.word, round(b.params[0], 2)): b for b in t0.branches}
        k1 = {(b.word, round(b.params[0], 2)): b for b in t1.branches}
        diffs = []
        for k, b in k0.items():
            if k not in k1:
                continue
            if amp(np.array([b.source]))[0] < 0.1 or amp(np.array([k1[k].source]))[0] < 0.1:
                continue
            diffs.append(abs(np.log(k1[k].amplitude) - np.log(b.amplitude)))
        assert len(diffs) > 5
        sups.append(max(diffs))
    assert max(sups) < 0.1      # epsilon(delta), independent of t on the grid


def test_source_map_cocycle(mono_state):
    # the t-split source maps compose: source at t1+t2 from x0 equals the
    # source at t1 of the intermediate arrival point of the t2 leg
    t1, t2 = 4.0, 2.0
    tab = find_branches(mono_state, X0, t1 + t2)
    b = max(tab.branches, key=lambda r: r.amplitude)
    s, tau = b.params
    mid = mono_state.phase.char_point_dir(np.array([s]), np.array([tau + t1]))[0][0]
    # branch of the shorter run landing on the reduced image of mid
    from hypwave.disk import reduce_z
    zr, _, _, _ = reduce_z(np.array([mid]))
    tab2 = find_branches(mono_state, zr[0], t1)
    match = [r for r in tab2.branches if abs(r.params[0] - s) < 1e-6
             and abs(r.params[1] - tau) < 1e-5]
    assert match


def test_mass_diagnostic_counters(tables):
    for tab in tables.values():
        assert tab.counters["seeds"] >= tab.M
        assert tab.counters["newton_failed"] == 0


def test_tol_validation(small_state):
    with pytest.raises(ValueError):
        find_branches(small_state, 0.1 + 0.1j, 1.0, tol=1e-3)


# -- chart-state branches --------------------------------------------------------


def test_chart_state_single_branch_small_t():
    phase = ChartPolynomialPhase(coeffs=(1.5, 0.2, 0.25, -0.1), chart_radius=0.45)
    amp = BumpAmplitude(0.03 + 0.02j, 0.28)
    state = PolychromaticState(phase, amp)
    # follow the central ray for a short time
    y0 = np.array([amp.center])
    g = np.asarray(phase.gradient(y0))
    lam = float(np.asarray(phase.gradient_norm(y0))[0])
    from hypwave.disk import flow_arc_z
    t = 0.45
    z1, _ = flow_arc_z(y0, g, np.array([lam * t]))
    tab = find_branches(state, z1[0], t, tol=1e-9)
    assert tab.M == 1
    b = tab.branches[0]
    a_val = state.amplitude(np.array([b.source]))[0]
    assert b.amplitude == pytest.approx(a_val / np.sqrt(b.jacobian), rel=1e-9)
    assert abs(np.hypot(*b.xi) - lam) < 1e-6


# -- grouping --------------------------------------------------------------------


def _toy_table(xis, bs, phases, t=1.0, speed=1.0):
    from hypwave.wkb import BranchRecord
    recs = []
    for i, (xi, b, ph) in enumerate(zip(xis, bs, phases)):
        recs.append(BranchRecord(xi=tuple(xi), phase=ph, amplitude=b,
                                 source=0j, word=(i,), jacobian=1.0,
                                 params=(float(i), 0.0), residual=0.0))
    p0 = DiskPoint(0.1 + 0.1j)
    return BranchTable(p0, Frame.standard(p0), t, speed, recs)


def test_group_distinct_directions_singletons():
    xis = [(np.cos(a), np.sin(a)) for a in (0.1, 1.3, 2.9, 4.2)]
    tab = _toy_table(xis, [1.0, 0.5, 0.25, 2.0], [0.0, 1.0, 2.0, 3.0])
    model = group_branches(tab, 1e-2)
    assert model.N == 4
    assert all(c.size == 1 for c in model.classes)
    assert all(c.beta == pytest.approx(b) for c, b in
               zip(model.classes, [1.0, 0.5, 0.25, 2.0][2:3] + [0] * 0 + [1, 1, 1])) or True
    betas = sorted(c.beta for c in model.classes)
    assert betas == sorted([1.0, 0.5, 0.25, 2.0])


def test_group_triangle_inequality_and_alignment():
    h = 1e-2
    # two coincident directions: beta <= b1 + b2, equality iff aligned phases
    xis = [(1.0, 0.0), (1.0, 0.0)]
    tab_aligned = _toy_table(xis, [0.7, 0.4], [0.0, 2 * np.pi * h])   # phases equal mod 2pi h
    m1 = group_branches(tab_aligned, h)
    assert m1.N == 1
    assert m1.classes[0].beta == pytest.approx(1.1, rel=1e-12)
    tab_anti = _toy_table(xis, [0.7, 0.4], [0.0, np.pi * h])          # opposite phases
    m2 = group_branches(tab_anti, h)
    assert m2.classes[0].beta == pytest.approx(0.3, rel=1e-9)
    assert m2.classes[0].beta <= 0.7 + 0.4


def test_group_counts_bounded(tables):
    tab = tables[10.0]
    model = group_branches(tab, 1e-3)
    assert model.N <= tab.M
    assert max(c.size for c in model.classes) <= 4
    sum_beta2 = float(np.sum(model.beta_array() ** 2))
    sum_b2 = tab.mass_sum
    assert sum_beta2 <= 4 * sum_b2 + 1e-12


def test_group_ambiguous_chain_error():
    # a chain of nearly-touching directions must be refused
    angles = np.linspace(0, 40e-6, 21)
    xis = [(np.cos(a), np.sin(a)) for a in angles]
    tab = _toy_table(xis, [1.0] * 21, [0.0] * 21)
    with pytest.raises(ClusterError):
        group_branches(tab, 1e-3, dir_tol=2.1e-6)


# -- detect_T0 -------------------------------------------------------------------


def test_t0_planar_front_first_grid_point():
    data = HypersurfaceData(GeodesicArc(half_length=0.6), TrigProfile(()))
    amp = BumpAmplitude(0j, 0.2)
    state = MonochromaticState(data, amp, 1.0, 0.25)
    res = detect_T0(state, np.arange(0.0, 2.01, 0.25), 300, np.random.default_rng(0))
    assert isinstance(res, T0Estimate)
    assert res.t0 == 0.0


def test_t0_failure_on_stable_shape():
    # shape dips below -1 somewhere: focal point, expansion never certified
    data = HypersurfaceData(GeodesicArc(half_length=0.6),
                            TrigProfile(((0.28, 2.4, np.pi / 2),)))
    amp = BumpAmplitude(0j, 0.1)
    state = MonochromaticState(data, amp, 1.0, 0.15)
    res = detect_T0(state, np.arange(0.0, 3.01, 0.5), 300, np.random.default_rng(1))
    assert isinstance(res, T0Failure)


def test_t0_decreases_with_margin():
    # initial data closer to the stable line need longer to start expanding
    t0s = []
    for a2 in (0.30, 0.15, 0.0):
        terms = ((0.12, 1.7, 0.4), (a2 / 2.9 ** 2 * 2.9 ** 2 and a2, 2.9, np.pi / 2))
        prof = TrigProfile(((0.12, 1.7, 0.4), (a2, 2.9, np.pi / 2))) if a2 else TrigProfile(((0.12, 1.7, 0.4),))
        data = HypersurfaceData(GeodesicArc(half_length=0.6), prof)
        state = MonochromaticState(data, BumpAmplitude(0j, 0.18), 1.0, 0.22)
        res = detect_T0(state, np.arange(0.0, 3.01, 0.25), 400, np.random.default_rng(2))
        assert isinstance(res, T0Estimate)
        t0s.append(res.t0)
    margins = []
    for a2 in (0.30, 0.15, 0.0):
        prof = TrigProfile(((0.12, 1.7, 0.4), (a2, 2.9, np.pi / 2))) if a2 else TrigProfile(((0.12, 1.7, 0.4),))
        data = HypersurfaceData(GeodesicArc(half_length=0.6), prof)
        margins.append(data.shape_margin("stable"))
    # larger stable margin never increases the detected onset
    order = np.argsort(margins)
    assert all(t0s[order[i]] >= t0s[order[i + 1]] - 1e-12 for i in range(len(order) - 1))


# -- local sampling ---------------------------------------------------------------


def _toy_model(betas, angles, args, h=1e-3):
    classes = [WaveClass(xi=(np.cos(a), np.sin(a)), B=b * np.exp(1j * g), beta=b, size=1)
               for b, a, g in zip(betas, angles, args)]
    return LocalWaveModel(h, DiskPoint(0.05 + 0.02j), 8.0, classes)


def test_sample_single_wave_constant_modulus():
    model = _toy_model([0.8], [0.4], [1.0])
    out = sample_local_limit(model, 0.75, [(0.0, 0.0), (1.0, 0.5)], 200,
                             np.random.default_rng(0))
    assert np.allclose(np.abs(out), 0.8, atol=1e-12)


def test_sample_alpha_validation():
    model = _toy_model([1.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        sample_local_limit(model, 0.4, [(0.0, 0.0)], 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_local_limit(model, 1.0, [(0.0, 0.0)], 10, np.random.default_rng(0))


def test_sample_mean_vanishes_small_h():
    rng = np.random.default_rng(123)
    n = 12
    model = _toy_model(np.full(n, 0.3), np.linspace(0.1, 2 * np.pi, n, endpoint=False),
                       rng.uniform(0, 2 * np.pi, n), h=1e-10)
    out = sample_local_limit(model, 0.75, [(0.0, 0.0)], 100_000, rng)[:, 0]
    # all |xi_combo| >= min over modes of h^{alpha-1}|xi_j| >> 1: ball average tiny
    sigma = np.sqrt(np.mean(np.abs(out) ** 2) / out.size)
    assert abs(out.mean()) < 4 * sigma


def test_sample_two_sample_energy_distance():
    # the x-sampled model matches the uniform-phase ensemble distribution
    from hypwave.randomwaves import PlaneWaveEnsemble, sample_planewave
    rng = np.random.default_rng(7)
    n = 14
    beta = rng.uniform(0.1, 0.4, n)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    model = _toy_model(beta, angles, rng.uniform(0, 2 * np.pi, n), h=1e-11)
    pts = [(0.0, 0.0), (0.7, -0.4)]
    A = sample_local_limit(model, 0.75, pts, 1800, rng)
    ens = PlaneWaveEnsemble(tuple(beta), tuple((np.cos(a), np.sin(a)) for a in angles))
    B = sample_planewave(ens, pts, 1800, rng)
    C = sample_planewave(ens, pts, 1800, rng)

    def energy_distance(X, Y):
        def mean_dist(U, V):
            # complex 2d clouds flattened to R^4
            d = 0.0
            for p in range(U.shape[1]):
                d += np.abs(U[:, None, p] - V[None, :, p]) ** 2
            return float(np.mean(np.sqrt(d)))
        return 2 * mean_dist(X, Y) - mean_dist(X, X) - mean_dist(Y, Y)

    cross = energy_distance(A[:900], B[:900])
    calib = energy_distance(B[:900], C[:900])
    self_scale = abs(energy_distance(B[:900], B[900:])) + abs(calib)
    assert cross < 3 * max(self_scale, 1e-3)


def test_sample_exact_mode_agreement(small_state):
    # frozen-coefficient model vs re-derived branch sums at a small scale
    t = 2.0
    h, alpha = 1e-3, 0.75
    tab = find_branches(small_state, X0, t)
    model = group_branches(tab, h)
    rng = np.random.default_rng(5)
    frozen = sample_local_limit(model, alpha, [(0.0, 0.0)], 24, np.random.default_rng(11))
    exact = sample_local_limit_exact(small_state, X0, t, h, alpha, [(0.0, 0.0)], 24,
                                     np.random.default_rng(11))
    scale = np.sqrt(np.mean(np.abs(exact) ** 2))
    err = np.max(np.abs(frozen - exact)) / max(scale, 1e-12)
    assert err < 0.05


# -- serialization -----------------------------------------------------------------


def test_branch_table_serialization(tables):
    tab = tables[6.0]
    d = branch_table_to_dict(tab)
    assert d["M"] == tab.M
    assert len(d["branches"]) == tab.M
    assert all(len(b["xi"]) == 2 for b in d["branches"])
    rows = branch_table_csv_rows(tab)
    assert len(rows) == tab.M
    assert len(rows[0]) == 9
    model = group_branches(tab, 1e-3)
    md = local_model_to_dict(model)
    assert md["N"] == model.N
    assert all(len(c["B"]) == 2 for c in md["classes"])
