import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ashc.certificates import QuadraticCertificate
from ashc.cuk import CukParams, build_cuk, kappa_map, m_map
from ashc.engine import (
    AbstractionMaps,
    BoundConstants,
    InterfaceSpec,
    ResidualReport,
    asymptotic_error_bound,
    dissipation_residual,
    interface_u,
    invariance_residual_p,
    jacobian_fd_error,
    kernel_condition_residual,
    least_squares_gain,
    link_coefficients,
    max_form_error_bound,
    mrelation_residuals,
    output_consistency_residual,
    residual_report,
    scan_vartheta_bound,
    simulation_fn_rate,
    simulation_fn_value,
    transient_error_bound,
    vartheta,
    vartheta_norm,
)
from ashc.linalg import CertificateError, SymMatrix
from ashc.systems import AbstractSystem, Box, DomainError, GridSpec

P = CukParams()
XI_GRID = np.linspace(0.0, 0.95, 1001)
PAPER_BC = BoundConstants(c0=0.52, lam=2.0, epsilon=1.0, d_bar=12.35)


def fixed_interface(cuk, q):
    return InterfaceSpec(gain_q=lambda xi, x: np.array([[q]]), saturation=((0.0,), (1.0,)))


def random_pairs(cuk, rng, n):
    xis = rng.uniform(0.0, 0.95, n)
    xs = cuk.sample_box.sample(rng, n)
    return zip(xis, xs)


# --- simulation function and interface


def test_W_zero_on_manifold(cuk):
    for xi in (0.0, 0.3, 0.95):
        assert simulation_fn_value(cuk.maps, cuk.cert, xi, cuk.maps.p(xi)) == 0.0


def test_W_at_reference_initial_state(cuk):
    x0 = [1.3678, 31.0396, -0.8541, -19.1080]
    assert simulation_fn_value(cuk.maps, cuk.cert, 0.6156, x0) <= 1e-6


def test_W_output_lower_bound(cuk, rng):
    for xi, x in random_pairs(cuk, rng, 500):
        W = simulation_fn_value(cuk.maps, cuk.cert, xi, x)
        assert W >= 0.52 * (kappa_map(P, xi) - x[3]) ** 2 - 1e-9


def test_W_domain_error(cuk):
    with pytest.raises(DomainError):
        simulation_fn_value(cuk.maps, cuk.cert, 0.97, np.zeros(4))
    with pytest.raises(DomainError):
        simulation_fn_value(cuk.maps, cuk.cert, -0.01, np.zeros(4))


def test_interface_examples(cuk, rng):
    x = cuk.sample_box.sample(rng, 1)[0]
    assert interface_u(cuk.maps, cuk.interface, 0.4, x, [0.0])[0] == pytest.approx(0.4, abs=0)
    assert interface_u(cuk.maps, fixed_interface(cuk, 0.8), 0.5, x, [1.0])[0] == 1.0
    assert interface_u(cuk.maps, fixed_interface(cuk, -0.5), 0.3, x, [1.0])[0] == 0.0
    assert interface_u(cuk.maps, fixed_interface(cuk, -0.5), 0.3, x, [1.0], saturate=False)[0] == pytest.approx(-0.2)


def test_interface_spec_validation(cuk):
    with pytest.raises(ValueError):
        InterfaceSpec(gain_q=lambda xi, x: 0.0, saturation=((1.0,), (0.0,)))
    with pytest.raises(ValueError):
        InterfaceSpec(gain_q=lambda xi, x: 0.0, epsilon=0.0)
    with pytest.raises(ValueError):
        InterfaceSpec(gain_q=lambda xi, x: 0.0, epsilon=2.5).check_against(cuk.cert)


# --- least-squares gain and cross term


def test_gain_zero_when_g_vanishes(cuk):
    # g(x) = (x2/L1, (x3 - x1)/C2, -x2/L3, 0) vanishes when x2 = 0 and x1 = x3
    x = np.array([3.0, 0.0, 3.0, -10.0])
    assert np.all(cuk.plant.g(x) == 0)
    q = least_squares_gain(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, 0.5, x)
    assert np.array_equal(q, np.zeros((1, 1)))


def test_gain_normal_equations(cuk, rng):
    Me = cuk.cert.M.entries
    for xi, x in random_pairs(cuk, rng, 200):
        q = least_squares_gain(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, xi, x)
        g = cuk.plant.g(x)
        w = cuk.maps.dp_dxi(xi) @ cuk.abstract.delta(np.array([xi])) - g @ q
        scale = float(np.linalg.norm(g)) * float(np.linalg.norm(w)) + 1.0
        assert abs((g.T @ Me @ w).item()) <= 1e-8 * scale


def test_gain_minimal_against_zero(cuk, rng):
    args = (cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta)
    for xi, x in random_pairs(cuk, rng, 500):
        q = least_squares_gain(*args, xi, x)
        assert vartheta_norm(*args, xi, x, q) <= vartheta_norm(*args, xi, x, np.zeros((1, 1))) + 1e-12


def test_gain_first_order_optimality(cuk, rng):
    args = (cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta)
    xi, x = 0.45, cuk.sample_box.sample(rng, 1)[0]
    q = least_squares_gain(*args, xi, x)
    base = vartheta_norm(*args, xi, x, q)
    for _ in range(20):
        dq = rng.standard_normal((1, 1)) * 1e-3
        assert vartheta_norm(*args, xi, x, q + dq) >= base - 1e-12


def test_vartheta_at_zero(cuk):
    dp0 = cuk.maps.dp_dxi(0.0)[:, 0]
    assert np.allclose(dp0, [0.0, 12.0, -12.0 * P.G_L, -12.0], atol=1e-12)
    M = np.array(cuk.cert.M.entries)
    hand = math.sqrt(sum(dp0[i] * M[i, j] * dp0[j] for i in range(4) for j in range(4)))
    val = vartheta_norm(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, 0.0, np.zeros(4), np.zeros((1, 1)))
    assert val == pytest.approx(hand, rel=1e-12)
    assert val == pytest.approx(12.35, abs=0.01)


def test_vartheta_exact_cancellation(cuk):
    # a plant whose input direction equals dp/dxi delta at xi: q = 1 cancels it
    xi = 0.4
    target = cuk.maps.dp_dxi(xi) @ cuk.abstract.delta(np.array([xi]))
    val = vartheta_norm(cuk.maps, cuk.cert, lambda x: target, cuk.abstract.delta, xi, np.zeros(4), [[1.0]])
    assert val == 0.0
    assert np.allclose(vartheta(cuk.maps, cuk.cert, lambda x: target, cuk.abstract.delta, xi, np.zeros(4), [[1.0]]), 0)


def test_vartheta_unit_delta_max(cuk_unit):
    vals = [vartheta_norm(cuk_unit.maps, cuk_unit.cert, cuk_unit.plant.g, cuk_unit.abstract.delta, xi, np.zeros(4),
                          [[0.0]]) for xi in np.linspace(0, 0.95, 201)]
    assert 1700 <= max(vals) <= 1820


# --- scans


def test_scan_redesigned(cuk):
    res = scan_vartheta_bound(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, "zero",
                              GridSpec([0.0], [0.95], [2001]))
    assert 11.85 <= res.d_bar <= 12.85
    assert res.xi.shape == (2001, 1)


def test_scan_unit(cuk_unit):
    res = scan_vartheta_bound(cuk_unit.maps, cuk_unit.cert, cuk_unit.plant.g, cuk_unit.abstract.delta, "zero",
                              GridSpec([0.0], [0.95], [2001]))
    assert 1700 <= res.d_bar <= 1820
    assert float(res.argmax[0]) == pytest.approx(0.95)


def test_scan_two_points(cuk):
    args = (cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta)
    res = scan_vartheta_bound(*args, "zero", GridSpec([0.0], [0.95], [2]))
    ends = [vartheta_norm(*args, xi, np.zeros(4), [[0.0]]) for xi in (0.0, 0.95)]
    assert res.d_bar == max(ends)


def test_scan_constant_maps():
    M = SymMatrix(np.diag([1.0, 4.0]))
    cert = QuadraticCertificate(M, 2.0)
    col = np.array([[3.0], [1.0]])
    maps = AbstractionMaps(
        p=lambda xi: col[:, 0] * xi[0], dp_dxi=lambda xi: col, l=lambda xi: xi, m=lambda x: x[:1],
        dm_dx=lambda x: np.array([[1.0, 0.0]]), domain_V=Box([0.0], [1.0]), operating_Xy=Box([-9, -9], [9, 9]),
    )
    res = scan_vartheta_bound(maps, cert, lambda x: np.zeros((2, 1)), lambda xi: np.eye(1), "zero",
                              GridSpec([0.0], [1.0], [11]))
    assert np.allclose(res.values, math.sqrt(9 + 4))
    assert float(res.argmax[0]) == 0.0  # lowest-index tie break


def test_scan_least_squares_not_above_zero_policy(cuk, rng):
    args = (cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta)
    grid = GridSpec([0.0], [0.95], [21])
    xs = cuk.sample_box.sample(rng, 20)
    ls = scan_vartheta_bound(*args, "least-squares", grid, xs)
    zero = scan_vartheta_bound(*args, "zero", grid)
    assert np.all(ls.values <= zero.values + 1e-9)
    with pytest.raises(ValueError):
        scan_vartheta_bound(*args, "least-squares", grid)
    with pytest.raises(ValueError):
        scan_vartheta_bound(*args, "bogus", grid)
    with pytest.raises(ValueError):
        scan_vartheta_bound(*args, "least-squares", grid, xs, cap=100)


def test_scan_outside_domain(cuk):
    with pytest.raises(DomainError):
        scan_vartheta_bound(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, "zero", GridSpec([0.0], [1.0], [3]))


def test_scan_csv(cuk, tmp_path):
    res = scan_vartheta_bound(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, "zero",
                              GridSpec([0.0], [0.95], [5]))
    path = tmp_path / "s.csv"
    res.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "xi,vartheta_norm" and len(lines) == 6


# --- bounds


def test_asymptotic_bound_examples():
    assert asymptotic_error_bound(PAPER_BC, 0.0) == 0.0
    assert asymptotic_error_bound(PAPER_BC, 60.0) == pytest.approx(1453.22, abs=0.05)
    assert asymptotic_error_bound(PAPER_BC, 30.0) == pytest.approx(726.61, abs=0.05)
    with pytest.raises(ValueError):
        asymptotic_error_bound(PAPER_BC, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e4))
def test_asymptotic_bound_homogeneous(v):
    assert asymptotic_error_bound(PAPER_BC, 2 * v) == pytest.approx(2 * asymptotic_error_bound(PAPER_BC, v),
                                                                    rel=1e-12, abs=1e-12)


def test_bound_constants_validation():
    with pytest.raises(ValueError):
        BoundConstants(0.52, 2.0, 2.0, 12.35)
    with pytest.raises(ValueError):
        BoundConstants(0.0, 2.0, 1.0, 12.35)
    assert PAPER_BC.eta(3.0) == 3.0
    assert PAPER_BC.gamma(2.0) == pytest.approx(12.35**2 * 4)
    assert PAPER_BC.alpha_h(2.0) == pytest.approx(2.08)


def test_transient_bound_examples():
    for t in (0.0, 1.0, 100.0):
        assert transient_error_bound(PAPER_BC, 0.0, t, 0.0) == 0.0
    assert transient_error_bound(PAPER_BC, 5.0, 0.0, 0.0) == pytest.approx(math.sqrt(5.0 / 0.52))
    lim = transient_error_bound(PAPER_BC, 5.0, 1e3, 60.0)
    assert lim == pytest.approx(asymptotic_error_bound(PAPER_BC, 60.0) / math.sqrt(2), rel=1e-12)
    with pytest.raises(ValueError):
        transient_error_bound(PAPER_BC, -1.0, 0.0)
    with pytest.raises(ValueError):
        transient_error_bound(PAPER_BC, 1.0, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e4), st.floats(0, 100), st.floats(0, 10), st.floats(0, 100))
def test_transient_bound_monotone(W0, v, t1, dt):
    assert transient_error_bound(PAPER_BC, W0, t1 + dt, v) <= transient_error_bound(PAPER_BC, W0, t1, v) * (1 + 1e-12)


def test_max_form_bound():
    assert max_form_error_bound(PAPER_BC, 0.0, 1.0, 60.0) == pytest.approx(1453.22, abs=0.05)
    assert max_form_error_bound(PAPER_BC, 1e12, 0.0, 0.0) == pytest.approx(math.sqrt(1e12 / 0.52))


def test_bound_consistent_with_scanned_dbar(cuk):
    res = scan_vartheta_bound(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, "zero",
                              GridSpec([0.0], [0.95], [2001]))
    bc = BoundConstants(0.52, 2.0, 1.0, res.d_bar)
    ref = math.sqrt(2 / (0.52 * 1 * 1)) * res.d_bar * 60
    assert asymptotic_error_bound(bc, 60.0) == pytest.approx(ref, rel=1e-2)


# --- dissipation


def test_dissipation_on_manifold_with_zero_input(cuk):
    for xi in (0.0, 0.2, 0.6156, 0.95):
        x = cuk.maps.p(xi)
        args = (cuk.maps, cuk.cert, cuk.interface, cuk.plant, cuk.abstract, xi, x, [0.0])
        assert abs(simulation_fn_rate(*args)) <= 1e-9
        assert dissipation_residual(*args) <= 1e-9


def test_dissipation_cloud(cuk, rng):
    worst = -np.inf
    for xi, x in random_pairs(cuk, rng, 1000):
        v = rng.uniform(-60, 60)
        worst = max(worst, dissipation_residual(cuk.maps, cuk.cert, cuk.interface, cuk.plant, cuk.abstract,
                                                xi, x, [v]))
    assert worst <= 1e-6


def test_zero_input_decay(cuk, rng):
    for xi, x in random_pairs(cuk, rng, 200):
        rate = simulation_fn_rate(cuk.maps, cuk.cert, cuk.interface, cuk.plant, cuk.abstract, xi, x, [0.0])
        W = simulation_fn_value(cuk.maps, cuk.cert, xi, x)
        assert rate <= -(2.0 - 1.0) * W + 1e-6


# --- invariance and output consistency


def test_invariance_grid(cuk):
    worst = max(invariance_residual_p(cuk.maps, cuk.plant, xi, cuk.abstract.phi_bar) for xi in XI_GRID)
    assert worst <= 1e-9
    assert np.allclose(cuk.maps.p(0.0), [0, 12, 0, 0])
    assert invariance_residual_p(cuk.maps, cuk.plant, 0.0, cuk.abstract.phi_bar) == 0.0


def test_invariance_detects_perturbed_p():
    bad = build_cuk(p4_offset=1.0, validate=False)
    assert invariance_residual_p(bad.maps, bad.plant, 0.5, bad.abstract.phi_bar) > 0.1


def test_output_consistency_examples(cuk):
    oc = lambda xi: output_consistency_residual(cuk.maps, cuk.abstract.kappa, cuk.plant.h, xi)  # noqa: E731
    assert oc(0.0) == 0.0
    assert oc(0.6156) <= 1e-10
    assert kappa_map(P, 0.6156) == pytest.approx(-19.1080, abs=5e-4)
    assert oc(0.5) <= 1e-10
    assert kappa_map(P, 0.5) == pytest.approx(-11.973, abs=1e-3)
    assert max(oc(xi) for xi in XI_GRID) <= 1e-10


def test_left_inverse_and_output_recovery(cuk):
    for xi in np.linspace(0, 0.95, 2001):
        assert abs(cuk.maps.m(cuk.maps.p(xi))[0] - xi) <= 1e-9
    for y in np.linspace(-120, 0, 1001):
        assert abs(kappa_map(P, m_map(P, y)) - y) <= 1e-9


# --- m-relation links


def test_mrelation_residuals_cloud(cuk, rng):
    xs = cuk.sample_box.sample(rng, 1000)
    ra, rb = zip(*(mrelation_residuals(cuk.maps, cuk.plant, cuk.abstract, x) for x in xs))
    assert max(ra) <= 1e-8
    assert max(rb) == 0.0


def test_link_c_zero_and_b_zero(cuk, rng):
    for x in cuk.sample_box.sample(rng, 50):
        _, c = link_coefficients(cuk.maps, cuk.plant, cuk.abstract, x)
        assert np.all(c == 0)
        x = x.copy()
        x[2] = P.G_L * x[3]
        b, _ = link_coefficients(cuk.maps, cuk.plant, cuk.abstract, x)
        assert b[0] == 0.0


def _m_oracle(x4):
    E, k = 12.0, 0.0447 * 0.05
    return (-E + 2 * x4 + math.sqrt(E * E - 4 * k * x4 * x4)) / (2 * (k + 1) * x4 - 2 * E)


B_REF_X0 = 88.49798627858105  # frozen regression value, redesigned delta


def test_link_b_at_reference_state(cuk, cuk_unit):
    x = np.array([10.3256, 2.0561, -4.9785, -6.9732])
    h = 1e-5
    dm = (_m_oracle(x[3] + h) - _m_oracle(x[3] - h)) / (2 * h)
    mx = _m_oracle(x[3])
    D = (mx - 1) ** 2 + 0.0447 * 0.05 * mx * mx
    f4 = (x[2] - 0.0447 * x[3]) / 0.011
    b, _ = link_coefficients(cuk.maps, cuk.plant, cuk.abstract, x)
    assert b[0] == pytest.approx(dm * f4 / D**2, rel=1e-8)
    assert b[0] == pytest.approx(B_REF_X0, rel=1e-12)
    bu, _ = link_coefficients(cuk_unit.maps, cuk_unit.plant, cuk_unit.abstract, x)
    assert bu[0] == pytest.approx(dm * f4, rel=1e-8)


def test_link_rank_deficiency(cuk):
    absys = AbstractSystem(1, 1, lambda z: np.zeros(1), lambda z: np.zeros((1, 1)), lambda z: z)
    with pytest.raises(CertificateError):
        link_coefficients(cuk.maps, cuk.plant, absys, np.array([1.0, 1.0, 1.0, -5.0]))


def test_link_domain_error(cuk):
    with pytest.raises(DomainError):
        mrelation_residuals(cuk.maps, cuk.plant, cuk.abstract, np.array([0.0, 0.0, 0.0, 5.0]))


# --- kernel condition


def test_kernel_condition(cuk, rng):
    xs = cuk.sample_box.sample(rng, 1000)
    assert max(kernel_condition_residual(cuk.maps, cuk.output_matrix, x) for x in xs) <= 1e-9
    for xi in (0.0, 0.4, 0.9):
        assert kernel_condition_residual(cuk.maps, cuk.output_matrix, cuk.maps.p(xi)) <= 1e-12


def test_kernel_condition_outside_solvable_interval(cuk):
    with pytest.raises(DomainError):
        kernel_condition_residual(cuk.maps, cuk.output_matrix, np.array([0.0, 0.0, 0.0, -130.0]))
    with pytest.raises(DomainError):
        m_map(P, -130.0)
    with pytest.raises(TypeError):
        kernel_condition_residual(cuk.maps, cuk.plant.h, np.zeros(4))


# --- jacobians and reports


def test_jacobians_match_finite_differences(cuk, rng):
    for xi in rng.uniform(1e-4, 0.95 - 1e-4, 200):
        assert jacobian_fd_error(cuk.maps.p, cuk.maps.dp_dxi, [xi]) <= 1e-5
    xs = cuk.sample_box.sample(rng, 200)
    xs[:, 3] = rng.uniform(-120 + 1e-4, -1e-4, 200)
    for x in xs:
        assert jacobian_fd_error(cuk.maps.m, cuk.maps.dm_dx, x) <= 1e-5


def test_jacobian_fd_detects_wrong_jacobian(cuk):
    assert jacobian_fd_error(cuk.maps.p, lambda xi: 2 * cuk.maps.dp_dxi(xi), [0.3]) > 0.4


def test_residual_report(tmp_path):
    rep = residual_report("sq", lambda p: p[0] ** 2, [[1.0], [-3.0], [3.0], [2.0]], tol=5.0)
    assert rep.max_residual == 9.0
    assert rep.worst_location.tolist() == [-3.0]  # first of the tied maxima
    assert not rep.passed
    assert "FAIL" in rep.summary()
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "sample_id,location1,residual"
    assert lines[2] == "1,-3,9"
    assert ResidualReport("n", np.array([[0.0]]), np.array([np.nan]), 1.0).passed is False
