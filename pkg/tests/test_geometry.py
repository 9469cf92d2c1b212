import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from selfexpander import errors
from selfexpander.geometry import (AmbientConfig, AnnulusCutoff, BallCutoff,
                                   Cone, PointGrid, ProfileCurve, TestFunction,
                                   arc_curve, compute_frames,
                                   constant_test_function, function_space_norms,
                                   hausdorff_distance, make_cutoff,
                                   relative_entropy, relative_entropy_profile,
                                   segment_curve, sphere_area,
                                   weighted_functional, weighted_volume)

CFG = AmbientConfig(n=2, r_max=12.0)


# --- ambient / cone -------------------------------------------------------
def test_sphere_factor():
    assert sphere_area(2) == pytest.approx(2 * math.pi)
    assert sphere_area(3) == pytest.approx(4 * math.pi)


def test_ambient_rejects_low_dimension():
    with pytest.raises(errors.InputError):
        AmbientConfig(n=1)


def test_cone_validation():
    Cone(0.5, 0.5)
    Cone(0.0, 0.0)
    with pytest.raises(errors.InputError):
        Cone(0.5, 0.0)
    with pytest.raises(errors.InputError):
        Cone(-0.1, 0.1)


# --- frames ---------------------------------------------------------------
def test_plane_through_origin_is_stationary():
    curve = segment_curve(0.1, 8.0, 0.0, spacing=1e-3)
    frames = compute_frames(curve, CFG)
    assert np.abs(frames.rho).max() < 1e-10


def test_shifted_plane_residual_is_half_height():
    curve = segment_curve(0.1, 6.0, 1.0, spacing=1e-3)
    frames = compute_frames(curve, CFG)
    assert np.allclose(frames.rho, 0.5, atol=1e-10)


def test_sphere_mean_curvature():
    # circle of radius 2 about the origin with outward normal: H = n/a = 1
    curve = arc_curve(2.0, -1.2, 1.2, num=4001)
    frames = compute_frames(curve, CFG)
    outward = (curve.samples * frames.nu).sum(axis=1)
    assert outward.min() > 0
    assert np.abs(frames.H[2:-2] - 1.0).max() < 1e-6


def test_sphere_oracle_finite_differences():
    # independent high-resolution FD oracle for the H sign convention
    a = 2.0
    ang = np.linspace(-0.5, 0.5, 20001)
    pts = a * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    s = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    T = np.gradient(pts, s, axis=0, edge_order=2)
    T /= np.linalg.norm(T, axis=1)[:, None]
    nu = -np.stack([-T[:, 1], T[:, 0]], axis=1)  # outward
    dnu = np.gradient(nu, s, axis=0, edge_order=2)
    kappa = (T * dnu).sum(axis=1)
    H = kappa + nu[:, 0] / pts[:, 0]
    assert np.abs(H[100:-100] - 1.0).max() < 1e-5


def test_axis_cap_umbilic_limit():
    # spherical cap touching the axis: H = n*kappa at the axis sample
    a = 2.0
    ang = np.linspace(np.pi / 2, 0.5, 3001)
    pts = a * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts[0, 0] = 0.0
    curve = ProfileCurve(pts, ("axis_cap", "conical"), orientation=1)
    frames = compute_frames(curve, CFG)
    assert frames.H[0] == pytest.approx(CFG.n * frames.kappa[0])
    assert abs(abs(frames.H[0]) - CFG.n / a) < 1e-4


def test_degenerate_samples_rejected():
    pts = np.array([[0.5, 0.0], [0.5, 0.0], [0.6, 0.0], [0.7, 0.0]])
    with pytest.raises(errors.DegenerateSpacing):
        ProfileCurve(pts)


def test_nonfinite_rejected():
    pts = np.array([[0.5, 0.0], [0.6, np.nan], [0.7, 0.0], [0.8, 0.0]])
    with pytest.raises(errors.NonFiniteGeometry):
        ProfileCurve(pts)


# --- weighted functional ----------------------------------------------------
def test_weighted_functional_closed_form():
    # 2*pi * int_1^2 r e^(r^2/4) dr = 4*pi*(e - e^(1/4))
    curve = segment_curve(1.0, 2.0, 0.0, spacing=2e-5)
    val = weighted_functional(curve, cfg=CFG)
    exact = 4 * math.pi * (math.e - math.exp(0.25))
    assert val == pytest.approx(exact, abs=1e-8)


def test_weighted_functional_quadrature_oracle():
    curve = segment_curve(1.0, 2.0, 0.0, spacing=2e-5)
    val = weighted_functional(curve, cfg=CFG)
    oracle, err = quad(lambda r: 2 * math.pi * r * math.exp(r * r / 4), 1, 2,
                       epsabs=1e-12)
    assert val == pytest.approx(oracle, abs=max(1e-8, 10 * err))


def test_weighted_functional_zero_psi():
    curve = segment_curve(0.5, 3.0, 0.2, spacing=1e-3)
    assert weighted_functional(curve, constant_test_function(0.0), cfg=CFG) == 0.0


def test_weighted_functional_linear_in_psi():
    curve = segment_curve(0.5, 3.0, 0.2, spacing=1e-3)
    one = weighted_functional(curve, constant_test_function(1.0), cfg=CFG)
    three = weighted_functional(curve, constant_test_function(3.0), cfg=CFG)
    assert three == pytest.approx(3 * one, rel=1e-13)


def test_window_kills_far_curve():
    curve = segment_curve(4.0, 6.0, 0.0, spacing=1e-3)
    window = BallCutoff(R=2.0, delta=1.0)  # curve outside B_{R+delta}
    assert weighted_functional(curve, window=window, cfg=CFG) == 0.0


def test_overflow_guard():
    curve = segment_curve(1.0, 60.0, 0.0, spacing=1e-2)
    with pytest.raises(errors.OverflowRisk):
        weighted_functional(curve, cfg=AmbientConfig(n=2, r_max=64.0))


# --- first variation identity ----------------------------------------------
def test_first_variation_matches_residual_pairing():
    # d/dt E[curve + t*phi*nu] = int phi rho w ds, checked by Richardson
    rng = np.random.default_rng(7)
    for _ in range(3):
        c0, w0 = rng.uniform(1.5, 3.5), rng.uniform(0.3, 0.6)
        amp = rng.uniform(0.05, 0.2)
        r = np.linspace(0.3, 6.0, 16001)
        z = amp * np.exp(-((r - c0) / w0) ** 2)
        curve = ProfileCurve(np.stack([r, z], axis=1))
        frames = compute_frames(curve, CFG)
        phi = np.exp(-((r - 2.5) / 0.5) ** 2) * (r > 1.0) * (r < 5.0)

        def displaced(t):
            pts = curve.samples + t * phi[:, None] * frames.nu
            return weighted_functional(ProfileCurve(pts), cfg=CFG)

        w = np.exp((r**2 + z**2) / 4) * r ** (CFG.n - 1) * CFG.sphere_factor
        speed = np.linalg.norm(curve.spline()(curve.arclength, 1), axis=1)
        analytic = np.trapezoid(phi * frames.rho * w * speed, curve.arclength)
        h = 1e-5
        d1 = (displaced(h) - displaced(-h)) / (2 * h)
        d2 = (displaced(h / 2) - displaced(-h / 2)) / h
        richardson = (4 * d2 - d1) / 3
        assert richardson == pytest.approx(analytic, rel=1e-6)


# --- cutoffs ---------------------------------------------------------------
def test_cutoff_paper_values():
    phi = make_cutoff("ball", R=2.0, delta=1.0)
    assert phi(np.array([[1.5, 0.0]]))[0] == 1.0
    assert phi(np.array([[2.5, 0.0]]))[0] == 0.5
    alpha = make_cutoff("annulus", R1=2.0, R2=4.0, delta=0.5)
    assert alpha(np.array([[3.0, 0.0]]))[0] == 1.0


def test_cutoff_bad_radii():
    with pytest.raises(errors.BadRadii):
        make_cutoff("ball", R=2.0, delta=0.0)
    with pytest.raises(errors.BadRadii):
        make_cutoff("annulus", R1=3.0, R2=2.0, delta=0.5)


@given(st.floats(0.0, 10.0), st.floats(-7.0, 7.0))
def test_cutoff_partition_identity(r, z):
    # alpha_{R1,R2,delta} + phi_{R1-delta,delta} = phi_{R2,delta} pointwise
    p = np.array([[r, z]])
    alpha = AnnulusCutoff(2.0, 4.0, 0.5)
    assert alpha(p)[0] + BallCutoff(1.5, 0.5)(p)[0] == pytest.approx(
        BallCutoff(4.0, 0.5)(p)[0], abs=1e-15)


# --- relative entropy -------------------------------------------------------
def test_relative_entropy_identical_curve():
    curve = segment_curve(0.2, 8.0, 0.0, spacing=2e-3)
    res = relative_entropy(curve, curve, cfg=CFG)
    assert res.value == 0.0
    assert res.tail_bound >= 0.0


def test_relative_entropy_cone_mismatch():
    a = segment_curve(0.2, 8.0, 0.0, spacing=2e-3)
    pts = a.samples.copy()
    pts[:, 1] = 0.3 * pts[:, 0]
    b = ProfileCurve(pts, slopes=(None, 0.3))
    with pytest.raises(errors.ConeMismatch):
        relative_entropy(b, a, cfg=CFG)


def test_relative_entropy_decaying_graph():
    # plane vs a rapidly decaying normal graph: value O(eps), stable in R
    cfg = AmbientConfig(n=2, r_max=10.0)
    plane = segment_curve(0.05, 11.0, 0.0, spacing=2e-3)
    eps = 1e-3
    r = plane.r
    u = eps * (1 + r**2) ** (-1.5) * np.exp(-(r**2) / 4)
    lifted = ProfileCurve(np.stack([r, u], axis=1), slopes=(None, 0.0))
    res = relative_entropy(lifted, plane, cfg=cfg)
    assert abs(res.value) <= 50 * eps
    radii = np.array([4.0, 5.0, 6.0, 8.0, 10.0])
    vals = relative_entropy_profile(lifted, plane, radii, cfg=cfg)
    stabilization = np.abs(np.diff(vals))
    assert stabilization.max() < 1e-6  # graph decays like the weight
    # paper-form monotone-up-to-C/R estimate with a small fitted constant
    assert np.all(np.diff(vals) >= -1e-6 / radii[:-1])


def test_relative_entropy_solver_pair(unstable_annulus, stable_annulus, ambient):
    # finite value for the solver expander pair, resolution-stable to 4 digits
    res = relative_entropy(unstable_annulus.curve, stable_annulus.curve,
                           cfg=ambient)
    assert np.isfinite(res.value)
    assert res.value > 0  # the unstable annulus carries more entropy
    assert res.tail_bound < 0.3
    coarse = relative_entropy(
        unstable_annulus.curve.resample(spacing=1e-3),
        stable_annulus.curve.resample(spacing=1e-3), cfg=ambient)
    assert coarse.value == pytest.approx(res.value, abs=1e-4)


# --- weighted volume ---------------------------------------------------------
def test_weighted_volume_zero_for_identical():
    curve = segment_curve(0.2, 6.0, 0.0, spacing=2e-3)
    assert weighted_volume(curve, curve, cfg=CFG) == pytest.approx(0.0, abs=1e-12)


def test_weighted_volume_monotone_in_level():
    cfg = AmbientConfig(n=2, r_max=8.0)
    base = segment_curve(0.05, 8.0, 0.0, spacing=2e-3)
    r = base.r
    cap = np.exp(-(r**2) / 4)
    vols = []
    for level in np.linspace(0.1, 0.9, 9):
        lifted = ProfileCurve(np.stack([r, level * cap], axis=1),
                              slopes=(None, 0.0))
        vols.append(weighted_volume(lifted, base, cfg=cfg))
    vols = np.array(vols)
    assert np.all(vols > 0)
    assert np.all(np.diff(vols) > 0)


def test_weighted_volume_not_ordered():
    base = segment_curve(0.05, 8.0, 0.0, spacing=2e-3)
    r = base.r
    lifted = ProfileCurve(np.stack([r, -0.01 * np.exp(-(r**2) / 4)], axis=1),
                          slopes=(None, 0.0))
    with pytest.raises(errors.NotOrdered):
        weighted_volume(lifted, base, cfg=CFG)


def test_weighted_volume_additive_over_fibers():
    cfg = AmbientConfig(n=2, r_max=8.0)
    base = segment_curve(0.05, 8.0, 0.0, spacing=2e-3)
    r = base.r
    bump1 = 0.3 * np.exp(-((r - 2) / 0.4) ** 2)
    bump2 = 0.2 * np.exp(-((r - 5) / 0.4) ** 2)
    v1 = weighted_volume(ProfileCurve(np.stack([r, bump1], axis=1), slopes=(None, 0.0)),
                         base, cfg=cfg)
    v2 = weighted_volume(ProfileCurve(np.stack([r, bump2], axis=1), slopes=(None, 0.0)),
                         base, cfg=cfg)
    v12 = weighted_volume(ProfileCurve(np.stack([r, bump1 + bump2], axis=1),
                                       slopes=(None, 0.0)), base, cfg=cfg)
    assert v12 == pytest.approx(v1 + v2, rel=1e-6)


# --- function space norms -----------------------------------------------------
def test_norms_constant_one():
    grid = PointGrid.box(6.0, 4.0, num=40)
    rep = function_space_norms(constant_test_function(1.0), grid, CFG)
    assert rep.x_norm == pytest.approx(1.0, abs=1e-8)
    assert rep.w_norm == math.inf
    assert rep.details["overflow"] is False or rep.w_norm == math.inf
    assert rep.y_upper == pytest.approx(1.0, abs=1e-8)


def test_norms_zero():
    grid = PointGrid.box(6.0, 4.0, num=40)
    rep = function_space_norms(constant_test_function(0.0), grid, CFG)
    assert rep.x_norm == rep.w_norm == rep.y_upper == 0.0


def test_norms_gaussian_product_audit():
    grid = PointGrid.box(6.0, 4.0, num=48)
    gauss = TestFunction(lambda p, v: np.exp(-(p**2).sum(axis=1) / 2),
                         name="gauss")
    sq = TestFunction(lambda p, v: np.exp(-(p**2).sum(axis=1)), name="gauss2")
    rep1 = function_space_norms(gauss, grid, CFG)
    rep2 = function_space_norms(sq, grid, CFG)
    assert math.isfinite(rep1.w_norm)
    assert rep2.y_upper <= rep1.y_upper**2 * (1 + 1e-9)


def test_odd_test_function_rejected():
    with pytest.raises(errors.InputError):
        TestFunction(lambda p, v: v[:, 0])


# --- persistence ---------------------------------------------------------------
def test_curve_roundtrip(tmp_path):
    curve = segment_curve(0.5, 3.0, 0.25, spacing=1e-2)
    path = tmp_path / "curve.csv"
    curve.save(path)
    text = path.read_text().splitlines()
    assert text[0] == "r,z"
    back = ProfileCurve.load(path)
    assert np.allclose(back.samples, curve.samples, atol=0)
    assert back.end_kinds == curve.end_kinds
    assert back.orientation == curve.orientation


def test_hausdorff_distance_sanity():
    a = segment_curve(0.5, 3.0, 0.0, spacing=1e-2)
    b = segment_curve(0.5, 3.0, 0.1, spacing=1e-2)
    assert hausdorff_distance(a, b) == pytest.approx(0.1, abs=1e-6)
