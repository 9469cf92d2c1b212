import math

import numpy as np
import pytest

from selfexpander import errors
from selfexpander.geometry import AmbientConfig, Cone, ProfileCurve, compute_frames, segment_curve
from selfexpander.ode import (ANNULUS, DISK_PAIR, PLANE_LIKE, ShootingConfig,
                              fit_asymptotics, integrate_profile,
                              polish_solution, shoot_annulus, shoot_disk)

CFG = AmbientConfig(n=2, r_max=12.0)
SHOOT = ShootingConfig(h=2e-3, sample_stride=3)


# --- integrate_profile -------------------------------------------------------
def test_plane_is_invariant_line():
    curve = integrate_profile((0.1, 0.0, 0.0), SHOOT, CFG)
    assert np.abs(curve.z).max() < 1e-10
    assert curve.r[-1] > 0.99 * CFG.r_max


def test_reflection_symmetry():
    up = integrate_profile((0.7, 0.0, math.pi / 2), SHOOT, CFG)
    dn = integrate_profile((0.7, 0.0, -math.pi / 2), SHOOT, CFG)
    m = min(len(up), len(dn))
    assert np.allclose(up.samples[:m, 0], dn.samples[:m, 0], atol=1e-12)
    assert np.allclose(up.samples[:m, 1], -dn.samples[:m, 1], atol=1e-12)


def test_axis_startup_series():
    # kappa(0) = -z0/(2n); verified against shrinking-h trajectories
    z0 = 0.5
    prev = None
    for h in (4e-3, 2e-3, 1e-3):
        cfg = ShootingConfig(h=h, sample_stride=1)
        curve = integrate_profile((0.0, z0, 0.0), cfg, CFG)
        frames = compute_frames(curve, CFG)
        k0 = frames.kappa[0]
        assert k0 == pytest.approx(-z0 / (2 * CFG.n), abs=5e-5)
        if prev is not None:
            # endpoint positions converge as h shrinks
            assert np.linalg.norm(curve.point(1.0) - prev.point(1.0)) < 1e-6
        prev = curve


def test_axis_requires_horizontal_tangent():
    with pytest.raises(errors.InputError):
        integrate_profile((0.0, 0.5, 0.3), SHOOT, CFG)


def test_rk4_order():
    # halving h reduces trajectory endpoint error by >= 12x on a smooth run;
    # the endpoint is the parameter-free exit crossing of |x| = r_max
    def exit_point(h):
        c = integrate_profile((0.7, 0.0, math.pi / 2),
                              ShootingConfig(h=h, sample_stride=1), CFG)
        return c.samples[-1]

    ref = exit_point(2.5e-4)
    errs = [np.linalg.norm(exit_point(h) - ref) for h in (4e-3, 2e-3)]
    assert errs[0] / errs[1] > 12.0


# --- shooting census ---------------------------------------------------------
def test_annulus_census_shallow(annuli, cone):
    assert len(annuli) == 2
    r_lo, r_hi = (s.shooting_parameter for s in annuli)
    assert 0.05 < r_lo < r_hi < 5.0
    for sol in annuli:
        assert sol.topology == ANNULUS
        assert sol.residual_sup < 1e-6
        assert sol.curve.slopes == (cone.slope_lower, cone.slope_upper)
        # finite-radius slope measurement carries the universal 1/r^2 bias
        assert abs(sol.asymptotic.slope - cone.slope_upper) < 5e-3
        assert not sol.degenerate_root


def test_annulus_census_steep():
    # steep double cones have no connected rotationally symmetric expander
    cfg = ShootingConfig(h=4e-3, scan_stride=2e-2, sample_stride=3)
    sols = shoot_annulus(Cone(2.0, 2.0), cfg, CFG)
    assert sols == []


def test_disk_root(disk, cone):
    assert disk.topology == DISK_PAIR
    assert disk.shooting_parameter > 0
    assert disk.residual_sup < 1e-6
    assert disk.curve.slopes[1] == cone.slope_upper
    assert abs(disk.asymptotic.slope - cone.slope_upper) < 5e-3


def test_disk_plane_limit():
    sol = shoot_disk(Cone(0.0, 0.0), SHOOT, CFG)
    assert sol.topology == PLANE_LIKE
    assert sol.shooting_parameter == 0.0
    assert np.abs(sol.curve.z).max() == 0.0


def test_mirrored_disk_same_weighted_area(disk):
    from selfexpander.geometry import weighted_functional
    up = weighted_functional(disk.curve.truncated(8.0), cfg=CFG)
    dn = weighted_functional(disk.mirrored().curve.truncated(8.0), cfg=CFG)
    assert up == pytest.approx(dn, rel=1e-12)


def test_root_stability_under_slope_perturbation(cone, annuli):
    # roots move continuously under a 1% cone-slope change
    cfg = ShootingConfig(h=4e-3, scan_stride=1e-2, sample_stride=3,
                         bracket=(0.1, 2.5))
    pert = Cone(cone.slope_upper * 1.01, cone.slope_lower * 1.01)
    sols = shoot_annulus(pert, cfg, CFG)
    assert len(sols) == 2
    for old, new in zip(annuli, sorted(sols, key=lambda s: s.shooting_parameter)):
        assert abs(new.shooting_parameter - old.shooting_parameter) < 0.1


def test_first_variation_identity_for_solutions(stable_annulus, ambient):
    # random compact normal fields: |int phi rho w ds| <= tol * |phi| * E[supp]
    from selfexpander.geometry import log_weight
    curve = stable_annulus.curve
    frames = compute_frames(curve, ambient)
    s = curve.arclength
    w = np.exp(log_weight(curve.samples, ambient.n)) * ambient.sphere_factor
    rng = np.random.default_rng(3)
    for _ in range(20):
        c = rng.uniform(0.15, 0.85) * s[-1]
        width = rng.uniform(0.2, 0.8)
        phi = np.exp(-((s - c) / width) ** 2)
        phi[np.abs(s - c) > 3 * width] = 0.0
        lhs = abs(np.trapezoid(phi * frames.rho * w, s))
        scale = np.trapezoid(phi * w, s)
        assert lhs <= 2e-4 * scale


# --- asymptotic fit ------------------------------------------------------------
def test_fit_exact_ray_zero_amplitude():
    r = np.linspace(0.5, 12.0, 4001)
    ray = ProfileCurve(np.stack([r, 0.4 * r], axis=1), slopes=(None, 0.4))
    fit = fit_asymptotics(ray, Cone(0.4, 0.4), CFG)
    assert fit.amplitude == 0.0
    assert fit.matched


def test_fit_synthetic_decay_roundtrip():
    # u = 3 |x|^(-3) e^(-|x|^2/4) grafted onto the upper nappe
    lam = 0.4
    q = np.linspace(2.0, 12.0, 8001)  # |x| along the ray
    u = 3.0 * q ** (-3.0) * np.exp(-(q**2) / 4.0)
    t = np.array([1.0, lam]) / math.hypot(1.0, lam)
    nu = np.array([-lam, 1.0]) / math.hypot(1.0, lam)
    pts = np.outer(q, t) + np.outer(u, nu)
    curve = ProfileCurve(pts, slopes=(None, lam))
    fit = fit_asymptotics(curve, Cone(lam, lam), CFG)
    assert fit.exponent == pytest.approx(1.0, abs=0.01)
    assert fit.amplitude == pytest.approx(3.0, rel=0.05)
    assert fit.matched


def test_fit_tail_too_short():
    r = np.linspace(0.5, 3.0, 101)
    ray = ProfileCurve(np.stack([r, 0.4 * r], axis=1), slopes=(None, 0.4))
    with pytest.raises(errors.TailTooShort):
        fit_asymptotics(ray, Cone(0.4, 0.4), CFG)


def test_fit_solver_tail_pairwise(annuli, disk, cone, ambient):
    # the decaying mode is a graph of one expander end over another; fitting
    # each annulus over the disk end reproduces the envelope exponent
    upper_disk = disk.curve
    for sol in annuli:
        upper = _upper_half(sol.curve)
        fit = fit_asymptotics(upper, cone, ambient, reference=upper_disk)
        assert fit.matched, f"exponent {fit.exponent:.3f} off profile"
        assert fit.amplitude > 0


def _upper_half(curve):
    pts = curve.samples[curve.z >= 0.0]
    return ProfileCurve(pts, ("conical", "conical"), curve.orientation,
                        curve.slopes)


# --- polishing ------------------------------------------------------------------
def test_polish_plane_fixed_point():
    plane = segment_curve(0.1, 11.9, 0.0, spacing=2e-3)
    out = polish_solution(plane, CFG, tol=1e-8)
    assert out.extras["polish_steps"] == 0
    assert out.residual_sup < 1e-10


def test_polish_flattens_bump():
    plane = segment_curve(0.1, 11.9, 0.0, spacing=2e-3)
    r = plane.r
    bump = 1e-3 * np.exp(-((r - 3.0) / 0.4) ** 2)
    bump[np.abs(r - 3.0) > 2.0] = 0.0
    curve = ProfileCurve(np.stack([r, bump], axis=1), slopes=(None, 0.0))
    out = polish_solution(curve, CFG, tol=1e-8)
    assert out.residual_sup < 1e-8
    assert np.abs(out.curve.z).max() < 1e-6  # within 1e-6 of the plane


def test_polish_improves_coarse_shot(cone, ambient):
    coarse = ShootingConfig(h=2e-2, final_h=2e-2, sample_stride=1,
                            scan_stride=2e-2, bracket=(1.0, 1.6))
    sols = shoot_annulus(cone, coarse, ambient)
    sol = sols[-1]
    out = polish_solution(sol.curve, ambient, tol=sol.residual_sup / 20)
    assert out.residual_sup <= sol.residual_sup / 10


def test_polish_rejects_rough_input():
    r = np.linspace(0.3, 11.9, 2001)
    wild = ProfileCurve(np.stack([r, 0.5 * np.sin(3 * r)], axis=1))
    with pytest.raises(errors.InputError):
        polish_solution(wild, CFG)
