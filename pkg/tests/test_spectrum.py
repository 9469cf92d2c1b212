import math

import numpy as np
import pytest

from selfexpander import errors
from selfexpander.geometry import AmbientConfig, ProfileCurve, segment_curve
from selfexpander.ode import ExpanderSolution, AsymptoticFit
from selfexpander.spectrum import (decay_check, eigenpair_of_curve,
                                   first_eigenpair, rayleigh_quotient,
                                   weighted_sobolev_norm)

CFG8 = AmbientConfig(n=2, r_max=8.0)


def _plane_solution(r_max=8.0, spacing=2e-3):
    curve = segment_curve(0.0, r_max, 0.0, spacing=spacing)
    return ExpanderSolution(curve=curve, topology="plane_like",
                            residual_sup=0.0,
                            asymptotic=AsymptoticFit(0.0, 0.0, 1.0, True),
                            shooting_parameter=0.0)


@pytest.fixture(scope="module")
def plane_pair():
    sol = _plane_solution()
    return sol, first_eigenpair(sol, CFG8, grid_size=4096)


# --- plane oracle: conjugation to the harmonic-oscillator form gives the
# --- closed form mu = (n+1)/2 with f proportional to e^(-r^2/4)
def test_plane_eigenvalue(plane_pair):
    _, res = plane_pair
    assert res.mu == pytest.approx(1.5, abs=1e-3)


def test_plane_eigenfunction_profile(plane_pair):
    _, res = plane_pair
    r = res.curve.r
    target = (4 * math.pi) ** (-0.5) * np.exp(-(r**2) / 4)
    sel = r < 6.0
    assert np.abs(res.f[sel] - target[sel]).max() < 1e-4


def test_plane_norm_check(plane_pair):
    _, res = plane_pair
    assert res.norm_check == pytest.approx(1.0, abs=1e-10)


def test_positivity(plane_pair):
    _, res = plane_pair
    assert res.f[1:-1].min() > 0


def test_rayleigh_consistency(plane_pair):
    _, res = plane_pair
    assert rayleigh_quotient(res, CFG8) == pytest.approx(res.mu, abs=1e-6)


def test_mesh_convergence(plane_pair):
    sol, _ = plane_pair
    mus = [first_eigenpair(sol, CFG8, grid_size=g).mu
           for g in (512, 1024, 2048)]
    d1 = abs(mus[1] - mus[0])
    d2 = abs(mus[2] - mus[1])
    assert d1 <= 4.5 * d2 * 4  # second order: d1 ~ 4 d2, with slack


def test_domain_monotonicity():
    mus = []
    for r_max in (5.0, 6.5, 8.0):
        sol = _plane_solution(r_max=r_max)
        cfg = AmbientConfig(n=2, r_max=r_max)
        mus.append(first_eigenpair(sol, cfg, grid_size=2048).mu)
    assert mus[0] >= mus[1] >= mus[2] - 1e-12


def test_not_stationary_guard(plane_pair):
    sol, _ = plane_pair
    bad = ExpanderSolution(curve=sol.curve, topology=sol.topology,
                           residual_sup=0.5, asymptotic=sol.asymptotic,
                           shooting_parameter=0.0)
    with pytest.raises(errors.NotStationary):
        first_eigenpair(bad, CFG8)


# --- scenario curves -------------------------------------------------------
def test_stable_annulus_strictly_stable(stable_annulus, ambient):
    res = first_eigenpair(stable_annulus, ambient, grid_size=4096)
    assert res.mu > 0


def test_unstable_annulus(unstable_annulus, ambient):
    res = first_eigenpair(unstable_annulus, ambient, grid_size=4096)
    assert res.mu < 0


def test_disk_strictly_stable(disk, ambient):
    res = first_eigenpair(disk, ambient, grid_size=4096)
    assert res.mu > 0


def test_symmetric_mode_is_lowest(stable_annulus, ambient):
    res0 = first_eigenpair(stable_annulus, ambient, grid_size=2048)
    res1 = first_eigenpair(stable_annulus, ambient, grid_size=2048, mode=1)
    assert res1.mu > res0.mu


# --- weighted Sobolev norms ---------------------------------------------------
def test_sobolev_zero():
    curve = segment_curve(0.0, 8.0, 0.0, spacing=2e-3)
    assert weighted_sobolev_norm(np.zeros(len(curve)), curve, 0, CFG8) == 0.0


def test_sobolev_gaussian_unit():
    # int_{R^2} e^(-r^2/4) = 4 pi, so f = (4 pi)^(-1/2) e^(-r^2/4) has W0 = 1
    curve = segment_curve(0.0, 8.0, 0.0, spacing=1e-3)
    f = (4 * math.pi) ** (-0.5) * np.exp(-curve.r**2 / 4)
    assert weighted_sobolev_norm(f, curve, 0, CFG8) == pytest.approx(1.0, abs=1e-6)


def test_sobolev_order_one_larger():
    curve = segment_curve(0.0, 8.0, 0.0, spacing=1e-3)
    f = (4 * math.pi) ** (-0.5) * np.exp(-curve.r**2 / 4)
    w0 = weighted_sobolev_norm(f, curve, 0, CFG8)
    w1 = weighted_sobolev_norm(f, curve, 1, CFG8)
    assert w1 >= w0


def test_sobolev_rejects_bad_order():
    curve = segment_curve(0.0, 8.0, 0.0, spacing=1e-2)
    with pytest.raises(errors.InputError):
        weighted_sobolev_norm(np.ones(len(curve)), curve, 2, CFG8)


# --- decay envelope ------------------------------------------------------------
def test_decay_check_plane(plane_pair):
    sol, res = plane_pair
    # n + 1 - 2 mu = 0: the envelope is exactly e^(-r^2/4).  Away from the
    # Dirichlet truncation (whose admixed second mode decays only like
    # 1/r^2) the ratio is constant to a few 1e-5.
    chk = decay_check(res, sol, CFG8, window=(0.06, 0.3))
    assert chk.passed
    assert chk.c0_fit == pytest.approx(1.0, abs=1e-4)
    # the default tail window still passes with a modest constant
    chk_tail = decay_check(res, sol, CFG8)
    assert chk_tail.passed
    assert chk_tail.c0_fit < 1.1


def test_decay_check_stable_annulus(stable_annulus, ambient):
    res = first_eigenpair(stable_annulus, ambient, grid_size=4096)
    chk = decay_check(res, stable_annulus, ambient, window=(0.35, 0.7))
    assert chk.passed
    assert chk.c0_fit < 50


def test_decay_check_detects_violation(plane_pair):
    sol, res = plane_pair
    import dataclasses
    # a slower-decaying profile violates the envelope: huge ratio spread
    fake = dataclasses.replace(res, f=np.exp(-res.curve.r**2 / 8))
    chk = decay_check(fake, sol, CFG8)
    assert not chk.passed
    # a profile plunging at the window edge signals Dirichlet contamination
    plunge = res.f * np.clip((7.0 - np.sqrt(res.curve.radius_sq)) / 0.15,
                             1e-6, 1.0)
    fake2 = dataclasses.replace(res, f=plunge)
    with pytest.raises(errors.TailContaminated):
        decay_check(fake2, sol, CFG8)