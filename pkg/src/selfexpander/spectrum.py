"""First stability eigenpair of rotationally symmetric expanders.

The stability operator on a self-expander, restricted to rotationally
symmetric functions f(s) of profile arc length, is

    L f = wtil^(-1) (wtil f')' + (|A|^2 - 1/2) f,
    wtil = r^(n-1) e^((r^2+z^2)/4),

which is formally self-adjoint for the measure wtil ds.  The first
eigenvalue mu solves (L + mu) f = 0 with f > 0; discretely it is the
smallest eigenvalue of a symmetric tridiagonal matrix.  A Sturm-sequence
bisection finds it (only ratios of wtil at neighbouring nodes enter, so
arbitrarily large weights are safe); inverse iteration recovers the
eigenvector.  Boundary conditions: Dirichlet at truncated conical ends,
natural zero-flux at an axis cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import errors
from .geometry import AXIS_KIND, AmbientConfig, ProfileCurve, compute_frames, log_weight
from .ode import ExpanderSolution

DIRICHLET_OUTER = "dirichlet_outer"
AXIS_NEUMANN = "axis_neumann"


@dataclass
class SpectralResult:
    """First eigenpair of the stability operator on a profile curve."""

    mu: float
    f: np.ndarray                # positive values at the grid nodes
    s_grid: np.ndarray           # arc-length positions of the nodes
    curve: ProfileCurve          # the resampled curve the grid lives on
    boundary_condition: str
    grid_size: int
    norm_check: float            # discrete W^0 norm of f (should be 1)
    mode: int = 0                # Fourier mode about the axis

    def interpolate(self, s):
        return np.interp(s, self.s_grid, self.f)


def _assemble(curve: ProfileCurve, cfg: AmbientConfig, mode=0):
    """Symmetric tridiagonal (diag, off) of -L and the node data.

    Finite-volume form on the (mildly nonuniform) arc-length grid,
    conjugated by sqrt(wtil * cell): only ratios exp(logw_i - logw_j)
    between neighbouring nodes appear, so arbitrarily large weights are
    safe.  Fourier mode m adds m(m+n-2)/r^2 to the potential with Dirichlet
    at the axis.
    """
    frames = compute_frames(curve, cfg)
    r = curve.r
    a_sq = frames.a_sq
    logw = log_weight(curve.samples, cfg.n)
    s = curve.arclength
    hs = np.diff(s)                       # h_{i+1/2}
    M = len(r)
    cell = np.empty(M)
    cell[1:-1] = 0.5 * (hs[:-1] + hs[1:])
    cell[0], cell[-1] = hs[0] / 2, hs[-1] / 2
    logw_half = 0.5 * (logw[:-1] + logw[1:])
    ii = np.arange(1, M - 1)
    pot = -(a_sq[ii] - 0.5)
    if mode > 0:
        pot = pot + mode * (mode + cfg.n - 2) / np.maximum(r[ii], 1e-12) ** 2
    wp = np.exp(logw_half[ii] - logw[ii]) / hs[ii]
    wm = np.exp(logw_half[ii - 1] - logw[ii]) / hs[ii - 1]
    axis_first = curve.end_kinds[0] == AXIS_KIND
    axis_last = curve.end_kinds[1] == AXIS_KIND
    if mode == 0:
        if axis_first:
            wm[0] = 0.0
        if axis_last:
            wp[-1] = 0.0
    diag = (wp + wm) / cell[ii] + pot
    jj = ii[:-1]
    off = -np.exp(logw_half[jj] - 0.5 * (logw[jj] + logw[jj + 1])) \
        / (hs[jj] * np.sqrt(cell[jj] * cell[jj + 1]))
    return diag, off, ii, logw, cell


def _sturm_count(diag, off, lam):
    """Number of eigenvalues of the tridiagonal matrix below lam."""
    count = 0
    d = diag[0] - lam
    if d < 0:
        count += 1
    for i in range(1, len(diag)):
        denom = d if abs(d) > 1e-300 else -1e-300
        d = (diag[i] - lam) - off[i - 1] ** 2 / denom
        if d < 0:
            count += 1
    return count


def _smallest_eigenvalue(diag, off, tol=1e-12):
    """Sturm bisection for the smallest eigenvalue."""
    bound = np.abs(diag) + np.concatenate([[0], np.abs(off)]) \
        + np.concatenate([np.abs(off), [0]])
    lo, hi = float(np.min(diag - bound)), float(np.max(diag + bound))
    if _sturm_count(diag, off, lo) != 0:
        raise errors.Indefinite("Sturm count inconsistent at lower bound")
    if _sturm_count(diag, off, hi) < 1:
        raise errors.Indefinite("Sturm count inconsistent at upper bound")
    span = hi - lo
    while hi - lo > tol * max(1.0, abs(lo) + abs(hi)) and hi - lo > 1e-14 * span:
        mid = 0.5 * (lo + hi)
        if _sturm_count(diag, off, mid) >= 1:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _eigenvector(diag, off, lam):
    """Inverse iteration for the eigenvector of the tridiagonal matrix."""
    M = len(diag)
    rng = np.random.default_rng(12345)
    v = rng.standard_normal(M)
    v /= np.linalg.norm(v)
    shift = lam - 1e-10 * max(1.0, abs(lam))
    ab = np.zeros((3, M))
    ab[0, 1:] = off
    ab[1, :] = diag - shift
    ab[2, :-1] = off
    for _ in range(8):
        v = solve_banded((1, 1), ab, v)
        v /= np.linalg.norm(v)
    return v


def first_eigenpair(solution: ExpanderSolution, ambient: AmbientConfig,
                    grid_size: int = 4096, stationarity_tol: float = 1e-4,
                    mode: int = 0) -> SpectralResult:
    """First eigenvalue/eigenfunction of the stability operator.

    The solution curve is resampled to ``grid_size`` uniform arc-length
    nodes; the eigenvector is normalized to unit discrete weighted L^2 norm
    and returned positive.  ``mode > 0`` computes the given Fourier mode
    about the axis instead (a spot check that the symmetric mode is lowest).
    """
    if solution.residual_sup > stationarity_tol:
        raise errors.NotStationary(
            f"residual_sup {solution.residual_sup:.2e} exceeds {stationarity_tol:.0e}")
    return eigenpair_of_curve(solution.curve, ambient, grid_size, mode)


def eigenpair_of_curve(curve: ProfileCurve, ambient: AmbientConfig,
                       grid_size: int = 4096, mode: int = 0) -> SpectralResult:
    work = curve.resample(num=grid_size)
    diag, off, ii, logw, _cell = _assemble(work, ambient, mode)
    lam = _smallest_eigenvalue(diag, off)
    g = _eigenvector(diag, off, lam)
    if np.sign(g[np.argmax(np.abs(g))]) < 0:
        g = -g
    if (g <= 0).any() and mode == 0:
        nneg = int((g <= 0).sum())
        if nneg > 2:
            raise errors.Indefinite(f"first eigenvector changes sign ({nneg} nodes)")
        g = np.abs(g)
    # f = g / sqrt(wtil), evaluated through log ratios; overall scale is fixed
    # by the W^0 normalization below
    logw_i = logw[ii]
    f = np.zeros(len(work))
    f[ii] = g * np.exp(-(logw_i - logw_i.min()) / 2.0)
    bc = AXIS_NEUMANN if AXIS_KIND in work.end_kinds else DIRICHLET_OUTER
    if work.end_kinds[0] == AXIS_KIND and mode == 0:
        f[0] = f[1]
    if work.end_kinds[1] == AXIS_KIND and mode == 0:
        f[-1] = f[-2]
    norm = weighted_sobolev_norm(f, work, 0, ambient)
    f = f / norm
    norm_check = weighted_sobolev_norm(f, work, 0, ambient)
    return SpectralResult(mu=float(lam), f=f, s_grid=work.arclength, curve=work,
                          boundary_condition=bc, grid_size=grid_size,
                          norm_check=float(norm_check), mode=mode)


def weighted_sobolev_norm(values, curve: ProfileCurve, order: int,
                          ambient: AmbientConfig) -> float:
    """Discrete weighted Sobolev norm on the profile curve.

    Order 0: (int f^2 wtil ds)^(1/2) with the full rotational measure;
    order 1 adds the |f'|^2 term.  Trapezoid rule on the curve samples.
    """
    if order not in (0, 1):
        raise errors.InputError("order must be 0 or 1")
    values = np.asarray(values, dtype=float)
    logw = log_weight(curve.samples, ambient.n)
    if logw.max() > ambient.exponent_cap:
        raise errors.OverflowRisk("weight exponent exceeds cap")
    w = np.exp(logw) * ambient.sphere_factor
    integrand = values**2 * w
    if order == 1:
        df = np.gradient(values, curve.arclength, edge_order=2)
        integrand = integrand + df**2 * w
    return float(np.sqrt(np.trapezoid(integrand, curve.arclength)))


@dataclass
class DecayCheck:
    c0_fit: float
    passed: bool
    ratio_spread: float
    window: tuple
    details: dict = field(default_factory=dict)


def decay_check(result: SpectralResult, solution: ExpanderSolution,
                ambient: AmbientConfig, window=(0.45, 0.9),
                spread_cap: float = 5.0) -> DecayCheck:
    """Validate the eigenfunction against its decay envelope.

    Compares f with (1+r^2)^(-(n+1-2 mu)/2) e^(-r^2/4) over the radius
    window (fractions of r_max); c0_fit is the multiplicative spread
    sqrt(sup ratio / inf ratio), 1 for a perfect envelope match.  A boundary
    layer from the Dirichlet truncation inside the window raises
    TailContaminated.
    """
    curve = result.curve
    rad = np.sqrt(curve.radius_sq)
    n, mu = ambient.n, result.mu
    lo, hi = window[0] * ambient.r_max, window[1] * ambient.r_max
    sel = (rad >= lo) & (rad <= hi) & (result.f > 0)
    if sel.sum() < 16:
        raise errors.TailTooShort("decay window contains too few samples")
    envelope_log = -(0.5 * (n + 1 - 2 * mu)) * np.log1p(rad[sel] ** 2) \
        - rad[sel] ** 2 / 4.0
    ratio_log = np.log(result.f[sel]) - envelope_log
    # Dirichlet boundary layer detector: the log-ratio plunging at the outer
    # end of the window relative to its median
    med = float(np.median(ratio_log))
    edge = float(np.median(ratio_log[-8:]))
    if med - edge > np.log(5.0):
        raise errors.TailContaminated(
            f"ratio drops {np.exp(med - edge):.1f}x at the window edge")
    spread = float(np.exp(0.5 * (ratio_log.max() - ratio_log.min())))
    return DecayCheck(c0_fit=spread, passed=spread <= spread_cap,
                      ratio_spread=spread, window=(lo, hi),
                      details={"median_log_ratio": med})


def rayleigh_quotient(result: SpectralResult, ambient: AmbientConfig) -> float:
    """Discrete Rayleigh quotient of the returned eigenfunction.

    Evaluates (int |f'|^2 - (|A|^2 - 1/2) f^2) wtil ds / int f^2 wtil ds on
    the eigen grid; equals -L applied weakly, so it should reproduce mu.
    """
    curve = result.curve
    frames = compute_frames(curve, ambient)
    logw = log_weight(curve.samples, ambient.n)
    ref = logw.max()
    w = np.exp(logw - ref)
    s = curve.arclength
    df = np.gradient(result.f, s, edge_order=2)
    num = np.trapezoid((df**2 - (frames.a_sq - 0.5) * result.f**2) * w, s)
    den = np.trapezoid(result.f**2 * w, s)
    return float(num / den)
