"""Profile-curve geometry for rotationally symmetric hypersurfaces.

A hypersurface of revolution in R^(n+1) is generated by a planar profile
curve in the (r, z) half plane.  This module provides the curve container
with spline-backed evaluation, frame/curvature/residual computation, the
weighted area functional with test functions and radial cutoffs, the
renormalized entropy difference of two curves asymptotic to the same cone,
weighted volume between ordered curves, and grid estimators for the
function-space norms used by the weighted estimates.

Sign conventions (fixed by the plane and sphere anchors in the tests):
the unit normal is ``nu = orientation * (-T_z, T_r)`` for unit tangent T,
profile curvature ``kappa = <T, d nu/ds>``, scalar mean curvature
``H = kappa + (n-1) nu_r / r`` (so the round sphere with outward normal has
H = n/a), and the expander residual is ``rho = H + (x . nu)/2``.  A curve is
a stationary point of the weighted area iff rho vanishes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from . import errors

EXPONENT_CAP = 700.0  # e^x overflows shortly above this; callers must rescale

AXIS_KIND = "axis_cap"
CONICAL_KIND = "conical"


def sphere_area(n: int) -> float:
    """Area of the unit (n-1)-sphere, e.g. 2*pi for n = 2."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


@dataclass(frozen=True)
class AmbientConfig:
    """Ambient dimension data and the computational truncation radius.

    ``n`` is the hypersurface dimension (the ambient space is R^(n+1));
    ``r_max`` is the radius at which integrals and curves are truncated.
    """

    n: int = 2
    r_max: float = 12.0
    exponent_cap: float = EXPONENT_CAP

    def __post_init__(self):
        if self.n < 2:
            raise errors.InputError(f"need n >= 2, got {self.n}")
        if self.r_max <= 0:
            raise errors.InputError("r_max must be positive")

    @property
    def sphere_factor(self) -> float:
        return sphere_area(self.n)


@dataclass(frozen=True)
class Cone:
    """Rotationally symmetric double cone z = +slope_upper*r / z = -slope_lower*r."""

    slope_upper: float
    slope_lower: float

    def __post_init__(self):
        if not (math.isfinite(self.slope_upper) and math.isfinite(self.slope_lower)):
            raise errors.InputError("cone slopes must be finite")
        up, lo = self.slope_upper, self.slope_lower
        if (up == 0.0) != (lo == 0.0):
            raise errors.InputError("degenerate cone needs both slopes zero")
        if up < 0 or lo < 0:
            raise errors.InputError("cone slopes must be nonnegative")

    @property
    def symmetric(self) -> bool:
        return abs(self.slope_upper - self.slope_lower) < 1e-14


class ProfileCurve:
    """Discrete profile curve with spline-backed geometric queries.

    Parameters
    ----------
    samples : ndarray, shape (M, 2)
        Ordered (r, z) points, r >= 0, adjacent points distinct, spacing
        within a factor 2 of uniform.
    end_kinds : (str, str)
        'axis_cap' or 'conical' for the first/last endpoint.
    orientation : int
        +1: nu is the left normal of the traversal; -1: the right normal.
    slopes : (float or None, float or None)
        Asymptotic slope |z|/r for each conical end (None at an axis cap).
    """

    def __init__(self, samples, end_kinds=(CONICAL_KIND, CONICAL_KIND),
                 orientation=1, slopes=(None, None)):
        samples = np.ascontiguousarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != 2 or samples.shape[0] < 4:
            raise errors.InputError("samples must be an (M>=4, 2) array")
        if not np.all(np.isfinite(samples)):
            raise errors.NonFiniteGeometry("non-finite curve samples")
        if samples[:, 0].min() < -1e-12:
            raise errors.InputError("r must be nonnegative")
        seg = np.linalg.norm(np.diff(samples, axis=0), axis=1)
        if seg.min() <= 0:
            raise errors.DegenerateSpacing("adjacent samples coincide")
        if orientation not in (1, -1):
            raise errors.InputError("orientation must be +1 or -1")
        interior_r = samples[1:-1, 0]
        if interior_r.min() <= 0:
            raise errors.InputError("r = 0 is only allowed at an axis_cap endpoint")
        for k, kind in enumerate(end_kinds):
            if kind not in (AXIS_KIND, CONICAL_KIND):
                raise errors.InputError(f"unknown end kind {kind!r}")
            endpoint_r = samples[0, 0] if k == 0 else samples[-1, 0]
            if kind == AXIS_KIND and endpoint_r > 1e-9:
                raise errors.InputError("axis_cap endpoint must have r = 0")
        self.samples = samples
        self.end_kinds = tuple(end_kinds)
        self.orientation = int(orientation)
        self.slopes = tuple(slopes)
        self.arclength = np.concatenate([[0.0], np.cumsum(seg)])
        self._spline = None
        self._tree = None

    # -- basic accessors -------------------------------------------------
    def __len__(self):
        return len(self.samples)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    @property
    def spacing(self) -> float:
        return self.length / (len(self.samples) - 1)

    @property
    def r(self):
        return self.samples[:, 0]

    @property
    def z(self):
        return self.samples[:, 1]

    @property
    def radius_sq(self):
        return self.samples[:, 0] ** 2 + self.samples[:, 1] ** 2

    def spline(self) -> CubicSpline:
        if self._spline is None:
            self._spline = CubicSpline(self.arclength, self.samples, axis=0)
        return self._spline

    def _kdtree(self):
        if self._tree is None:
            self._tree = cKDTree(self.samples)
        return self._tree

    def point(self, s):
        return self.spline()(s)

    def resample(self, spacing=None, num=None) -> "ProfileCurve":
        """Uniform arc-length resampling through the spline."""
        if num is None:
            num = max(int(round(self.length / spacing)) + 1, 4)
        s = np.linspace(0.0, self.length, num)
        pts = self.spline()(s)
        pts[1:-1, 0] = np.maximum(pts[1:-1, 0], 1e-12)
        pts[0, 0] = 0.0 if self.end_kinds[0] == AXIS_KIND else max(pts[0, 0], 0.0)
        pts[-1, 0] = 0.0 if self.end_kinds[1] == AXIS_KIND else max(pts[-1, 0], 0.0)
        return ProfileCurve(pts, self.end_kinds, self.orientation, self.slopes)

    def reversed(self) -> "ProfileCurve":
        """Reverse traversal; flips orientation so nu is unchanged."""
        return ProfileCurve(self.samples[::-1].copy(),
                            (self.end_kinds[1], self.end_kinds[0]),
                            -self.orientation,
                            (self.slopes[1], self.slopes[0]))

    def mirrored(self) -> "ProfileCurve":
        """Reflection z -> -z (an isometry of the weight); nu mirrors too."""
        pts = self.samples.copy()
        pts[:, 1] *= -1.0
        return ProfileCurve(pts, self.end_kinds, -self.orientation, self.slopes)

    def truncated(self, radius) -> "ProfileCurve":
        """Restrict to the closed ball |x| <= radius, cutting by spline root."""
        inside = self.radius_sq <= radius**2
        if not inside.any():
            raise errors.InputError("curve lies entirely outside the ball")
        idx = np.where(inside)[0]
        lo, hi = idx[0], idx[-1]
        pts = [self.samples[lo:hi + 1]]
        sp = self.spline()
        if hi + 1 < len(self.samples):
            s_cut = _radius_crossing(sp, self.arclength[hi], self.arclength[hi + 1], radius)
            cut = sp(s_cut)
            if np.linalg.norm(cut - self.samples[hi]) > 1e-9:
                pts = pts + [cut[None, :]]
        if lo > 0:
            s_cut = _radius_crossing(sp, self.arclength[lo], self.arclength[lo - 1], radius)
            cut = sp(s_cut)
            if np.linalg.norm(cut - self.samples[lo]) > 1e-9:
                pts = [cut[None, :]] + pts
        out = np.vstack(pts)
        kinds = (self.end_kinds[0] if lo == 0 else CONICAL_KIND,
                 self.end_kinds[1] if hi == len(self.samples) - 1 else CONICAL_KIND)
        return ProfileCurve(out, kinds, self.orientation, self.slopes)

    def nearest(self, points):
        """Nearest-point projection onto the spline.

        Returns (s, foot, dist_signed) where dist_signed is the offset of each
        query along the curve normal at its foot point.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        _, idx = self._kdtree().query(points)
        s = self.arclength[idx]
        sp = self.spline()
        dsp = sp.derivative()
        for _ in range(30):
            p = sp(s)
            t = dsp(s)
            f = ((points - p) * t).sum(axis=1)
            fp = -(t * t).sum(axis=1) + ((points - p) * sp(s, 2)).sum(axis=1)
            fp = np.where(np.abs(fp) < 1e-14, -1.0, fp)
            step = np.clip(f / fp, -5 * self.spacing, 5 * self.spacing)
            s = np.clip(s - step, 0.0, self.length)
            if np.max(np.abs(step)) < 1e-14 * max(1.0, self.length):
                break
        foot = sp(s)
        t = dsp(s)
        t /= np.linalg.norm(t, axis=1)[:, None]
        nu = self.orientation * np.stack([-t[:, 1], t[:, 0]], axis=1)
        offset = ((points - foot) * nu).sum(axis=1)
        return s, foot, offset

    # -- persistence -----------------------------------------------------
    def save(self, path_csv):
        """Write samples as CSV with 'r,z' header plus a JSON sidecar."""
        path_csv = Path(path_csv)
        header = "r,z"
        np.savetxt(path_csv, self.samples, delimiter=",", header=header,
                   comments="", fmt="%.17g")
        meta = {
            "end_kinds": list(self.end_kinds),
            "orientation": self.orientation,
            "slopes": [None if s is None else float(s) for s in self.slopes],
        }
        path_csv.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path_csv):
        path_csv = Path(path_csv)
        pts = np.loadtxt(path_csv, delimiter=",", skiprows=1)
        meta = json.loads(path_csv.with_suffix(".json").read_text())
        slopes = tuple(None if s is None else float(s) for s in meta["slopes"])
        return cls(pts, tuple(meta["end_kinds"]), meta["orientation"], slopes)


def _radius_crossing(spline, s_in, s_out, radius):
    """Arc parameter where |spline(s)| = radius between s_in (inside) and s_out."""
    lo, hi = s_in, s_out
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        q = float(np.dot(spline(mid), spline(mid))) - radius**2
        if q <= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class FrameData:
    """Per-sample frames and curvatures of a profile curve.

    ``rot`` is (nu . e_r)/r with its umbilic limit kappa at an axis cap, so
    H = kappa + (n-1)*rot and |A|^2 = kappa^2 + (n-1)*rot^2.
    """

    T: np.ndarray
    nu: np.ndarray
    kappa: np.ndarray
    rot: np.ndarray
    H: np.ndarray
    rho: np.ndarray

    @property
    def a_sq(self):
        return self.kappa**2 + (self.rot**2) * (self._n - 1)

    _n: int = 2


def compute_frames(curve: ProfileCurve, cfg: AmbientConfig) -> FrameData:
    """Unit tangent/normal, profile curvature, mean curvature and residual.

    Evaluated from the curve's cubic spline at the samples; the rotational
    term (nu . e_r)/r is replaced by its limit kappa at an axis cap.
    """
    sp = curve.spline()
    s = curve.arclength
    d1 = sp(s, 1)
    d2 = sp(s, 2)
    speed = np.linalg.norm(d1, axis=1)
    if speed.min() <= 0 or not np.all(np.isfinite(d1)):
        raise errors.NonFiniteGeometry("degenerate tangent")
    T = d1 / speed[:, None]
    o = curve.orientation
    nu = o * np.stack([-T[:, 1], T[:, 0]], axis=1)
    kappa = o * (d1[:, 1] * d2[:, 0] - d1[:, 0] * d2[:, 1]) / speed**3
    r = curve.r
    rot = np.empty_like(kappa)
    pos = r > 1e-9
    rot[pos] = nu[pos, 0] / r[pos]
    rot[~pos] = kappa[~pos]
    H = kappa + (cfg.n - 1) * rot
    rho = H + (curve.r * nu[:, 0] + curve.z * nu[:, 1]) / 2.0
    if not np.all(np.isfinite(rho)):
        raise errors.NonFiniteGeometry("non-finite frame data")
    return FrameData(T=T, nu=nu, kappa=kappa, rot=rot, H=H, rho=rho, _n=cfg.n)


@dataclass(frozen=True)
class TestFunction:
    """Even function psi(p, v) of a half-plane point and a unit direction.

    ``fn`` takes (points (M,2), directions (M,2)) and returns (M,) values;
    evenness psi(p, v) = psi(p, -v) is the caller's responsibility and is
    spot-checked on construction.
    """

    fn: object
    name: str = "psi"

    __test__ = False  # not a pytest class despite the name

    def __post_init__(self):
        p = np.array([[0.3, 0.1], [1.7, -0.4], [4.0, 2.0]])
        v = np.array([[0.6, 0.8], [1.0, 0.0], [-0.28, 0.96]])
        a = np.asarray(self.fn(p, v), dtype=float)
        b = np.asarray(self.fn(p, -v), dtype=float)
        if not np.allclose(a, b, atol=1e-10):
            raise errors.InputError("test function must be even in the direction")

    def __call__(self, points, directions):
        return np.asarray(self.fn(points, directions), dtype=float)


def constant_test_function(c=1.0) -> TestFunction:
    return TestFunction(lambda p, v: np.full(len(np.atleast_2d(p)), float(c)),
                        name=f"const{c:g}")


# --- cutoffs ------------------------------------------------------------
@dataclass(frozen=True)
class BallCutoff:
    """Piecewise-linear radial cutoff: 1 on B_R, linear to 0 on B_{R+delta}."""

    R: float
    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise errors.BadRadii("delta must be positive")

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        rad = np.linalg.norm(points, axis=1)
        return np.clip(1.0 - (rad - self.R) / self.delta, 0.0, 1.0)


@dataclass(frozen=True)
class AnnulusCutoff:
    """Cutoff adapted to the closed annulus between radii R1 and R2."""

    R1: float
    R2: float
    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise errors.BadRadii("delta must be positive")
        if not (self.R2 > self.R1 > self.delta):
            raise errors.BadRadii("need R2 > R1 > delta")

    def __call__(self, points):
        outer = BallCutoff(self.R2, self.delta)(points)
        inner = BallCutoff(self.R1 - self.delta, self.delta)(points)
        return outer - inner


def make_cutoff(kind, *, R=None, R1=None, R2=None, delta):
    if kind == "ball":
        if R is None:
            raise errors.BadRadii("ball cutoff needs R")
        return BallCutoff(R, delta)
    if kind == "annulus":
        if R1 is None or R2 is None:
            raise errors.BadRadii("annulus cutoff needs R1, R2")
        return AnnulusCutoff(R1, R2, delta)
    raise errors.InputError(f"unknown cutoff kind {kind!r}")


# --- the weighted area functional ----------------------------------------
def log_weight(points, n):
    """log of r^(n-1) e^(|x|^2/4) at half-plane points (without the sphere factor)."""
    points = np.atleast_2d(points)
    r = np.maximum(points[:, 0], 1e-300)
    return (n - 1) * np.log(r) + (points[:, 0] ** 2 + points[:, 1] ** 2) / 4.0


def weighted_functional(curve: ProfileCurve, psi=None, window=None,
                        cfg: AmbientConfig = AmbientConfig()) -> float:
    """Weighted area integral of the generated hypersurface.

    Computes ``sphere_factor * int psi(p, nu) * window(p) * r^(n-1)
    * e^(|x|^2/4) ds`` by the composite trapezoid rule on the curve samples.
    ``psi = None`` means psi identically 1; ``window`` is an optional cutoff.
    """
    exponent = curve.radius_sq / 4.0
    if exponent.max() > cfg.exponent_cap:
        raise errors.OverflowRisk(
            f"weight exponent {exponent.max():.1f} exceeds cap {cfg.exponent_cap}")
    frames = compute_frames(curve, cfg)
    vals = np.exp(log_weight(curve.samples, cfg.n))
    if psi is not None:
        vals = vals * psi(curve.samples, frames.nu)
    if window is not None:
        vals = vals * window(curve.samples)
    return cfg.sphere_factor * float(np.trapezoid(vals, curve.arclength))


# --- normal-graph pairing and relative entropy ----------------------------
def _check_same_cone(curve, reference, tol=1e-6):
    for a, b in zip(curve.slopes, reference.slopes):
        if (a is None) != (b is None):
            raise errors.ConeMismatch("end structure differs")
        if a is not None and abs(a - b) > tol:
            raise errors.ConeMismatch(f"asymptotic slopes differ: {a} vs {b}")


def graph_over(curve: ProfileCurve, reference: ProfileCurve, s_grid=None,
               allow_unpaired=False):
    """Represent ``curve`` as a normal graph over ``reference``.

    For every reference arc parameter in ``s_grid`` (default: the reference
    samples) the normal line of the reference is intersected with the spline
    of ``curve`` by a 2d Newton iteration.  Returns the signed offsets u so
    that curve = reference + u * nu pointwise.  Raises Unpaired when the
    intersection fails, unless ``allow_unpaired`` is set, in which case a
    validity mask is returned as a fourth value.
    """
    sp_ref = reference.spline()
    dsp_ref = sp_ref.derivative()
    if s_grid is None:
        s_grid = reference.arclength
    base = sp_ref(s_grid)
    t = dsp_ref(s_grid)
    t /= np.linalg.norm(t, axis=1)[:, None]
    nu = reference.orientation * np.stack([-t[:, 1], t[:, 0]], axis=1)

    sp_c = curve.spline()
    dsp_c = sp_c.derivative()
    _, idx = curve._kdtree().query(base)
    s = curve.arclength[idx].astype(float).copy()
    u = ((curve.samples[idx] - base) * nu).sum(axis=1)
    tol = 1e-11 * max(1.0, curve.length)

    def newton(s, u, active, iters, lim):
        for _ in range(iters):
            p = sp_c(s[active])
            dp = dsp_c(s[active])
            g = p - base[active] - u[active, None] * nu[active]
            det = -dp[:, 0] * nu[active, 1] + dp[:, 1] * nu[active, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            ds = (-g[:, 0] * nu[active, 1] + g[:, 1] * nu[active, 0]) / det
            du = (dp[:, 0] * g[:, 1] - dp[:, 1] * g[:, 0]) / det
            ds = np.clip(ds, -lim, lim)
            s[active] = np.clip(s[active] - ds, 0.0, curve.length)
            u[active] = u[active] - du
        p = sp_c(s)
        g = p - base - u[:, None] * nu
        return np.linalg.norm(g, axis=1) < tol

    ok = newton(s, u, np.ones(len(base), dtype=bool), 40, 10 * curve.spacing)
    if not ok.all():
        # stragglers: the intersection can be far along the curve from the
        # nearest point; bracket it segment-by-segment per failed fiber
        for i in np.where(~ok)[0]:
            d = curve.samples - base[i]
            side = d[:, 0] * nu[i, 1] - d[:, 1] * nu[i, 0]
            flips = np.where(side[:-1] * side[1:] <= 0)[0]
            if len(flips) == 0:
                continue
            # pick the crossing nearest to the base point
            mids = 0.5 * (curve.samples[flips] + curve.samples[flips + 1])
            j = flips[np.argmin(np.linalg.norm(mids - base[i], axis=1))]
            s[i] = 0.5 * (curve.arclength[j] + curve.arclength[j + 1])
            u[i] = ((curve.samples[j] - base[i]) * nu[i]).sum()
        ok = newton(s, u, ~ok, 40, 10 * curve.spacing)
    if allow_unpaired:
        return u, nu, s, ok
    if not ok.all():
        nbad = int((~ok).sum())
        raise errors.Unpaired(f"{nbad} reference fibers failed to pair")
    return u, nu, s


@dataclass(frozen=True)
class RelEntropyResult:
    value: float
    tail_bound: float


def _pairwise_density_difference(reference, s_grid, u, nu, cfg):
    """Stable density difference (curve minus reference) per reference arc node.

    The paired point is c = x + u*nu.  Writing both densities as
    w = r^(n-1) e^(|x|^2/4) |gamma'|, the difference is evaluated as
    w_ref * expm1(delta log) to keep full precision when the curves almost
    coincide.  Returns the integrand in reference arc length (sphere factor
    included).
    """
    sp = reference.spline()
    dsp = sp.derivative()
    base = sp(s_grid)
    tb = dsp(s_grid)
    speed_ref_sq = (tb * tb).sum(axis=1)

    # all difference terms are built from the offset field directly so that
    # nothing O(1) is differenced under the exponential weight
    offset = u[:, None] * nu
    doffset = _fd_derivative(offset, s_grid)
    cross = 2.0 * (tb * doffset).sum(axis=1) + (doffset * doffset).sum(axis=1)
    dlog_speed = 0.5 * np.log1p(cross / speed_ref_sq)

    r_ref = np.maximum(base[:, 0], 1e-300)
    dlog_r = np.log1p(u * nu[:, 0] / r_ref)
    # |c|^2 - |x|^2 = 2 u (x . nu) + u^2 exactly
    dquad = (2.0 * u * (base * nu).sum(axis=1) + u**2) / 4.0
    dlog = dquad + (cfg.n - 1) * dlog_r + dlog_speed
    logw_ref = log_weight(base, cfg.n)
    if logw_ref.max() > cfg.exponent_cap:
        raise errors.OverflowRisk("weight exponent exceeds cap")
    speed_ref = np.sqrt(speed_ref_sq)
    return cfg.sphere_factor * np.exp(logw_ref) * speed_ref * np.expm1(dlog)


def _fd_derivative(values, s):
    """Second-order derivative of sampled values on a (possibly) nonuniform grid."""
    return np.gradient(values, s, axis=0, edge_order=2)


def relative_entropy_profile(curve, reference, radii, cfg=AmbientConfig(),
                             slope_tol=1e-6):
    """Ball-truncated entropy difference at each radius in ``radii``.

    Both hypersurfaces must be asymptotic to the same cone.  The difference
    is computed fiberwise over the reference (normal-graph pairing), cutting
    each ball precisely on the reference curve.
    """
    _check_same_cone(curve, reference, slope_tol)
    u, nu, _, ok = graph_over(curve, reference, allow_unpaired=True)
    rad = np.sqrt(reference.radius_sq)
    R_top = float(np.max(radii))
    if not ok.all():
        if rad[~ok].min() <= R_top:
            raise errors.Unpaired(
                f"{int((~ok).sum())} fibers failed inside radius {R_top:g}")
        u = np.where(ok, u, 0.0)
    s = reference.arclength
    dens = _pairwise_density_difference(reference, s, u, nu, cfg)
    out = []
    for R in np.atleast_1d(radii):
        out.append(_masked_trapezoid(dens, s, rad, R))
    return np.array(out)


def _masked_trapezoid(vals, s, rad, R):
    """Trapezoid of vals ds over {rad <= R}, linearly interpolating crossings."""
    total = 0.0
    inside = rad <= R
    v, q = vals, rad - R
    for i in np.nonzero(inside[:-1] | inside[1:])[0]:
        h = s[i + 1] - s[i]
        if inside[i] and inside[i + 1]:
            total += 0.5 * (v[i] + v[i + 1]) * h
        else:
            f = q[i] / (q[i] - q[i + 1])
            vc = v[i] + f * (v[i + 1] - v[i])
            if inside[i]:
                total += 0.5 * (v[i] + vc) * (f * h)
            else:
                total += 0.5 * (vc + v[i + 1]) * ((1.0 - f) * h)
    return float(total)


def relative_entropy(curve, reference, chart=None, cfg=AmbientConfig(),
                     slope_tol=1e-6) -> RelEntropyResult:
    """Renormalized weighted-area difference of two curves, with a tail bound.

    The value is the difference truncated to the ball of radius cfg.r_max;
    the reported tail bound is C_tail / r_max with C_tail fitted from the
    empirical annulus differences over [r_max/2, r_max].

    When a chart is supplied the difference is taken fiberwise in chart
    coordinates (see barriers.FiberedChart.relative_entropy); otherwise the
    curve is paired as a normal graph over the reference.
    """
    if curve is reference:
        return RelEntropyResult(0.0, 0.0)
    if chart is not None:
        return chart.relative_entropy(curve, reference, cfg)
    _check_same_cone(curve, reference, slope_tol)
    # cut strictly inside the sampled data; the very endpoint radius mixes
    # one-sided differencing with the truncation crossing
    rad_max = float(np.sqrt(reference.radius_sq).max())
    R = min(cfg.r_max, rad_max - 2.0 * reference.spacing)
    radii = np.linspace(R / 2.0, R, 9)
    vals = relative_entropy_profile(curve, reference, radii, cfg, slope_tol)
    diffs = np.abs(np.diff(vals))
    c_tail = float(np.max(diffs * radii[:-1])) if diffs.size else 0.0
    return RelEntropyResult(float(vals[-1]), c_tail / R)


# --- weighted volume -------------------------------------------------------
def weighted_volume(curve, reference, chart=None, cfg=AmbientConfig(),
                    order_tol=1e-9, fiber_points=32) -> float:
    """Weighted volume of the region between an ordered pair of curves.

    Integrates ``sphere_factor * r^(n-1) e^(|x|^2/4)`` over the region swept
    from the reference to the curve, fiberwise (chart fibers when a chart is
    given, reference normal fibers otherwise) with a fixed Gauss-Legendre
    rule per fiber.  Raises NotOrdered when the curve dips below the
    reference by more than ``order_tol``.
    """
    if chart is not None:
        return chart.weighted_volume(curve, reference, cfg, order_tol, fiber_points)
    u, nu, _ = graph_over(curve, reference)
    if u.min() < -order_tol:
        raise errors.NotOrdered(f"curve below reference by {-u.min():.3e}")
    u = np.maximum(u, 0.0)
    frames = compute_frames(reference, cfg)
    s = reference.arclength
    xq, wq = np.polynomial.legendre.leggauss(fiber_points)
    xq = 0.5 * (xq + 1.0)
    wq = 0.5 * wq
    fiber = np.zeros(len(s))
    base = reference.samples
    for q, w in zip(xq, wq):
        pts = base + (q * u)[:, None] * nu
        jac = np.abs(1.0 + q * u * frames.kappa)
        fiber += w * np.exp(log_weight(pts, cfg.n)) * jac
    fiber *= u
    return cfg.sphere_factor * float(np.trapezoid(fiber, s))


# --- function space norm estimators ---------------------------------------
@dataclass(frozen=True)
class NormReport:
    x_norm: float
    w_norm: float
    y_upper: float
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PointGrid:
    """Sampling grid over a half-plane region times unit directions."""

    points: np.ndarray      # (M, 2)
    spacing: float

    @classmethod
    def box(cls, r_max, z_max, num=48):
        rr = np.linspace(0.0, r_max, num)
        zz = np.linspace(-z_max, z_max, num)
        R, Z = np.meshgrid(rr, zz)
        pts = np.stack([R.ravel(), Z.ravel()], axis=1)
        return cls(pts, max(rr[1] - rr[0], zz[1] - zz[0]))

    def refined(self):
        rr = np.unique(self.points[:, 0])
        zz = np.unique(self.points[:, 1])
        r2 = np.linspace(rr[0], rr[-1], 2 * len(rr) - 1)
        z2 = np.linspace(zz[0], zz[-1], 2 * len(zz) - 1)
        R, Z = np.meshgrid(r2, z2)
        return PointGrid(np.stack([R.ravel(), Z.ravel()], axis=1), self.spacing / 2)


_DIRS = np.array([[np.cos(a), np.sin(a)] for a in np.linspace(0, np.pi, 8, endpoint=False)])


def _grid_estimates(psi, grid: PointGrid, n):
    """(sup |psi|, Lip seminorm, sup |grad_v psi|, Lip of grad_v, decay sup)."""
    pts = grid.points
    M = len(pts)
    vals = np.stack([psi(pts, np.tile(d, (M, 1))) for d in _DIRS], axis=1)
    sup = float(np.abs(vals).max())

    hdir = 1e-5
    grads = []
    for k, d in enumerate(_DIRS):
        perp = np.array([-d[1], d[0]])
        dp = d[None, :] + hdir * perp[None, :]
        dm = d[None, :] - hdir * perp[None, :]
        dp /= np.linalg.norm(dp, axis=1)[:, None]
        dm /= np.linalg.norm(dm, axis=1)[:, None]
        g = (psi(pts, np.tile(dp, (M, 1))) - psi(pts, np.tile(dm, (M, 1)))) / (2 * hdir)
        grads.append(g)
    grads = np.stack(grads, axis=1)
    sup_grad = float(np.abs(grads).max())
    rad = np.linalg.norm(pts, axis=1)
    decay_sup = float(((1.0 + rad)[:, None] * np.abs(grads)).max())

    # Lipschitz seminorms from neighbor difference quotients on the grid
    def lip_of(field):
        rr = np.unique(pts[:, 0]); zz = np.unique(pts[:, 1])
        F = field.reshape(len(zz), len(rr), -1)
        dr = np.abs(np.diff(F, axis=1)).max() / (rr[1] - rr[0]) if len(rr) > 1 else 0.0
        dz = np.abs(np.diff(F, axis=0)).max() / (zz[1] - zz[0]) if len(zz) > 1 else 0.0
        return float(max(dr, dz))

    lip = lip_of(vals)
    lip_grad = lip_of(grads)
    # direction-Lipschitz (variation across the direction samples)
    dv = np.linalg.norm(np.diff(np.vstack([_DIRS, _DIRS[:1]]), axis=0), axis=1)
    ddv = np.abs(np.diff(np.concatenate([vals, vals[:, :1]], axis=1), axis=1)) / dv[None, :]
    lip = max(lip, float(ddv.max()))
    return sup, lip, sup_grad, lip_grad, decay_sup


def _w_norm_grid(psi, grid: PointGrid, n, cap):
    """Grid sup of the rapid-decay norm; inf when the sup diverges.

    The true norm is a sup over an unbounded region: when the weighted values
    still grow on the outermost shell of the grid (or the weight exponent
    overflows), the estimator reports infinity.
    """
    pts = grid.points
    rad = np.linalg.norm(pts, axis=1)
    exponent = rad**2 / 4.0
    if exponent.max() > cap:
        return math.inf
    vals = np.stack([np.abs(psi(pts, np.tile(d, (len(pts), 1)))) for d in _DIRS], axis=1)
    weight = (1.0 + rad) ** (n + 1) * np.exp(exponent)
    weighted = weight[:, None] * vals
    total = float(weighted.max())
    if total == 0.0:
        return 0.0
    shell = rad >= 0.9 * rad.max()
    inner = float(weighted[~shell].max()) if (~shell).any() else 0.0
    if float(weighted[shell].max()) > inner:
        return math.inf
    return total


def function_space_norms(psi: TestFunction, grid: PointGrid,
                         cfg: AmbientConfig = AmbientConfig(),
                         split_radii=(1.0, 2.0, 4.0, 6.0),
                         stability_tol=0.10) -> NormReport:
    """Grid estimates of the Lipschitz-type, rapid-decay and split norms.

    x_norm estimates ||psi||_Lip + ||grad_v psi||_Lip + sup (1+|x|)|grad_v psi|;
    w_norm estimates sup (1+|x|)^(n+1) e^(|x|^2/4) |psi| (inf when the
    exponent cap is exceeded, reported in details); y_upper minimizes
    x_norm(far part) + w_norm(near part) over a family of radial splittings
    together with the two trivial splittings, an upper bound for the
    infimal-splitting norm.  Estimates are refinement-checked; a >10% drift
    raises GridTooCoarse.
    """
    n = cfg.n

    def x_norm_of(f):
        sup, lip, sup_g, lip_g, decay = _grid_estimates(f, grid, n)
        return (sup + lip) + (sup_g + lip_g) + decay

    zerolike = _grid_estimates(psi, grid, n)
    if max(zerolike[0], zerolike[1]) == 0.0:
        return NormReport(0.0, 0.0, 0.0, {"zero": True})

    x_norm = x_norm_of(psi)
    sup2 = _grid_estimates(psi, grid.refined(), n)
    base = max(abs(zerolike[0] + zerolike[1]), 1e-30)
    drift = abs((sup2[0] + sup2[1]) - (zerolike[0] + zerolike[1])) / base
    if drift > stability_tol:
        raise errors.GridTooCoarse(f"sup/Lip estimate drifts {drift:.1%} under refinement")

    w_norm = _w_norm_grid(psi, grid, n, cfg.exponent_cap)
    overflow = not math.isfinite(w_norm)

    candidates = [x_norm, w_norm]
    for R in split_radii:
        cut = BallCutoff(R, 1.0)
        near = TestFunction(lambda p, v, c=cut: psi(p, v) * c(p), name="near")
        far = TestFunction(lambda p, v, c=cut: psi(p, v) * (1.0 - c(p)), name="far")
        wn = _w_norm_grid(lambda p, v, f=near: f(p, v), grid, n, cfg.exponent_cap)
        if not math.isfinite(wn):
            continue
        candidates.append(x_norm_of(far) + wn)
    y_upper = float(min(candidates))
    return NormReport(x_norm, w_norm, y_upper,
                      {"overflow": overflow, "splittings_tried": len(candidates)})


# --- misc utilities --------------------------------------------------------
def hausdorff_distance(curve_a: ProfileCurve, curve_b: ProfileCurve) -> float:
    """Symmetric Hausdorff distance between the sampled polylines."""
    da = _points_to_curve(curve_a.samples, curve_b)
    db = _points_to_curve(curve_b.samples, curve_a)
    return float(max(da.max(), db.max()))


def _points_to_curve(points, curve):
    _, foot, _ = curve.nearest(points)
    return np.linalg.norm(points - foot, axis=1)


def segment_curve(r0, r1, z, num=None, spacing=1e-3, n_end=CONICAL_KIND):
    """Horizontal test segment z = const, r in [r0, r1]."""
    if num is None:
        num = max(int(round((r1 - r0) / spacing)) + 1, 4)
    r = np.linspace(r0, r1, num)
    pts = np.stack([r, np.full_like(r, float(z))], axis=1)
    kinds = (AXIS_KIND if r0 == 0.0 else CONICAL_KIND, n_end)
    return ProfileCurve(pts, kinds, orientation=1, slopes=(None, 0.0))


def arc_curve(radius, ang0, ang1, num=2001):
    """Circle arc centered at the origin with outward normal."""
    ang = np.linspace(ang0, ang1, num)
    pts = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # traversal with increasing angle has left normal pointing inward
    return ProfileCurve(pts, (CONICAL_KIND, CONICAL_KIND), orientation=-1,
                        slopes=(None, None))
