"""Vector fields, flows, and first-variation machinery.

All fields are rotationally equivariant and represented in the (r, z) half
plane as 2d fields (their meridian components).  The ambient divergence of
such a field picks up the rotational term (n-1) Y_r / r.

The distinguished non-compact field is built from the unit normal extension
N of the reference expander: X0 = x - (x.N)N is tangent to the reference,
and Y0 = chi |x|^(-2) X0 with a radial cutoff chi vanishing inside a ball.
Flows are integrated by RK4; the area element of a flowed hypersurface
changes by the tangential Jacobian times the weight factor
e^((|Phi|^2-|x|^2)/4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .geometry import (AmbientConfig, ProfileCurve, compute_frames,
                       log_weight)


# --- normal extension of a reference expander ------------------------------
@dataclass
class NormalExtension:
    """Smooth unit field N(p) = nu(nearest point on the reference curve).

    Evaluated through the reference spline; ``c2_fit`` is the fitted
    constant in |x.N| <= c2_fit (1+|x|)^(-1) over the sampled domain.
    """

    reference: ProfileCurve
    mirror_symmetric: bool = False
    c2_fit: float = float("nan")

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.mirror_symmetric:
            flip = points[:, 1] < 0.0
            q = points.copy()
            q[flip, 1] *= -1.0
            _, _, off = self.reference.nearest(q)
            n = self._nu_at(q)
            n[flip, 1] *= -1.0
            return n
        return self._nu_at(points)

    def _nu_at(self, points):
        s, foot, _ = self.reference.nearest(points)
        dsp = self.reference.spline().derivative()
        t = dsp(s)
        t /= np.linalg.norm(t, axis=1)[:, None]
        nu = self.reference.orientation * np.stack([-t[:, 1], t[:, 0]], axis=1)
        return nu


def build_normal_extension(reference: ProfileCurve, sample_points=None,
                           mirror_symmetric=False) -> NormalExtension:
    """Nearest-point normal extension with the fitted decay constant.

    The fit samples |x.N| (1+|x|) over ``sample_points`` (default: a tube
    around the reference tail) and records the max as c2_fit; |N| = 1 and
    N = nu on the curve hold by construction and are spot checked.
    """
    ext = NormalExtension(reference, mirror_symmetric)
    if sample_points is None:
        sel = np.sqrt(reference.radius_sq) >= 1.0
        base = reference.samples[sel][::10]
        frames = compute_frames(reference, AmbientConfig(n=2, r_max=1e9))
        nu = frames.nu[sel][::10]
        sample_points = np.vstack([base + t * nu for t in (-0.2, 0.0, 0.2)])
        sample_points = sample_points[sample_points[:, 0] > 1e-6]
    n_vals = ext(sample_points)
    norms = np.linalg.norm(n_vals, axis=1)
    if np.abs(norms - 1.0).max() > 1e-9:
        raise errors.NumericalError("normal extension is not unit length")
    rad = np.linalg.norm(sample_points, axis=1)
    xdotn = np.abs((sample_points * n_vals).sum(axis=1))
    ext.c2_fit = float((xdotn * (1.0 + rad)).max())
    # on-curve identity
    s_chk = reference.arclength[:: max(len(reference) // 64, 1)]
    pts_chk = reference.point(s_chk)
    pts_chk = pts_chk[pts_chk[:, 0] > 1e-6]
    frames_nu = ext(pts_chk)
    _, _, off = reference.nearest(pts_chk)
    if np.abs(off).max() > 1e-8:
        raise errors.ProjectionAmbiguous("on-curve projection drifted")
    return ext


def smooth_radial_step(rad, inner, outer):
    """C^2 quintic step: 0 for rad <= inner, 1 for rad >= outer."""
    t = np.clip((np.asarray(rad) - inner) / max(outer - inner, 1e-12), 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


# --- vector field specification ---------------------------------------------
class VectorFieldSpec:
    """alpha * Y0 + compact part, with admissibility bookkeeping.

    ``compact_fn`` maps (M,2) points to (M,2) meridian vectors; derivatives
    are taken by centered differences at h = 1e-4 (1+|x|).
    """

    def __init__(self, alpha=0.0, compact_fn=None, normal_ext=None,
                 cutoff_radius=None, support_radius=math.inf, name="Y"):
        self.alpha = float(alpha)
        self.compact_fn = compact_fn
        self.normal_ext = normal_ext
        self.cutoff_radius = cutoff_radius
        self.support_radius = support_radius
        self.name = name
        if alpha != 0.0 and (normal_ext is None or cutoff_radius is None):
            raise errors.InputError("alpha != 0 needs the normal extension and cutoff")

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(points)
        if self.alpha != 0.0:
            rad = np.linalg.norm(points, axis=1)
            chi = smooth_radial_step(rad, self.cutoff_radius,
                                     self.cutoff_radius + 1.0)
            act = chi > 0.0
            if act.any():
                nv = self.normal_ext(points[act])
                xdn = (points[act] * nv).sum(axis=1)
                x0 = points[act] - xdn[:, None] * nv
                out[act] += self.alpha * (chi[act] / np.maximum(
                    rad[act] ** 2, 1e-12))[:, None] * x0
        if self.compact_fn is not None:
            out += np.asarray(self.compact_fn(points), dtype=float)
        return out

    def jacobian(self, points):
        """2d meridian Jacobian J[i] = [[drYr, dzYr], [drYz, dzYz]] by FD."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        rad = np.linalg.norm(points, axis=1)
        h = 1e-4 * (1.0 + rad)
        J = np.empty((len(points), 2, 2))
        for k, e in enumerate((np.array([1.0, 0.0]), np.array([0.0, 1.0]))):
            dp = points + h[:, None] * e[None, :]
            dm = points - h[:, None] * e[None, :]
            dm[:, 0] = np.maximum(dm[:, 0], 0.0)
            step = dp[:, k] - dm[:, k]
            J[:, :, k] = (self(dp) - self(dm)) / step[:, None]
        return J

    def divergence(self, points, n):
        """Ambient divergence in R^(n+1): 2d trace + (n-1) Y_r / r."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        J = self.jacobian(points)
        vals = self(points)
        r = points[:, 0]
        rot = np.empty(len(points))
        pos = r > 1e-7
        rot[pos] = vals[pos, 0] / r[pos]
        # on the axis Y_r -> 0 for a smooth equivariant field; use d(Y_r)/dr
        rot[~pos] = J[~pos, 0, 0]
        return J[:, 0, 0] + J[:, 1, 1] + (n - 1) * rot

    def shape_operator_term(self, points, directions):
        """Q(p, v) = (grad_v Y) . v for meridian unit directions v."""
        J = self.jacobian(points)
        v = np.atleast_2d(directions)
        return np.einsum("mi,mij,mj->m", v, J, v)

    def field_norm(self, grid_points):
        """Grid estimate of the decaying-field norm used for admissibility."""
        pts = np.atleast_2d(grid_points)
        rad = np.linalg.norm(pts, axis=1)
        vals = np.linalg.norm(self(pts), axis=1)
        total = float(((1.0 + rad) ** 3 * vals).max())
        J = self.jacobian(pts)
        total += float(((1.0 + rad) ** 2 *
                        np.abs(J).reshape(len(pts), -1).max(axis=1)).max())
        return total


def make_Y0(normal_ext: NormalExtension, cutoff_radius: float,
            alpha: float = 1.0) -> VectorFieldSpec:
    """The tangential large-scale field alpha * chi |x|^(-2) (x - (x.N)N)."""
    return VectorFieldSpec(alpha=alpha, normal_ext=normal_ext,
                           cutoff_radius=cutoff_radius, name="y0")


def gaussian_bump_field(center, width, amplitude, direction) -> VectorFieldSpec:
    """Compactly supported smooth bump field (clipped Gaussian profile)."""
    center = np.asarray(center, dtype=float)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)

    def fn(points):
        d2 = ((points - center) ** 2).sum(axis=1) / width**2
        prof = np.where(d2 < 16.0, np.exp(-d2) - math.exp(-16.0), 0.0)
        return amplitude * np.maximum(prof, 0.0)[:, None] * direction[None, :]

    return VectorFieldSpec(compact_fn=fn, name="gaussian_bump",
                           support_radius=float(np.linalg.norm(center) + 4 * width))


# --- flows -------------------------------------------------------------------
@dataclass
class FlowResult:
    points: np.ndarray          # flowed positions (M,2)
    jacobian: np.ndarray        # tangential Jacobian J of the hypersurface map
    expander_jacobian: np.ndarray
    t: float


def flow_points(Y: VectorFieldSpec, t: float, points, steps=32):
    """RK4 integration of d Phi/dt = Y(Phi)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    if t == 0.0:
        return pts
    dt = t / steps
    for _ in range(steps):
        k1 = Y(pts)
        k2 = Y(pts + 0.5 * dt * k1)
        k3 = Y(pts + 0.5 * dt * k2)
        k4 = Y(pts + dt * k3)
        pts = pts + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        pts[:, 0] = np.maximum(pts[:, 0], 0.0)
    return pts


def flow(Y: VectorFieldSpec, t: float, curve: ProfileCurve,
         cfg: AmbientConfig, steps=32, domain=None) -> FlowResult:
    """Flow a profile curve and compute the hypersurface Jacobians.

    The tangential Jacobian along the flowed curve is the meridian stretch
    |d Phi(gamma)/ds| times the rotational stretch (r(Phi)/r)^(n-1); the
    expander Jacobian multiplies by the weight factor
    e^((|Phi|^2-|x|^2)/4).  With a ``domain`` (an object exposing
    ``contains(points)``) a point leaving it raises LeftDomain.
    """
    base = curve.samples
    moved = flow_points(Y, t, base, steps)
    if domain is not None and not bool(np.all(domain.contains(moved))):
        raise errors.LeftDomain("flowed points exited the domain")
    s = curve.arclength
    dmoved = np.gradient(moved, s, axis=0, edge_order=2)
    stretch = np.linalg.norm(dmoved, axis=1)
    r0 = np.maximum(base[:, 0], 1e-12)
    r1 = np.maximum(moved[:, 0], 1e-12)
    rot = (r1 / r0) ** (cfg.n - 1)
    jac = stretch * rot
    dquad = ((moved**2).sum(axis=1) - (base**2).sum(axis=1)) / 4.0
    return FlowResult(points=moved, jacobian=jac,
                      expander_jacobian=jac * np.exp(dquad), t=t)


def first_variation(curve: ProfileCurve, reference: ProfileCurve,
                    Y: VectorFieldSpec, cfg: AmbientConfig) -> float:
    """d/dt at t=0 of the flowed relative entropy.

    Evaluates int (div Y - (grad_nu Y).nu + (x/2).Y) w dH over the curve
    minus the same over the reference.  With a reference the integrands are
    paired fiberwise (the curves nearly coincide at infinity, and for the
    large-scale tangential field each integral alone diverges), so nothing
    large is differenced.  reference=None integrates the single curve,
    which requires a compactly supported field.
    """
    if reference is None or reference is curve:
        if reference is curve:
            return 0.0
        if Y.alpha != 0.0 and not math.isfinite(Y.support_radius):
            raise errors.NonFinite(
                "single-curve variation needs a compactly supported field")
        return _variation_integral(curve, Y, cfg)
    from .geometry import graph_over
    u, nu, _, ok = graph_over(curve, reference, allow_unpaired=True)
    pts_r = reference.samples
    rad_r = np.sqrt(reference.radius_sq)
    R_cut = min(cfg.r_max, float(rad_r.max()) - 2.0 * reference.spacing)
    if (~ok).any() and rad_r[~ok].min() <= R_cut:
        raise errors.Unpaired("fibers failed to pair inside the cut radius")
    u = np.where(ok, u, 0.0)
    s_grid = reference.arclength
    offset = u[:, None] * nu
    pts_c = pts_r + offset

    def gfun(pts, normals):
        return (Y.divergence(pts, cfg.n)
                - Y.shape_operator_term(pts, normals)
                + 0.5 * (pts * Y(pts)).sum(axis=1))

    frames_r = compute_frames(reference, cfg)
    # normals of the paired curve from its sigma-derivative
    dpts_c = np.gradient(pts_c, s_grid, axis=0, edge_order=2)
    sp_c = np.linalg.norm(dpts_c, axis=1)
    t_c = dpts_c / sp_c[:, None]
    nu_c = reference.orientation * np.stack([-t_c[:, 1], t_c[:, 0]], axis=1)
    g_c = gfun(pts_c, nu_c)
    g_r = gfun(pts_r, frames_r.nu)

    tb = reference.spline().derivative()(s_grid)
    speed_sq = (tb * tb).sum(axis=1)
    doff = np.gradient(offset, s_grid, axis=0, edge_order=2)
    cross = 2.0 * (tb * doff).sum(axis=1) + (doff * doff).sum(axis=1)
    dlog = (2.0 * u * (pts_r * nu).sum(axis=1) + u**2) / 4.0 \
        + (cfg.n - 1) * np.log1p(u * nu[:, 0] / np.maximum(pts_r[:, 0], 1e-300)) \
        + 0.5 * np.log1p(cross / speed_sq)
    logw = log_weight(pts_r, cfg.n)
    if logw.max() > cfg.exponent_cap:
        raise errors.NonFinite("weight exponent exceeds cap")
    w_sp = np.exp(logw) * np.sqrt(speed_sq) * cfg.sphere_factor
    integrand = w_sp * (g_c * np.expm1(dlog) + (g_c - g_r))
    inside = rad_r <= R_cut
    return float(np.trapezoid(np.where(inside, integrand, 0.0), s_grid))


def _variation_integral(curve: ProfileCurve, Y: VectorFieldSpec,
                        cfg: AmbientConfig) -> float:
    frames = compute_frames(curve, cfg)
    pts = curve.samples
    if math.isfinite(Y.support_radius):
        inside = np.sqrt(curve.radius_sq) <= Y.support_radius
        if not inside.any():
            return 0.0
    g = (Y.divergence(pts, cfg.n)
         - Y.shape_operator_term(pts, frames.nu)
         + 0.5 * (pts * Y(pts)).sum(axis=1))
    logw = log_weight(pts, cfg.n)
    if logw.max() > cfg.exponent_cap:
        raise errors.NonFinite("weight exponent exceeds cap")
    w = np.exp(logw) * cfg.sphere_factor
    return float(np.trapezoid(g * w, curve.arclength))


# --- Taylor-order validations -------------------------------------------------
@dataclass
class TaylorReport:
    weight_order: float
    jacobian_order: float
    weight_constant: float
    jacobian_constant: float
    flow_quadratic_constant: float
    orders_ok: bool
    details: dict = field(default_factory=dict)


def taylor_checks(Y: VectorFieldSpec, curve: ProfileCurve, t_grid,
                  cfg: AmbientConfig, min_order=1.9) -> TaylorReport:
    """Fitted orders of the weight-factor and Jacobian Taylor remainders.

    The remainders e^((|Phi_t|^2-|x|^2)/4) - 1 - (t/2)(x.Y) and
    J^E Phi_t - 1 - t (div Y - Q + (x/2).Y) are fitted as C t^order over
    t_grid; the flow displacement | |Phi_t|^2 - |x|^2 - 2 alpha t | is
    checked against C (1+|x|)^(-2) and the fitted constant reported.
    Raises OrderFail when a fitted order drops below ``min_order``.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    pts = curve.samples
    frames = compute_frames(curve, cfg)
    xdY = (pts * Y(pts)).sum(axis=1)
    lin_jac = (Y.divergence(pts, cfg.n)
               - Y.shape_operator_term(pts, frames.nu) + 0.5 * xdY)
    rad = np.sqrt(curve.radius_sq)
    w_res, j_res, f_const = [], [], []
    for t in t_grid:
        fr = flow(Y, t, curve, cfg)
        dquad = ((fr.points**2).sum(axis=1) - (pts**2).sum(axis=1))
        wfac = np.exp(dquad / 4.0)
        w_res.append(np.abs(wfac - 1.0 - 0.5 * t * xdY).max())
        j_res.append(np.abs(fr.expander_jacobian - 1.0 - t * lin_jac).max())
        f_const.append(float((np.abs(dquad - 2.0 * Y.alpha * t)
                              * (1.0 + rad) ** 2).max()))
    w_res, j_res = np.array(w_res), np.array(j_res)

    def fit_order(res):
        mask = res > 1e-15
        if mask.sum() < 2:
            return 2.0, 0.0
        c = np.polyfit(np.log(t_grid[mask]), np.log(res[mask]), 1)
        return float(c[0]), float(math.exp(c[1]))

    worder, wconst = fit_order(w_res)
    jorder, jconst = fit_order(j_res)
    zero_field = bool(np.abs(Y(pts)).max() == 0.0)
    ok = zero_field or (worder >= min_order and jorder >= min_order)
    if not ok:
        raise errors.OrderFail(
            f"Taylor orders weight={worder:.2f}, jacobian={jorder:.2f}")
    return TaylorReport(weight_order=worder, jacobian_order=jorder,
                        weight_constant=wconst, jacobian_constant=jconst,
                        flow_quadratic_constant=float(np.max(f_const)),
                        orders_ok=ok,
                        details={"residual_weight": w_res.tolist(),
                                 "residual_jacobian": j_res.tolist()})
