"""Non-cutoff collision operator in Carleman form, ``Q = Q_s + Q_ns``.

Two evaluation paths share one quadrature geometry:

* pointwise functions (:func:`kf`, :func:`q_s`, :func:`q_ns`, :func:`q_total`)
  evaluate at arbitrary velocities with arbitrary callables and serve the
  diagnostics and tests;
* :class:`CollisionEngine` evaluates ``2 Q(M+f, M+f)`` on every active grid
  node.  The part linear in ``f`` is assembled once into a dense matrix, the
  quadratic part is computed by compiled loops.

Geometry.  For a node ``v`` and a direction ``sigma`` the kernel reads

    K_F(v, v + rho sigma) = 2^(d-1) C_b rho^(-d-2s) H_F(v, sigma, rho),
    H_F(v, sigma, rho) = int_{w perp sigma, |w| > rho} F(v+w) (rho^2+|w|^2)^(kappa/2) dw

with ``kappa = gamma + 1 + 2s``; the lower cut ``|w| > rho`` is the
``cos theta > 0`` support of ``b``.  The Maxwellian contribution to
``H`` is evaluated in closed form up to a 1-d integral; the grid part uses a
polar rule on the hyperplane (radial nodes ``t_j``, arc-length matched ring
nodes, piecewise-cubic interpolation in ``t``).  Only ``dim = 3`` is
supported by the collision code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline
from scipy.linalg import expm
from scipy.special import gamma as gamma_fn
from scipy.special import i0e, roots_legendre

from .core import PhysParams, VelocityGrid, maxwellian


# ----------------------------------------------------------------------------
# angular cross-section and the cancellation constant
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AngularCrossSection:
    s: float
    dim: int = 3
    cutoff_negative_cos: bool = True


def angular_b(cos_theta, xs: AngularCrossSection):
    """``|sin(theta/2)|^(-(d-1)-2s)`` on ``cos theta >= 0`` and zero otherwise."""
    c = np.asarray(cos_theta, dtype=float)
    if np.any(c < -1.0 - 1e-14) or np.any(c > 1.0 + 1e-14):
        raise ValueError("cos_theta must lie in [-1, 1]")
    half_sin2 = np.clip(0.5 * (1.0 - c), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        val = half_sin2 ** (-0.5 * ((xs.dim - 1) + 2.0 * xs.s))
    if xs.cutoff_negative_cos:
        val = np.where(c >= 0.0, val, 0.0)
    return val if val.ndim else float(val)


def sphere_area(k: int) -> float:
    """Surface measure of the unit sphere ``S^k`` in ``R^(k+1)``."""
    return 2.0 * math.pi ** (0.5 * (k + 1)) / gamma_fn(0.5 * (k + 1))


@dataclass(frozen=True)
class CancellationConstant:
    value: float
    gamma: float
    s: float
    quadrature_error_estimate: float


def _cancellation_integral(params: PhysParams, xs: AngularCrossSection, n_nodes: int) -> float:
    # substitute theta = (pi/2) u^(1/(2-2s)); the theta^(1-2s) endpoint
    # behaviour becomes smooth in u
    d, g, s = params.dim, params.gamma, params.s
    x, w = roots_legendre(n_nodes)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * w
    p = 1.0 / (2.0 - 2.0 * s)
    theta = 0.5 * math.pi * u ** p
    dtheta = 0.5 * math.pi * p * u ** (p - 1.0)
    # b and the bracket from sin(theta/2) directly: cos(theta) rounds to 1 near 0
    sh = np.sin(0.5 * theta)
    b = sh ** (-(d - 1) - 2.0 * xs.s)
    bracket = np.expm1(-0.5 * (d + g) * np.log1p(-sh * sh))
    integrand = np.sin(theta) ** (d - 2) * b * bracket
    return float(sphere_area(d - 2) * np.sum(integrand * dtheta * wu)) * params.kernel_const


def cancellation_constant(params: PhysParams, xs: AngularCrossSection | None = None,
                          n_nodes: int = 2000, tol: float = 1e-8,
                          max_refinements: int = 4) -> CancellationConstant:
    """Constant ``C`` shared by ``Q_ns`` and the cancellation identity.

    ``C = |S^(d-2)| int_0^(pi/2) sin^(d-2) theta b(cos theta)
    [cos^(-d-gamma)(theta/2) - 1] dtheta`` (times ``kernel_const``), computed by
    Gauss-Legendre quadrature and refined until two successive node counts
    agree to ``tol``.
    """
    if params.gamma + params.dim <= 0:
        raise ValueError("cancellation constant requires gamma + dim > 0")
    if params.dim < 2:
        raise ValueError("cancellation constant requires dim >= 2")
    xs = xs or AngularCrossSection(params.s, params.dim)
    n = int(n_nodes)
    prev = _cancellation_integral(params, xs, n)
    for _ in range(max_refinements):
        n *= 2
        cur = _cancellation_integral(params, xs, n)
        err = abs(cur - prev)
        if err <= tol * abs(cur):
            return CancellationConstant(cur, params.gamma, params.s, err)
        prev = cur
    raise ArithmeticError(f"cancellation constant did not converge (last change {err:.3e})")


# ----------------------------------------------------------------------------
# quadrature specification and geometry
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature resolution.

    Parameters
    ----------
    n_radii : int
        Gauss-Legendre nodes in ``log rho`` on ``[r_min, r_max]``.
    r_min : float
        Inner radius in units of the velocity spacing; the ball below it is
        closed by a second-order Taylor model.
    r_max : float
        Outer radius in units of ``R``; also the hyperplane disc radius.
    n_directions : int
        Gauss nodes of the polar cosine on the half sphere; the azimuth uses
        twice as many uniform nodes, so there are ``2 n_directions**2``
        paired directions.
    n_hyperplane : int
        Radial nodes across the hyperplane disc; ring nodes are arc-length
        matched, so the node density scales in both hyperplane axes.
    """

    n_radii: int = 16
    r_min: float = 0.25
    r_max: float = 2.0
    n_directions: int = 6
    n_hyperplane: int = 32

    def __post_init__(self):
        if self.r_min <= 0 or self.r_max <= 0:
            raise ValueError("quadrature radii must be positive")
        if self.n_radii < 2 or self.n_directions < 1 or self.n_hyperplane < 4:
            raise ValueError("quadrature node counts too small")

    def doubled(self, which: str = "all") -> "QuadratureSpec":
        if which == "hyperplane":
            return replace(self, n_hyperplane=2 * self.n_hyperplane)
        if which == "all":
            return replace(self, n_radii=2 * self.n_radii, n_directions=2 * self.n_directions,
                           n_hyperplane=2 * self.n_hyperplane)
        raise ValueError(which)


def _log_radial_rule(r_min: float, r_max: float, n: int, s: float):
    """Radii and weights for ``int_0^r_max rho^(-1-2s) phi(rho) drho`` with
    ``phi(rho) = O(rho^2)``; node 0 is the Taylor closure at ``r_min``."""
    x, w = roots_legendre(n)
    lo, hi = math.log(r_min), math.log(r_max)
    rho = np.exp(0.5 * (lo + hi) + 0.5 * (hi - lo) * x)
    wr = 0.5 * (hi - lo) * w * rho
    radii = np.concatenate([[r_min], rho])
    weights = np.concatenate([[r_min ** (-2.0 * s) / (2.0 - 2.0 * s)], wr * rho ** (-1.0 - 2.0 * s)])
    return radii, weights


def _half_sphere(n_polar: int):
    x, w = roots_legendre(2 * n_polar)
    keep = x > 0
    mu, wmu = x[keep], w[keep]
    n_az = 2 * n_polar
    psi = 2.0 * np.pi * (np.arange(n_az) + 0.5) / n_az
    # fixed generic orientation keeps directions off the lattice axes
    e3 = np.array([0.3, 0.2, 1.0])
    e1, e2, e3 = _orthonormal_frame(e3)
    dirs, wts = [], []
    for m, wm in zip(mu, wmu):
        st = math.sqrt(1.0 - m * m)
        for p in psi:
            dirs.append(m * e3 + st * (math.cos(p) * e1 + math.sin(p) * e2))
            wts.append(wm * 2.0 * np.pi / n_az)
    return np.array(dirs), np.array(wts)


def _orthonormal_frame(axis):
    e3 = np.asarray(axis, dtype=float)
    e3 = e3 / np.linalg.norm(e3)
    a = np.array([1.0, 0.0, 0.0]) if abs(e3[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = a - e3 * np.dot(a, e3)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(e3, e1), e3


def _cubic_t_weights(radii, t_max: float, n_t: int, kappa: float):
    """Weights ``W[i, j]`` with ``sum_j W[i,j] A(t_j) ~ int_{rho_i}^{t_max} t
    (rho_i^2+t^2)^(kappa/2) A(t) dt`` for piecewise-cubic interpolation of
    ``A`` through the uniform nodes; ``A`` is extended evenly across 0."""
    dt = t_max / n_t
    x, w = roots_legendre(12)
    W = np.zeros((len(radii), n_t + 1))
    for i, r in enumerate(radii):
        for j in range(n_t):
            a, b = max(j * dt, r), (j + 1) * dt
            if b <= a:
                continue
            tt = 0.5 * (a + b) + 0.5 * (b - a) * x
            base = tt * (r * r + tt * tt) ** (0.5 * kappa) * 0.5 * (b - a) * w
            k0 = min(j - 1, n_t - 3)
            idx = np.arange(k0, k0 + 4)
            for m in range(4):
                lag = np.ones_like(tt)
                for mm in range(4):
                    if mm != m:
                        lag *= (tt - idx[mm] * dt) / ((idx[m] - idx[mm]) * dt)
                W[i, abs(idx[m])] += np.sum(base * lag)
    return W


def _maxwell_plane_profile(p, rho, kappa: float, n_seg: int = 48):
    """``Phi(p, rho) = int_rho^inf t (rho^2+t^2)^(kappa/2) exp(-(t-p)^2/2) i0e(p t) dt``."""
    p = np.asarray(p, dtype=float)
    rho = np.asarray(rho, dtype=float)
    p, rho = np.broadcast_arrays(p, rho)
    x, w = roots_legendre(8)
    top = np.maximum(rho, p) + 11.0
    seg = (top - rho) / n_seg
    out = np.zeros(p.shape)
    for k in range(n_seg):
        a = rho + k * seg
        t = a[..., None] + 0.5 * seg[..., None] * (x + 1.0)
        val = t * (rho[..., None] ** 2 + t * t) ** (0.5 * kappa)
        val *= np.exp(-0.5 * (t - p[..., None]) ** 2) * i0e(p[..., None] * t)
        out += 0.5 * seg * np.sum(val * w, axis=-1)
    return out


def maxwell_convolution(speed, gamma: float, dim: int = 3):
    """``(M * |.|^gamma)(v)`` as a function of ``|v|`` (dim 3)."""
    if dim != 3:
        raise NotImplementedError("collision code supports dim = 3 only")
    a = np.atleast_1d(np.asarray(speed, dtype=float))
    x, w = roots_legendre(64)
    out = np.zeros_like(a)
    norm = (2.0 * np.pi) ** -1.5 * 2.0 * np.pi
    for lo_fn, hi_fn in ((lambda a: 0.0 * a, lambda a: a), (lambda a: a, lambda a: a + 12.0)):
        lo, hi = lo_fn(a), hi_fn(a)
        r = 0.5 * (lo + hi)[:, None] + 0.5 * (hi - lo)[:, None] * x
        wr = 0.5 * (hi - lo)[:, None] * w
        aa = a[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            if abs(gamma + 2.0) > 1e-12:
                ang = ((aa + r) ** (gamma + 2) - np.abs(aa - r) ** (gamma + 2)) / (aa * r * (gamma + 2))
            else:
                ang = np.log((aa + r) / np.abs(aa - r)) / (aa * r)
            ang = np.where(aa > 0, ang, 2.0 * r ** gamma)
        out += np.sum(norm * np.exp(-0.5 * r * r) * r * r * ang * wr, axis=1)
    return out if np.ndim(speed) else float(out[0])


def cell_average_power(h: float, gamma: float, dim: int = 3, n: int = 24) -> float:
    """Mean of ``|w|^gamma`` over the cube ``[-h/2, h/2]^dim``."""
    x, w = roots_legendre(n)
    x = 0.25 * (x + 1.0)
    w = 0.25 * w
    mesh = np.meshgrid(*([x] * dim), indexing="ij")
    wm = np.ones_like(mesh[0])
    for k, m in enumerate(np.meshgrid(*([w] * dim), indexing="ij")):
        wm = wm * m
    r = np.sqrt(sum(m * m for m in mesh))
    return float(np.sum(wm * r ** gamma) * 2 ** dim) * h ** gamma


class CarlemanQuadrature:
    """Translation-invariant quadrature geometry shared by all evaluation paths."""

    def __init__(self, params: PhysParams, vgrid: VelocityGrid,
                 quad: QuadratureSpec | None = None, xs: AngularCrossSection | None = None,
                 constant: CancellationConstant | None = None):
        if params.dim != 3 or vgrid.dim != 3:
            raise NotImplementedError("collision code supports dim = 3 only")
        self.params = params
        self.vgrid = vgrid
        self.quad = quad or QuadratureSpec()
        self.xs = xs or AngularCrossSection(params.s, params.dim)
        self.constant = constant or cancellation_constant(params, self.xs)
        h, R, q = vgrid.spacing, vgrid.radius, self.quad
        self.r_min = q.r_min * h
        self.r_max = q.r_max * R
        self.radii, self.radial_weights = _log_radial_rule(self.r_min, self.r_max, q.n_radii, params.s)
        self.directions, self.direction_weights = _half_sphere(q.n_directions)
        self.plane_basis = np.array([_orthonormal_frame(sg)[:2] for sg in self.directions])
        self.prefactor = params.kernel_const * 2.0 ** (params.dim - 1)
        # hyperplane disc rule
        n_t = q.n_hyperplane
        self.t_max = self.r_max
        self.t_nodes = np.linspace(0.0, self.t_max, n_t + 1)
        dt = self.t_nodes[1]
        ring_t, ring_c, ring_s, ring_w = [0], [0.0], [0.0], [2.0 * np.pi]
        for j in range(1, n_t + 1):
            n_phi = max(8, 4 * math.ceil(2.0 * np.pi * self.t_nodes[j] / (4.0 * dt)))
            phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
            ring_t += [j] * n_phi
            ring_c += list(self.t_nodes[j] * np.cos(phi))
            ring_s += list(self.t_nodes[j] * np.sin(phi))
            ring_w += [2.0 * np.pi / n_phi] * n_phi
        self.ring_t = np.array(ring_t, dtype=np.int64)
        self.ring_w = np.array(ring_w)
        rc, rs = np.array(ring_c), np.array(ring_s)
        # offsets[s, k] = rc[k] e1(s) + rs[k] e2(s)
        self.ring_offsets = (rc[None, :, None] * self.plane_basis[:, 0, None, :]
                             + rs[None, :, None] * self.plane_basis[:, 1, None, :])
        self.t_weights = _cubic_t_weights(self.radii, self.t_max, n_t, params.kappa)

    # -- Maxwellian hyperplane integral ------------------------------------
    @cached_property
    def _profile_table(self):
        p_max = 3.0 * self.vgrid.radius + self.r_max + 1.0
        p = np.linspace(0.0, p_max, int(p_max / 0.02) + 1)
        prof = _maxwell_plane_profile(p[:, None], self.radii[None, :], self.params.kappa)
        return p_max, CubicSpline(p, prof, axis=0)

    def maxwell_plane(self, centers, sigma, radii=None):
        """Exact ``H_M(center, sigma, rho)``; broadcasts ``centers`` (..., 3)
        against ``sigma`` (..., 3).  ``radii=None`` uses the rule radii and a
        spline table, otherwise direct quadrature at the given radii."""
        centers = np.asarray(centers, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        vs = np.sum(centers * sigma, axis=-1)
        p2 = np.maximum(np.sum(centers * centers, axis=-1) - vs * vs, 0.0)
        p = np.sqrt(p2)
        pref = (2.0 * np.pi) ** -0.5 * np.exp(-0.5 * vs * vs)
        if radii is None:
            p_max, spline = self._profile_table
            if np.any(p > p_max):
                prof = _maxwell_plane_profile(p[..., None], self.radii, self.params.kappa)
            else:
                prof = spline(p)
            return pref[..., None] * prof
        prof = _maxwell_plane_profile(p, np.asarray(radii, dtype=float), self.params.kappa)
        return pref * prof

    @cached_property
    def conv_center_weight(self) -> float:
        return cell_average_power(self.vgrid.spacing, self.params.gamma, self.params.dim)


# ----------------------------------------------------------------------------
# off-grid evaluation
# ----------------------------------------------------------------------------

def _keys(u):
    """Keys (a = -1/2) cubic convolution weights for nodes -1, 0, 1, 2."""
    u2, u3 = u * u, u * u * u
    return (-0.5 * u3 + u2 - 0.5 * u,
            1.5 * u3 - 2.5 * u2 + 1.0,
            -1.5 * u3 + 2.0 * u2 + 0.5 * u,
            0.5 * u3 - 0.5 * u2)


def interpolate(vgrid: VelocityGrid, values: np.ndarray, points: np.ndarray, order: int = 1):
    """Multilinear (``order=1``) or Keys cubic (``order=3``) interpolation of
    nodal values, zero outside the lattice."""
    n = vgrid.n_per_axis
    arr = np.asarray(values, dtype=float).reshape(vgrid.shape)
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, vgrid.dim)
    x = (flat + vgrid.radius) / vgrid.spacing - 0.5
    i0 = np.floor(x).astype(np.int64)
    u = x - i0
    if order == 1:
        offsets = (0, 1)
        wts = [[1.0 - u[:, k], u[:, k]] for k in range(vgrid.dim)]
    elif order == 3:
        offsets = (-1, 0, 1, 2)
        wts = [list(_keys(u[:, k])) for k in range(vgrid.dim)]
    else:
        raise ValueError("order must be 1 or 3")
    out = np.zeros(flat.shape[0])
    for combo in np.ndindex(*([len(offsets)] * vgrid.dim)):
        idx = [i0[:, k] + offsets[c] for k, c in enumerate(combo)]
        ok = np.ones(flat.shape[0], dtype=bool)
        for ik in idx:
            ok &= (ik >= 0) & (ik < n)
        w = np.ones(flat.shape[0])
        for k, c in enumerate(combo):
            w = w * wts[k][c]
        vals = np.zeros(flat.shape[0])
        sel = tuple(np.where(ok, ik, 0) for ik in idx)
        vals[ok] = arr[sel][ok]
        out += w * vals
    return out.reshape(pts.shape[:-1])


@dataclass(frozen=True)
class Density:
    """Kernel argument ``maxwell * M + f_grid``, optionally multiplied by an
    indicator ``mask(points) -> bool``.  The grid part is interpolated
    multilinearly."""

    vgrid: VelocityGrid | None = None
    values: np.ndarray | None = None
    maxwell: float = 0.0
    mask: Callable | None = None

    def grid_part(self, points):
        pts = np.asarray(points, dtype=float)
        if self.values is None:
            return np.zeros(pts.shape[:-1])
        return interpolate(self.vgrid, self.values, pts, order=1)

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        val = self.grid_part(pts)
        if self.maxwell:
            val = val + self.maxwell * maxwellian(pts)
        if self.mask is not None:
            val = np.where(self.mask(pts), val, 0.0)
        return val

    def absolute(self) -> "Density":
        """Density representing ``|maxwell M + f|`` on the lattice nodes."""
        if self.maxwell and self.vgrid is not None:
            vals = np.abs(self.maxwell * maxwellian(self.vgrid.nodes) + self.values)
            return Density(self.vgrid, vals - abs(self.maxwell) * maxwellian(self.vgrid.nodes),
                           abs(self.maxwell), self.mask)
        vals = None if self.values is None else np.abs(self.values)
        return Density(self.vgrid, vals, abs(self.maxwell), self.mask)


@dataclass(frozen=True)
class GridFunction:
    """Test function ``maxwell * M + cubic interpolant of values``."""

    vgrid: VelocityGrid
    values: np.ndarray
    maxwell: float = 0.0

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        val = interpolate(self.vgrid, self.values, pts, order=3)
        if self.maxwell:
            val = val + self.maxwell * maxwellian(pts)
        return val


def maxwell_density(vgrid: VelocityGrid | None = None) -> Density:
    return Density(vgrid, None, 1.0)


# ----------------------------------------------------------------------------
# pointwise operators
# ----------------------------------------------------------------------------

def plane_integrals(density: Density, center, geom: CarlemanQuadrature,
                    sigma_index=None, fine_maxwell_factor: int = 8):
    """``H(center, sigma_k, rho_i)`` for the rule directions and radii.

    Without a mask the Maxwellian part is exact; with a mask it is summed on a
    ring rule ``fine_maxwell_factor`` times denser than the grid-part rule.
    """
    center = np.asarray(center, dtype=float)
    sig_idx = np.arange(len(geom.directions)) if sigma_index is None else np.atleast_1d(sigma_index)
    H = np.zeros((len(sig_idx), len(geom.radii)))
    if density.maxwell and density.mask is None:
        H += density.maxwell * geom.maxwell_plane(center[None, :], geom.directions[sig_idx])
    grid_only = Density(density.vgrid, density.values, 0.0, density.mask)
    if density.values is not None:
        for row, k in enumerate(sig_idx):
            vals = grid_only(center + geom.ring_offsets[k])
            A = np.bincount(geom.ring_t, weights=vals * geom.ring_w, minlength=len(geom.t_nodes))
            H[row] += geom.t_weights @ A
    if density.maxwell and density.mask is not None:
        fine = _fine_ring_rule(geom, fine_maxwell_factor)
        m_only = Density(None, None, density.maxwell, density.mask)
        for row, k in enumerate(sig_idx):
            e1, e2 = geom.plane_basis[k]
            pts = center + fine["c"][:, None] * e1 + fine["s"][:, None] * e2
            A = np.bincount(fine["t"], weights=m_only(pts) * fine["w"], minlength=fine["n_t"] + 1)
            H[row] += fine["W"] @ A
    return H


_FINE_CACHE: dict = {}


def _fine_ring_rule(geom: CarlemanQuadrature, factor: int):
    key = (id(geom), factor)
    if key in _FINE_CACHE:
        return _FINE_CACHE[key]
    n_t = geom.quad.n_hyperplane * factor
    t = np.linspace(0.0, geom.t_max, n_t + 1)
    dt = t[1]
    tt, cc, ss, ww = [0], [0.0], [0.0], [2.0 * np.pi]
    for j in range(1, n_t + 1):
        n_phi = max(8, 4 * math.ceil(2.0 * np.pi * t[j] / (4.0 * dt)))
        phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
        tt += [j] * n_phi
        cc += list(t[j] * np.cos(phi))
        ss += list(t[j] * np.sin(phi))
        ww += [2.0 * np.pi / n_phi] * n_phi
    rule = dict(t=np.array(tt), c=np.array(cc), s=np.array(ss), w=np.array(ww), n_t=n_t,
                W=_cubic_t_weights(geom.radii, geom.t_max, n_t, geom.params.kappa))
    _FINE_CACHE[key] = rule
    return rule


def _as_callable(g):
    if callable(g):
        return g
    raise TypeError("test function must be callable (use GridFunction for lattice data)")


def kf(density: Density, v, v_prime, geom: CarlemanQuadrature, n_t: int = 256, n_phi: int = 256):
    """Kernel ``K_F(v, v')`` by direct polar quadrature of the hyperplane
    integral through ``v`` orthogonal to ``v' - v`` (disc radius ``r_max``)."""
    v = np.asarray(v, dtype=float)
    vp = np.asarray(v_prime, dtype=float)
    u = vp - v
    rho = float(np.linalg.norm(u))
    if rho < 1e-12 * geom.vgrid.spacing:
        raise ValueError("kf is singular at v' = v")
    sigma = u / rho
    kappa = geom.params.kappa
    H = 0.0
    if density.maxwell and density.mask is None:
        H += density.maxwell * float(geom.maxwell_plane(v, sigma, radii=rho))
        rest = Density(density.vgrid, density.values, 0.0, None)
    else:
        rest = density
    if rest.values is not None or rest.maxwell:
        if rho < geom.t_max:
            e1, e2, _ = _orthonormal_frame(sigma)
            x, w = roots_legendre(n_t)
            t = rho + 0.5 * (geom.t_max - rho) * (x + 1.0)
            wt = 0.5 * (geom.t_max - rho) * w
            phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
            pts = (v[None, None, :] + t[:, None, None] * (np.cos(phi)[None, :, None] * e1
                                                         + np.sin(phi)[None, :, None] * e2))
            A = (2.0 * np.pi / n_phi) * np.sum(rest(pts), axis=1)
            H += float(np.sum(wt * t * (rho * rho + t * t) ** (0.5 * kappa) * A))
    return geom.prefactor * rho ** (-geom.params.dim - 2.0 * geom.params.s) * H


def kernel_symmetry_check(density: Density, v, u, geom: CarlemanQuadrature, rtol: float = 1e-10) -> bool:
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.linalg.norm(u) == 0:
        raise ValueError("u must be nonzero")
    a = kf(density, v, v + u, geom)
    b = kf(density, v, v - u, geom)
    return bool(abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300))


def second_differences(g, v, geom: CarlemanQuadrature):
    """``g(v + rho sigma) + g(v - rho sigma) - 2 g(v)`` on the rule (sigma, rho)."""
    g = _as_callable(g)
    v = np.asarray(v, dtype=float)
    disp = geom.directions[:, None, :] * geom.radii[None, :, None]
    return g(v + disp) + g(v - disp) - 2.0 * float(g(v[None])[0])


def q_s(density: Density, g, v, geom: CarlemanQuadrature, H=None):
    """Principal value ``int [g(v') - g(v)] K_F(v, v') dv'`` in polar
    coordinates around ``v`` with the ``v' <-> 2v - v'`` pairing."""
    if H is None:
        H = plane_integrals(density, v, geom)
    d2 = second_differences(g, v, geom)
    return geom.prefactor * float(np.sum(geom.direction_weights[:, None] * geom.radial_weights * H * d2))


def density_convolution(density: Density, v, geom: CarlemanQuadrature, exponent: float | None = None):
    """``(F * |.|^e)(v)``: exact for the Maxwellian part, direct lattice sum with
    a cell-averaged singular weight for the grid part."""
    e = geom.params.gamma if exponent is None else exponent
    v = np.asarray(v, dtype=float)
    if density.mask is not None:
        raise ValueError("masked densities are not supported in the convolution")
    out = 0.0
    if density.maxwell:
        out += density.maxwell * maxwell_convolution(np.linalg.norm(v), e)
    if density.values is not None:
        vg = density.vgrid
        r = np.linalg.norm(vg.nodes - v, axis=1)
        tiny = r < 1e-9 * vg.spacing
        center = geom.conv_center_weight if e == geom.params.gamma else cell_average_power(vg.spacing, e)
        w = np.where(tiny, center, np.where(tiny, 1.0, r) ** e)
        out += float(np.sum(density.values * w) * vg.cell_volume)
    return out


def q_ns(density: Density, g, v, geom: CarlemanQuadrature):
    """``C (F * |.|^gamma)(v) g(v)``."""
    g = _as_callable(g)
    v = np.asarray(v, dtype=float)
    return geom.constant.value * density_convolution(density, v, geom) * float(g(v[None])[0])


def q_total(density: Density, g, v, geom: CarlemanQuadrature):
    return q_s(density, g, v, geom) + q_ns(density, g, v, geom)


# ----------------------------------------------------------------------------
# lemma-level checks living next to the kernel
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelBoundReport:
    inner: float
    outer: float
    inner_reference: float
    outer_reference: float

    @property
    def inner_ratio(self) -> float:
        return self.inner / self.inner_reference if self.inner_reference > 0 else 0.0

    @property
    def outer_ratio(self) -> float:
        return self.outer / self.outer_reference if self.outer_reference > 0 else 0.0


def kernel_bound_check(density: Density, v, r: float, geom: CarlemanQuadrature, n_rad: int = 24):
    """``int_{B_r(v)} |v'-v|^2 |K_F|`` and ``int_{B_r(v)^c} |K_F|`` against
    ``r^(2-2s) (|F| * |.|^(gamma+2s))(v)`` and ``r^(-2s) (...)``."""
    if r <= 0:
        raise ValueError("r must be positive")
    v = np.asarray(v, dtype=float)
    s = geom.params.s
    ad = density.absolute()
    x, w = roots_legendre(n_rad)
    # inner: int_0^r rho^(d+1) K drho = pref int_0^r rho^(1-2s) H drho ; u = rho^(2-2s)
    p = 2.0 - 2.0 * s
    u = 0.5 * (x + 1.0) * r ** p
    rho_in = u ** (1.0 / p)
    w_in = 0.5 * w * r ** p / p
    # outer: int_r^rmax rho^(-1-2s) H drho, log spaced
    lo, hi = math.log(r), math.log(max(geom.r_max, 1.01 * r))
    rho_out = np.exp(0.5 * (lo + hi) + 0.5 * (hi - lo) * x)
    w_out = 0.5 * (hi - lo) * w * rho_out ** (-2.0 * s)
    rho_all = np.concatenate([rho_in, rho_out])
    H = _plane_abs(ad, v, rho_all, geom)  # (n_s, 2 n_rad)
    per_dir = 2.0 * geom.prefactor * geom.direction_weights[:, None] * H
    inner = float(np.sum(per_dir[:, :n_rad] * w_in))
    outer = float(np.sum(per_dir[:, n_rad:] * w_out))
    conv = density_convolution(ad, v, geom, geom.params.gamma + 2.0 * s)
    return KernelBoundReport(inner, outer, r ** (2.0 - 2.0 * s) * conv, r ** (-2.0 * s) * conv)


def _plane_abs(density: Density, v, radii, geom: CarlemanQuadrature):
    """``H`` for every rule direction at arbitrary radii (unmasked density)."""
    radii = np.asarray(radii, dtype=float)
    H = np.zeros((len(geom.directions), len(radii)))
    if density.maxwell:
        for k, sg in enumerate(geom.directions):
            H[k] = density.maxwell * geom.maxwell_plane(v, sg, radii=radii)
    if density.values is not None:
        W = _cubic_t_weights(radii, geom.t_max, geom.quad.n_hyperplane, geom.params.kappa)
        grid_only = Density(density.vgrid, density.values, 0.0, None)
        for k in range(len(geom.directions)):
            vals = grid_only(v + geom.ring_offsets[k])
            A = np.bincount(geom.ring_t, weights=vals * geom.ring_w, minlength=len(geom.t_nodes))
            H[k] += W @ A
    return H


def cancellation_defect(density: Density, v, geom: CarlemanQuadrature):
    """Returns ``(int [K(v,v') - K(v',v)] dv', C (F * |.|^gamma)(v))``."""
    v = np.asarray(v, dtype=float)
    H0 = plane_integrals(density, v, geom)
    lhs = 0.0
    for k, sg in enumerate(geom.directions):
        for sign in (1.0, -1.0):
            centers = v + sign * geom.radii[:, None] * sg
            Hc = np.empty(len(geom.radii))
            if density.maxwell and density.mask is None:
                Hm = geom.maxwell_plane(centers, sg[None, :])  # (n_r, n_r)
                Hc[:] = density.maxwell * np.diagonal(Hm)
            else:
                Hc[:] = 0.0
            if density.values is not None:
                grid_only = Density(density.vgrid, density.values, 0.0, density.mask)
                for i, c in enumerate(centers):
                    vals = grid_only(c + geom.ring_offsets[k])
                    A = np.bincount(geom.ring_t, weights=vals * geom.ring_w, minlength=len(geom.t_nodes))
                    Hc[i] += geom.t_weights[i] @ A
            lhs += geom.direction_weights[k] * np.sum(geom.radial_weights * (H0[k] - Hc))
    lhs *= geom.prefactor
    rhs = geom.constant.value * density_convolution(density, v, geom)
    return float(lhs), float(rhs)


# ----------------------------------------------------------------------------
# grid engine
# ----------------------------------------------------------------------------

def _merge_stencil(group, triples, weights):
    """Sum weights of identical (group, offset) pairs; returns CSR arrays."""
    span = int(np.abs(triples).max()) + 1 if len(triples) else 1
    base = 2 * span + 1
    code = ((triples[:, 0] + span) * base + (triples[:, 1] + span)) * base + (triples[:, 2] + span)
    key = group.astype(np.int64) * base ** 3 + code
    uniq, inv = np.unique(key, return_inverse=True)
    w = np.bincount(inv, weights=weights)
    keep = w != 0.0
    uniq, w = uniq[keep], w[keep]
    grp = uniq // base ** 3
    code = uniq % base ** 3
    tz = code % base - span
    ty = (code // base) % base - span
    tx = code // base ** 2 - span
    return grp, np.stack([tx, ty, tz], axis=1), w


def _to_csr(grp, n_groups):
    ptr = np.zeros(n_groups + 1, dtype=np.int64)
    np.add.at(ptr, grp + 1, 1)
    return np.cumsum(ptr)


class LatticeStencils:
    """Node-independent interpolation stencils of a :class:`CarlemanQuadrature`.

    Lattice nodes differ by integer multiples of the spacing, so the integer
    shift and fractional weights of ``node + offset`` do not depend on the
    node.  Ring samples are merged per (direction, ring) and cubic samples per
    (direction, radius).
    """

    def __init__(self, geom: CarlemanQuadrature):
        h = geom.vgrid.spacing
        n_s, n_r, n_t = len(geom.directions), len(geom.radii), len(geom.t_nodes)
        corners = np.array(list(np.ndindex(2, 2, 2)))
        grp_all, tri_all, w_all = [], [], []
        for si in range(n_s):
            y = geom.ring_offsets[si] / h
            i0 = np.floor(y).astype(np.int64)
            u = y - i0
            for c in corners:
                wc = np.prod(np.where(c == 1, u, 1.0 - u), axis=1) * geom.ring_w
                grp_all.append(si * n_t + geom.ring_t)
                tri_all.append(i0 + c)
                w_all.append(wc)
        g, tri, w = _merge_stencil(np.concatenate(grp_all), np.concatenate(tri_all), np.concatenate(w_all))
        self.ring_ptr = _to_csr(g, n_s * n_t)
        self.ring_tri, self.ring_w = tri, w

        grp_all, tri_all, w_all = [], [], []
        offs = np.array([-1, 0, 1, 2])
        combos = np.array(list(np.ndindex(4, 4, 4)))
        for si in range(n_s):
            for sgn in (1.0, -1.0):
                y = sgn * geom.radii[:, None] * geom.directions[si] / h
                i0 = np.floor(y).astype(np.int64)
                u = y - i0
                kw = np.stack(_keys(u), axis=0)  # (4, n_r, 3)
                for c in combos:
                    wc = kw[c[0], :, 0] * kw[c[1], :, 1] * kw[c[2], :, 2]
                    grp_all.append(si * n_r + np.arange(n_r))
                    tri_all.append(i0 + offs[c])
                    w_all.append(wc)
            grp_all.append(si * n_r + np.arange(n_r))
            tri_all.append(np.zeros((n_r, 3), dtype=np.int64))
            w_all.append(np.full(n_r, -2.0))
        g, tri, w = _merge_stencil(np.concatenate(grp_all), np.concatenate(tri_all), np.concatenate(w_all))
        self.cubic_ptr = _to_csr(g, n_s * n_r)
        self.cubic_tri, self.cubic_w = tri, w
        self.pad = int(max(np.abs(self.ring_tri).max(), np.abs(self.cubic_tri).max()))


class PaddedLattice:
    """Zero-padded index space in which stencil offsets need no bounds checks."""

    def __init__(self, vgrid: VelocityGrid, pad: int, active_index: np.ndarray):
        n = vgrid.n_per_axis
        self.n, self.pad, self.side = n, pad, n + 2 * pad
        ijk = np.stack(np.unravel_index(np.arange(vgrid.size), vgrid.shape), axis=1) + pad
        self.flat_of_node = (ijk[:, 0] * self.side + ijk[:, 1]) * self.side + ijk[:, 2]
        self.base = self.flat_of_node[active_index]
        self.active_of = -np.ones(self.side ** 3, dtype=np.int64)
        self.active_of[self.base] = np.arange(len(active_index))

    def flat(self, triples):
        return (triples[:, 0] * self.side + triples[:, 1]) * self.side + triples[:, 2]


@njit(cache=True)
def _assemble_linear(L, base, active_of, cub_ptr, cub_off, cub_w, ring_ptr, ring_off, ring_w,
                     dir_w, HMc, EMc, n_s, n_r, n_t):
    n_act = base.shape[0]
    for a in range(n_act):
        b0 = base[a]
        for si in range(n_s):
            for ri in range(n_r):
                coef = dir_w[si] * HMc[a, si, ri]
                g = si * n_r + ri
                for e in range(cub_ptr[g], cub_ptr[g + 1]):
                    b = active_of[b0 + cub_off[e]]
                    if b >= 0:
                        L[a, b] += coef * cub_w[e]
            for tj in range(n_t):
                coef = dir_w[si] * EMc[a, si, tj]
                if coef == 0.0:
                    continue
                g = si * n_t + tj
                for e in range(ring_ptr[g], ring_ptr[g + 1]):
                    b = active_of[b0 + ring_off[e]]
                    if b >= 0:
                        L[a, b] += coef * ring_w[e]


@njit(cache=True)
def _quadratic_qs(fpad, out, base, cub_ptr, cub_off, cub_w, ring_ptr, ring_off, ring_w,
                  dir_w, cr_W, n_s, n_r, n_t):
    """``Q_s(f, f)`` at active nodes; ``fpad`` is (padded size, nb), ``cr_W``
    holds ``prefactor * c_rho * W[rho, t]``."""
    n_act = base.shape[0]
    nb = fpad.shape[1]
    D = np.empty((n_r, n_act, nb))
    A = np.empty((n_t, n_act, nb))
    for si in range(n_s):
        D[:] = 0.0
        A[:] = 0.0
        for ri in range(n_r):
            g = si * n_r + ri
            for e in range(cub_ptr[g], cub_ptr[g + 1]):
                off = cub_off[e]
                w = cub_w[e]
                for a in range(n_act):
                    row = base[a] + off
                    for k in range(nb):
                        D[ri, a, k] += w * fpad[row, k]
        for tj in range(n_t):
            g = si * n_t + tj
            for e in range(ring_ptr[g], ring_ptr[g + 1]):
                off = ring_off[e]
                w = ring_w[e]
                for a in range(n_act):
                    row = base[a] + off
                    for k in range(nb):
                        A[tj, a, k] += w * fpad[row, k]
        for ri in range(n_r):
            for tj in range(n_t):
                c = dir_w[si] * cr_W[ri, tj]
                if c != 0.0:
                    for a in range(n_act):
                        for k in range(nb):
                            out[a, k] += c * D[ri, a, k] * A[tj, a, k]


@njit(cache=True)
def _ring_sums(fpad, base, ring_ptr, ring_off, ring_w, n_s, n_t):
    n_act = base.shape[0]
    A = np.zeros((n_act, n_s, n_t))
    for g in range(n_s * n_t):
        si = g // n_t
        tj = g - si * n_t
        for e in range(ring_ptr[g], ring_ptr[g + 1]):
            off = ring_off[e]
            w = ring_w[e]
            for a in range(n_act):
                A[a, si, tj] += w * fpad[base[a] + off]
    return A


class CollisionEngine:
    """Grid evaluation of ``Q(M+f, f) + Q(f, M)`` on the active nodes.

    ``quad`` controls the part linear in ``f``, assembled once into a dense
    matrix.  ``quadratic_quad`` controls ``Q_s(f, f)``, which is second order
    in the perturbation and evaluated at every call with compiled stencil
    loops; by default it uses a third of the polar directions and half the
    hyperplane nodes.
    """

    def __init__(self, params: PhysParams, vgrid: VelocityGrid,
                 quad: QuadratureSpec | None = None,
                 quadratic_quad: QuadratureSpec | None = None):
        self.params = params
        self.vgrid = vgrid
        self.geom = CarlemanQuadrature(params, vgrid, quad)
        base_q = self.geom.quad
        qq = quadratic_quad or replace(base_q, n_directions=max(1, base_q.n_directions // 3),
                                       n_hyperplane=max(16, base_q.n_hyperplane // 2))
        self.geom2 = CarlemanQuadrature(params, vgrid, qq, constant=self.geom.constant)
        self.active = vgrid.active
        self.active_index = np.flatnonzero(self.active)
        self.positions = vgrid.nodes[self.active_index]
        self.n_active = len(self.active_index)
        self.C = self.geom.constant.value
        self.maxwell_nodes = maxwellian(self.positions)
        self.maxwell_conv = maxwell_convolution(np.linalg.norm(self.positions, axis=1), params.gamma)
        self.conv_matrix = self._convolution_matrix(params.gamma)
        self.linear_matrix = self._assemble()
        st2 = LatticeStencils(self.geom2)
        self._lat2 = PaddedLattice(vgrid, st2.pad, self.active_index)
        self._st2 = st2
        self._cr_W = (self.geom2.prefactor * self.geom2.radial_weights[:, None] * self.geom2.t_weights)

    def _convolution_matrix(self, exponent):
        P = self.positions
        diff = P[:, None, :] - P[None, :, :]
        r = np.sqrt(np.sum(diff * diff, axis=-1))
        np.fill_diagonal(r, 1.0)
        K = r ** exponent
        np.fill_diagonal(K, cell_average_power(self.vgrid.spacing, exponent))
        return K * self.vgrid.cell_volume

    def _assemble(self):
        g = self.geom
        P = self.positions
        st = LatticeStencils(g)
        lat = PaddedLattice(self.vgrid, st.pad, self.active_index)
        HM = g.maxwell_plane(P[:, None, :], g.directions[None, :, :])  # (a, s, r)
        disp = g.directions[None, :, None, :] * g.radii[None, None, :, None]
        d2M = (maxwellian(P[:, None, None, :] + disp) + maxwellian(P[:, None, None, :] - disp)
               - 2.0 * self.maxwell_nodes[:, None, None])
        EM = g.prefactor * np.einsum("r,asr,rj->asj", g.radial_weights, d2M, g.t_weights)
        HMc = g.prefactor * g.radial_weights * HM
        L = np.zeros((len(P), len(P)))
        _assemble_linear(L, lat.base, lat.active_of, st.cubic_ptr, lat.flat(st.cubic_tri), st.cubic_w,
                         st.ring_ptr, lat.flat(st.ring_tri), st.ring_w, g.direction_weights,
                         np.ascontiguousarray(HMc), np.ascontiguousarray(EM),
                         len(g.directions), len(g.radii), len(g.t_nodes))
        L[np.diag_indices_from(L)] += self.C * self.maxwell_conv
        L += self.C * self.maxwell_nodes[:, None] * self.conv_matrix
        return L

    # -- evaluation ------------------------------------------------------------
    def quadratic(self, f_act: np.ndarray) -> np.ndarray:
        """``Q(f, f)`` on active nodes; ``f_act`` has shape (n_act, nb)."""
        g, st, lat = self.geom2, self._st2, self._lat2
        nb = f_act.shape[1]
        fpad = np.zeros((lat.side ** 3, nb))
        fpad[lat.base] = f_act
        out = np.zeros((self.n_active, nb))
        _quadratic_qs(fpad, out, lat.base, st.cubic_ptr, lat.flat(st.cubic_tri), st.cubic_w,
                      st.ring_ptr, lat.flat(st.ring_tri), st.ring_w, g.direction_weights,
                      self._cr_W, len(g.directions), len(g.radii), len(g.t_nodes))
        out += self.C * (self.conv_matrix @ f_act) * f_act
        return out

    def perturbation_rhs(self, f_act: np.ndarray, quadratic: bool = True) -> np.ndarray:
        """``Q(M+f, f) + Q(f, M)`` on active nodes (columns are independent slices)."""
        out = self.linear_matrix @ f_act
        if quadratic:
            out += self.quadratic(f_act)
        return out

    def to_active(self, f_full: np.ndarray) -> np.ndarray:
        """(nb, n_v) lattice rows -> (n_act, nb)."""
        return np.ascontiguousarray(np.asarray(f_full)[:, self.active_index].T)

    def from_active(self, f_act: np.ndarray) -> np.ndarray:
        out = np.zeros((f_act.shape[1], self.vgrid.size))
        out[:, self.active_index] = f_act.T
        return out

    def propagator(self, tau: float) -> np.ndarray:
        """``exp(2 tau L)`` for the linear part of the sped-up homogeneous flow (cached)."""
        key = float(tau)
        cache = self.__dict__.setdefault("_propagators", {})
        if key not in cache:
            if len(cache) > 8:
                cache.clear()
            cache[key] = expm((2.0 * key) * self.linear_matrix)
        return cache[key]

    def moment_basis(self) -> np.ndarray:
        """Columns ``M, v_i M, |v|^2 M`` on active nodes."""
        P, Mn = self.positions, self.maxwell_nodes
        cols = [Mn] + [P[:, i] * Mn for i in range(P.shape[1])] + [np.sum(P * P, axis=1) * Mn]
        return np.stack(cols, axis=1)

    def hyperplane_table(self, f_act: np.ndarray | None, maxwell: float = 1.0,
                         coarse: bool = False) -> np.ndarray:
        """``H_F(v_a, sigma, rho)`` for ``F = maxwell * M + f`` at every active
        node, shape ``(n_act, n_directions, n_radii)``.

        ``coarse=True`` uses the geometry of the quadratic term.
        """
        g = self.geom2 if coarse else self.geom
        H = np.zeros((self.n_active, len(g.directions), len(g.radii)))
        if maxwell:
            H += maxwell * g.maxwell_plane(self.positions[:, None, :], g.directions[None, :, :])
        if f_act is not None and np.any(f_act):
            if coarse:
                st, lat = self._st2, self._lat2
            else:
                st = self.__dict__.get("_st1") or LatticeStencils(g)
                self._st1 = st
                lat = PaddedLattice(self.vgrid, st.pad, self.active_index)
            fpad = np.zeros(lat.side ** 3)
            fpad[lat.base] = f_act
            A = _ring_sums(fpad, lat.base, st.ring_ptr, lat.flat(st.ring_tri), st.ring_w,
                           len(g.directions), len(g.t_nodes))
            H += np.einsum("ast,rt->asr", A, g.t_weights)
        return H
