"""Moments, weighted norms, the upper barrier, the good/bad split, inequality
checks with fitted constants, and the equilibration monitor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .collision import (CarlemanQuadrature, CollisionEngine, Density, cancellation_defect,
                        density_convolution, kernel_bound_check, q_s)
from .core import DecayEnvelope, PhysParams, VelocityGrid, bracket_weight, maxwellian

GAUSSIAN_ENTROPY_3D = -1.5 * math.log(2.0 * math.pi) - 1.5


# ----------------------------------------------------------------------------
# hydrodynamic quantities
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class HydroFields:
    """Per-space-node moments of ``M + f``; ``negative_mass`` is the mass of
    the nodes where ``M + f < 0`` (excluded from the entropy)."""

    mass: np.ndarray
    momentum: np.ndarray
    energy: np.ndarray
    entropy: np.ndarray
    negative_mass: np.ndarray

    def totals(self) -> np.ndarray:
        """Space averages ``(mass, momentum..., energy)``."""
        return np.concatenate([[self.mass.mean()], self.momentum.mean(axis=0), [self.energy.mean()]])


def hydro_fields(values: np.ndarray, vgrid: VelocityGrid) -> HydroFields:
    """Grid moments of ``M + f`` for every space node (``values`` is ``(n_x, n_v)``)."""
    f = np.atleast_2d(np.asarray(values, dtype=float))
    V = vgrid.nodes
    F = maxwellian(V)[None, :] + f
    h3 = vgrid.cell_volume
    mass = F.sum(axis=1) * h3
    momentum = F @ V * h3
    energy = F @ np.sum(V * V, axis=1) * h3
    pos = F > 0
    safe = np.where(pos, F, 1.0)
    entropy = np.sum(np.where(pos, F * np.log(safe), 0.0), axis=1) * h3
    negative_mass = np.sum(np.where(pos, 0.0, -F), axis=1) * h3
    return HydroFields(mass, momentum, energy, entropy, negative_mass)


@dataclass(frozen=True)
class HydroBounds:
    m0: float
    M0: float
    E0: float
    H0: float

    def __post_init__(self):
        if not 0 < self.m0 <= self.M0:
            raise ValueError("hydrodynamic bounds need 0 < m0 <= M0")


@dataclass(frozen=True)
class HydroFailure:
    """Reason why the near-equilibrium bounds could not be certified."""

    reason: str
    x_index: int
    v_index: int
    value: float


def near_equilibrium_implies_hydro(values: np.ndarray, vgrid: VelocityGrid, q: float):
    """Mass/energy/entropy bounds for ``M + f`` when ``<v>^q |f| <= 1/2``.

    The bounds are the worst case over all perturbations with
    ``|f| <= eta <v>^-q`` where ``eta`` is the field's own weighted sup, so the
    zero field reproduces the exact grid Maxwellian values.  Returns
    :class:`HydroBounds` or a :class:`HydroFailure` naming the offending node.
    """
    if not q > vgrid.dim + 2:
        raise ValueError(f"q must exceed dim + 2 = {vgrid.dim + 2}")
    f = np.atleast_2d(np.asarray(values, dtype=float))
    V = vgrid.nodes
    M = maxwellian(V)
    w = bracket_weight(V, q)
    wf = w[None, :] * np.abs(f)
    if wf.max() > 0.5:
        x, v = np.unravel_index(np.argmax(wf), wf.shape)
        return HydroFailure("weighted sup exceeds 1/2", int(x), int(v), float(wf[x, v]))
    F = M[None, :] + f
    if F.min() < 0:
        x, v = np.unravel_index(np.argmin(F), F.shape)
        return HydroFailure("M + f is negative", int(x), int(v), float(F[x, v]))
    eta = float(wf.max())
    env = eta / w
    lo, hi = np.maximum(M - env, 0.0), M + env
    h3 = vgrid.cell_volume
    speed2 = np.sum(V * V, axis=1)

    def ent(x):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)

    return HydroBounds(m0=float(lo.sum() * h3), M0=float(hi.sum() * h3),
                       E0=float(speed2 @ hi * h3), H0=float(np.maximum(ent(lo), ent(hi)).sum() * h3))


# ----------------------------------------------------------------------------
# weighted norms and the barrier
# ----------------------------------------------------------------------------

def weighted_sup(values: np.ndarray, vgrid: VelocityGrid, q: float,
                 envelope: DecayEnvelope | None = None) -> float:
    """``sup <v>^q |f|`` over all nodes; optionally records it in ``envelope``."""
    f = np.atleast_2d(np.asarray(values, dtype=float))
    val = float(np.max(bracket_weight(vgrid.nodes, q)[None, :] * np.abs(f)))
    if envelope is not None:
        envelope.update(q, val)
    return val


@dataclass(frozen=True)
class GWeight:
    """Smooth barrier profile with ``g = |v|^-q`` outside the unit ball.

    Inside the ball ``g = Phi(|v|^-q)`` with ``Phi(y) = 2 - exp(-z - z^2/2)``,
    ``z = y - 1``.  ``Phi(y) - y = O(z^3)`` at ``y = 1``, so ``g`` is C^2 across
    the unit sphere; ``Phi`` maps ``[1, inf)`` into ``[1, 2)`` and all
    derivatives of ``g`` vanish at the origin.
    """

    q: float

    def __post_init__(self):
        if not self.q > 0:
            raise ValueError("q must be positive")

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        r = np.sqrt(np.sum(v * v, axis=-1))
        outer = r > 1.0
        with np.errstate(divide="ignore", over="ignore"):
            y = np.where(r > 0, r, 1.0) ** (-self.q)
            z = np.where(outer, 0.0, y - 1.0)
            inner = 2.0 - np.exp(-z - 0.5 * z * z)
        inner = np.where(r > 0, inner, 2.0)
        return np.where(outer, y, inner)

    def radial(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self(np.stack([r, np.zeros_like(r), np.zeros_like(r)], axis=-1))


@dataclass(frozen=True)
class BarrierSpec:
    """Upper barrier ``U(t) g(v)`` with ``U(t) = delta exp(C1 t)``."""

    delta: float
    C1: float
    q: float

    def __post_init__(self):
        if not (self.delta > 0 and self.C1 > 0 and self.q > 0):
            raise ValueError("barrier parameters must be positive")

    def U(self, t: float) -> float:
        x = math.log(self.delta) + self.C1 * t
        return math.exp(x) if x < 700 else math.inf

    def paper_regime(self, T: float) -> bool:
        """Whether ``delta exp(C1 T) < 1/2``."""
        return math.log(self.delta) + self.C1 * T < math.log(0.5)


def barrier_margin(values: np.ndarray, vgrid: VelocityGrid, t: float, barrier: BarrierSpec,
                   g: GWeight | None = None) -> tuple[float, tuple[int, int]]:
    """``min U(t) g(v) - |f(x, v)|`` and the (space, velocity) node attaining it."""
    g = g or GWeight(barrier.q)
    f = np.atleast_2d(np.asarray(values, dtype=float))
    U = barrier.U(t)
    if not math.isfinite(U):
        return math.inf, (0, 0)
    m = U * g(vgrid.nodes)[None, :] - np.abs(f)
    x, v = np.unravel_index(np.argmin(m), m.shape)
    return float(m[x, v]), (int(x), int(v))


def c1_of_q(q: float) -> float:
    return 1.0 / (20.0 * q)


def good_bad_split(f_x: np.ndarray, vgrid: VelocityGrid, v_bar, q: float, g,
                   geom: CarlemanQuadrature) -> tuple[float, float]:
    """``(G, B)``: ``Q_s(1_{<w> < c1 |v_bar|} (M+f), g)(v_bar)`` and its complement."""
    v_bar = np.asarray(v_bar, dtype=float)
    cut = c1_of_q(q) * float(np.linalg.norm(v_bar))
    vals = None if f_x is None else np.asarray(f_x, dtype=float)

    def good(p):
        return np.sqrt(1.0 + np.sum(p * p, axis=-1)) < cut

    def bad(p):
        return ~good(p)

    G = q_s(Density(vgrid, vals, 1.0, good), g, v_bar, geom) if cut > 1.0 else 0.0
    B = q_s(Density(vgrid, vals, 1.0, bad), g, v_bar, geom)
    return float(G), float(B)


def aniso_distance(v, v_prime) -> np.ndarray | float:
    """``sqrt(|v - v'|^2 + (|v|^2 - |v'|^2)^2 / 4)``; last axis is velocity."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(v_prime, dtype=float)
    d = v - w
    e = np.sum(v * v, axis=-1) - np.sum(w * w, axis=-1)
    out = np.sqrt(np.sum(d * d, axis=-1) + 0.25 * e * e)
    return out if np.ndim(out) else float(out)


def ns_gamma_seminorm(values: np.ndarray, vgrid: VelocityGrid, params: PhysParams,
                      squared: bool = False) -> float:
    """Discrete anisotropic seminorm of lattice data.

    Double sum over node pairs with ``d(v, v') <= 1`` (each offset and its
    negative are both enumerated, so pairs enter symmetrically) plus a
    near-diagonal cell term: the omitted ball of the cell volume is closed with
    the gradient model ``(grad g . z)^2``.
    """
    g = np.asarray(values, dtype=float).reshape(vgrid.shape)
    h, s = vgrid.spacing, params.s
    expo = 0.5 * (params.gamma + 2.0 * s + 1.0)
    ax = vgrid.axis
    mesh = np.meshgrid(*([ax] * vgrid.dim), indexing="ij")
    r2 = sum(m * m for m in mesh)
    brw = (1.0 + r2) ** (0.5 * expo)
    m = int(math.floor(1.0 / h + 1e-12))
    total = 0.0
    n = vgrid.n_per_axis
    for off in np.ndindex(*([2 * m + 1] * vgrid.dim)):
        z = np.array(off) - m
        # z and -z give the same pairs; count the lexicographically positive one twice
        nz = z[np.flatnonzero(z)]
        if nz.size == 0 or nz[0] < 0:
            continue
        z2 = float(np.sum(z * z)) * h * h
        if z2 > 1.0:
            continue
        src = tuple(slice(max(0, -k), n - max(0, k)) for k in z)
        dst = tuple(slice(max(0, k), n - max(0, -k)) for k in z)
        d2 = z2 + 0.25 * (r2[src] - r2[dst]) ** 2
        wgt = brw[src] * brw[dst] * (g[dst] - g[src]) ** 2 * d2 ** (-0.5 * (vgrid.dim + 2.0 * s))
        total += 2.0 * float(np.sum(wgt[d2 <= 1.0]))
    total *= vgrid.cell_volume ** 2
    # near-diagonal cell, radius of the ball with the cell volume
    r0 = h * (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)
    grad = np.gradient(g, h)
    gsq = sum(gk * gk for gk in grad)
    cell = (4.0 * math.pi / 3.0) * r0 ** (2.0 - 2.0 * s) / (2.0 - 2.0 * s)
    total += float(np.sum(brw ** 2 * gsq) * cell * vgrid.cell_volume)
    return total if squared else math.sqrt(total)


# ----------------------------------------------------------------------------
# inequality checks with fitted constants
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class InequalityReport:
    """Fitted constant of one inequality over a sample family.

    ``fitted_constant`` is the extreme ratio over all samples (the maximum
    for upper bounds, the minimum for lower bounds), ``half_constant`` the same
    over the first half of the family; ``passed`` requires finiteness and a
    relative change below ``tolerance`` between the two.
    """

    name: str
    samples: int
    fitted_constant: float
    worst_ratio: float
    half_constant: float
    tolerance: float = 0.10
    lower_bound: bool = False

    @property
    def relative_change(self) -> float:
        if not (math.isfinite(self.fitted_constant) and math.isfinite(self.half_constant)):
            return math.inf
        if self.fitted_constant == 0.0:
            return 0.0 if self.half_constant == 0.0 else math.inf
        return abs(self.fitted_constant - self.half_constant) / abs(self.fitted_constant)

    @property
    def passed(self) -> bool:
        ok = self.relative_change < self.tolerance
        if self.lower_bound:
            ok = ok and self.fitted_constant > 0.0
        return bool(ok)


def _report(name: str, ratios: np.ndarray, lower: bool = False, tol: float = 0.10) -> InequalityReport:
    r = np.asarray(ratios, dtype=float)
    n = len(r)
    half = r[: max(1, n // 2)]
    pick = np.min if lower else np.max
    return InequalityReport(name, n, float(pick(r)), float(pick(r)), float(pick(half)), tol, lower)


@dataclass(frozen=True)
class SampleFamily:
    """Deterministic near-equilibrium sample family.

    Each sample combines a perturbation ``f = amplitude * sum_k c_k phi_k``
    (fixed smooth shapes, coefficients in [-1, 1]), a Gaussian test function
    ``exp(-|v - c|^2 / (2 a^2))`` and an evaluation point with a radius for the
    annulus bounds (plus a point within half a width of the bump centre for the
    ``Q_s`` bound).  Parameters come from a scrambled Halton sequence, so
    doubling the family keeps the first half unchanged.
    """

    amplitude: float = 1e-2
    q: float = 8.0
    seed: int = 7
    center_radius: float = 1.0
    width_range: tuple = (0.8, 1.4)
    point_radius: float = 2.5
    radius_range: tuple = (0.5, 2.0)

    N_SHAPES = 4

    def shapes(self, V: np.ndarray) -> np.ndarray:
        """Velocity shapes ``(4, n)``, each normalised to unit ``sup <v>^q |phi|``."""
        M = maxwellian(V)
        r2 = np.sum(V * V, axis=-1)
        raw = np.stack([M * (r2 - 3.0), M * V[..., 0], M * (V[..., 1] ** 2 - V[..., 2] ** 2),
                        M * np.cos(1.3 * V[..., 0] + 0.4 * V[..., 2])])
        ref = self._reference_scale()
        return raw / ref[:, None]

    def _reference_scale(self) -> np.ndarray:
        ax = np.linspace(-8.0, 8.0, 81)
        V = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        M = maxwellian(V)
        r2 = np.sum(V * V, axis=-1)
        raw = np.stack([M * (r2 - 3.0), M * V[:, 0], M * (V[:, 1] ** 2 - V[:, 2] ** 2),
                        M * np.cos(1.3 * V[:, 0] + 0.4 * V[:, 2])])
        return np.max(np.abs(raw) * bracket_weight(V, self.q)[None, :], axis=1) * self.N_SHAPES

    def parameters(self, n: int) -> np.ndarray:
        eng = qmc.Halton(d=12, scramble=True, seed=self.seed)
        return eng.random(n)

    def unpack(self, u: np.ndarray) -> dict:
        coef = 2.0 * u[0:4] - 1.0
        c = self.center_radius * (2.0 * u[4:7] - 1.0)
        a = self.width_range[0] + (self.width_range[1] - self.width_range[0]) * u[7]
        xi = 2.0 * u[8:11] - 1.0
        r = self.radius_range[0] + (self.radius_range[1] - self.radius_range[0]) * u[11]
        return dict(coef=coef, center=c, width=a, point=self.point_radius * xi,
                    near_point=c + 0.5 * a * xi, radius=r)


def _gaussian(center, width):
    c = np.asarray(center, dtype=float)

    def g(x):
        d = np.asarray(x, dtype=float) - c
        return np.exp(-0.5 * np.sum(d * d, axis=-1) / width ** 2)

    return g


def local_c2_seminorm(g, v, n_dirs: int = 26, radii=None) -> float:
    """``sup |g(v') - g(v) - grad g(v).(v'-v)| / |v'-v|^2`` over a sample set."""
    v = np.asarray(v, dtype=float)
    if radii is None:
        radii = np.geomspace(1e-2, 12.0, 80)
    k = np.arange(n_dirs) + 0.5
    phi = math.pi * (1.0 + 5.0 ** 0.5) * k
    mu = 1.0 - 2.0 * k / n_dirs
    dirs = np.stack([np.sqrt(1 - mu * mu) * np.cos(phi), np.sqrt(1 - mu * mu) * np.sin(phi), mu], -1)
    eps = 1e-5
    grad = np.array([(g(v + eps * e) - g(v - eps * e)) / (2 * eps) for e in np.eye(3)])
    z = radii[:, None, None] * dirs[None, :, :]
    rem = g(v + z) - float(g(v[None])[0]) - z @ grad
    return float(np.max(np.abs(rem) / radii[:, None] ** 2))


def _qs_from_table(geom: CarlemanQuadrature, H: np.ndarray, P: np.ndarray, gp, gm, g0):
    d2 = gp + gm - 2.0 * g0[:, None, None]
    return geom.prefactor * np.einsum("s,r,asr,asr->a", geom.direction_weights, geom.radial_weights, H, d2)


def _shifted(geom: CarlemanQuadrature, P: np.ndarray, g):
    disp = geom.directions[None, :, None, :] * geom.radii[None, None, :, None]
    return g(P[:, None, None, :] + disp), g(P[:, None, None, :] - disp)


def dirichlet_form(geom: CarlemanQuadrature, H: np.ndarray, P: np.ndarray, cell_volume: float, g) -> float:
    """``sum_v int |g(v') - g(v)|^2 K_F(v, v') dv'`` over the nodes ``P`` with
    hyperplane table ``H``."""
    gp, gm = _shifted(geom, P, g)
    g0 = g(P)
    sq = (gp - g0[:, None, None]) ** 2 + (gm - g0[:, None, None]) ** 2
    dens = geom.prefactor * np.einsum("s,r,asr,asr->a", geom.direction_weights, geom.radial_weights, H, sq)
    return float(dens.sum() * cell_volume)


def lemma_suite(engine: CollisionEngine, n_samples: int = 50, family: SampleFamily | None = None,
                commutator_q: float = 4.0, n_cancellation: int = 0,
                seminorm_grid: VelocityGrid | None = None, tol: float = 0.10) -> list[InequalityReport]:
    """Fit the constants of the pointwise and integral inequalities.

    Reports (all ratios left side over right side without constant):

    * ``qs_bound``: ``|Q_s(F, g)(v)|`` against
      ``|g|_inf^(1-s) [g]_{C^2(v)}^s (|F| * |.|^(gamma+2s))(v)``;
    * ``kernel_inner`` / ``kernel_outer``: the two annulus bounds of ``K_F``;
    * ``coercivity``: Dirichlet form over the squared anisotropic seminorm
      (a lower bound: the fitted constant is the minimum);
    * ``commutator``: ``|<v>^q Q(F,g) - Q(F,<v>^q g)|_{L^2_{-gamma+/2}}``
      against ``|F|_{L^1_{gamma+2s+2}} |<v>^q g|_{N^{s,gamma}}``;
    * ``cancellation`` (when ``n_cancellation > 0``): relative error of the
      kernel-difference integral against ``C (F * |.|^gamma)``.

    ``F = M + f`` with ``f`` from :class:`SampleFamily`.
    """
    family = family or SampleFamily()
    params, vgrid, geom = engine.params, engine.vgrid, engine.geom
    s, gam = params.s, params.gamma
    P = engine.positions
    h3 = vgrid.cell_volume
    shapes_act = family.shapes(P)
    shapes_full = family.shapes(vgrid.nodes) * vgrid.active[None, :]
    H_M = engine.hyperplane_table(None, 1.0)
    H_k = [engine.hyperplane_table(sh, 0.0) for sh in shapes_act]
    sgrid = seminorm_grid or VelocityGrid(4.5, 36)
    SV = sgrid.nodes
    moment_w = bracket_weight(vgrid.nodes, gam + 2.0 * s + 2.0)
    M_full = maxwellian(vgrid.nodes)
    comm_w = bracket_weight(P, commutator_q)
    l2_w = bracket_weight(P, -max(gam, 0.0))
    ratios = {k: [] for k in ("qs_bound", "kernel_inner", "kernel_outer", "coercivity", "commutator")}
    canc = []
    for i, u in enumerate(family.parameters(n_samples)):
        prm = family.unpack(u)
        coef = family.amplitude * prm["coef"]
        f_full = coef @ shapes_full
        F = Density(vgrid, f_full, 1.0)
        g = _gaussian(prm["center"], prm["width"])
        v = prm["point"]
        # pointwise Q_s bound, evaluated inside the bump where it is sharpest
        vn = prm["near_point"]
        lhs = abs(q_s(F, g, vn, geom))
        conv = density_convolution(F.absolute(), vn, geom, gam + 2.0 * s)
        ratios["qs_bound"].append(lhs / (local_c2_seminorm(g, vn) ** s * conv))
        # annulus bounds
        kb = kernel_bound_check(F, v, prm["radius"], geom)
        ratios["kernel_inner"].append(kb.inner_ratio)
        ratios["kernel_outer"].append(kb.outer_ratio)
        # integral forms on the active nodes
        H = H_M + np.tensordot(coef, np.stack(H_k), axes=1)
        D = dirichlet_form(geom, H, P, h3, g)
        N2 = ns_gamma_seminorm(g(SV), sgrid, params, squared=True)
        ratios["coercivity"].append(D / N2)

        def gq(x, g=g):
            return bracket_weight(x, commutator_q) * g(x)

        gp, gm = _shifted(geom, P, g)
        q1 = _qs_from_table(geom, H, P, gp, gm, g(P))
        gp, gm = _shifted(geom, P, gq)
        q2 = _qs_from_table(geom, H, P, gp, gm, gq(P))
        lhs2 = math.sqrt(float(np.sum(l2_w * (comm_w * q1 - q2) ** 2) * h3))
        gqs = gq(SV)
        nrm2 = (ns_gamma_seminorm(gqs, sgrid, params, squared=True)
                + float(np.sum(bracket_weight(SV, gam + 2.0 * s) * gqs ** 2) * sgrid.cell_volume))
        l1 = float(np.sum(np.abs(M_full + f_full) * moment_w) * h3)
        ratios["commutator"].append(lhs2 / (l1 * math.sqrt(nrm2)))
        if i < n_cancellation:
            a, b = cancellation_defect(F, v, geom)
            canc.append(abs(a - b) / abs(b))
    reports = [_report("qs_bound", ratios["qs_bound"], tol=tol),
               _report("kernel_inner", ratios["kernel_inner"], tol=tol),
               _report("kernel_outer", ratios["kernel_outer"], tol=tol),
               _report("coercivity", ratios["coercivity"], lower=True, tol=tol),
               _report("commutator", ratios["commutator"], tol=tol)]
    if canc:
        reports.append(_report("cancellation", canc, tol=np.inf))
    return reports


def convolution_bound_check(values: np.ndarray, vgrid: VelocityGrid, v_samples, kappa: float,
                            q: float) -> np.ndarray:
    """Ratios ``int f(v+w) |w|^kappa dw / (N <v>^kappa)`` with ``N = sup <v>^q |f|``."""
    if not q > vgrid.dim + max(kappa, 0.0):
        raise ValueError("convolution bound needs q > dim + max(kappa, 0)")
    f = np.asarray(values, dtype=float)
    N = weighted_sup(f, vgrid, q)
    V = vgrid.nodes
    out = []
    for v in np.atleast_2d(v_samples):
        r = np.linalg.norm(V - v, axis=1)
        w = np.where(r > 0, r, 1.0) ** kappa
        lhs = float(np.sum(f * w) * vgrid.cell_volume)
        out.append(lhs / (N * float(bracket_weight(v, kappa))) if N > 0 else 0.0)
    return np.array(out)


# ----------------------------------------------------------------------------
# equilibration
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrendReport:
    """Power-law fit ``c t^-p`` over the tail half of a series."""

    p: float
    c: float
    monotone_fraction: float
    n_samples: int
    floor: float


def equilibration_monitor(times, values, floor: float = 0.0) -> TrendReport:
    """Fit ``values ~ c t^-p`` on the tail half and count non-increasing pairs.

    Values at or below ``floor`` (a round-off level chosen by the caller) are
    clamped to it, and pairs at the floor count as non-increasing; the fit
    uses the tail-half samples above the floor, or the last samples above it
    when fewer than three remain.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) < 10:
        raise ValueError("equilibration monitor needs at least 10 samples")
    y = np.maximum(y, floor)
    dy = np.diff(y)
    mono = float(np.mean(dy <= 0.0))
    sel = (t > 0) & (y > floor) & (y > 0)
    idx = np.flatnonzero(sel)
    tail = idx[idx >= len(t) // 2]
    if len(tail) < 3:
        tail = idx[-max(2, min(len(idx), len(t) // 2)):]
    if len(tail) < 2:
        return TrendReport(math.inf if y[-1] <= floor else 0.0, 0.0, mono, len(t), floor)
    A = np.column_stack([np.ones(len(tail)), -np.log(t[tail])])
    coef, *_ = np.linalg.lstsq(A, np.log(y[tail]), rcond=None)
    return TrendReport(float(coef[1]), float(math.exp(coef[0])), mono, len(t), floor)


@dataclass
class DiagnosticsSeries:
    """Rows of per-substep diagnostics (column order in ``cli_io.csv_columns``)."""

    q_list: tuple = (8.0,)
    rows: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def diagnostics_row(values: np.ndarray, vgrid: VelocityGrid, t: float, kind: str, q_list,
                    barrier: BarrierSpec | None, g: GWeight | None, envelope: DecayEnvelope | None,
                    constants: dict | None = None) -> dict:
    """One CSV row: space-averaged moments, entropy, weighted sups, barrier margin."""
    hf = hydro_fields(values, vgrid)
    row = {"time": float(t), "kind": kind, "mass": float(hf.mass.mean())}
    mom = hf.momentum.mean(axis=0)
    for k in range(3):
        row[f"momentum_{k + 1}"] = float(mom[k]) if k < len(mom) else 0.0
    row["energy"] = float(hf.energy.mean())
    row["entropy"] = float(hf.entropy.mean())
    for q in q_list:
        row[f"sup_q{q:g}"] = weighted_sup(values, vgrid, q, envelope)
    row["barrier_margin"] = (barrier_margin(values, vgrid, t, barrier, g)[0]
                             if barrier is not None else float("nan"))
    row["negative_mass"] = float(hf.negative_mass.sum())
    for name, val in (constants or {}).items():
        row[f"const_{name}"] = float(val)
    return row
