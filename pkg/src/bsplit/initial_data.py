"""Envelope-bounded initial perturbations and moment normalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DistributionField, SpaceGrid, VelocityGrid, bracket_weight, maxwellian

KINDS = ("separable-smooth", "random-fourier", "rough-indicator")


class EnvelopeViolation(AssertionError):
    """Constructed data leaves its advertised envelope (a construction bug)."""


@dataclass(frozen=True)
class PerturbationSpec:
    """Initial perturbation family.

    Parameters
    ----------
    kind : {"separable-smooth", "random-fourier", "rough-indicator"}
    amplitude : float
        ``epsilon``: every kind satisfies ``|f0| <= 0.9 epsilon <v>^-q``.
    q : float
        Decay exponent of the envelope.
    spatial_modes : int
        Highest spatial wave number used by the x-dependent kinds.
    seed : int
        Seed of the random kinds.
    """

    kind: str = "separable-smooth"
    amplitude: float = 1e-2
    q: float = 8.0
    spatial_modes: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        if self.spatial_modes < 0:
            raise ValueError("spatial_modes must be nonnegative")


# Fill factor of the envelope used by every kind; the strict check of
# validate_envelope then has a margin.
FILL = 0.9


def _normalise(profile: np.ndarray, V: np.ndarray, q: float) -> np.ndarray:
    peak = np.max(np.abs(profile) * bracket_weight(V, q))
    return profile / peak if peak > 0 else profile


def _spatial_profile(sgrid: SpaceGrid, modes: int, rng: np.random.Generator | None) -> np.ndarray:
    """Smooth periodic profile with values in [-1, 1]."""
    X = sgrid.nodes
    if sgrid.spatial_dims == 0 or modes == 0:
        return np.ones(sgrid.size)
    out = np.zeros(sgrid.size)
    for k in range(1, modes + 1):
        for ax in range(sgrid.spatial_dims):
            if rng is None:
                a, ph = 1.0 / k ** 2, 0.0
            else:
                a, ph = rng.uniform(-1, 1) / k ** 2, rng.uniform(0, 2 * np.pi)
            out += a * np.cos(2 * np.pi * k * X[:, ax] + ph)
    m = np.max(np.abs(out))
    return out / m if m > 0 else np.ones(sgrid.size)


def make_perturbation(spec: PerturbationSpec, vgrid: VelocityGrid, sgrid: SpaceGrid) -> DistributionField:
    """Deterministic perturbation on the active nodes (zero outside the ball).

    * ``separable-smooth``: ``a(x) (v_1^2 - v_2^2 + v_1 (|v|^2 - 5) / 2) M(v)``,
      ``a`` a smooth periodic profile; the velocity shape (a stress plus a
      heat-flux mode) carries no mass, momentum or energy, so moment
      projection leaves it essentially intact;
    * ``random-fourier``: sum of random spatial modes times random Hermite
      combinations of the Maxwellian;
    * ``rough-indicator``: signed indicator of a ball of radius 1.2 centred at
      ``(0.7, 0, 0)`` times a smooth spatial profile, discontinuous in ``v``
      well inside the lattice.
    """
    V = vgrid.nodes
    M = maxwellian(V)
    act = vgrid.active
    eps = spec.amplitude
    if spec.kind == "separable-smooth":
        shape = V[:, 0] ** 2 - V[:, 1] ** 2 + 0.5 * V[:, 0] * (np.sum(V * V, axis=1) - 5.0)
        prof_v = _normalise(shape * M * act, V, spec.q)
        prof_x = _spatial_profile(sgrid, spec.spatial_modes, None)
        vals = FILL * eps * prof_x[:, None] * prof_v[None, :]
    elif spec.kind == "random-fourier":
        rng = np.random.default_rng(spec.seed)
        vals = np.zeros((sgrid.size, vgrid.size))
        n_terms = 3
        for _ in range(n_terms):
            c = rng.uniform(-1, 1, size=4)
            prof_v = (c[0] * (np.sum(V * V, axis=1) - 3.0) + c[1] * V[:, 0] + c[2] * V[:, 1] * V[:, 2]
                      + c[3] * (V[:, 2] ** 2 - 1.0)) * M * act
            prof_x = _spatial_profile(sgrid, spec.spatial_modes, rng)
            vals += prof_x[:, None] * _normalise(prof_v, V, spec.q)[None, :]
        w = bracket_weight(V, spec.q)
        peak = np.max(np.abs(vals) * w[None, :])
        vals = FILL * eps * vals / peak if peak > 0 else vals
    else:
        centre = np.array([0.7, 0.0, 0.0])
        ind = (np.linalg.norm(V - centre, axis=1) < 1.2) & act
        sign = np.where(V[:, 1] >= 0, 1.0, -1.0)
        prof_v = sign * ind / bracket_weight(V, spec.q)
        prof_x = _spatial_profile(sgrid, spec.spatial_modes, None)
        vals = FILL * eps * prof_x[:, None] * prof_v[None, :]
    field = DistributionField(vals)
    if eps > 0:
        ok, _ = validate_envelope(field, vgrid, eps, spec.q)
        if not ok:
            raise EnvelopeViolation(f"{spec.kind} perturbation leaves its envelope")
        if field.min_density(vgrid) < 0:
            raise ValueError(f"amplitude {eps} too large: M + f0 < 0 on the grid")
    return field


def validate_envelope(field, vgrid: VelocityGrid, eps: float, q: float) -> tuple[bool, tuple[int, int]]:
    """Whether ``<v>^q |f| < eps`` strictly at every node, and the argmax node."""
    f = np.atleast_2d(np.asarray(getattr(field, "values", field)))
    wf = bracket_weight(vgrid.nodes, q)[None, :] * np.abs(f)
    x, v = np.unravel_index(np.argmax(wf), wf.shape)
    return bool(wf[x, v] < eps), (int(x), int(v))


def moment_tests(vgrid: VelocityGrid) -> np.ndarray:
    """Columns ``1, v_1..v_d, |v|^2`` times the cell volume."""
    V = vgrid.nodes
    return np.column_stack([np.ones(len(V)), V, np.sum(V * V, axis=1)]) * vgrid.cell_volume


def project_moments(field: DistributionField, vgrid: VelocityGrid) -> DistributionField:
    """Remove ``c_0 M + sum c_i v_i M + c_4 |v|^2 M`` (on the active nodes) so
    that the space-integrated mass, momentum and energy of ``f`` vanish on the
    grid.  The Gram matrix uses the discrete inner products."""
    f = np.atleast_2d(np.asarray(field.values, dtype=float))
    V = vgrid.nodes
    M = maxwellian(V) * vgrid.active
    basis = np.column_stack([M, V * M[:, None], np.sum(V * V, axis=1) * M])
    tests = moment_tests(vgrid)
    gram = tests.T @ basis
    if np.linalg.cond(gram) > 1e12:
        raise np.linalg.LinAlgError("moment Gram matrix is singular on this grid")
    mom = tests.T @ f.mean(axis=0)
    coef = np.linalg.solve(gram, mom)
    return field.with_values(f - (basis @ coef)[None, :])
