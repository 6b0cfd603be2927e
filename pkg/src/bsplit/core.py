"""Physical parameters, velocity/space lattices and the perturbation container."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class PhysParams:
    """Collision kernel exponents.

    Parameters
    ----------
    gamma : float
        Kinetic exponent of the cross-section, ``B = r**gamma * b(cos theta)``.
    s : float
        Angular singularity order, in (0, 1).
    kernel_const : float
        Multiplicative constant in front of the angular part.
    dim : int
        Velocity dimension.
    """

    gamma: float = 1.0
    s: float = 0.5
    kernel_const: float = 1.0
    dim: int = 3

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"s must lie in (0,1), got {self.s}")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if not self.gamma > -self.dim:
            raise ValueError(f"gamma must exceed -dim, got {self.gamma}")
        if not self.kernel_const > 0.0:
            raise ValueError("kernel_const must be positive")

    @property
    def regime_ok(self) -> bool:
        return 0.0 <= self.gamma + 2.0 * self.s <= 2.0

    @property
    def kappa(self) -> float:
        """Exponent of r in the hyperplane integrand, gamma + 1 + 2s."""
        return self.gamma + 1.0 + 2.0 * self.s


@dataclass(frozen=True)
class VelocityGrid:
    """Cell-centred Cartesian lattice on ``[-R, R]**dim``.

    Nodes sit at ``-R + (i + 1/2) * spacing`` along every axis and are
    enumerated lexicographically (last axis fastest).  The perturbation is
    carried on the nodes with ``|v| < R`` (the active ball) and is zero
    elsewhere.
    """

    radius: float
    n_per_axis: int
    dim: int = 3

    def __post_init__(self):
        if self.n_per_axis < 4:
            raise ValueError(f"velocity grid needs n_per_axis >= 4, got {self.n_per_axis}")
        if not self.radius > 0:
            raise ValueError("velocity radius must be positive")

    @property
    def spacing(self) -> float:
        return 2.0 * self.radius / self.n_per_axis

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.n_per_axis ** self.dim

    @property
    def axis(self) -> np.ndarray:
        return -self.radius + (np.arange(self.n_per_axis) + 0.5) * self.spacing

    @property
    def nodes(self) -> np.ndarray:
        """Array of shape ``(size, dim)``."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.nodes, axis=1)

    @property
    def active(self) -> np.ndarray:
        """Boolean mask of nodes strictly inside the ball of radius R."""
        return self.speed < self.radius


@dataclass(frozen=True)
class SpaceGrid:
    """Periodic lattice on the unit torus; ``spatial_dims = 0`` is homogeneous mode."""

    n_per_axis: int = 1
    spatial_dims: int = 0

    def __post_init__(self):
        if self.spatial_dims not in (0, 1, 2, 3):
            raise ValueError("spatial_dims must be 0, 1, 2 or 3")
        if self.n_per_axis < 1:
            raise ValueError("spatial n_per_axis must be >= 1")
        if self.spatial_dims == 0 and self.n_per_axis != 1:
            object.__setattr__(self, "n_per_axis", 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_axis,) * self.spatial_dims

    @property
    def size(self) -> int:
        return self.n_per_axis ** self.spatial_dims

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_per_axis

    @property
    def nodes(self) -> np.ndarray:
        if self.spatial_dims == 0:
            return np.zeros((1, 0))
        ax = np.arange(self.n_per_axis) * self.spacing
        mesh = np.meshgrid(*([ax] * self.spatial_dims), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class DistributionField:
    """Perturbation values ``f[x_index, v_index]`` at time ``time_stamp``."""

    values: np.ndarray
    time_stamp: float = 0.0

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("field values must be 2-d (space node, velocity node)")
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite entries in distribution field")
        vals = vals.copy() if vals is self.values else vals
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, vgrid: VelocityGrid, sgrid: SpaceGrid, time_stamp: float = 0.0):
        return cls(np.zeros((sgrid.size, vgrid.size)), time_stamp)

    def with_values(self, values: np.ndarray, time_stamp: float | None = None):
        return DistributionField(values, self.time_stamp if time_stamp is None else time_stamp)

    def min_density(self, vgrid: VelocityGrid) -> float:
        return float(np.min(maxwellian(vgrid.nodes)[None, :] + self.values))


@dataclass
class DecayEnvelope:
    """Running bounds ``N_q = sup <v>^q |f|`` for a set of exponents."""

    bounds: dict = field(default_factory=dict)

    def update(self, q: float, value: float) -> None:
        self.bounds[q] = max(self.bounds.get(q, 0.0), float(value))

    def __getitem__(self, q):
        return self.bounds[q]


def maxwellian(v) -> np.ndarray | float:
    """Normalised Maxwellian ``(2 pi)^(-d/2) exp(-|v|^2/2)``; last axis is velocity."""
    v = np.asarray(v, dtype=float)
    dim = v.shape[-1]
    return (2.0 * np.pi) ** (-0.5 * dim) * np.exp(-0.5 * np.sum(v * v, axis=-1))


def bracket_weight(v, q: float) -> np.ndarray | float:
    """Japanese bracket power ``(1 + |v|^2)^(q/2)``; last axis is velocity."""
    v = np.asarray(v, dtype=float)
    return (1.0 + np.sum(v * v, axis=-1)) ** (0.5 * q)


def build_grids(config: Mapping) -> tuple[VelocityGrid, SpaceGrid]:
    """Build grids from a mapping with keys ``radius``, ``n_velocity``, ``dim``,
    ``spatial_dims`` and ``n_space`` (missing keys take desk-scale defaults)."""
    radius = float(config.get("radius", 6.0))
    n_v = int(config.get("n_velocity", 16))
    dim = int(config.get("dim", 3))
    sd = int(config.get("spatial_dims", 0))
    n_x = int(config.get("n_space", 1))
    if radius <= 0:
        raise ValueError("radius must be positive")
    if n_x < 1:
        raise ValueError("n_space must be positive")
    return VelocityGrid(radius, n_v, dim), SpaceGrid(n_x if sd else 1, sd)
