import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsplit.core import DistributionField, SpaceGrid, VelocityGrid, bracket_weight
from bsplit.initial_data import (KINDS, EnvelopeViolation, PerturbationSpec, make_perturbation,
                                 moment_tests, project_moments, validate_envelope)

VG = VelocityGrid(6.0, 16)
SG = SpaceGrid(8, 1)


def space_moments(field):
    return moment_tests(VG).T @ np.asarray(field.values).mean(axis=0)


def test_zero_amplitude_gives_zero_field():
    f = make_perturbation(PerturbationSpec(amplitude=0.0), VG, SG)
    assert not np.any(f.values)


def test_amplitude_linearity():
    a = make_perturbation(PerturbationSpec(amplitude=1e-2), VG, SG).values
    b = make_perturbation(PerturbationSpec(amplitude=2e-2), VG, SG).values
    assert np.array_equal(b, 2 * a)


@pytest.mark.parametrize("kind", KINDS)
def test_envelope_and_positivity_for_every_kind(kind):
    f = make_perturbation(PerturbationSpec(kind, 1e-2, 8.0, 2, seed=4), VG, SG)
    ok, _ = validate_envelope(f, VG, 1e-2, 8.0)
    assert ok
    assert f.min_density(VG) >= 0
    assert not np.any(f.values[:, ~VG.active])


@pytest.mark.parametrize("kind", KINDS)
def test_determinism(kind):
    spec = PerturbationSpec(kind, 1e-2, 8.0, 2, seed=9)
    assert np.array_equal(make_perturbation(spec, VG, SG).values, make_perturbation(spec, VG, SG).values)


def test_random_kind_depends_on_seed():
    a = make_perturbation(PerturbationSpec("random-fourier", seed=1), VG, SG).values
    b = make_perturbation(PerturbationSpec("random-fourier", seed=2), VG, SG).values
    assert not np.allclose(a, b)


def test_rough_indicator_is_discontinuous_inside_the_ball():
    f = make_perturbation(PerturbationSpec("rough-indicator"), VG, SpaceGrid()).values[0]
    V = VG.nodes
    inside = np.linalg.norm(V - [0.7, 0, 0], axis=1) < 1.2
    assert np.all(f[inside] != 0) and np.all(f[~inside] == 0)
    # the jump surface stays well inside the lattice ball
    assert np.linalg.norm(V[inside], axis=1).max() < VG.radius - 3


def test_too_large_amplitude_is_rejected():
    with pytest.raises(ValueError):
        make_perturbation(PerturbationSpec("rough-indicator", amplitude=50.0, q=0.0), VG, SpaceGrid())


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec(kind="gaussian")
    with pytest.raises(ValueError):
        PerturbationSpec(amplitude=-1.0)


def test_validate_envelope_boundary_cases():
    env = bracket_weight(VG.nodes, -8.0)[None, :]
    assert validate_envelope(np.zeros((1, VG.size)), VG, 1e-2, 8.0)[0]
    ok, node = validate_envelope(1e-2 * env, VG, 1e-2, 8.0)
    assert not ok
    assert validate_envelope(0.99e-2 * env, VG, 1e-2, 8.0)[0]
    spike = np.zeros((2, VG.size))
    spike[1, 77] = 1.0
    assert validate_envelope(spike, VG, 1e-2, 8.0) == (False, (1, 77))


def test_envelope_violation_is_an_assertion():
    assert issubclass(EnvelopeViolation, AssertionError)


def test_projection_zeroes_space_integrated_moments():
    f = make_perturbation(PerturbationSpec("random-fourier", seed=3), VG, SG)
    p = project_moments(f, VG)
    scale = np.abs(moment_tests(VG)).T @ np.abs(f.values).mean(axis=0)
    assert np.all(np.abs(space_moments(p)) < 1e-12 * scale)


def test_projection_idempotent():
    f = make_perturbation(PerturbationSpec("rough-indicator"), VG, SG)
    p = project_moments(f, VG)
    assert np.abs(project_moments(p, VG).values - p.values).max() < 1e-12 * np.abs(p.values).max()


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 100))
@settings(max_examples=20, deadline=None)
def test_projection_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = (rng.normal(size=(2, VG.size)) * VG.active for _ in range(2))
    P = lambda z: project_moments(DistributionField(z), VG).values  # noqa: E731
    assert np.allclose(P(a * x + b * y), a * P(x) + b * P(y), atol=1e-12)

