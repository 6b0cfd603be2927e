import numpy as np
import pytest

from bsplit.core import DistributionField, SpaceGrid
from bsplit.diagnostics import BarrierSpec, hydro_fields
from bsplit.homogeneous import StepperConfig
from bsplit.initial_data import PerturbationSpec, make_perturbation, project_moments
from bsplit.splitting import (ABORT_REASONS, DiagnosticsConfig, ParityError, RunState, SplittingSchedule,
                              jump_discontinuity_log, jump_ratio, resume, run)
from bsplit.transport import MollifierSpec, mollify

SG = SpaceGrid(8, 1)


@pytest.fixture(scope="module")
def f0(small_grid):
    return project_moments(make_perturbation(PerturbationSpec("random-fourier", 1e-2, spatial_modes=1),
                                             small_grid, SG), small_grid)


@pytest.fixture(scope="module")
def short_run(small_engine, small_grid, f0):
    return run(f0, SplittingSchedule(0.2, 4), small_engine, small_grid, SG)


def test_schedule_structure():
    sch = SplittingSchedule(1.0, 4)
    assert sch.h == 0.25
    assert [sch.kind(i) for i in range(1, 5)] == ["D", "T", "D", "T"]
    assert sch.extended(0.5) == SplittingSchedule(1.5, 6)
    with pytest.raises(ParityError):
        sch.extended(0.25)
    with pytest.raises(ParityError):
        sch.extended(0.3)
    for N in (0, 3):
        with pytest.raises(ValueError):
            SplittingSchedule(1.0, N)


def test_state_time_consistency(small_grid):
    sch = SplittingSchedule(1.0, 4)
    f = DistributionField(np.zeros((1, small_grid.size)), 0.5)
    assert RunState(f, 2, sch).parity == 0
    with pytest.raises(ValueError):
        RunState(f, 1, sch)


def test_rows_and_jumps(short_run):
    assert short_run.abort_reason == "completed" and short_run.abort_reason in ABORT_REASONS
    assert [r["kind"] for r in short_run.rows] == ["init", "D", "T", "D", "T"]
    assert [t for t, _ in jump_discontinuity_log(short_run)] == pytest.approx([0.05, 0.15])
    assert short_run.state.position == 4
    assert short_run.state.field.time_stamp == pytest.approx(0.2)
    assert short_run.snapshots[-1] is short_run.state


def test_zero_stays_zero(small_engine, small_grid):
    z = DistributionField(np.zeros((SG.size, small_grid.size)))
    res = run(z, SplittingSchedule(0.1, 2), small_engine, small_grid, SG)
    assert not np.any(res.state.field.values)
    assert res.jumps == [(0.05, 0.0)]


def test_constant_in_x_has_no_jumps(small_engine, small_grid):
    f = project_moments(make_perturbation(PerturbationSpec(spatial_modes=0), small_grid, SG), small_grid)
    res = run(f, SplittingSchedule(0.1, 2), small_engine, small_grid, SG)
    assert all(j < 1e-18 for _, j in res.jumps)


def test_conservation_with_projection(short_run, small_grid, f0):
    before = hydro_fields(f0.values, small_grid).totals()
    after = hydro_fields(short_run.state.field.values, small_grid).totals()
    assert np.all(np.abs(after - before) < 1e-12)


def test_determinism(small_engine, small_grid, f0, short_run):
    again = run(f0, SplittingSchedule(0.2, 4), small_engine, small_grid, SG)
    assert np.array_equal(again.state.field.values, short_run.state.field.values)


def test_resume_matches_uninterrupted(small_engine, small_grid, f0, short_run):
    half = run(f0, SplittingSchedule(0.1, 2), small_engine, small_grid, SG)
    rest = resume(half.state, 0.1, small_engine, small_grid, SG)
    assert np.array_equal(rest.state.field.values, short_run.state.field.values)
    assert [r["kind"] for r in rest.rows] == ["D", "T"]


def test_resume_with_zero_extension(small_engine, small_grid, short_run):
    res = resume(short_run.state, 0.0, small_engine, small_grid, SG)
    assert np.array_equal(res.state.field.values, short_run.state.field.values)
    assert res.rows == []


def test_resume_parity_errors(small_engine, small_grid, short_run):
    with pytest.raises(ParityError):
        resume(short_run.state, 0.05, small_engine, small_grid, SG)
    with pytest.raises(ParityError):
        resume(short_run.state, 0.1, small_engine, small_grid, SG, parity=1)


def test_barrier_abort(small_engine, small_grid, f0):
    tiny = BarrierSpec(delta=1e-12, C1=1.0, q=8.0)
    res = run(f0, SplittingSchedule(0.2, 4), small_engine, small_grid, SG, barrier=tiny)
    assert res.abort_reason == "barrier-violated"
    assert res.state.abort_reason == "barrier-violated"
    assert res.rows[-1]["barrier_margin"] < 0
    assert res.paper_regime is True


def test_blow_up_guard_aborts(small_engine, small_grid, f0):
    cfg = StepperConfig(scheme="euler", dt=0.05, conserve=False)
    res = run(f0, SplittingSchedule(0.1, 2), small_engine, small_grid, SG, stepper=cfg)
    assert res.abort_reason == "blow-up-guard"
    assert res.state.position == 0
    assert np.array_equal(res.state.field.values, f0.values)


def test_transport_only_schedule_needs_engine(small_grid, f0):
    with pytest.raises(ValueError):
        run(f0, SplittingSchedule(0.1, 2), None, small_grid, SG)


def test_diagnostics_cadence(small_engine, small_grid, f0):
    res = run(f0, SplittingSchedule(0.2, 4), small_engine, small_grid, SG,
              diag=DiagnosticsConfig(every=3, snapshot_every=2))
    assert [r["kind"] for r in res.rows] == ["init", "D", "T"]
    assert [s.position for s in res.snapshots] == [2, 4]


def test_jump_ratio_matches_direct_mollification():
    sg = SpaceGrid(64, 1)
    x = sg.nodes[:, 0]
    f = np.cos(2 * np.pi * x)[:, None] * np.ones((1, 3))
    a = np.abs(mollify(f, sg, MollifierSpec(0.125)) - f).max()
    b = np.abs(mollify(f, sg, MollifierSpec(0.0625)) - f).max()
    assert jump_ratio(f, sg, 0.125) == pytest.approx(b / a)
    assert 0.2 <= jump_ratio(f, sg, 0.125) <= 0.3
