"""Alternating collision / transport construction with mollification at odd times.

The horizon ``[0, T]`` is cut into ``N`` intervals of length ``h = T / N``.
Interval ``i`` (``1 <= i <= N``) covers ``[t_{i-1}, t_i)``; odd intervals
are collision substeps and even intervals transport substeps, each advanced
with the sped-up generator.  At every odd ``t_i`` the field is mollified in
``x`` before transport starts; the state stored at an odd ``t_i`` is the
value before mollification (left continuity).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .collision import CollisionEngine
from .core import DecayEnvelope, DistributionField, SpaceGrid, VelocityGrid
from .diagnostics import BarrierSpec, GWeight, diagnostics_row
from .homogeneous import BlowUpError, HomogeneousSolver, StepperConfig
from .transport import MollifierSpec, mollify, transport_step

ABORT_REASONS = ("completed", "barrier-violated", "blow-up-guard", "non-finite")


class ParityError(ValueError):
    """Schedule extension incompatible with the stored position."""


@dataclass(frozen=True)
class SplittingSchedule:
    """Uniform partition ``t_i = i h`` of ``[0, T]`` with ``N`` even."""

    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.N < 2 or self.N % 2:
            raise ValueError(f"N must be an even integer >= 2, got {self.N}")

    @property
    def h(self) -> float:
        return self.T / self.N

    def time(self, i: int) -> float:
        return i * self.h

    @staticmethod
    def kind(i: int) -> str:
        """``"D"`` (collision) for odd ``i``, ``"T"`` (transport) for even ``i``."""
        return "D" if i % 2 else "T"

    def extended(self, extra_T: float) -> "SplittingSchedule":
        """Same step, horizon ``T + extra_T``; the extension must hold an even
        number of steps."""
        n = extra_T / self.h
        k = int(round(n))
        if abs(n - k) > 1e-9 * max(1.0, n):
            raise ParityError("extension is not a whole number of steps")
        if k % 2:
            raise ParityError("extension must contain an even number of steps")
        return SplittingSchedule(self.T + k * self.h, self.N + k)


@dataclass(frozen=True)
class DiagnosticsConfig:
    """Cadence and contents of the per-substep diagnostics."""

    every: int = 1
    q_list: tuple = (8.0,)
    snapshot_every: int = 0
    mollifier_h: float | None = None
    lemma_every: int = 10
    lemma_samples: int = 8


@dataclass
class RunState:
    """Field after ``position`` completed intervals of ``schedule``."""

    field: DistributionField
    position: int
    schedule: SplittingSchedule
    abort_reason: str | None = None

    def __post_init__(self):
        t = self.schedule.time(self.position)
        if abs(self.field.time_stamp - t) > 1e-9 * max(1.0, t):
            raise ValueError("time stamp inconsistent with schedule position")

    @property
    def parity(self) -> int:
        return self.position % 2


@dataclass
class RunResult:
    state: RunState
    snapshots: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    jumps: list = field(default_factory=list)
    step_records: list = field(default_factory=list)
    abort_reason: str = "completed"
    abort_detail: str = ""
    paper_regime: bool | None = None


class Splitter:
    """Runs the alternation for fixed grids, engine and stepper."""

    def __init__(self, engine: CollisionEngine | None, vgrid: VelocityGrid, sgrid: SpaceGrid,
                 stepper: StepperConfig | None = None, barrier: BarrierSpec | None = None,
                 diag: DiagnosticsConfig | None = None,
                 lemma_hook: Callable[[np.ndarray], dict] | None = None):
        if engine is not None and engine.vgrid != vgrid:
            raise ValueError("collision engine built for a different velocity grid")
        self.engine = engine
        self.vgrid, self.sgrid = vgrid, sgrid
        self.stepper = stepper or StepperConfig()
        self.barrier = barrier
        self.diag = diag or DiagnosticsConfig()
        self.g = GWeight(barrier.q) if barrier is not None else None
        self.solver = HomogeneousSolver(engine, self.stepper) if engine is not None else None
        self.lemma_hook = lemma_hook
        self.envelope = DecayEnvelope()

    def _row(self, values, t, kind, i):
        consts = None
        if self.lemma_hook is not None and self.diag.lemma_every and i % self.diag.lemma_every == 0:
            consts = self.lemma_hook(values)
        return diagnostics_row(values, self.vgrid, t, kind, self.diag.q_list, self.barrier, self.g,
                               self.envelope, consts)

    def _collide(self, values: np.ndarray, h: float, result: RunResult) -> np.ndarray:
        if self.solver is None:
            raise ValueError("collision substep requires a collision engine")
        eng = self.engine
        u, rec = self.solver.advance_active(eng.to_active(values), h)
        result.step_records.append(rec)
        return eng.from_active(u)

    def run(self, state: RunState, stop: int | None = None) -> RunResult:
        """Advance ``state`` to position ``stop`` (default: end of schedule)."""
        sch = state.schedule
        stop = sch.N if stop is None else stop
        if not state.position <= stop <= sch.N:
            raise ValueError("stop position outside the schedule")
        moll = MollifierSpec(self.diag.mollifier_h or sch.h)
        result = RunResult(state)
        if self.barrier is not None:
            result.paper_regime = self.barrier.paper_regime(sch.T)
        values = np.array(state.field.values)
        if values.shape != (self.sgrid.size, self.vgrid.size):
            raise ValueError("field shape does not match the grids")
        result.rows.append(self._row(values, sch.time(state.position), "init", state.position))
        i = state.position
        while i < stop:
            i += 1
            kind = sch.kind(i)
            try:
                if kind == "D":
                    values = self._collide(values, sch.h, result)
                else:
                    # mollify at the odd time that opens this transport interval
                    before = values
                    values = mollify(values, self.sgrid, moll)
                    result.jumps.append((sch.time(i - 1), float(np.max(np.abs(values - before)))))
                    values = transport_step(values, self.vgrid, self.sgrid, sch.h)
            except BlowUpError as err:
                result.abort_reason, result.abort_detail = "blow-up-guard", str(err)
                i -= 1
                break
            except FloatingPointError as err:
                result.abort_reason, result.abort_detail = "non-finite", str(err)
                i -= 1
                break
            if not np.all(np.isfinite(values)):
                result.abort_reason, result.abort_detail = "non-finite", f"interval {i}"
                i -= 1
                break
            t = sch.time(i)
            if self.diag.every and (i % self.diag.every == 0 or i == stop):
                result.rows.append(self._row(values, t, kind, i))
                margin = result.rows[-1]["barrier_margin"]
                if self.barrier is not None and margin < 0:
                    result.abort_reason = "barrier-violated"
                    result.abort_detail = f"margin {margin:.3e} at t = {t:.6g}"
                    state = RunState(DistributionField(values, t), i, sch, result.abort_reason)
                    result.state = state
                    result.snapshots.append(state)
                    return result
            if self.diag.snapshot_every and i % self.diag.snapshot_every == 0:
                result.snapshots.append(RunState(DistributionField(values, t), i, sch))
        final = RunState(DistributionField(values, sch.time(i)), i, sch,
                         None if result.abort_reason == "completed" else result.abort_reason)
        result.state = final
        if not result.snapshots or result.snapshots[-1].position != i:
            result.snapshots.append(final)
        return result


def run(f0: DistributionField, schedule: SplittingSchedule, engine: CollisionEngine | None,
        vgrid: VelocityGrid, sgrid: SpaceGrid, stepper: StepperConfig | None = None,
        barrier: BarrierSpec | None = None, diag: DiagnosticsConfig | None = None,
        lemma_hook=None) -> RunResult:
    """Run the full construction from ``f0`` at time 0."""
    if f0.values.shape != (sgrid.size, vgrid.size):
        raise ValueError("initial field does not match the grids")
    f0 = replace(f0, time_stamp=0.0) if f0.time_stamp != 0.0 else f0
    sp = Splitter(engine, vgrid, sgrid, stepper, barrier, diag, lemma_hook)
    return sp.run(RunState(f0, 0, schedule))


def resume(state: RunState, extra_T: float, engine: CollisionEngine | None, vgrid: VelocityGrid,
           sgrid: SpaceGrid, stepper: StepperConfig | None = None, barrier: BarrierSpec | None = None,
           diag: DiagnosticsConfig | None = None, parity: int | None = None) -> RunResult:
    """Continue a stored state for ``extra_T`` more time with the same step.

    ``parity`` (when given, e.g. from a snapshot header) must agree with the
    stored position.
    """
    if parity is not None and parity != state.position % 2:
        raise ParityError("snapshot parity does not match its schedule position")
    if extra_T < 0:
        raise ValueError("extension must be nonnegative")
    sch = state.schedule.extended(extra_T) if extra_T > 0 else state.schedule
    new_state = RunState(state.field, state.position, sch)
    sp = Splitter(engine, vgrid, sgrid, stepper, barrier, diag)
    result = sp.run(new_state)
    result.rows = result.rows[1:] if state.position > 0 else result.rows
    return result


def jump_discontinuity_log(result: RunResult) -> list:
    """``(t_i, sup |chi_h * f(t_i-) - f(t_i-)|)`` for every odd ``t_i`` crossed."""
    return list(result.jumps)


def jump_ratio(values: np.ndarray, sgrid: SpaceGrid, h: float) -> float:
    """Jump at scale ``h/2`` over the jump at scale ``h`` for one field."""
    a = np.max(np.abs(mollify(values, sgrid, MollifierSpec(h)) - values))
    b = np.max(np.abs(mollify(values, sgrid, MollifierSpec(0.5 * h)) - values))
    return float(b / a) if a > 0 else math.nan


def matched_jump_ratios(coarse: RunResult, fine: RunResult, sgrid: SpaceGrid) -> np.ndarray:
    """Jump of the ``h/2`` run over the jump of the ``h`` run at the same times.

    Each odd time ``t`` of the coarse run is an even node of the fine run; the
    fine jump there is ``sup |chi_{h/2} * f - f|`` of the fine state at ``t``,
    so the two runs are compared without interpolating between their
    staggered mollification times.  ``fine`` needs snapshots at those nodes
    (``DiagnosticsConfig(snapshot_every=2)``).
    """
    h = coarse.state.schedule.h
    h_fine = fine.state.schedule.h
    if abs(h_fine - 0.5 * h) > 1e-12 * h:
        raise ValueError("fine run must use half the coarse step")
    snaps = {s.position: s.field.values for s in fine.snapshots}
    out = []
    for t, jump in coarse.jumps:
        pos = int(round(t / h_fine))
        if pos not in snaps:
            raise ValueError(f"fine run has no snapshot at position {pos}")
        f = snaps[pos]
        fine_jump = np.max(np.abs(mollify(f, sgrid, MollifierSpec(h_fine)) - f))
        out.append(fine_jump / jump if jump > 0 else math.nan)
    return np.array(out)
