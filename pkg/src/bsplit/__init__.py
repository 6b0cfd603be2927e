"""Deterministic splitting solver for the non-cutoff Boltzmann equation near a Maxwellian."""
from .core import (DecayEnvelope, DistributionField, PhysParams, SpaceGrid, VelocityGrid,
                   bracket_weight, build_grids, maxwellian)
from .collision import CollisionEngine, QuadratureSpec
from .homogeneous import BlowUpError, HomogeneousSolver, StepperConfig, collision_step
from .transport import MollifierSpec, mollify, transport_step
from .initial_data import PerturbationSpec, make_perturbation, project_moments, validate_envelope
from .splitting import (DiagnosticsConfig, RunResult, RunState, SplittingSchedule, jump_discontinuity_log, matched_jump_ratios,
                        resume, run)
from .diagnostics import BarrierSpec, GWeight, hydro_fields, lemma_suite, weighted_sup

__version__ = "0.1.0"

__all__ = [
    "BarrierSpec", "BlowUpError", "CollisionEngine", "DecayEnvelope", "DiagnosticsConfig",
    "DistributionField", "GWeight", "HomogeneousSolver", "MollifierSpec", "PerturbationSpec",
    "PhysParams", "QuadratureSpec", "RunResult", "RunState", "SpaceGrid", "SplittingSchedule",
    "StepperConfig", "VelocityGrid", "bracket_weight", "build_grids", "collision_step",
    "hydro_fields", "jump_discontinuity_log", "lemma_suite", "make_perturbation", "matched_jump_ratios", "maxwellian",
    "mollify", "project_moments", "resume", "run", "transport_step", "validate_envelope",
    "weighted_sup",
]
