"""Risk-controlled early stopping for step-wise reasoning trajectories."""

from .calibrate import (
    CalibrationOutcome,
    CandidateGrid,
    GridMode,
    RiskBudget,
    adjusted_risk,
    build_grid,
    calibrate,
    calibrate_dual,
    hoeffding_correction,
)
from .losses import LossKind, empirical_risk
from .policy import DualPolicy, ExitOutcome, LowerPolicy, UpperPolicy, dual_exit, sigmoid_threshold
from .signals import SignalSpec, Transform
from .synth import SynthConfig, generate
from .trajectory import Dataset, StepRecord, Trajectory, emit, ingest, split, subsample_by_ratio

__all__ = [
    "CalibrationOutcome",
    "CandidateGrid",
    "Dataset",
    "DualPolicy",
    "ExitOutcome",
    "GridMode",
    "LossKind",
    "LowerPolicy",
    "RiskBudget",
    "SignalSpec",
    "StepRecord",
    "SynthConfig",
    "Trajectory",
    "Transform",
    "UpperPolicy",
    "adjusted_risk",
    "build_grid",
    "calibrate",
    "calibrate_dual",
    "dual_exit",
    "emit",
    "empirical_risk",
    "generate",
    "hoeffding_correction",
    "ingest",
    "sigmoid_threshold",
    "split",
    "subsample_by_ratio",
]
