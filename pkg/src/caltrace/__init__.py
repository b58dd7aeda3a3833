"""Lattice-based authorization for calibration traceability chains."""

from .labels import (
    BOTTOM,
    TAINT,
    CoiUniverse,
    IntegrityLadder,
    SecurityLabel,
    dominates,
    format_label,
    join,
    make_bottom,
    make_label,
    make_system_high,
    parse_label,
    validate_label,
)
from .policy import (
    AccessRequest,
    Action,
    Decision,
    Engine,
    EngineMode,
    Outcome,
    evaluate_baseline,
    evaluate_chain,
    evaluate_read,
    evaluate_write,
    timed_evaluate,
)
from .store import CalibrationStore, Technician

__version__ = "0.1.0"

__all__ = [
    "BOTTOM", "TAINT", "CoiUniverse", "IntegrityLadder", "SecurityLabel",
    "dominates", "format_label", "join", "make_bottom", "make_label",
    "make_system_high", "parse_label", "validate_label",
    "AccessRequest", "Action", "Decision", "Engine", "EngineMode", "Outcome",
    "evaluate_baseline", "evaluate_chain", "evaluate_read", "evaluate_write",
    "timed_evaluate", "CalibrationStore", "Technician",
]
