""" Frontier evaluation: exact match, NFE, legality and report files """

from .evaluate import (
    EmptyEvaluationSetError,
    EvalReport,
    FrontierTable,
    ReplayError,
    RunLabels,
    evaluate_set,
    rollout_violations,
    sweep,
    tier_breakdown,
)
from .report import aggregate_seeds, emit_report, parse_report, report_stem

__all__ = [
    "EmptyEvaluationSetError", "EvalReport", "FrontierTable", "ReplayError", "RunLabels",
    "evaluate_set", "rollout_violations", "sweep", "tier_breakdown",
    "aggregate_seeds", "emit_report", "parse_report", "report_stem",
]
