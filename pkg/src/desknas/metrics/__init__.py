"""Rank correlation, accuracy and complexity counters."""

from .accuracy import topk_accuracy
from .counters import CHOICE, ComplexityCounter, count_step, counting, write_counter_csv
from .kendall import TauReport, concordance, kendall_tau, ranks, read_scores_csv, tau_report

__all__ = [
    "CHOICE", "ComplexityCounter", "TauReport", "concordance", "count_step", "counting",
    "kendall_tau", "ranks", "read_scores_csv", "tau_report", "topk_accuracy",
    "write_counter_csv",
]
