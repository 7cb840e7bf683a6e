"""Reference estimators and search strategies: relaxation, uniform sampling + evolution,
straight-through gradients, and the two-stage pipeline."""

from .pipeline import PipelineResult, intra_report, retrain_arch, two_stage_pipeline, write_rankings_csv
from .proxyless import proxyless_pass, proxyless_st_gradient, proxyless_step, proxyless_step_fn, softmax_jvp
from .snas import RelaxedChild, relaxed_weights, snas_step, snas_step_fn, temperature_at
from .spos import RankedArch, evaluate_arch, evolutionary_search, spos_uniform_step

__all__ = [
    "PipelineResult", "RankedArch", "RelaxedChild", "evaluate_arch", "evolutionary_search",
    "intra_report", "proxyless_pass", "proxyless_st_gradient", "proxyless_step",
    "proxyless_step_fn", "relaxed_weights", "retrain_arch", "snas_step", "snas_step_fn",
    "softmax_jvp", "spos_uniform_step", "temperature_at", "two_stage_pipeline",
    "write_rankings_csv",
]
