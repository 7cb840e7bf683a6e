"""Run orchestration: validate, prepare the output directory, dispatch, write artifacts.

Artifacts of a search run::

    config.yaml     the resolved configuration
    epochs.csv      one row per epoch
    summary.yaml    derived architecture, freeze epochs, entropies, final metrics
    arch.txt        derived-architecture dump
    checkpoint.bin  final search state
    counters.csv    per-step complexity (only with train.counters)

A two-stage run writes rankings and tau reports instead of epochs/checkpoint.
"""

import copy
import csv
import logging
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml

from ..baselines import (
    evolutionary_search, intra_report, proxyless_step_fn, snas_step_fn, spos_uniform_step,
    two_stage_pipeline, write_rankings_csv,
)
from ..baselines.spos import evaluate_arch
from ..engine import dsnas_step, run_search, write_epoch_csv
from ..errors import ConfigError
from ..metrics import CHOICE, ComplexityCounter, counting
from ..supernet import dump_architecture, instantiate_child
from ..tensorcore import set_default_dtype
from .checkpoint import load_checkpoint, restore_state, save_checkpoint
from .config import validate
from .data import load_dataset

log = logging.getLogger(__name__)

ENV_OUTPUT_ROOT = "DESKNAS_OUTPUT_ROOT"
CHECKPOINT = "checkpoint.bin"


@dataclass
class RunResult:
    output_dir: str
    summary: dict
    state: object = None
    extra: dict = field(default_factory=dict)


def default_output_dir(cfg):
    root = os.environ.get(ENV_OUTPUT_ROOT, "runs")
    return os.path.join(root, f"{cfg.method}-seed{cfg.seed}-{cfg.config_hash()[:8]}")


def prepare_output_dir(path, force=False):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError("output directory is not empty (use --force to reuse it)", path=path)
    if os.path.exists(path) and not os.path.isdir(path):
        raise ConfigError("output path exists and is not a directory", path=path)
    os.makedirs(path, exist_ok=True)
    return path


def step_function(cfg, steps_per_epoch):
    total = cfg.train.epochs * steps_per_epoch
    if cfg.method == "dsnas":
        return dsnas_step
    if cfg.method == "snas":
        return snas_step_fn(cfg.snas.temperature, total)
    if cfg.method == "proxyless-st":
        return proxyless_step_fn(cfg.proxyless.max_candidates)
    if cfg.method in ("spos", "two-stage"):
        return spos_uniform_step
    raise ConfigError("unknown method", method=cfg.method)


class _CountingStep:
    """Wraps a step function and accumulates complexity counters across steps."""

    def __init__(self, fn):
        self.fn = fn
        self.steps = 0
        self.total = ComplexityCounter()
        self.choice = [0, 0, 0]

    def __call__(self, state, x, y, val_batch=None):
        with counting() as c:
            out = self.fn(state, x, y, val_batch)
        self.steps += 1
        self.total.forward_macs += c.forward_macs
        self.total.backward_macs += c.backward_macs
        self.total.peak_activations = max(self.total.peak_activations, c.peak_activations)
        g = c.group(CHOICE)
        self.choice[0] += g["forward_macs"]
        self.choice[1] += g["backward_macs"]
        self.choice[2] = max(self.choice[2], g["peak_activations"])
        return out

    def rows(self, method):
        n = max(self.steps, 1)
        return [
            {"method": method, "scope": "total", "steps": self.steps,
             "forward_macs_per_step": self.total.forward_macs / n,
             "backward_macs_per_step": self.total.backward_macs / n,
             "peak_activations": self.total.peak_activations},
            {"method": method, "scope": CHOICE, "steps": self.steps,
             "forward_macs_per_step": self.choice[0] / n,
             "backward_macs_per_step": self.choice[1] / n,
             "peak_activations": self.choice[2]},
        ]


def _write_yaml(path, data):
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run(cfg, output_dir=None, force=False, resume=None, max_steps=None):
    """Execute one configured experiment. Raises DeskNASError subclasses on failure."""
    validate(cfg)
    out = output_dir or cfg.output_dir or default_output_dir(cfg)
    ckpt = load_checkpoint(resume) if resume else None
    # resuming in place rewrites the run's own artifacts
    in_place = resume is not None and os.path.dirname(os.path.abspath(resume)) == os.path.abspath(out)
    prepare_output_dir(out, force=force or in_place)
    set_default_dtype(cfg.train.dtype)
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        fh.write(cfg.to_yaml())
    dataset = load_dataset(cfg.dataset, cfg.seed)
    t0 = time.time()
    if cfg.method == "two-stage":
        result = _run_two_stage(cfg, dataset, out)
    else:
        result = _run_search(cfg, dataset, out, ckpt, max_steps)
    log.info("run finished in %.1fs: %s", time.time() - t0, out)
    return result


def _run_search(cfg, dataset, out, ckpt, max_steps):
    state = restore_state(ckpt, cfg, dataset) if ckpt is not None else None
    step = step_function(cfg, dataset.steps_per_epoch(cfg.train.batch_size))
    counter = _CountingStep(step) if cfg.train.counters else None
    with warnings.catch_warnings():
        if cfg.method == "spos":
            # logits are never trained, so argmax ties are expected
            warnings.simplefilter("ignore", UserWarning)
        res = run_search(cfg, dataset, state=state, max_steps=max_steps,
                         step_fn=counter if counter is not None else step)
    state = res.state
    write_epoch_csv(os.path.join(out, "epochs.csv"), state.history)
    save_checkpoint(os.path.join(out, CHECKPOINT), state, cfg.config_hash())
    if counter is not None and counter.steps:
        _write_rows(os.path.join(out, "counters.csv"), counter.rows(cfg.method))
    if res.derived is None:  # stopped early by max_steps
        summary = {"method": cfg.method, "seed": cfg.seed, "config_hash": cfg.config_hash(),
                   "completed": False, "steps": state.step, "epoch": state.epoch}
        _write_yaml(os.path.join(out, "summary.yaml"), summary)
        return RunResult(out, summary, state)
    net = state.net
    indices = tuple(res.report["derived"])
    extra = {}
    if cfg.method == "spos":
        # logits are never trained; the derived child comes from evolution instead
        xv, yv = dataset.x_val[:cfg.ea.eval_samples], dataset.y_val[:cfg.ea.eval_samples]
        ranked = evolutionary_search(net, cfg.ea, lambda a: evaluate_arch(net, a, xv, yv),
                                     np.random.default_rng([cfg.seed, 0xEA]))
        indices = ranked[0].indices
        extra["ea_top"] = [{"arch": r.encode(), "val_top1": r.fitness} for r in ranked]
    val_top1 = evaluate_arch(net, indices, dataset.x_val, dataset.y_val)
    last = state.history[-1] if state.history else {}
    summary = {
        "method": cfg.method, "seed": cfg.seed, "config_hash": cfg.config_hash(),
        "completed": True,
        "derived": list(indices),
        "derived_kinds": [l.candidates[j].kind for l, j in zip(net.layers, indices)],
        "frozen_layers": res.report["frozen_layers"],
        "initial_mean_entropy": res.report["initial_mean_entropy"],
        "final_mean_entropy": res.report["final_mean_entropy"],
        "final_train_loss": last.get("train_loss"),
        "final_train_top1": last.get("train_top1"),
        "derived_val_top1_shared": val_top1,
        "derived_params": instantiate_child(net, indices, dummy=False).parameter_count(),
        "derived_macs": int(net.selection_macs(indices)),
        "steps": state.step, "epochs": state.epoch,
        **extra,
    }
    _write_yaml(os.path.join(out, "summary.yaml"), summary)
    with open(os.path.join(out, "arch.txt"), "w") as fh:
        fh.write(dump_architecture(net, indices))
    return RunResult(out, summary, state)


def _run_two_stage(cfg, dataset, out):
    seeds = [cfg.seed] + [int(s) for s in cfg.pipeline.seeds if int(s) != cfg.seed]
    results = []
    for s in seeds:
        scfg = copy.deepcopy(cfg)
        scfg.seed = s
        ds = dataset if s == cfg.seed else load_dataset(cfg.dataset, s)
        r = two_stage_pipeline(scfg, ds)
        results.append(r)
        write_rankings_csv(os.path.join(out, f"rankings_seed{s}.csv"), r.rows())
        if r.tau_inter is not None:
            r.tau_inter.write_csv(os.path.join(out, f"tau_inter_seed{s}.csv"))
    summary = {"method": cfg.method, "seeds": seeds, "config_hash": cfg.config_hash(),
               "top_k": cfg.ea.top_k,
               "tau_inter": {s: (r.tau_inter.tau if r.tau_inter is not None else None)
                             for s, r in zip(seeds, results)},
               "top1": {s: {"arch": r.ranked[0].encode(), "search_top1": r.ranked[0].fitness,
                            "retrain_top1": r.retrain_scores[0]} for s, r in zip(seeds, results)}}
    if len(results) >= 2:
        intra = intra_report(results)
        intra.write_csv(os.path.join(out, "tau_intra.csv"))
        summary["tau_intra"] = intra.tau
    else:
        summary["tau_intra"] = None
    _write_yaml(os.path.join(out, "summary.yaml"), summary)
    return RunResult(out, summary, extra={"results": results})
