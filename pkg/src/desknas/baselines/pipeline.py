"""Two-stage search: uniform supernet training, evolutionary top-k, retraining from scratch.

The two stages score the same k architectures; their rankings feed the Kendall
tau reports. ``tau_inter`` compares the stages over one run's top-k;
``tau_intra`` compares the top-1 model across runs with different seeds.
"""

import copy
import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..engine import build_space, new_search_state, run_search
from ..errors import MetricError
from ..metrics import tau_report, topk_accuracy
from ..supernet import freeze_layer, instantiate_child
from ..tensorcore import no_grad, ops, optimizer_step
from ..tensorcore.optim import OptimizerState
from .spos import evaluate_arch, evolutionary_search, spos_uniform_step

log = logging.getLogger(__name__)

RANKING_FIELDS = ["rank", "arch", "search_top1", "retrain_top1"]


@dataclass
class PipelineResult:
    seed: int
    ranked: list  # RankedArch, best search fitness first
    retrain_scores: list
    tau_inter: object = None  # TauReport, or None when k < 2
    notes: dict = field(default_factory=dict)

    def rows(self):
        return [{"rank": i + 1, "arch": r.encode(), "search_top1": r.fitness,
                 "retrain_top1": s} for i, (r, s) in enumerate(zip(self.ranked, self.retrain_scores))]


def write_rankings_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RANKING_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _eval_split(dataset, n):
    n = min(n, len(dataset.y_val)) if n else len(dataset.y_val)
    return dataset.x_val[:n], dataset.y_val[:n]


def retrain_arch(cfg, dataset, indices, seed):
    """Train one fixed architecture from a fresh initialization; returns validation top-1."""
    rcfg = copy.deepcopy(cfg)
    rcfg.search_space.init_seed = seed
    net = build_space(rcfg, dataset)
    for layer, j in zip(net.layers, indices):
        freeze_layer(net, layer.index, int(j))
    bs = cfg.train.batch_size
    epochs = cfg.pipeline.retrain_epochs
    opt = OptimizerState("sgd-momentum", cfg.theta.lr, total_steps=epochs * dataset.steps_per_epoch(bs),
                         schedule=cfg.theta.schedule, weight_decay=cfg.theta.weight_decay,
                         momentum=cfg.theta.momentum)
    child = instantiate_child(net, indices, dummy=False)
    params = child.parameters()
    for epoch in range(epochs):
        for _, x, y in dataset.batches(epoch, bs):
            for p in params.values():
                p.zero_grad()
            loss = ops.softmax_cross_entropy(child.forward(x, training=True), y)
            loss.backward()
            optimizer_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, opt)
    correct = 0
    with no_grad():
        for x, y in dataset.val_batches(256):
            correct += topk_accuracy(child.forward(x, training=False).data, y, 1) * len(y)
    return correct / len(dataset.y_val)


def _retrain_seed(seed, rank):
    return int(np.random.SeedSequence([seed, 0xE7A1, rank]).generate_state(1)[0])


def two_stage_pipeline(cfg, dataset, search_fitness=None, retrain_fitness=None, state=None):
    """Run both stages for ``cfg.seed``.

    ``search_fitness`` / ``retrain_fitness`` (callables of an index tuple) replace
    the shared-weight evaluation and the from-scratch retraining; with both
    injected no training happens at all.
    """
    seed = cfg.seed
    if search_fitness is None:
        with warnings.catch_warnings():
            # logits are never trained here, so argmax ties are expected
            warnings.simplefilter("ignore", UserWarning)
            res = run_search(cfg, dataset, state=state, step_fn=spos_uniform_step)
        net = res.state.net
        xv, yv = _eval_split(dataset, cfg.ea.eval_samples)

        def search_fitness(arch):
            return evaluate_arch(net, arch, xv, yv, batch_size=max(cfg.train.batch_size, 64))
    else:
        net = build_space(cfg, dataset) if state is None else state.net
    rng = np.random.default_rng([seed, 0xEA])
    ranked = evolutionary_search(net, cfg.ea, search_fitness, rng)
    scores = []
    for i, r in enumerate(ranked):
        if retrain_fitness is not None:
            scores.append(float(retrain_fitness(r.indices)))
        else:
            scores.append(retrain_arch(cfg, dataset, r.indices, _retrain_seed(seed, i)))
        log.info("retrained %s: search %.4f retrain %.4f", r.encode(), r.fitness, scores[-1])
    out = PipelineResult(seed, ranked, scores)
    if len(ranked) >= 2:
        out.tau_inter = tau_report([r.fitness for r in ranked], scores, "inter",
                                   items=[r.encode() for r in ranked])
    else:
        out.notes["tau_inter"] = "undefined: fewer than two architectures"
    return out


def intra_report(results):
    """Tau over the top-1 model of each seeded run (needs at least two runs)."""
    if len(results) < 2:
        raise MetricError("intra-run tau needs at least two seeded runs", runs=len(results))
    return tau_report([r.ranked[0].fitness for r in results],
                      [r.retrain_scores[0] for r in results], "intra",
                      items=[f"seed{r.seed}:{r.ranked[0].encode()}" for r in results])
