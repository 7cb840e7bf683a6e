"""Uniform single-path supernet training and evolutionary search over its weights."""

from dataclasses import dataclass

import numpy as np

from ..engine import _forward_backward, _restore, _snapshot
from ..errors import NonFiniteError, SearchSpaceError
from ..metrics import topk_accuracy
from ..supernet import ArchSample, instantiate_child, sample_arch
from ..tensorcore import no_grad, optimizer_step


def spos_uniform_step(state, x, y, val_batch=None):
    """Train the uniformly sampled child's weights; logits are never read or written."""
    net = state.net
    snap = _snapshot(state)
    try:
        sample = sample_arch(net, state.rngs, uniform=True)
        child = instantiate_child(net, sample, dummy=False)
        params = child.parameters()
        logits, loss = _forward_backward(child, x, y, params)
    except NonFiniteError:
        _restore(state, snap)
        raise
    optimizer_step(net.theta_params(), {k: p.grad for k, p in params.items()
                                        if p.grad is not None}, state.theta_opt)
    state.step += 1
    return {"loss": float(loss.data), "top1": topk_accuracy(logits.data, y, 1), "sample": sample}


def evaluate_arch(net, indices, x, y, batch_size=256):
    """Shared-weight top-1 of one architecture.

    Batch-norm layers normalize with the evaluation batch's own statistics (a
    cheap per-architecture recalibration); running buffers are left untouched.
    """
    saved = {k: v.copy() for k, v in net.bn_buffers().items()}
    child = instantiate_child(net, indices, dummy=False)
    correct = 0
    try:
        with no_grad():
            for b in range(0, len(y), batch_size):
                logits = child.forward(x[b:b + batch_size], training=True)
                correct += topk_accuracy(logits.data, y[b:b + batch_size], 1) * len(y[b:b + batch_size])
    finally:
        for k, v in net.bn_buffers().items():
            v[...] = saved[k]
    return correct / len(y)


@dataclass
class RankedArch:
    indices: tuple
    fitness: float
    macs: int

    def encode(self):
        return "-".join(str(i) for i in self.indices)


def _min_macs(net):
    # candidates of one layer share their output size, so minima combine per layer
    return net.selection_macs([int(np.argmin([c.macs(hw) for c in layer.candidates]))
                               for layer, hw in zip(net.layers, net._layer_hw)])


def evolutionary_search(net, ea, fitness, rng, max_tries=1000):
    """Tournament selection, single-point crossover and per-layer mutation.

    ``ea`` is an EA config (pool_size, tournament, mutation_prob, crossover_prob,
    generations, flops_ceiling, top_k); ``fitness(indices) -> float``. Children
    over the MAC ceiling are rejected and redrawn. Returns the top-k distinct
    architectures seen, best first (ties broken by encoding).
    """
    sizes = [layer.n for layer in net.layers]
    ceiling = ea.flops_ceiling
    if ceiling is not None and _min_macs(net) > ceiling:
        raise SearchSpaceError("no architecture satisfies the FLOPs ceiling",
                               ceiling=ceiling, smallest=_min_macs(net))
    cache = {}

    def feasible(arch):
        return ceiling is None or net.selection_macs(arch) <= ceiling

    def score(arch):
        if arch not in cache:
            cache[arch] = float(fitness(arch))
        return cache[arch]

    def draw(make):
        for _ in range(max_tries):
            arch = make()
            if feasible(arch):
                return arch
        raise SearchSpaceError("could not draw an architecture under the FLOPs ceiling",
                               ceiling=ceiling, tries=max_tries)

    def random_arch():
        return tuple(int(rng.integers(n)) for n in sizes)

    def tournament(pool):
        picks = rng.choice(len(pool), size=min(ea.tournament, len(pool)), replace=False)
        return max((pool[i] for i in picks), key=lambda a: (score(a), _key(a)))

    def offspring(pool):
        a = tournament(pool)
        if len(sizes) > 1 and rng.random() < ea.crossover_prob:
            b = tournament(pool)
            cut = int(rng.integers(1, len(sizes)))
            a = a[:cut] + b[cut:]
        return tuple(int(rng.integers(n)) if rng.random() < ea.mutation_prob else s
                     for s, n in zip(a, sizes))

    pool = [draw(random_arch) for _ in range(ea.pool_size)]
    for a in pool:
        score(a)
    for _ in range(ea.generations):
        pool = [draw(lambda: offspring(pool)) for _ in range(ea.pool_size)]
        for a in pool:
            score(a)
    ranked = sorted(cache, key=lambda a: (-cache[a], _key(a)))
    return [RankedArch(a, cache[a], net.selection_macs(a)) for a in ranked[:ea.top_k]]


def _key(arch):
    return "-".join(str(i) for i in arch)


def as_sample(ranked, net):
    return ArchSample(tuple(ranked.indices), (), tuple(l.n for l in net.layers))
