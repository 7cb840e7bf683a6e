"""Straight-through logit gradient, full-summation form.

Binary gates ``g`` are sampled from softmax(alpha); every candidate output is
computed and the layer emits ``sum_k g_k * O_k(x)``, so ``dL/dg_k`` exists for
unsampled candidates too. The logit gradient is

    sum_k dL/dg_k * d softmax(alpha)_k / d alpha.

Evaluating all ``n`` candidates is what makes this the n-fold variant; the
two-path heuristic is not implemented.
"""

from dataclasses import dataclass

import numpy as np

from .. import archdist
from ..engine import _restore, _snapshot
from ..errors import NonFiniteError, SearchSpaceError
from ..metrics import topk_accuracy
from ..supernet import sample_arch
from ..tensorcore import Tensor, ops, optimizer_step
from .snas import RelaxedChild


@dataclass
class ProxylessPass:
    alpha_grads: dict
    theta_grads: dict
    loss: float
    logits: np.ndarray
    sample: object


def softmax_jvp(alpha, v):
    """J^T v for J = d softmax(alpha) / d alpha (J is symmetric)."""
    p = archdist.softmax_probs(alpha)
    return p * (v - np.dot(p, v))


def proxyless_pass(net, x, y, rngs, max_candidates=8, loss_fn=None, training=True):
    for layer in net.layers:
        if layer.active and layer.n > max_candidates:
            raise SearchSpaceError("full-summation gradient limited to max_candidates",
                                   layer=layer.index, n=layer.n, max_candidates=max_candidates)
    sample = sample_arch(net, rngs)
    gates = {}
    for layer in net.layers:
        if layer.active:
            g = np.zeros(layer.n)
            g[sample.indices[layer.index]] = 1.0
            gates[layer.index] = Tensor(g, requires_grad=True)
    params = net.theta_params()
    for p in params.values():
        p.zero_grad()
    logits = RelaxedChild(net).forward(x, gates, training)
    loss = loss_fn(logits, y) if loss_fn is not None else ops.softmax_cross_entropy(logits, y)
    loss.backward()
    alpha_grads = {}
    for idx, g in gates.items():
        dldg = np.zeros(net.layers[idx].n) if g.grad is None else g.grad
        alpha_grads[f"layer{idx}.alpha"] = softmax_jvp(net.layers[idx].alpha.data, dldg)
    # only the sampled path trains: unsampled candidates carry zero gates
    selected = set()
    for layer in net.layers:
        j = sample.indices[layer.index]
        selected.update(f"layer{layer.index}.cand{j}.{k}" for k in layer.candidates[j].params)
    theta_grads = {k: p.grad for k, p in params.items()
                   if p.grad is not None and (not k.startswith("layer") or k in selected)}
    return ProxylessPass(alpha_grads, theta_grads, float(loss.data), logits.data, sample)


def proxyless_st_gradient(net, x, y, rngs, max_candidates=8, loss_fn=None):
    """Per-layer logit gradients (dict ``layer{i}.alpha`` -> array)."""
    return proxyless_pass(net, x, y, rngs, max_candidates, loss_fn).alpha_grads


def proxyless_step(state, x, y, max_candidates=8):
    snap = _snapshot(state)
    try:
        res = proxyless_pass(state.net, x, y, state.rngs, max_candidates)
    except NonFiniteError:
        _restore(state, snap)
        raise
    optimizer_step(state.net.theta_params(), res.theta_grads, state.theta_opt)
    if res.alpha_grads:
        optimizer_step(state.net.alphas(), res.alpha_grads, state.alpha_opt)
    state.step += 1
    return {"loss": res.loss, "top1": topk_accuracy(res.logits, y, 1), "sample": res.sample}


def proxyless_step_fn(max_candidates):
    def step(state, x, y, val_batch=None):
        return proxyless_step(state, x, y, max_candidates)
    return step
