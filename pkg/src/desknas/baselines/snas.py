"""Continuous relaxation: every choice layer mixes all candidates with gumbel-softmax weights.

The relaxed weights ``softmax((alpha + g) / temperature)`` are differentiable in
``alpha`` with the gumbel noise ``g`` held fixed, so one backward pass gives both
weight and logit gradients. All ``n`` candidates run every step.
"""

from dataclasses import dataclass

import numpy as np

from .. import archdist
from ..engine import _restore, _snapshot
from ..errors import NonFiniteError, SamplingError
from ..metrics import topk_accuracy
from ..tensorcore import Tensor, ops, optimizer_step, profile


@dataclass
class RelaxedChild:
    """The supernet viewed as one graph: layer output = sum_k z_k * O_k(x)."""

    net: object

    def forward(self, x, zs, training=True):
        """``zs`` maps layer index -> weight vector (Tensor or array) for active layers.

        Frozen layers run their fixed op unweighted.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        net = self.net
        h = net.stem_forward(x, training)
        for layer in net.layers:
            if not layer.active:
                h = net.candidate_forward(layer, layer.frozen, h, training)
                continue
            z = zs[layer.index]
            if not isinstance(z, Tensor):
                z = Tensor(np.asarray(z, dtype=float))
            if z.shape != (layer.n,):
                raise SamplingError("relaxed weights do not match the layer", layer=layer.index,
                                    shape=z.shape, n=layer.n)
            outs = [net.candidate_forward(layer, j, h, training) for j in range(layer.n)]
            with profile.scope(f"layer{layer.index}"), profile.scope("mix"):
                h = ops.add_n([ops.scale(o, ops.take(z, j)) for j, o in enumerate(outs)])
        return net.head_forward(h)


def temperature_at(schedule, progress):
    """Piecewise-linear anneal; ``schedule`` is [[fraction, temperature], ...]."""
    pts = sorted((float(f), float(t)) for f, t in schedule)
    lam = float(np.interp(progress, [p[0] for p in pts], [p[1] for p in pts]))
    if lam <= 0:
        raise SamplingError("temperature must be positive", temperature=lam, progress=progress)
    return lam


def relaxed_weights(net, rngs, temperature):
    """Draw gumbel noise per active layer and build the differentiable weights."""
    if temperature <= 0:
        raise SamplingError("temperature must be positive", temperature=temperature)
    zs, noise = {}, {}
    with profile.scope("arch"):
        for layer, rng in zip(net.layers, rngs):
            if not layer.active:
                continue
            g = archdist.gumbel_noise(rng, layer.n)
            noise[layer.index] = g
            zs[layer.index] = archdist.relaxed(layer.alpha, temperature, g)
    return zs, noise


def snas_step(state, x, y, temperature):
    """One relaxed step: weights and logits both follow the reparameterized gradient."""
    if temperature <= 0:
        raise SamplingError("temperature must be positive", temperature=temperature)
    net = state.net
    snap = _snapshot(state)
    params = net.theta_params()
    alphas = net.alphas()
    try:
        for p in list(params.values()) + list(alphas.values()):
            p.zero_grad()
        zs, _ = relaxed_weights(net, state.rngs, temperature)
        logits = RelaxedChild(net).forward(x, zs, training=True)
        loss = ops.softmax_cross_entropy(logits, y)
        loss.backward()
    except NonFiniteError:
        _restore(state, snap)
        raise
    theta_grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    alpha_grads = {f"layer{l.index}.alpha": l.alpha.grad.copy() for l in net.layers
                   if l.active and l.alpha.grad is not None}
    optimizer_step(params, theta_grads, state.theta_opt)
    if alpha_grads:
        optimizer_step(alphas, alpha_grads, state.alpha_opt)
    state.step += 1
    return {"loss": float(loss.data), "top1": topk_accuracy(logits.data, y, 1),
            "temperature": temperature, "alpha_grads": alpha_grads}


def snas_step_fn(schedule, total_steps):
    """Adapter for the epoch loop: anneals the temperature by training progress."""
    def step(state, x, y, val_batch=None):
        progress = state.step / max(total_steps, 1)
        return snas_step(state, x, y, temperature_at(schedule, progress))
    return step
