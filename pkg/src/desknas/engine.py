"""Single-run search: sample a child, one forward/backward, update weights and logits.

Per step, for every active choice layer the logit gradient is

    cost * (onehot(selected) - softmax(alpha))

where ``cost`` is the gradient of the loss with respect to the constant-one
scalar spliced after the layer's selected output. The weights of the selected
ops get plain backprop gradients; both updates come from the same backward pass.
"""

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import archdist
from .errors import GraphStateError, NonFiniteError
from .metrics import topk_accuracy
from .supernet import (
    build_supernet, default_desk_spec, derive_final, derived_indices, freeze_layer,
    instantiate_child, planted_spec, sample_arch,
)
from .tensorcore import ops, optimizer_step
from .tensorcore.optim import OptimizerState

log = logging.getLogger(__name__)


def extract_cost(child):
    """Per-layer credit: the gradient accumulated on each dummy scalar."""
    if not child.backward_done:
        raise GraphStateError("no backward pass has run on this child")
    costs = {}
    for idx, dummy in child.dummies.items():
        # no gradient means the layer output never reached the loss
        costs[idx] = 0.0 if dummy.grad is None else float(dummy.grad)
    return costs


def early_stop_check(alpha, h):
    """Index to freeze when the top logit leads every other logit by at least ``h``."""
    alpha = np.asarray(alpha, dtype=float)
    k = int(np.argmax(alpha))
    if alpha.shape[0] == 1:
        return k
    gap = np.min(alpha[k] - np.delete(alpha, k))
    return k if gap >= h else None


def alpha_gradients(net, sample, costs, baselines=None):
    """Score-function logit gradients for the active layers of ``sample``."""
    grads = {}
    for layer in net.layers:
        if not layer.active:
            continue
        c = costs[layer.index]
        if baselines is not None:
            c = c - baselines.get(layer.index, 0.0)
        z = np.zeros(layer.n)
        z[sample.indices[layer.index]] = 1.0
        grads[f"layer{layer.index}.alpha"] = c * archdist.logp_grad(layer.alpha.data, z)
    return grads


@dataclass
class SearchState:
    net: object
    theta_opt: OptimizerState
    alpha_opt: OptimizerState
    seed: int
    h: float = 0.3
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    rngs: list = field(default_factory=list)
    baselines: dict = field(default_factory=dict)
    use_baseline: bool = False
    ema_decay: float = 0.9
    history: list = field(default_factory=list)  # per-epoch rows
    epoch_losses: list = field(default_factory=list)
    epoch_accs: list = field(default_factory=list)
    freeze_events: list = field(default_factory=list)
    initial_entropy: float = 0.0

    def layer_entropies(self):
        """Entropy of each layer's sampling distribution (zero once frozen)."""
        return [archdist.entropy(l.probs()) if l.active else 0.0 for l in self.net.layers]

    def rng_states(self):
        return [r.bit_generator.state for r in self.rngs]

    def set_rng_states(self, states):
        for r, s in zip(self.rngs, states):
            r.bit_generator.state = s


def new_search_state(net, cfg, seed, total_steps):
    theta = OptimizerState("sgd-momentum", cfg.theta.lr, total_steps=total_steps,
                           schedule=cfg.theta.schedule, weight_decay=cfg.theta.weight_decay,
                           momentum=cfg.theta.momentum)
    alpha = OptimizerState("adam", cfg.alpha.lr, betas=(cfg.alpha.beta1, cfg.alpha.beta2))
    # only dsnas_step freezes layers; other methods never reach the threshold
    h = cfg.dsnas.h if cfg.dsnas is not None else float("inf")
    state = SearchState(net, theta, alpha, seed, h=h,
                        rngs=[archdist.layer_rng(seed, l.index) for l in net.layers],
                        use_baseline=cfg.alpha.baseline == "ema", ema_decay=cfg.alpha.ema_decay)
    state.initial_entropy = float(np.mean(state.layer_entropies()))
    return state


def _snapshot(state):
    return {
        "bn": {k: v.copy() for k, v in state.net.bn_buffers().items()},
        "rng": state.rng_states(),
    }


def _restore(state, snap):
    for k, v in state.net.bn_buffers().items():
        v[...] = snap["bn"][k]
    state.set_rng_states(snap["rng"])


def _forward_backward(child, x, y, params, loss_fn=None):
    for p in params.values():
        p.zero_grad()
    child.reset_dummies()
    logits = child.forward(x, training=True)
    loss = ops.softmax_cross_entropy(logits, y) if loss_fn is None else loss_fn(logits, y)
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite loss")
    child.backward(loss)
    return logits, loss


def dsnas_alpha_gradient(net, x, y, rngs, loss_fn=None):
    """Logit gradients of one sampled child, with no parameter update.

    ``loss_fn(logits, y)`` replaces cross entropy. Returns (grads, costs, sample).
    """
    sample = sample_arch(net, rngs)
    child = instantiate_child(net, sample)
    _forward_backward(child, x, y, {}, loss_fn)
    costs = extract_cost(child)
    return alpha_gradients(net, sample, costs), costs, sample


def dsnas_step(state, x, y, val_batch=None):
    """One iteration of the single-run search. Returns step metrics."""
    net = state.net
    snap = _snapshot(state)
    try:
        sample = sample_arch(net, state.rngs)
        child = instantiate_child(net, sample)
        params = child.parameters()
        logits, loss = _forward_backward(child, x, y, params)
        theta_grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        costs = extract_cost(child)
        if val_batch is not None:
            _forward_backward(child, val_batch[0], val_batch[1], {})
            costs = extract_cost(child)
    except NonFiniteError:
        _restore(state, snap)
        raise
    baselines = state.baselines if state.use_baseline else None
    a_grads = alpha_gradients(net, sample, costs, baselines)
    optimizer_step(net.theta_params(), theta_grads, state.theta_opt)
    if a_grads:
        optimizer_step(net.alphas(), a_grads, state.alpha_opt)
    if state.use_baseline:
        for idx, c in costs.items():
            b = state.baselines.get(idx, c)
            state.baselines[idx] = state.ema_decay * b + (1 - state.ema_decay) * c
    for layer in net.layers:
        if layer.active:
            op = early_stop_check(layer.alpha.data, state.h)
            if op is not None:
                freeze_layer(net, layer.index, op)
                state.freeze_events.append({
                    "layer": layer.index, "op": op, "step": state.step, "epoch": state.epoch,
                    "alpha": layer.alpha.data.copy(),
                })
    state.step += 1
    return {
        "loss": float(loss.data),
        "top1": topk_accuracy(logits.data, y, 1),
        "costs": costs,
        "sample": sample,
    }


def build_space(cfg, dataset):
    ss = cfg.search_space
    init_seed = ss.init_seed if ss.init_seed is not None else cfg.seed
    c, hw = dataset.input_shape[0], dataset.input_shape[1]
    preset = ss.preset
    if preset == "auto":
        preset = "planted" if dataset.name == "synthetic-planted" else "desk"
    if preset == "planted":
        signal = dataset.meta.get("signal_channels", list(range(cfg.dataset.signal_channels)))
        spec = planted_spec(c, hw, dataset.num_classes, signal, ss.layers, init_seed,
                            ss.batch_norm)
    else:
        spec = default_desk_spec(c, hw, dataset.num_classes, tuple(ss.candidates))
        spec.batch_norm = ss.batch_norm
        spec.init_seed = init_seed
    spec.bn_stats = ss.bn_stats
    return build_supernet(spec)


EPOCH_FIELDS = ["epoch", "train_loss", "train_top1", "mean_entropy"]


def epoch_row(state, epoch, losses, accs):
    ent = state.layer_entropies()
    row = {
        "epoch": epoch,
        "train_loss": float(np.mean(losses)) if losses else float("nan"),
        "train_top1": float(np.mean(accs)) if accs else float("nan"),
        "mean_entropy": float(np.mean(ent)),
    }
    for i, e in enumerate(ent):
        row[f"entropy_{i}"] = e
    row["frozen"] = "".join("0" if l.active else "1" for l in state.net.layers)
    return row


def write_epoch_csv(path, rows):
    if not rows:
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class SearchResult:
    state: SearchState
    derived: object
    report: dict


def run_search(cfg, dataset, state=None, step_callback=None, max_steps=None, step_fn=None):
    """Epoch loop of the single-run search; derives the argmax child at the end.

    ``state`` resumes a checkpointed search (including mid-epoch). ``max_steps``
    stops early after that many total steps, leaving the state resumable.
    ``step_fn(state, x, y, val_batch)`` replaces the default ``dsnas_step``.
    """
    step_fn = dsnas_step if step_fn is None else step_fn
    if dataset is None:
        raise GraphStateError("dataset missing")
    bs = cfg.train.batch_size
    steps_per_epoch = dataset.steps_per_epoch(bs)
    if state is None:
        net = build_space(cfg, dataset)
        state = new_search_state(net, cfg, cfg.seed, cfg.train.epochs * steps_per_epoch)
    val_iter = None
    while state.epoch < cfg.train.epochs:
        epoch = state.epoch
        if state.batch_in_epoch == 0:
            state.epoch_losses, state.epoch_accs = [], []
        losses, accs = state.epoch_losses, state.epoch_accs
        for b, x, y in dataset.batches(epoch, bs, start=state.batch_in_epoch):
            if max_steps is not None and state.step >= max_steps:
                return SearchResult(state, None, {"stopped_at_step": state.step})
            vb = None
            if cfg.alpha.split == "val":
                if val_iter is None:
                    val_iter = _cycle_val(dataset, bs)
                vb = next(val_iter)
            m = step_fn(state, x, y, vb)
            losses.append(m["loss"])
            accs.append(m["top1"])
            state.batch_in_epoch = b + 1
            if step_callback is not None:
                step_callback(state, m)
        state.history.append(epoch_row(state, epoch + 1, losses, accs))
        state.epoch += 1
        state.batch_in_epoch = 0
        log.info("epoch %d loss %.4f top1 %.3f entropy %.3f", epoch + 1,
                 state.history[-1]["train_loss"], state.history[-1]["train_top1"],
                 state.history[-1]["mean_entropy"])
    derived = derive_final(state.net)
    report = search_report(state, derived.indices)
    return SearchResult(state, derived, report)


def _cycle_val(dataset, bs):
    while True:
        yielded = False
        for x, y in dataset.val_batches(bs):
            yielded = True
            yield x, y
        if not yielded:
            raise GraphStateError("validation split is empty")


def search_report(state, derived=None):
    freeze = {e["layer"]: {"epoch": int(e["epoch"]), "step": int(e["step"]), "op": int(e["op"])}
              for e in state.freeze_events}
    return {
        "derived": list(derived_indices(state.net) if derived is None else derived),
        "frozen_layers": {int(k): v for k, v in sorted(freeze.items())},
        "initial_mean_entropy": state.initial_entropy,
        "final_mean_entropy": float(np.mean(state.layer_entropies())),
        "steps": state.step,
        "epochs": state.epoch,
    }


def clone_state(state):
    return copy.deepcopy(state)
