import numpy as np
import pytest

from desknas.archdist import layer_rng
from desknas.engine import (
    alpha_gradients, dsnas_alpha_gradient, dsnas_step, early_stop_check, extract_cost,
    new_search_state, run_search,
)
from desknas.errors import GraphStateError
from desknas.harness.config import ExperimentConfig
from desknas.harness.data import load_dataset
from desknas.supernet import (
    LayerSpec, SearchSpaceSpec, build_supernet, freeze_layer, instantiate_child, sample_arch,
)
from desknas.tensorcore import Tensor, ops

from micro import PassHead, enumerate_gradient, gain_net, linear_net, sum_loss


def small_net(layers=3, seed=0):
    spec = SearchSpaceSpec(3, 6, 4, [LayerSpec(["conv3", "skip", "sepconv3"], 6, 1)
                                     for _ in range(layers)], stem_channels=6, init_seed=seed)
    return build_supernet(spec)


def small_cfg(**over):
    cfg = ExperimentConfig(method="dsnas", seed=0)
    cfg.dataset.name = "synthetic-blobs"
    cfg.dataset.n_train, cfg.dataset.n_val = 64, 32
    cfg.dataset.channels, cfg.dataset.image_size, cfg.dataset.classes = 3, 6, 4
    cfg.search_space.preset = "desk"
    cfg.train.epochs, cfg.train.batch_size = 2, 16
    for k, v in over.items():
        sec, key = k.split("__")
        setattr(getattr(cfg, sec), key, v)
    return cfg


def test_early_stop_cases():
    assert early_stop_check([2.5, 0.3, 0.1, 0.0], 2.0) == 0
    assert early_stop_check([1.0, 0.9, 0.0, 0.0], 2.0) is None
    assert early_stop_check([0.0], 2.0) == 0


def test_cost_chain_rule_example():
    net = gain_net([[1.0]], head=PassHead())
    child = instantiate_child(net, (0,))
    out = child.forward(np.array([2.0, 3.0]))
    # loss = sum(w * x): dL/dx = w, so C = 0.1 * 2 - 0.2 * 3
    child.backward(ops.sum(ops.mul(out, Tensor(np.array([0.1, -0.2])))))
    assert abs(extract_cost(child)[0] - (-0.4)) < 1e-15


def test_detached_layer_has_zero_cost():
    net = linear_net([1.0, 2.0])
    child = instantiate_child(net, (1,))
    out = child.forward(np.ones((1, 1, 1, 1)))
    child.backward(ops.mul(ops.sum(Tensor(np.ones(2), requires_grad=True)), Tensor(1.0)))
    assert extract_cost(child)[0] == 0.0
    assert out is not None


def test_cost_needs_backward():
    net = linear_net([1.0, 2.0])
    with pytest.raises(GraphStateError):
        extract_cost(instantiate_child(net, (0,)))


def test_alpha_gradient_formula():
    net = small_net(2)
    sample = sample_arch(net, [layer_rng(0, i) for i in range(2)])
    grads = alpha_gradients(net, sample, {0: 0.5, 1: -2.0})
    for i, c in ((0, 0.5), (1, -2.0)):
        z = np.eye(3)[sample.indices[i]]
        assert np.array_equal(grads[f"layer{i}.alpha"], c * (z - net.layers[i].probs()))


def test_linear_micro_mean_matches_oracle():
    net = linear_net([1.0, 2.0])
    rngs = [layer_rng(3, 0)]
    x = np.ones((1, 1, 1, 1))
    g = np.array([dsnas_alpha_gradient(net, x, None, rngs, sum_loss)[0]["layer0.alpha"]
                  for _ in range(20_000)])
    se = g[:, 0].std(ddof=1) / np.sqrt(len(g))
    assert abs(g[:, 0].mean() + 0.25) < 3 * se


def test_multilinear_enumeration_matches_in_expectation():
    gains = [[0.5, 1.0, 2.0], [1.5, -1.0, 0.25]]
    net = gain_net(gains)
    net.layers[0].alpha.data[:] = [0.3, -0.2, 0.0]
    exact = enumerate_gradient(net, lambda sel: np.prod([gains[i][s] for i, s in enumerate(sel)]))
    rngs = [layer_rng(4, i) for i in range(2)]
    x = np.ones((1, 1, 1, 1))
    draws = [dsnas_alpha_gradient(net, x, None, rngs, sum_loss)[0] for _ in range(20_000)]
    for i in range(2):
        g = np.array([d[f"layer{i}.alpha"] for d in draws])
        se = g.std(axis=0, ddof=1) / np.sqrt(len(g))
        assert np.all(np.abs(g.mean(axis=0) - exact[i]) < 4 * se)


def test_zero_learning_rates_leave_parameters():
    cfg = small_cfg(theta__lr=0.0, alpha__lr=0.0, theta__weight_decay=0.0)
    ds = load_dataset(cfg.dataset, 0)
    res = run_search(cfg, ds, max_steps=0)
    net = res.state.net
    before = {k: p.data.copy() for k, p in {**net.theta_params(), **net.alphas()}.items()}
    res = run_search(cfg, ds, state=res.state, max_steps=5)
    after = {**net.theta_params(), **net.alphas()}
    assert all(np.array_equal(before[k], after[k].data) for k in before)
    assert res.state.step == 5


def test_all_frozen_keeps_alpha():
    cfg = small_cfg()
    ds = load_dataset(cfg.dataset, 0)
    from desknas.engine import build_space
    net = build_space(cfg, ds)
    for l in net.layers:
        freeze_layer(net, l.index, 0)
    state = new_search_state(net, cfg, 0, 10)
    alphas = [l.alpha.data.copy() for l in net.layers]
    for b, x, y in ds.batches(0, 16):
        dsnas_step(state, x, y)
    assert all(np.array_equal(a, l.alpha.data) for a, l in zip(alphas, net.layers))


def test_frozen_alpha_bitwise_constant():
    cfg = small_cfg()
    ds = load_dataset(cfg.dataset, 0)
    from desknas.engine import build_space
    net = build_space(cfg, ds)
    state = new_search_state(net, cfg, 0, 200)
    net.layers[1].alpha.data[:] = [0.0, 5.0, 0.0, 0.0]
    freeze_layer(net, 1, 1)
    a = net.layers[1].alpha.data.copy()
    n = 0
    while n < 100:
        for b, x, y in ds.batches(n, 16):
            dsnas_step(state, x, y)
            n += 1
    assert np.array_equal(a, net.layers[1].alpha.data)
    assert "layer1.alpha" not in state.alpha_opt.buffers


def test_zero_epochs_derives_index_zero_with_warning():
    cfg = small_cfg()
    cfg.train.epochs = 0
    ds = load_dataset(cfg.dataset, 0)
    with pytest.warns(UserWarning):
        res = run_search(cfg, ds)
    assert res.report["derived"] == [0] * len(res.state.net.layers)


class _OwnerLog:
    def __init__(self):
        self.owners = set()

    def on_forward(self, op, owner, macs, saved):
        self.owners.add(owner)

    def on_backward(self, op, owner, macs, saved):
        self.owners.add(owner)


def test_step_touches_one_child_only():
    from desknas.engine import build_space
    from desknas.tensorcore import profile
    cfg = small_cfg()
    ds = load_dataset(cfg.dataset, 0)
    state = new_search_state(build_space(cfg, ds), cfg, 0, 10)
    probe = new_search_state(build_space(cfg, ds), cfg, 0, 10)
    _, x, y = next(iter(ds.batches(0, 16)))
    sample = sample_arch(probe.net, probe.rngs)
    log = _OwnerLog()
    with profile.installed(log):
        dsnas_step(state, x, y)
    touched = {(o[0], o[1]) for o in log.owners if len(o) > 1 and o[1].startswith("cand")}
    # skip runs no op, so it leaves no trace
    expect = {(f"layer{i}", f"cand{j}") for i, j in enumerate(sample.indices)
              if state.net.layers[i].candidates[j].kind != "skip"}
    assert touched == expect


def test_missing_dataset():
    with pytest.raises(GraphStateError):
        run_search(small_cfg(), None)


def test_dummy_identity_small():
    net = small_net(3, seed=5)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 6, 6))
    y = rng.integers(0, 4, 4)
    sample = sample_arch(net, [layer_rng(1, i) for i in range(3)])
    child = instantiate_child(net, sample)
    seen = {}

    def capture(i, h):
        seen[i] = h
        h.register_hook(lambda g, i=i: seen.__setitem__(("g", i), g))
    logits = child.forward(x, capture=capture)
    child.backward(ops.softmax_cross_entropy(logits, y))
    costs = extract_cost(child)
    for i in range(3):
        rhs = float(np.sum(seen[("g", i)] * seen[i].data))
        assert abs(costs[i] - rhs) < 1e-10
