import itertools

import numpy as np
import pytest

from desknas import archdist
from desknas.archdist import layer_rng
from desknas.baselines.pipeline import intra_report, two_stage_pipeline
from desknas.baselines.proxyless import proxyless_st_gradient, softmax_jvp
from desknas.baselines.snas import (
    RelaxedChild, relaxed_weights, snas_step, temperature_at,
)
from desknas.baselines.spos import evolutionary_search, spos_uniform_step
from desknas.engine import build_space, new_search_state
from desknas.errors import MetricError, SamplingError, SearchSpaceError
from desknas.harness.config import EAConfig, ExperimentConfig
from desknas.harness.data import load_dataset
from desknas.supernet import (
    LayerSpec, SearchSpaceSpec, build_supernet, instantiate_child, sample_arch,
)
from desknas.tensorcore import no_grad, ops

from micro import linear_net, sum_loss

CHI2_99_DF3 = 11.345


def small_net(layers=3, cands=("conv3", "skip", "sepconv3", "conv5"), seed=0):
    spec = SearchSpaceSpec(3, 6, 4, [LayerSpec(list(cands), 6, 1) for _ in range(layers)],
                           stem_channels=6, init_seed=seed)
    return build_supernet(spec)


def small_cfg():
    cfg = ExperimentConfig(method="two-stage", seed=0)
    cfg.dataset.name = "synthetic-blobs"
    cfg.dataset.n_train, cfg.dataset.n_val = 64, 32
    cfg.dataset.channels, cfg.dataset.image_size, cfg.dataset.classes = 3, 6, 4
    cfg.search_space.preset = "desk"
    cfg.train.epochs, cfg.train.batch_size = 1, 16
    return cfg


def test_relaxed_vertex_matches_child():
    net = small_net(3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 6, 6))
    for _ in range(20):
        sel = tuple(int(rng.integers(4)) for _ in range(3))
        zs = {i: np.eye(4)[s] for i, s in enumerate(sel)}
        with no_grad():
            relaxed = RelaxedChild(net).forward(x, zs).data
            child = instantiate_child(net, sel, dummy=False).forward(x).data
        assert np.max(np.abs(relaxed - child)) <= 1e-12


def test_snas_alpha_gradient_matches_finite_differences():
    net = small_net(2, seed=1)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 6, 6))
    y = rng.integers(0, 4, 4)
    lam = 0.7
    noise = {i: archdist.gumbel_noise(layer_rng(5, i), 4) for i in range(2)}

    def loss():
        zs = {i: archdist.relaxed(net.layers[i].alpha, lam, noise[i]) for i in range(2)}
        return ops.softmax_cross_entropy(RelaxedChild(net).forward(x, zs), y)

    for l in net.layers:
        l.alpha.zero_grad()
    loss().backward()
    eps = 1e-6
    for l in net.layers:
        analytic = l.alpha.grad.copy()
        num = np.empty(l.n)
        for k in range(l.n):
            l.alpha.data[k] += eps
            with no_grad():
                up = float(loss().data)
            l.alpha.data[k] -= 2 * eps
            with no_grad():
                down = float(loss().data)
            l.alpha.data[k] += eps
            num[k] = (up - down) / (2 * eps)
        err = np.max(np.abs(analytic - num)) / max(np.max(np.abs(num)), 1e-12)
        assert err < 1e-5


def test_snas_rejects_nonpositive_temperature():
    net = small_net(1)
    with pytest.raises(SamplingError):
        relaxed_weights(net, [layer_rng(0, 0)], 0.0)
    with pytest.raises(SamplingError):
        temperature_at([[0.0, 1.0], [1.0, 0.0]], 1.0)


def test_temperature_anneal_is_piecewise_linear():
    sched = [[0.0, 1.0], [0.5, 0.1], [1.0, 0.05]]
    assert temperature_at(sched, 0.0) == 1.0
    assert abs(temperature_at(sched, 0.25) - 0.55) < 1e-12
    assert abs(temperature_at(sched, 0.75) - 0.075) < 1e-12
    assert temperature_at(sched, 2.0) == 0.05


def test_snas_step_updates_alpha():
    cfg = small_cfg()
    ds = load_dataset(cfg.dataset, 0)
    state = new_search_state(build_space(cfg, ds), cfg, 0, 10)
    before = [l.alpha.data.copy() for l in state.net.layers]
    _, x, y = next(iter(ds.batches(0, 16)))
    out = snas_step(state, x, y, 1.0)
    assert np.isfinite(out["loss"])
    assert any(not np.array_equal(a, l.alpha.data) for a, l in zip(before, state.net.layers))


def test_spos_never_touches_alpha():
    cfg = small_cfg()
    ds = load_dataset(cfg.dataset, 0)
    state = new_search_state(build_space(cfg, ds), cfg, 0, 10)
    for l in state.net.layers:
        l.alpha.data[:] = np.linspace(-1, 1, l.n)
    before = [l.alpha.data.copy() for l in state.net.layers]
    for _, x, y in ds.batches(0, 16):
        spos_uniform_step(state, x, y)
    assert all(np.array_equal(a, l.alpha.data) for a, l in zip(before, state.net.layers))
    assert not state.alpha_opt.buffers


def test_spos_selection_is_uniform():
    net = small_net(2)
    net.layers[0].alpha.data[:] = [3.0, -1.0, 0.0, 2.0]
    rngs = [layer_rng(9, i) for i in range(2)]
    counts = np.zeros((2, 4))
    for _ in range(40_000):
        for i, s in enumerate(sample_arch(net, rngs, uniform=True).indices):
            counts[i, s] += 1
    for row in counts:
        chi2 = np.sum((row - 10_000) ** 2 / 10_000)
        assert chi2 < CHI2_99_DF3


def test_uniform_sampling_matches_zero_logits():
    net = small_net(2)
    rng_u, rng_z = [layer_rng(1, i) for i in range(2)], [layer_rng(1, i) for i in range(2)]
    u = [sample_arch(net, rng_u, uniform=True).indices for _ in range(2000)]
    z = [sample_arch(net, rng_z).indices for _ in range(2000)]
    assert u == z


def _fitness_table(net, seed):
    table = {}

    def fitness(arch):
        if arch not in table:
            table[arch] = float(np.random.default_rng([seed, *arch]).random())
        return table[arch]
    return fitness


def test_ea_finds_table_argmax():
    net = small_net(3)
    fitness = _fitness_table(net, 0)
    best = max(itertools.product(range(4), repeat=3), key=fitness)
    ranked = evolutionary_search(net, EAConfig(), fitness, np.random.default_rng(0))
    assert ranked[0].indices == best
    assert [r.fitness for r in ranked] == sorted((r.fitness for r in ranked), reverse=True)


def test_ea_respects_flops_ceiling():
    net = small_net(3)
    ceiling = net.selection_macs((1, 1, 0))
    ea = EAConfig(flops_ceiling=ceiling)
    ranked = evolutionary_search(net, ea, _fitness_table(net, 1), np.random.default_rng(1))
    assert ranked and all(r.macs <= ceiling for r in ranked)
    assert all(net.selection_macs(r.indices) == r.macs for r in ranked)


def test_ea_infeasible_ceiling():
    net = small_net(2)
    with pytest.raises(SearchSpaceError):
        evolutionary_search(net, EAConfig(flops_ceiling=1), _fitness_table(net, 0),
                            np.random.default_rng(0))


def test_ea_deterministic():
    net = small_net(3)
    runs = [[(r.indices, r.fitness) for r in evolutionary_search(
        net, EAConfig(generations=5), _fitness_table(net, 2), np.random.default_rng(4))]
        for _ in range(2)]
    assert runs[0] == runs[1]


def test_proxyless_linear_loss_matches_softmax_oracle():
    c = np.array([1.0, 2.0, -0.5])
    net = linear_net(c)
    net.layers[0].alpha.data[:] = [0.2, -0.3, 0.5]
    x = np.ones((1, 1, 1, 1))
    p = archdist.softmax_probs(net.layers[0].alpha.data)
    oracle = p * (c - p @ c)  # grad of sum_k softmax(alpha)_k c_k
    for seed in range(5):
        g = proxyless_st_gradient(net, x, None, [layer_rng(seed, 0)], loss_fn=sum_loss)
        assert np.allclose(g["layer0.alpha"], oracle, rtol=0, atol=1e-15)


def test_softmax_jvp_against_jacobian():
    alpha = np.array([0.1, -1.0, 0.7, 0.0])
    v = np.array([0.3, 1.0, -2.0, 0.5])
    p = archdist.softmax_probs(alpha)
    jac = np.diag(p) - np.outer(p, p)
    assert np.allclose(softmax_jvp(alpha, v), jac.T @ v, rtol=0, atol=1e-15)


def test_proxyless_single_candidate_gradient_is_zero():
    net = linear_net([3.0])
    g = proxyless_st_gradient(net, np.ones((1, 1, 1, 1)), None, [layer_rng(0, 0)],
                              loss_fn=sum_loss)
    assert np.array_equal(g["layer0.alpha"], np.zeros(1))


def test_proxyless_candidate_limit():
    net = small_net(1)
    with pytest.raises(SearchSpaceError):
        proxyless_st_gradient(net, np.zeros((1, 3, 6, 6)), np.zeros(1, int), [layer_rng(0, 0)],
                              max_candidates=3)


def test_pipeline_identical_oracles_give_tau_one():
    cfg = small_cfg()
    ds = load_dataset(cfg.dataset, 0)
    cfg.ea.generations, cfg.ea.top_k = 3, 5
    net = build_space(cfg, ds)
    fitness = _fitness_table(net, 3)
    res = two_stage_pipeline(cfg, ds, search_fitness=fitness, retrain_fitness=fitness)
    assert len(res.ranked) == 5
    assert res.tau_inter.tau == 1.0


def test_pipeline_single_model_has_no_tau():
    cfg = small_cfg()
    ds = load_dataset(cfg.dataset, 0)
    cfg.ea.generations, cfg.ea.top_k = 1, 1
    fitness = _fitness_table(build_space(cfg, ds), 0)
    res = two_stage_pipeline(cfg, ds, search_fitness=fitness, retrain_fitness=fitness)
    assert res.tau_inter is None and "tau_inter" in res.notes
    with pytest.raises(MetricError):
        intra_report([res])
