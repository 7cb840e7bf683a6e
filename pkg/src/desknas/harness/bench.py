"""Per-step complexity of each estimator on homogeneous search spaces."""

import numpy as np

from ..baselines.proxyless import proxyless_step
from ..baselines.snas import snas_step
from ..baselines.spos import spos_uniform_step
from ..engine import dsnas_step, new_search_state
from ..metrics import CHOICE, count_step
from ..supernet import LayerSpec, SearchSpaceSpec, build_supernet
from .config import ExperimentConfig

METHODS = ("dsnas", "snas", "proxyless-st", "spos")


def homogeneous_spec(n, layers=3, channels=8, image_size=8, kind="conv3", num_classes=4):
    """``layers`` choice layers, each holding ``n`` copies of the same candidate."""
    return SearchSpaceSpec(3, image_size, num_classes,
                           [LayerSpec([kind] * n, channels, 1) for _ in range(layers)],
                           stem_channels=channels)


def _step(method, state, x, y):
    if method == "dsnas":
        return dsnas_step(state, x, y)
    if method == "snas":
        return snas_step(state, x, y, 1.0)
    if method == "proxyless-st":
        return proxyless_step(state, x, y, max_candidates=max(8, state.net.layers[0].n))
    return spos_uniform_step(state, x, y)


def bench_complexity(ns=(2, 4, 8), methods=METHODS, batch_size=8, seed=0, **space):
    """One counted training step per (method, n). Returns CSV-ready rows for the
    whole step and for the choice layers alone."""
    rows = []
    rng = np.random.default_rng([seed, 0xBE7C])
    x = rng.standard_normal((batch_size, 3, space.get("image_size", 8), space.get("image_size", 8)))
    y = rng.integers(0, space.get("num_classes", 4), batch_size)
    for method in methods:
        for n in ns:
            net = build_supernet(homogeneous_spec(n, **space))
            cfg = ExperimentConfig(method="dsnas", seed=seed)
            # keep every layer active for the measured step
            cfg.dsnas.h = float("inf")
            state = new_search_state(net, cfg, seed, 1)
            counter, _ = count_step(_step, method, state, x, y)
            rows.append({"method": method, "n": n, "scope": "total", **counter.summary()})
            rows.append({"method": method, "n": n, "scope": CHOICE, **counter.group(CHOICE)})
    return rows
