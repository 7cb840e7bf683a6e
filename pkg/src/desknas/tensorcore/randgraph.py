"""Random small graphs for exercising the gradient oracle.

Each graph is a short random stack of feature-map primitives followed by a
pooled dense readout and a scalar loss. Every primitive in :mod:`ops` that a
search space uses appears with nonzero probability.
"""

import numpy as np

from . import ops
from .gradcheck import finite_diff_check
from .tensor import Graph, Tensor

BLOCKS = ("conv", "dwconv", "bn", "relu", "scale", "mul", "concat", "pow", "add")
LOSSES = ("ce", "square", "softmax")


def random_graph(rng, max_depth=4):
    """Returns (graph, inputs). All parameters are in ``graph.params``."""
    n = 2
    c = int(rng.integers(1, 4))
    hw = int(rng.integers(4, 7))
    x = rng.standard_normal((n, c, hw, hw))
    params = {}

    def param(shape, scale=0.5):
        name = f"p{len(params)}"
        params[name] = Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)
        return name

    plan = []
    for _ in range(int(rng.integers(1, max_depth + 1))):
        kind = str(rng.choice(BLOCKS))
        if kind == "conv":
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2])) if hw > 3 else 1
            out = int(rng.integers(1, 4))
            bias = bool(rng.integers(2))
            plan.append((kind, param((out, c, k, k)), param((out,)) if bias else None, stride))
            hw = (hw + 2 * (k // 2) - k) // stride + 1
            c = out
        elif kind == "dwconv":
            plan.append((kind, param((c, 1, 3, 3)), None, 1))
        elif kind == "bn":
            plan.append((kind, param((c,), 0.2), param((c,), 0.2), None))
        elif kind in ("scale", "mul"):
            plan.append((kind, param((1,) if kind == "scale" else (1, c, 1, 1)), None, None))
        elif kind == "pow":
            plan.append((kind, None, None, int(rng.choice([2, 3]))))
        elif kind == "concat":
            plan.append((kind, param((c, c, 1, 1)), None, None))
            c *= 2
        else:
            plan.append((kind, None, None, None))
    classes = int(rng.integers(2, 5))
    w_head = param((c, classes))
    b_head = param((classes,))
    loss_kind = str(rng.choice(LOSSES))
    labels = rng.integers(0, classes, n)
    target = rng.standard_normal((n, classes))

    def fn(x):
        h = x
        for kind, a, b, arg in plan:
            if kind == "conv":
                h = ops.conv2d(h, params[a], params[b] if b else None, stride=arg, padding="same")
            elif kind == "dwconv":
                h = ops.depthwise_conv2d(h, params[a])
            elif kind == "bn":
                mean, var = np.zeros(h.shape[1]), np.ones(h.shape[1])
                h = ops.batch_norm(h, params[a], params[b], mean, var, training=True)
            elif kind == "relu":
                h = ops.relu(h)
            elif kind == "scale":
                h = ops.scale(h, params[a])
            elif kind == "mul":
                h = ops.mul(h, params[a])
            elif kind == "pow":
                h = ops.pow(h, arg)
            elif kind == "concat":
                h = ops.concat([h, ops.conv2d(h, params[a], None, padding="valid")])
            elif kind == "add":
                h = ops.add_n([h, h, ops.neg(ops.relu(h))])
        logits = ops.dense(ops.global_avg_pool(h), params[w_head], params[b_head])
        if loss_kind == "ce":
            return ops.softmax_cross_entropy(logits, labels)
        if loss_kind == "square":
            return ops.mean(ops.pow(ops.sub(logits, Tensor(target)), 2))
        return ops.sum(ops.mul(ops.softmax(logits), Tensor(target)))

    return Graph(fn, params), {"x": Tensor(x)}


def run_gradcheck(n_graphs, rng, epsilon=1e-6, max_coords=12, floor=1e-3):
    """Worst relative error over every parameter of ``n_graphs`` random graphs.

    Parameters upstream of a batch norm often have a true gradient of exactly
    zero, where the oracle only returns roundoff. Their denominator is floored
    at ``floor`` times the largest gradient entry of the whole graph.
    """
    worst = 0.0
    for _ in range(n_graphs):
        graph, inputs = random_graph(rng)
        graph.forward(inputs)
        top = max(float(np.abs(g).max()) for g in graph.backward().values())
        for name in graph.params:
            worst = max(worst, finite_diff_check(graph, name, epsilon, inputs=inputs,
                                                 max_coords=max_coords, rng=rng,
                                                 atol=max(floor * top, 1e-12)))
    return worst
