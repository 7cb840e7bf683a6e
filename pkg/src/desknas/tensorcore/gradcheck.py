"""Central finite-difference oracle for analytic gradients."""

import numpy as np

from ..errors import GraphStateError, SamplingError
from .tensor import no_grad


def relu_signs(graph):
    """Sign pattern of every relu pre-activation in the last forward.

    Read off the outputs, which are positive exactly where the inputs are, so
    it also works for forwards run under ``no_grad`` that keep no parents.
    """
    return [n.data > 0 for n in graph.nodes if n.op == "relu"]


def _probe(graph, inputs, loss):
    with no_grad():
        out = graph.forward(inputs)
    return float(out[loss].data), relu_signs(graph)


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def finite_diff_check(graph, param, epsilon=1e-6, inputs=None, loss="out",
                      max_coords=None, rng=None, max_tries=50, jitter=1e-2, atol=1e-6):
    """Relative error between backward and central differences for ``param``.

    The error is tensor-wise, ``max|a - n| / max(max|a|, max|n|, atol)`` over the
    checked coordinates: a coordinate whose true gradient is ~0 (common behind
    batch norm, which is scale invariant) is judged against the gradient scale
    of its tensor instead of its own roundoff-sized value.

    ``param`` is a key of ``graph.params`` or the Tensor itself. With ``rng``
    given, a probe that flips the sign of any relu pre-activation means the
    oracle straddles a kink; the parameter is then jittered and the check
    restarted. ``max_coords`` limits the check to a random subset of coordinates.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise ValueError("epsilon must be in (0, 1e-3]")
    if isinstance(param, str):
        param = graph.params[param]
    inputs = dict(inputs or {})

    graph.forward(inputs)
    if graph.has_sampling_node():
        raise SamplingError("graph contains a sampling node; freeze its noise first")
    flat = param.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        picker = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(picker.choice(flat.size, size=max_coords, replace=False))

    for _ in range(max_tries if rng is not None else 1):
        result = _check_once(graph, param, flat, coords, epsilon, inputs, loss, atol,
                             strict=rng is not None)
        if result is not None:
            return result
        param.data += jitter * rng.standard_normal(param.shape)
    raise GraphStateError("could not move evaluation point away from relu kinks")


def _check_once(graph, param, flat, coords, epsilon, inputs, loss, atol, strict):
    graph.forward(inputs)
    base = relu_signs(graph)
    grads = {id(p): g for p, g in zip(graph.params.values(), graph.backward(loss).values())}
    if id(param) in grads:
        analytic = grads[id(param)]
    else:
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)

    diff = scale = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + epsilon
        up, s_up = _probe(graph, inputs, loss)
        flat[idx] = orig - epsilon
        down, s_down = _probe(graph, inputs, loss)
        flat[idx] = orig
        if strict and not (_same(base, s_up) and _same(base, s_down)):
            graph.forward(inputs)
            return None
        numeric = (up - down) / (2 * epsilon)
        a = analytic.reshape(-1)[idx]
        diff = max(diff, abs(a - numeric))
        scale = max(scale, abs(a), abs(numeric))
    graph.forward(inputs)
    return diff / max(scale, atol)
