import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from desknas import archdist
from desknas.errors import SamplingError, ShapeError
from desknas.tensorcore import Tensor

finite = st.floats(-20, 20, allow_nan=False)


def test_uniform_logits():
    assert np.allclose(archdist.softmax_probs([0, 0, 0, 0]), 0.25, atol=0, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=6), finite)
def test_shift_invariance(alpha, c):
    p = archdist.softmax_probs(alpha)
    q = archdist.softmax_probs(np.asarray(alpha) + c)
    assert np.allclose(p, q, rtol=0, atol=1e-12)
    assert abs(p.sum() - 1) < 1e-12


def test_saturation():
    p = archdist.softmax_probs([50.0, 0.0])
    assert p.sum() == 1.0
    assert abs(p[1] - math.exp(-50)) / math.exp(-50) < 1e-6


def test_non_finite_logits():
    with pytest.raises(SamplingError):
        archdist.softmax_probs([0.0, np.inf])


def test_degenerate_sampling():
    rng = np.random.default_rng(0)
    for _ in range(100):
        z, lp = archdist.sample_onehot([1.0, 0.0, 0.0], rng)
        assert z.tolist() == [1.0, 0.0, 0.0] and lp == 0.0


def test_fair_coin_frequency():
    rng = np.random.default_rng(1)
    hits = sum(archdist.sample_onehot([0.5, 0.5], rng)[0][0] for _ in range(100_000))
    assert abs(hits / 100_000 - 0.5) <= 0.006


def test_logprob_is_exact():
    rng = np.random.default_rng(2)
    p = archdist.softmax_probs([0.3, -1.0, 2.0])
    for _ in range(50):
        z, lp = archdist.sample_onehot(p, rng)
        assert lp == math.log(p[int(np.argmax(z))])


def test_bad_probability_vector():
    with pytest.raises(SamplingError):
        archdist.sample_onehot([0.7, 0.7], np.random.default_rng(0))


def test_logp_grad_uniform():
    assert archdist.logp_grad([0.0, 0.0], [1.0, 0.0]).tolist() == [0.5, -0.5]


def test_logp_grad_shape_mismatch():
    with pytest.raises(ShapeError):
        archdist.logp_grad([0.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=5), st.data())
def test_logp_grad_sums_to_zero_and_matches_fd(alpha, data):
    alpha = np.array(alpha)
    k = data.draw(st.integers(0, len(alpha) - 1))
    z = np.eye(len(alpha))[k]
    g = archdist.logp_grad(alpha, z)
    assert abs(g.sum()) < 1e-12
    eps = 1e-6
    num = np.empty(len(alpha))
    for i in range(len(alpha)):
        d = np.zeros(len(alpha))
        d[i] = eps
        num[i] = (math.log(archdist.softmax_probs(alpha + d)[k])
                  - math.log(archdist.softmax_probs(alpha - d)[k])) / (2 * eps)
    assert np.max(np.abs(num - g)) < 1e-8


def test_gumbel_sums_to_one():
    rng = np.random.default_rng(3)
    for lam in (0.01, 0.5, 1.0, 100.0):
        s = archdist.gumbel_softmax_sample(np.array([0.5, -0.2, 1.0]), lam, rng)
        assert abs(s.z.sum() - 1) < 1e-12


def test_gumbel_low_temperature_concentrates():
    # the 99% level needs a clear leader; with tied logits the top two perturbed
    # logits fall within 0.01 * ln(999 (n - 1)) of each other several percent of the time
    rng = np.random.default_rng(4)
    hot = [archdist.gumbel_softmax_sample(np.array([4.0, 0.0]), 0.01, rng).z.max() > 0.999
           for _ in range(10_000)]
    assert np.mean(hot) >= 0.99


def test_gumbel_low_temperature_tied_logits_rate():
    # independent estimate of P(max > 0.999) from numpy's own gumbel draws
    lam, n = 0.01, 4
    rng = np.random.default_rng(6)
    hot = np.mean([archdist.gumbel_softmax_sample(np.zeros(n), lam, rng).z.max() > 0.999
                   for _ in range(10_000)])
    y = np.random.default_rng(7).gumbel(size=(200_000, n)) / lam
    y = np.exp(y - y.max(axis=1, keepdims=True))
    expect = np.mean(1.0 / y.sum(axis=1) > 0.999)
    assert abs(hot - expect) < 4 * math.sqrt(expect * (1 - expect) / 10_000)


def test_gumbel_high_temperature_flattens():
    rng = np.random.default_rng(5)
    z = np.mean([archdist.gumbel_softmax_sample(np.zeros(4), 100.0, rng).z
                 for _ in range(10_000)], axis=0)
    assert np.all(np.abs(z - 0.25) <= 0.02)


def test_gumbel_rejects_nonpositive_temperature():
    with pytest.raises(SamplingError):
        archdist.gumbel_softmax_sample(np.zeros(2), 0.0, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        archdist.relaxed(Tensor(np.zeros(2)), -1.0, np.zeros(2))


def test_entropy_values():
    assert abs(archdist.entropy([0.25] * 4) - math.log(4)) < 1e-12
    assert archdist.entropy([1.0, 0.0, 0.0]) == 0.0
    assert abs(archdist.entropy([0.9, 0.1]) - 0.325083) < 1e-6


def test_layer_rng_independent_streams():
    a = archdist.layer_rng(7, 0).random(4)
    b = archdist.layer_rng(7, 1).random(4)
    c = archdist.layer_rng(7, 0).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)
