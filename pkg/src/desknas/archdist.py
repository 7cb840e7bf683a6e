"""Categorical architecture distribution over one choice layer.

Logits ``alpha`` map to probabilities through a max-shifted softmax. This module
is the single place where that normalization happens.
"""

from dataclasses import dataclass

import numpy as np

from .errors import SamplingError, ShapeError
from .tensorcore import Tensor, ops

GUMBEL_EPS = 1e-12


def softmax_probs(alpha):
    alpha = np.asarray(alpha, dtype=float)
    if not np.all(np.isfinite(alpha)):
        raise SamplingError("logits must be finite", alpha=alpha.tolist())
    e = np.exp(alpha - alpha.max())
    return e / e.sum()


def layer_rng(seed, layer, stream=0):
    """Independent generator for one choice layer, derived from the master seed."""
    return np.random.default_rng([int(seed), int(layer), int(stream)])


def sample_onehot(p, rng):
    """Draw one category. Returns (one-hot vector, log p of the drawn index)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise SamplingError("not a probability vector", p=p.tolist())
    s = int(rng.choice(len(p), p=p / p.sum())) if len(p) > 1 else 0
    z = np.zeros(len(p))
    z[s] = 1.0
    return z, float(np.log(p[s]))


def logp_grad(alpha, z):
    """Gradient of log p(z) with respect to the logits: onehot(z) - softmax(alpha)."""
    z = np.asarray(z, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if z.shape != alpha.shape:
        raise ShapeError("selection and logits differ in length", z=z.shape, alpha=alpha.shape)
    return z - softmax_probs(alpha)


def entropy(p):
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def gumbel_noise(rng, n):
    u = rng.uniform(GUMBEL_EPS, 1.0 - GUMBEL_EPS, size=n)
    return -np.log(-np.log(u))


@dataclass
class RelaxedSample:
    z: np.ndarray
    temperature: float
    noise: np.ndarray


def relaxed(alpha, temperature, noise):
    """softmax((alpha + noise) / temperature) as a differentiable Tensor.

    ``alpha`` is a Tensor; ``noise`` is held fixed, so gradients flow to alpha
    along the reparameterization path only.
    """
    if temperature <= 0:
        raise SamplingError("temperature must be positive", temperature=temperature)
    shifted = ops.add(alpha, Tensor(noise))
    return ops.softmax(ops.mul(shifted, Tensor(1.0 / temperature)))


def gumbel_softmax_sample(alpha, temperature, rng):
    if temperature <= 0:
        raise SamplingError("temperature must be positive", temperature=temperature)
    alpha = np.asarray(alpha, dtype=float)
    g = gumbel_noise(rng, alpha.shape[0])
    y = (alpha + g) / temperature
    e = np.exp(y - y.max())
    return RelaxedSample(e / e.sum(), float(temperature), g)
