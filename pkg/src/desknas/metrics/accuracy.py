import numpy as np

from ..errors import MetricError


def topk_accuracy(logits, labels, k=1):
    """Fraction of rows whose label is among the ``k`` largest logits.

    Ties are broken toward the lower class index.
    """
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise MetricError("logits/labels shape mismatch", logits=logits.shape, labels=labels.shape)
    if not 1 <= k <= logits.shape[1]:
        raise MetricError("k out of range", k=k, classes=logits.shape[1])
    if logits.shape[0] == 0:
        return 0.0
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))
