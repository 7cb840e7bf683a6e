"""Differentiable primitives.

Layout is NCHW for feature maps and (N, features) for dense activations.
Each primitive reports a fixed multiply count to the profiler:

=====================  ==========================================
conv2d                 out_elems * k * k * in_channels
depthwise_conv2d       out_elems * k * k
dense / matmul         rows * inner * cols
scale, mul, pow        elements of the output
batch_norm             2 * elements
global_avg_pool        output elements
softmax                elements
softmax_cross_entropy  batch * classes
add, add_n, relu, take  0
=====================  ==========================================
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("operands do not broadcast", op=op, left=a.shape, right=b.shape) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(a.data - b.data, (a, b), backward, "sub")


def neg(a):
    return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._node(out, (a, b), backward, "mul", macs=out.size, saved=a.size + b.size)


def scale(x, s):
    """Multiply ``x`` by a single-element tensor ``s``.

    d(out)/ds summed against the upstream gradient is sum(g * x), which is how
    a spliced constant-one scalar exposes the credit of the feature map it scales.
    """
    s = as_tensor(s)
    if s.size != 1:
        raise ShapeError("scale factor must have exactly one element", shape=s.shape)
    factor = s.data.reshape(())

    def backward(g):
        return g * factor, np.sum(g * x.data).reshape(s.shape)

    return Tensor._node(x.data * factor, (x, s), backward, "scale",
                        macs=x.size, saved=x.size + 1)


def add_n(xs):
    xs = list(xs)
    if not xs:
        raise ShapeError("add_n needs at least one operand")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError("add_n operands differ in shape", first=shape, other=x.shape)
    out = xs[0].data.copy()
    for x in xs[1:]:
        out = out + x.data
    return Tensor._node(out, tuple(xs), lambda g: tuple(g for _ in xs), "add_n")


def take(x, index):
    """Element ``index`` of a 1-D tensor, as a one-element tensor."""
    if x.ndim != 1 or not -x.shape[0] <= index < x.shape[0]:
        raise ShapeError("take needs a 1-D tensor and an in-range index", shape=x.shape, index=index)

    def backward(g):
        out = np.zeros_like(x.data)
        out[index] = g.reshape(())
        return (out,)

    return Tensor._node(x.data[index:index + 1 or None].copy(), (x,), backward, "take")


def pow(x, exponent):
    exponent = float(exponent)
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return Tensor._node(out, (x,), backward, "pow", macs=out.size, saved=x.size)


def relu(x):
    mask = x.data > 0
    return Tensor._node(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,),
                        lambda g: (g * mask,), "relu", saved=x.size)


def sum(x):
    return Tensor._node(np.sum(x.data), (x,),
                        lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x):
    n = x.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor._node(np.mean(x.data), (x,), backward, "mean", macs=1)


def reshape(x, shape):
    old = x.shape
    return Tensor._node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul shape mismatch", left=a.shape, right=b.shape)
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._node(out, (a, b), backward, "matmul",
                        macs=a.shape[0] * a.shape[1] * b.shape[1], saved=a.size + b.size)


def dense(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("dense shape mismatch", input=x.shape, weight=weight.shape)
    out = x.data @ weight.data
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError("dense bias shape mismatch", bias=bias.shape, weight=weight.shape)
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return Tensor._node(out, parents, backward, "dense",
                        macs=x.shape[0] * x.shape[1] * weight.shape[1], saved=x.size)


def _padding(k, padding):
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("same padding needs an odd kernel", kernel=k)
        return k // 2
    if padding == "valid":
        return 0
    return int(padding)


def _windows(x, k, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError("kernel larger than padded input", kernel=k, input=x.shape)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return xp.shape, win


def _col2im(dwin, padded_shape, k, stride, pad, out_h, out_w):
    # dwin: (N, C, Ho, Wo, k, k)
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += dwin[..., i, j]
    h, w = padded_shape[2] - 2 * pad, padded_shape[3] - 2 * pad
    return dxp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """2-D cross-correlation, ``weight`` of shape (out, in, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIkk weight", input=x.shape, weight=weight.shape)
    n, c, _, _ = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError("conv2d channel/kernel mismatch", input=x.shape, weight=weight.shape)
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2", stride=stride)
    pad = _padding(k, padding)
    padded_shape, win = _windows(x.data, k, stride, pad)
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dw = (g2.T @ cols).reshape(weight.shape)
        dwin = (g2 @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dx = _col2im(dwin, padded_shape, k, stride, pad, ho, wo)
        grads = (dx, dw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor._node(out, parents, backward, "conv2d",
                        macs=out.size * k * k * c, saved=cols.size)


def depthwise_conv2d(x, weight, stride=1, padding="same"):
    """Per-channel 2-D cross-correlation, ``weight`` of shape (C, 1, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1] or weight.shape[1] != 1:
        raise ShapeError("depthwise_conv2d shape mismatch", input=x.shape, weight=weight.shape)
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2", stride=stride)
    k = weight.shape[2]
    pad = _padding(k, padding)
    padded_shape, win = _windows(x.data, k, stride, pad)
    ho, wo = win.shape[2], win.shape[3]
    w = weight.data[:, 0]
    out = np.einsum("nchwij,cij->nchw", win, w)

    def backward(g):
        dw = np.einsum("nchw,nchwij->cij", g, win)[:, None]
        dwin = np.einsum("nchw,cij->nchwij", g, w)
        return _col2im(dwin, padded_shape, k, stride, pad, ho, wo), dw

    return Tensor._node(out, (x, weight), backward, "depthwise_conv2d",
                        macs=out.size * k * k, saved=win.size)


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW", input=x.shape)
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)

    return Tensor._node(out, (x,), backward, "global_avg_pool", macs=out.size)


def concat(xs, axis=1):
    xs = list(xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat shape mismatch", shapes=[x.shape for x in xs]) from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._node(out, tuple(xs), backward, "concat")


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.1, eps=1e-5):
    """Batch normalization over all axes but the channel axis (1).

    ``running_mean``/``running_var`` are numpy buffers updated in place in
    training mode (``new = (1 - momentum) * old + momentum * batch``).
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if training:
        m = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.size // x.shape[1]
            dx = (invstd.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * invstd.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._node(out, (x, gamma, beta), backward, "batch_norm",
                        macs=2 * out.size, saved=x.size)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._node(y, (x,), backward, "softmax", macs=y.size, saved=y.size)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross entropy of integer ``labels`` under softmax(``logits``) rows."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("logits/labels shape mismatch", logits=logits.shape, labels=labels.shape)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    losses = -logp[rows, labels]
    total = losses.sum()
    out = total / n if reduction == "mean" else total

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        if reduction == "mean":
            d /= n
        return (d * g,)

    return Tensor._node(np.asarray(out, dtype=logits.data.dtype), (logits,), backward,
                        "softmax_cross_entropy", macs=logits.size, saved=logits.size)


def zeros(shape):
    return Tensor(np.zeros(shape))


Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__pow__ = pow
Tensor.sum = sum
Tensor.mean = mean
Tensor.reshape = reshape
