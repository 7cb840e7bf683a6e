"""Tensor, tape recording and the reverse pass.

A :class:`Tensor` wraps a numpy array. Every primitive in :mod:`.ops` builds a
new node that remembers its parents and a closure mapping the upstream gradient
to one gradient per parent. :func:`backward` walks the nodes reachable from a
scalar loss in reverse topological order, visiting each node exactly once.

:class:`Graph` turns a builder function into a re-evaluable computation: each
``forward`` traces a fresh tape, so the same graph can be evaluated at perturbed
parameters (finite differences) or new inputs.
"""

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import GraphStateError, NonFiniteError, ShapeError
from . import profile

_local = threading.local()
_DEFAULT_DTYPE = [np.float64]

# primitives whose output depends on fresh randomness; graphs containing them
# cannot be finite-difference checked
STOCHASTIC_OPS = frozenset({"sample"})


def set_default_dtype(dtype):
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def recording():
    """Collect every node created in the block, in creation order."""
    prev = getattr(_local, "tape", None)
    tape = []
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


class Tensor:
    __slots__ = (
        "data", "grad", "requires_grad", "name", "op", "owner",
        "_parents", "_backward", "_macs", "_saved", "_hooks", "__weakref__",
    )

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self.owner = profile.current_scope()
        self._parents = ()
        self._backward = None
        self._macs = 0
        self._saved = 0
        self._hooks = None
        tape = getattr(_local, "tape", None)
        if tape is not None:
            tape.append(self)

    @classmethod
    def _node(cls, data, parents, backward, op, macs=0, saved=0):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite output", op=op, node=profile.current_scope())
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out.owner = profile.current_scope()
        out._hooks = None
        out._macs = int(macs)
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            out._saved = int(saved)
        else:
            out._parents = ()
            out._backward = None
            out._saved = 0
        tape = getattr(_local, "tape", None)
        if tape is not None:
            tape.append(out)
        profile.on_forward(op, out.owner, out._macs, out._saved)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def parents(self):
        return self._parents

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def register_hook(self, fn):
        """Call ``fn(grad)`` when this tensor's gradient is computed by backward."""
        if self._hooks is None:
            self._hooks = []
        self._hooks.append(fn)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, grad=None):
    """Propagate d(loss)/d(node) to every node that requires a gradient.

    Leaf gradients accumulate into ``.grad``; intermediate nodes get their
    gradient for this pass assigned to ``.grad``.
    """
    if not loss.requires_grad:
        return
    if grad is None:
        if loss.size != 1:
            raise ShapeError("backward needs a scalar loss or an explicit gradient", shape=loss.shape)
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
        else:
            node.grad = g
        if node._hooks:
            for hook in node._hooks:
                hook(g)
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            profile.on_backward(node.op, node.owner, 2 * node._macs, node._saved)


class Graph:
    """A builder function traced into a fresh tape on every forward.

    ``fn`` receives the named inputs as keyword arguments and returns either a
    Tensor (exposed as ``"out"``) or a mapping of named Tensors. ``params`` maps
    names to the leaf Tensors whose gradients :meth:`backward` reports.
    """

    def __init__(self, fn, params=None):
        self.fn = fn
        self.params = dict(params or {})
        self.nodes = None
        self.outputs = None

    def forward(self, inputs=None):
        inputs = dict(inputs or {})
        for name, value in inputs.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise NonFiniteError("non-finite graph input", input=name)
        with recording() as tape:
            out = self.fn(**inputs)
        if isinstance(out, Tensor):
            out = {"out": out}
        self.nodes = tape
        self.outputs = dict(out)
        return self.outputs

    def has_sampling_node(self):
        return self.nodes is not None and any(n.op in STOCHASTIC_OPS for n in self.nodes)

    def backward(self, loss="out"):
        if self.outputs is None:
            raise GraphStateError("backward called before forward")
        node = self.outputs[loss] if isinstance(loss, str) else loss
        if node.size != 1:
            raise ShapeError("loss node is not scalar", shape=node.shape)
        for p in self.params.values():
            p.zero_grad()
        backward(node)
        return {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }
