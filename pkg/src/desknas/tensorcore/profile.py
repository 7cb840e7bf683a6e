"""Instrumentation hooks used by primitives.

Primitives report their multiply-accumulate count and the number of activation
scalars they keep for the backward pass. A sink (see ``desknas.metrics.counters``)
is installed per thread; with no sink installed every hook is a no-op.
"""

import threading
from contextlib import contextmanager

_local = threading.local()


def _stack():
    stack = getattr(_local, "scopes", None)
    if stack is None:
        stack = _local.scopes = []
    return stack


def current_scope():
    return tuple(_stack())


@contextmanager
def scope(name):
    """Tag every node created inside the block with ``name`` (nested scopes join)."""
    stack = _stack()
    stack.append(str(name))
    try:
        yield
    finally:
        stack.pop()


def active_sink():
    return getattr(_local, "sink", None)


@contextmanager
def installed(sink):
    prev = active_sink()
    _local.sink = sink
    try:
        yield sink
    finally:
        _local.sink = prev


def on_forward(op, owner, macs, saved):
    sink = active_sink()
    if sink is not None:
        sink.on_forward(op, owner, macs, saved)


def on_backward(op, owner, macs, saved):
    sink = active_sink()
    if sink is not None:
        sink.on_backward(op, owner, macs, saved)
