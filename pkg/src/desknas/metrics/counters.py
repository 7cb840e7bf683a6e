"""Deterministic compute and activation-memory counters.

Forward MACs come from the fixed per-primitive formulas in
:mod:`desknas.tensorcore.ops`; backward is charged at twice the forward cost
of every primitive the reverse pass visits. Activation memory is modelled by
liveness: a primitive's saved-for-backward scalars become live when it runs
forward and are released when the reverse pass consumes it.

Nodes are grouped by the first element of their profiler scope. Choice layers
use scopes named ``layer<i>``; :data:`CHOICE` aggregates all of them.
"""

import csv
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

from ..tensorcore import profile

CHOICE = "choice"


def group_of(owner):
    if not owner:
        return "other"
    head = owner[0]
    return CHOICE if head.startswith("layer") else head


@dataclass
class ComplexityCounter:
    forward_macs: int = 0
    backward_macs: int = 0
    peak_activations: int = 0
    live: int = 0
    groups: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0, 0, 0]))
    # groups[g] = [forward macs, backward macs, live, peak]

    def on_forward(self, op, owner, macs, saved):
        self.forward_macs += macs
        self.live += saved
        self.peak_activations = max(self.peak_activations, self.live)
        g = self.groups[group_of(owner)]
        g[0] += macs
        g[2] += saved
        g[3] = max(g[3], g[2])

    def on_backward(self, op, owner, macs, saved):
        self.backward_macs += macs
        self.live -= saved
        g = self.groups[group_of(owner)]
        g[1] += macs
        g[2] -= saved

    def reset(self):
        self.forward_macs = self.backward_macs = self.peak_activations = self.live = 0
        self.groups.clear()

    def group(self, name=CHOICE):
        fwd, bwd, _, peak = self.groups.get(name, (0, 0, 0, 0))
        return {"forward_macs": fwd, "backward_macs": bwd, "peak_activations": peak}

    def summary(self):
        return {"forward_macs": self.forward_macs, "backward_macs": self.backward_macs,
                "peak_activations": self.peak_activations}


@contextmanager
def counting(counter=None):
    """Install a counter for primitives run in this thread inside the block."""
    counter = counter if counter is not None else ComplexityCounter()
    with profile.installed(counter):
        yield counter


def count_step(step, *args, **kwargs):
    """Run ``step(*args, **kwargs)`` under a fresh counter; return (counter, result)."""
    with counting() as counter:
        result = step(*args, **kwargs)
    return counter, result


def write_counter_csv(path, rows):
    """rows: dicts with method, n, scope, forward_macs, backward_macs, peak_activations.

    ``path`` may also be an open text stream.
    """
    fields = ["method", "n", "scope", "forward_macs", "backward_macs", "peak_activations"]
    if hasattr(path, "write"):
        _write_counter_rows(path, fields, rows)
        return
    with open(path, "w", newline="") as fh:
        _write_counter_rows(fh, fields, rows)


def _write_counter_rows(fh, fields, rows):
    writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in fields})
