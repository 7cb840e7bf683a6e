"""Single-path search space and child-network materialization.

A :class:`SuperNet` is an optional stem, a sequence of :class:`ChoiceLayer`
objects each holding ``n`` candidate operations plus a logit vector, and a
global-average-pool + dense head. Candidate parameters live in the supernet;
children only reference them, so every sampled child trains the shared weights.

A child built for search splices a constant-one scalar after each active
layer's selected output. Its gradient after backward is the layer's credit
``sum(dL/dx * x)``.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .archdist import sample_onehot, softmax_probs
from .errors import SearchSpaceError
from .tensorcore import Tensor, ops, profile

KINDS = ("conv3", "conv5", "sepconv3", "sepconv5", "skip", "zero", "randproj")


@dataclass
class LayerSpec:
    candidates: list
    out_channels: int
    stride: int = 1


@dataclass
class SearchSpaceSpec:
    in_channels: int
    image_size: int
    num_classes: int
    layers: list
    stem_channels: Optional[int] = 16
    batch_norm: bool = True
    bn_stats: str = "shared"  # "shared" per choice layer | "per-candidate"
    randproj_keep: Optional[list] = None  # channels a randproj candidate may read
    residual_convs: bool = False  # add the input back around shape-preserving convs
    init_seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in d["layers"]]
        return cls(**d)

    def to_dict(self):
        out = dict(self.__dict__)
        out["layers"] = [dict(l.__dict__) for l in self.layers]
        return out

    @property
    def space_size(self):
        return math.prod(len(l.candidates) for l in self.layers)


def default_desk_spec(in_channels=3, image_size=32, num_classes=10,
                      candidates=("conv3", "conv5", "sepconv3", "skip")):
    """Stem (16 ch) -> 8 choice layers in three stages (two stride-2) -> GAP -> dense."""
    reduce = [c for c in candidates if c != "skip"] + (["sepconv5"] if "skip" in candidates else [])
    layers = []
    for stage, (width, repeat) in enumerate([(16, 2), (32, 3), (64, 3)]):
        for r in range(repeat):
            first = r == 0 and stage > 0
            layers.append(LayerSpec(list(reduce if first else candidates), width, 2 if first else 1))
    return SearchSpaceSpec(in_channels, image_size, num_classes, layers, stem_channels=16)


def planted_spec(in_channels, image_size, num_classes, signal_channels, n_layers=8,
                 init_seed=0, batch_norm=True):
    """Search space for the planted task: skip is the planted op at every layer.

    The random projection reads only nuisance channels. Convs carry an identity
    path, so a conv layer can at best preserve what skip preserves.
    """
    keep = [c for c in range(in_channels) if c not in set(signal_channels)]
    layers = [LayerSpec(["skip", "randproj", "conv3", "conv5"], in_channels, 1)
              for _ in range(n_layers)]
    return SearchSpaceSpec(in_channels, image_size, num_classes, layers, stem_channels=None,
                           batch_norm=batch_norm, randproj_keep=keep, init_seed=init_seed,
                           residual_convs=True)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _out_hw(hw, k, stride):
    pad = k // 2
    return (hw + 2 * pad - k) // stride + 1


class CandidateOp:
    """Base for choice-layer operations. Subclasses set ``kind`` and ``params``."""

    kind = "custom"

    def __init__(self, in_channels, out_channels, stride=1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.params = {}

    def __call__(self, x, training=True):
        raise NotImplementedError

    def out_hw(self, hw):
        return hw if self.stride == 1 else _out_hw(hw, 3, 2)

    def macs(self, hw):
        """Forward MACs for one sample with spatial input extent ``hw``."""
        return 0

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))


class _BN:
    def __init__(self, channels, stats=None):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = stats if stats is not None else (np.zeros(channels), np.ones(channels))

    def __call__(self, x, training):
        return ops.batch_norm(x, self.gamma, self.beta, self.stats[0], self.stats[1], training)


class ConvOp(CandidateOp):
    def __init__(self, in_channels, out_channels, stride, k, rng, bn_stats=None, batch_norm=True,
                 residual=False):
        super().__init__(in_channels, out_channels, stride)
        self.k = k
        self.kind = f"conv{k}"
        self.residual = residual and stride == 1 and in_channels == out_channels
        self.weight = Tensor(_he(rng, (out_channels, in_channels, k, k), in_channels * k * k),
                             requires_grad=True)
        self.params = {"w": self.weight}
        self.bn = _BN(out_channels, bn_stats) if batch_norm else None
        if self.bn is not None:
            self.params.update(gamma=self.bn.gamma, beta=self.bn.beta)
            self.bias = None
        else:
            self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
            self.params["b"] = self.bias

    def __call__(self, x, training=True):
        h = ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")
        if self.bn is not None:
            h = self.bn(h, training)
        h = ops.relu(h)
        return ops.add(x, h) if self.residual else h

    def out_hw(self, hw):
        return _out_hw(hw, self.k, self.stride)

    def macs(self, hw):
        o = self.out_hw(hw)
        out = self.out_channels * o * o
        return out * self.k * self.k * self.in_channels + (2 * out if self.bn else 0)


class SepConvOp(CandidateOp):
    """Depthwise k x k (carrying the stride) then pointwise 1 x 1, BN, relu."""

    def __init__(self, in_channels, out_channels, stride, k, rng, bn_stats=None, batch_norm=True):
        super().__init__(in_channels, out_channels, stride)
        self.k = k
        self.kind = f"sepconv{k}"
        self.dw = Tensor(_he(rng, (in_channels, 1, k, k), k * k), requires_grad=True)
        self.pw = Tensor(_he(rng, (out_channels, in_channels, 1, 1), in_channels),
                         requires_grad=True)
        self.params = {"dw": self.dw, "pw": self.pw}
        self.bn = _BN(out_channels, bn_stats) if batch_norm else None
        if self.bn is not None:
            self.params.update(gamma=self.bn.gamma, beta=self.bn.beta)
            self.bias = None
        else:
            self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
            self.params["b"] = self.bias

    def __call__(self, x, training=True):
        h = ops.depthwise_conv2d(x, self.dw, stride=self.stride, padding="same")
        h = ops.conv2d(h, self.pw, self.bias, stride=1, padding="valid")
        if self.bn is not None:
            h = self.bn(h, training)
        return ops.relu(h)

    def out_hw(self, hw):
        return _out_hw(hw, self.k, self.stride)

    def macs(self, hw):
        o = self.out_hw(hw)
        mid = self.in_channels * o * o
        out = self.out_channels * o * o
        return mid * self.k * self.k + out * self.in_channels + (2 * out if self.bn else 0)


class SkipOp(CandidateOp):
    kind = "skip"

    def __call__(self, x, training=True):
        return x


class ZeroOp(CandidateOp):
    kind = "zero"

    def __call__(self, x, training=True):
        n, _, h, w = x.shape
        if self.stride == 2:
            h, w = (h + 1) // 2, (w + 1) // 2
        return Tensor(np.zeros((n, self.out_channels, h, w), dtype=x.data.dtype))


class RandomProjectionOp(CandidateOp):
    """Fixed, untrainable 1 x 1 channel mixing that only reads ``keep`` channels.

    Every output channel is a random combination of the kept input channels,
    so anything carried solely by the other channels is erased.
    """

    kind = "randproj"

    def __init__(self, in_channels, out_channels, rng, keep=None):
        super().__init__(in_channels, out_channels, 1)
        keep = list(range(in_channels)) if keep is None else list(keep)
        mat = np.zeros((out_channels, in_channels))
        mat[:, keep] = rng.standard_normal((out_channels, len(keep))) / math.sqrt(max(len(keep), 1))
        self.weight = Tensor(mat[:, :, None, None], requires_grad=False)

    def __call__(self, x, training=True):
        return ops.conv2d(x, self.weight, None, stride=1, padding="valid")

    def macs(self, hw):
        return self.out_channels * hw * hw * self.in_channels


def make_candidate(kind, in_channels, out_channels, stride, rng, spec, bn_stats=None):
    if kind in ("conv3", "conv5"):
        return ConvOp(in_channels, out_channels, stride, int(kind[-1]), rng, bn_stats,
                      spec.batch_norm, spec.residual_convs)
    if kind in ("sepconv3", "sepconv5"):
        return SepConvOp(in_channels, out_channels, stride, int(kind[-1]), rng, bn_stats,
                         spec.batch_norm)
    if kind == "skip":
        if in_channels != out_channels or stride != 1:
            raise SearchSpaceError("skip needs equal channels and stride 1",
                                   in_channels=in_channels, out_channels=out_channels, stride=stride)
        return SkipOp(in_channels, out_channels, 1)
    if kind == "zero":
        return ZeroOp(in_channels, out_channels, stride)
    if kind == "randproj":
        if stride != 1:
            raise SearchSpaceError("randproj supports stride 1 only", stride=stride)
        return RandomProjectionOp(in_channels, out_channels, rng, spec.randproj_keep)
    raise SearchSpaceError("unknown candidate kind", kind=kind)


class ChoiceLayer:
    def __init__(self, index, candidates, alpha=None):
        if len(candidates) < 1:
            raise SearchSpaceError("choice layer needs at least one candidate", layer=index)
        self.index = index
        self.candidates = list(candidates)
        n = len(self.candidates)
        self.alpha = Tensor(np.zeros(n) if alpha is None else alpha, requires_grad=True,
                            name=f"layer{index}.alpha")
        self.frozen = None

    @property
    def n(self):
        return len(self.candidates)

    @property
    def active(self):
        return self.frozen is None

    def probs(self):
        return softmax_probs(self.alpha.data)

    def check_shapes(self, hw):
        c0 = self.candidates[0]
        outs = set()
        for j, c in enumerate(self.candidates):
            if c.in_channels != c0.in_channels or c.out_channels != c0.out_channels:
                raise SearchSpaceError("candidate channel mismatch", layer=self.index, candidate=j)
            outs.add(c.out_hw(hw))
        if len(outs) != 1:
            raise SearchSpaceError("candidates disagree on output size", layer=self.index,
                                   sizes=sorted(outs))
        return outs.pop()


class Stem:
    def __init__(self, in_channels, out_channels, rng, batch_norm=True):
        self.conv = ConvOp(in_channels, out_channels, 1, 3, rng, batch_norm=batch_norm)
        self.params = self.conv.params

    def __call__(self, x, training=True):
        return self.conv(x, training)

    def macs(self, hw):
        return self.conv.macs(hw)


class Head:
    def __init__(self, in_channels, num_classes, rng):
        self.weight = Tensor(rng.standard_normal((in_channels, num_classes)) / math.sqrt(in_channels),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)
        self.params = {"w": self.weight, "b": self.bias}

    def __call__(self, h):
        return ops.dense(ops.global_avg_pool(h), self.weight, self.bias)

    def macs(self, channels, hw):
        return channels + channels * self.weight.shape[1]


class SuperNet:
    def __init__(self, layers, head, stem=None, spec=None, input_shape=None):
        self.layers = list(layers)
        self.head = head
        self.stem = stem
        self.spec = spec
        self.input_shape = input_shape  # (C, H, W) or None for custom nets
        self._layer_hw = None
        if input_shape is not None:
            hw = input_shape[1]
            self._layer_hw = []
            for layer in self.layers:
                self._layer_hw.append(hw)
                hw = layer.check_shapes(hw)
            self.final_hw = hw

    @property
    def space_size(self):
        return math.prod(layer.n for layer in self.layers)

    def active_layers(self):
        return [l for l in self.layers if l.active]

    def theta_params(self):
        out = {}
        if self.stem is not None:
            out.update({f"stem.{k}": v for k, v in self.stem.params.items()})
        for layer in self.layers:
            for j, c in enumerate(layer.candidates):
                out.update({f"layer{layer.index}.cand{j}.{k}": v for k, v in c.params.items()})
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    def alphas(self):
        return {f"layer{l.index}.alpha": l.alpha for l in self.layers}

    def bn_buffers(self):
        out = {}
        seen = {}
        mods = [("stem", self.stem.conv)] if self.stem is not None else []
        mods += [(f"layer{l.index}.cand{j}", c) for l in self.layers for j, c in enumerate(l.candidates)]
        for name, mod in mods:
            bn = getattr(mod, "bn", None)
            if bn is None:
                continue
            for tag, arr in zip(("mean", "var"), bn.stats):
                key = id(arr)
                if key not in seen:
                    seen[key] = f"{name}.bn_{tag}"
                    out[seen[key]] = arr
        return out

    def selection_macs(self, indices):
        """Analytic forward MACs of one sample through the selected child."""
        if self.input_shape is None:
            raise SearchSpaceError("MAC model needs a supernet with a known input shape")
        hw = self.input_shape[1]
        total = self.stem.macs(hw) if self.stem is not None else 0
        for layer, j in zip(self.layers, indices):
            cand = layer.candidates[j]
            total += cand.macs(hw)
            hw = cand.out_hw(hw)
        last = self.layers[-1].candidates[0].out_channels if self.layers else self.input_shape[0]
        return total + self.head.macs(last, hw)

    # layer-wise forward pieces shared by the discrete child and relaxed baselines

    def stem_forward(self, x, training=True):
        if self.stem is None:
            return x
        with profile.scope("stem"):
            return self.stem(x, training)

    def candidate_forward(self, layer, j, x, training=True):
        with profile.scope(f"layer{layer.index}"), profile.scope(f"cand{j}"):
            return layer.candidates[j](x, training)

    def head_forward(self, h):
        with profile.scope("head"):
            return self.head(h)


def build_supernet(spec):
    """Instantiate every candidate (He fan-in init); logits start at exactly zero."""
    if not spec.layers:
        raise SearchSpaceError("search space has no layers")
    c = spec.in_channels
    stem = None
    if spec.stem_channels:
        stem = Stem(c, spec.stem_channels, np.random.default_rng([spec.init_seed, 0]),
                    spec.batch_norm)
        c = spec.stem_channels
    hw = spec.image_size
    layers = []
    for i, ls in enumerate(spec.layers):
        if ls.stride not in (1, 2):
            raise SearchSpaceError("stride must be 1 or 2", layer=i, stride=ls.stride)
        shared = (np.zeros(ls.out_channels), np.ones(ls.out_channels))
        cands = []
        for j, kind in enumerate(ls.candidates):
            rng = np.random.default_rng([spec.init_seed, 1 + i, j])
            stats = shared if spec.bn_stats == "shared" else None
            try:
                cands.append(make_candidate(kind, c, ls.out_channels, ls.stride, rng, spec, stats))
            except SearchSpaceError as exc:
                exc.context["layer"] = i
                raise
        layer = ChoiceLayer(i, cands)
        hw = layer.check_shapes(hw)
        layers.append(layer)
        c = ls.out_channels
    head = Head(c, spec.num_classes, np.random.default_rng([spec.init_seed, 10_000]))
    return SuperNet(layers, head, stem, spec, (spec.in_channels, spec.image_size, spec.image_size))


@dataclass
class ArchSample:
    indices: tuple
    logps: tuple = ()
    sizes: tuple = ()

    def onehots(self):
        out = []
        for s, n in zip(self.indices, self.sizes):
            z = np.zeros(n)
            z[s] = 1.0
            out.append(z)
        return out

    def encode(self):
        return "-".join(str(i) for i in self.indices)


def decode_arch(text):
    return tuple(int(t) for t in text.split("-"))


def sample_arch(net, rngs, uniform=False):
    """One categorical draw per active layer; frozen layers return their op (log p = 0)."""
    idx, logps = [], []
    for layer, rng in zip(net.layers, rngs):
        if not layer.active:
            idx.append(layer.frozen)
            logps.append(0.0)
            continue
        p = np.full(layer.n, 1.0 / layer.n) if uniform else layer.probs()
        z, lp = sample_onehot(p, rng)
        idx.append(int(np.argmax(z)))
        logps.append(lp)
    return ArchSample(tuple(idx), tuple(logps), tuple(l.n for l in net.layers))


@dataclass
class ChildNetwork:
    net: SuperNet
    indices: tuple
    dummies: dict = field(default_factory=dict)  # layer index -> constant-one scalar Tensor
    backward_done: bool = False

    def forward(self, x, training=True, capture=None):
        """Logits of the child. ``capture(layer_index, x_selected)`` sees each selected output
        before its dummy scalar is applied."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self.backward_done = False
        h = self.net.stem_forward(x, training)
        for layer, j in zip(self.net.layers, self.indices):
            h = self.net.candidate_forward(layer, j, h, training)
            if capture is not None:
                capture(layer.index, h)
            dummy = self.dummies.get(layer.index)
            if dummy is not None:
                with profile.scope(f"layer{layer.index}"), profile.scope("dummy"):
                    h = ops.scale(h, dummy)
        return self.net.head_forward(h)

    def backward(self, loss):
        loss.backward()
        self.backward_done = True

    def parameters(self):
        out = {}
        if self.net.stem is not None:
            out.update({f"stem.{k}": v for k, v in self.net.stem.params.items()})
        for layer, j in zip(self.net.layers, self.indices):
            out.update({f"layer{layer.index}.cand{j}.{k}": v
                        for k, v in layer.candidates[j].params.items()})
        out.update({f"head.{k}": v for k, v in self.net.head.params.items()})
        return out

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters().values()))

    def reset_dummies(self):
        for d in self.dummies.values():
            d.data[...] = 1.0
            d.grad = None


def instantiate_child(net, z, dummy=True):
    """Materialize the child for selection ``z`` (ArchSample or index sequence).

    Frozen layers ignore ``z`` and use their frozen op; only active layers get a
    dummy scalar.
    """
    indices = tuple(z.indices if isinstance(z, ArchSample) else z)
    if len(indices) != len(net.layers):
        raise SearchSpaceError("selection length does not match layer count",
                               got=len(indices), layers=len(net.layers))
    resolved = []
    for layer, s in zip(net.layers, indices):
        s = int(s)
        if not 0 <= s < layer.n:
            raise SearchSpaceError("selection index out of range", layer=layer.index, index=s, n=layer.n)
        resolved.append(layer.frozen if layer.frozen is not None else s)
    dummies = {}
    if dummy:
        dummies = {l.index: Tensor(np.ones(()), requires_grad=True, name=f"layer{l.index}.dummy")
                   for l in net.layers if l.active}
    return ChildNetwork(net, tuple(resolved), dummies)


def child_forward(child, batch, training=True):
    return child.forward(batch, training)


def freeze_layer(net, layer, op):
    target = net.layers[layer]
    if not target.active:
        raise SearchSpaceError("layer already fixed", layer=layer, frozen=target.frozen)
    if not 0 <= op < target.n:
        raise SearchSpaceError("op index out of range", layer=layer, op=op)
    target.frozen = int(op)
    return net


def derived_indices(net):
    idx = []
    for layer in net.layers:
        if not layer.active:
            idx.append(layer.frozen)
            continue
        a = layer.alpha.data
        best = int(np.argmax(a))
        if np.count_nonzero(a == a[best]) > 1:
            warnings.warn(f"layer {layer.index}: tie at the top logit, picking index {best}",
                          stacklevel=3)
        idx.append(best)
    return tuple(idx)


def derive_final(net):
    """Argmax child (frozen op at fixed layers), without dummy scalars."""
    return instantiate_child(net, derived_indices(net), dummy=False)


def dump_architecture(net, indices=None):
    lines = ["# desknas architecture v1", f"layers {len(net.layers)}"]
    for layer in net.layers:
        kinds = ",".join(c.kind for c in layer.candidates)
        c0 = layer.candidates[0]
        line = f"layer {layer.index} stride {c0.stride} out {c0.out_channels} candidates {kinds}"
        if indices is not None:
            line += f" selected {indices[layer.index]} ({layer.candidates[indices[layer.index]].kind})"
        if not layer.active:
            line += f" frozen {layer.frozen}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def parse_architecture(text):
    """Selected index per layer from a dump produced by :func:`dump_architecture`."""
    selected = []
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] == "layer" and "selected" in parts:
            selected.append(int(parts[parts.index("selected") + 1]))
    return tuple(selected)
