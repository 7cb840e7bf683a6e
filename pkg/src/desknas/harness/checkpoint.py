"""Versioned checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"DNASCKPT"
    version    u32
    mlen       u64       length of the JSON manifest
    manifest   mlen bytes
    payload    raw little-endian arrays at the manifest's offsets
    sha256     32 bytes  digest of everything above

The manifest lists every array (name, dtype, shape, offset, nbytes) plus the
non-array state: counters, rng states, freeze states, config hash.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..engine import build_space, new_search_state
from ..errors import CheckpointError, IntegrityError
from ..supernet import freeze_layer

MAGIC = b"DNASCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    version: int
    manifest: dict
    arrays: dict

    @property
    def meta(self):
        return self.manifest["meta"]

    @property
    def config_hash(self):
        return self.manifest["config_hash"]


def _opt_meta(opt):
    return {"mode": opt.mode, "lr": opt.lr, "total_steps": opt.total_steps,
            "schedule": opt.schedule, "weight_decay": opt.weight_decay,
            "momentum": opt.momentum, "betas": list(opt.betas), "eps": opt.eps,
            "step": opt.step, "param_steps": dict(opt.param_steps)}


def _opt_arrays(prefix, opt):
    out = {}
    for name, buf in opt.buffers.items():
        if isinstance(buf, tuple):
            out[f"{prefix}/m/{name}"], out[f"{prefix}/v/{name}"] = buf
        else:
            out[f"{prefix}/buf/{name}"] = buf
    return out


def state_payload(state):
    """Split a SearchState into (arrays, meta)."""
    net = state.net
    arrays = {}
    arrays.update({f"theta/{k}": p.data for k, p in net.theta_params().items()})
    arrays.update({f"alpha/{k}": a.data for k, a in net.alphas().items()})
    arrays.update({f"bn/{k}": v for k, v in net.bn_buffers().items()})
    arrays.update(_opt_arrays("opt_theta", state.theta_opt))
    arrays.update(_opt_arrays("opt_alpha", state.alpha_opt))
    events = []
    for i, e in enumerate(state.freeze_events):
        arrays[f"freeze_alpha/{i}"] = e["alpha"]
        events.append({k: v for k, v in e.items() if k != "alpha"})
    meta = {
        "seed": state.seed, "h": state.h, "step": state.step, "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "frozen": [l.frozen for l in net.layers],
        "rng_states": state.rng_states(),
        "baselines": {str(k): v for k, v in state.baselines.items()},
        "use_baseline": state.use_baseline, "ema_decay": state.ema_decay,
        "history": state.history, "epoch_losses": state.epoch_losses,
        "epoch_accs": state.epoch_accs, "freeze_events": events,
        "initial_entropy": state.initial_entropy,
        "opt_theta": _opt_meta(state.theta_opt), "opt_alpha": _opt_meta(state.alpha_opt),
    }
    return arrays, meta


def save_checkpoint(path, state, config_hash, extra=None):
    arrays, meta = state_payload(state)
    if extra:
        meta["extra"] = extra
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": VERSION, "config_hash": config_hash, "arrays": entries,
                "meta": meta}
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    body = _HEAD.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(blobs)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise CheckpointError("checkpoint not found", path=str(path)) from None
    if len(raw) < _HEAD.size + 32 or raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file", path=str(path))
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch", path=str(path))
    _, version, mlen = _HEAD.unpack_from(body)
    if version != VERSION:
        raise CheckpointError("unsupported checkpoint version", path=str(path),
                              version=version, supported=VERSION)
    start = _HEAD.size + mlen
    try:
        manifest = json.loads(body[_HEAD.size:start])
    except ValueError:
        raise IntegrityError("checkpoint manifest unreadable", path=str(path)) from None
    arrays = {}
    for e in manifest["arrays"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(body):
            raise IntegrityError("array extends past end of file", name=e["name"])
        dt = np.dtype(e["dtype"])
        a = np.frombuffer(body, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=lo)
        arrays[e["name"]] = a.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(version, manifest, arrays)


def _restore_opt(opt, meta, arrays, prefix):
    for k in ("lr", "total_steps", "schedule", "weight_decay", "momentum", "eps", "step"):
        setattr(opt, k, meta[k])
    opt.betas = tuple(meta["betas"])
    opt.param_steps = dict(meta["param_steps"])
    opt.buffers = {}
    for name, a in arrays.items():
        if name.startswith(f"{prefix}/buf/"):
            opt.buffers[name[len(prefix) + 5:]] = a.copy()
        elif name.startswith(f"{prefix}/m/"):
            key = name[len(prefix) + 3:]
            opt.buffers[key] = (a.copy(), arrays[f"{prefix}/v/{key}"].copy())


def restore_state(ckpt, cfg, dataset):
    """Rebuild the SearchState saved in ``ckpt`` for the same config."""
    if ckpt.config_hash != cfg.config_hash():
        raise CheckpointError("config does not match the checkpoint", expected=ckpt.config_hash,
                              got=cfg.config_hash())
    meta, arrays = ckpt.meta, ckpt.arrays
    net = build_space(cfg, dataset)
    state = new_search_state(net, cfg, meta["seed"], meta["opt_theta"]["total_steps"])
    targets = {f"theta/{k}": p.data for k, p in net.theta_params().items()}
    targets.update({f"alpha/{k}": a.data for k, a in net.alphas().items()})
    targets.update({f"bn/{k}": v for k, v in net.bn_buffers().items()})
    for name, dst in targets.items():
        if name not in arrays:
            raise CheckpointError("checkpoint is missing an array", name=name)
        if arrays[name].shape != dst.shape:
            raise CheckpointError("array shape mismatch", name=name, saved=arrays[name].shape,
                                  expected=dst.shape)
        dst[...] = arrays[name]
    for layer, f in zip(net.layers, meta["frozen"]):
        if f is not None:
            freeze_layer(net, layer.index, f)
    _restore_opt(state.theta_opt, meta["opt_theta"], arrays, "opt_theta")
    _restore_opt(state.alpha_opt, meta["opt_alpha"], arrays, "opt_alpha")
    state.set_rng_states(meta["rng_states"])
    state.h = meta["h"]
    state.step, state.epoch = meta["step"], meta["epoch"]
    state.batch_in_epoch = meta["batch_in_epoch"]
    state.baselines = {int(k): v for k, v in meta["baselines"].items()}
    state.use_baseline, state.ema_decay = meta["use_baseline"], meta["ema_decay"]
    state.history = meta["history"]
    state.epoch_losses, state.epoch_accs = meta["epoch_losses"], meta["epoch_accs"]
    state.freeze_events = [dict(e, alpha=arrays[f"freeze_alpha/{i}"].copy())
                           for i, e in enumerate(meta["freeze_events"])]
    state.initial_entropy = meta["initial_entropy"]
    return state
