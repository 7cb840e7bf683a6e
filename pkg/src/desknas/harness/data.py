"""Dataset ingestion: IDX (MNIST), CIFAR-10 binary batches, and synthetic tasks.

Everything is returned as a :class:`DatasetHandle` holding float arrays in NCHW
layout, per-channel normalized with statistics of the training split.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import DatasetError

IDX_DTYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
CIFAR_RECORD = 3073


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise DatasetError("dataset file not found", path=str(path)) from None


def read_idx(path):
    """Parse an IDX file: zero bytes, dtype code, rank, big-endian int32 dims, payload."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetError("truncated IDX header", path=str(path), offset=len(raw))
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise DatasetError("bad IDX magic number", path=str(path), offset=0,
                           magic=raw[:4].hex())
    dtype = IDX_DTYPES[raw[2]]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError("truncated IDX dimension table", path=str(path), offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < expected:
        raise DatasetError("truncated IDX payload", path=str(path), offset=len(raw),
                           expected=expected)
    if len(raw) > expected:
        raise DatasetError("trailing bytes after IDX payload", path=str(path), offset=expected)
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in IDX_DTYPES.items()}
    code = codes[array.dtype.newbyteorder("=")]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(IDX_DTYPES[code]).tobytes())


def read_cifar_batch(path):
    """Records of 1 label byte + 3072 pixel bytes (3 x 32 x 32, channel-major)."""
    raw = _read_bytes(path)
    if len(raw) == 0:
        raise DatasetError("empty CIFAR batch", path=str(path), offset=0)
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD
        raise DatasetError("record-size mismatch in CIFAR batch", path=str(path),
                           offset=full * CIFAR_RECORD, record_size=CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError("CIFAR label out of range", path=str(path), offset=bad * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


@dataclass
class DatasetHandle:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int
    seed: int
    augment: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    @property
    def sample_count(self):
        return len(self.y_train)

    def order(self, epoch):
        """Shuffle order of the training split: a pure function of (seed, epoch)."""
        return np.random.default_rng([self.seed, epoch, 0x5EED]).permutation(len(self.y_train))

    def steps_per_epoch(self, batch_size):
        return -(-len(self.y_train) // batch_size)

    def batches(self, epoch, batch_size, start=0):
        """Yield (step_in_epoch, x, y) from ``start`` onward."""
        order = self.order(epoch)
        for b in range(start, self.steps_per_epoch(batch_size)):
            idx = order[b * batch_size:(b + 1) * batch_size]
            x = self.x_train[idx]
            if self.augment:
                flip = np.random.default_rng([self.seed, epoch, b, 0xF11]).random(len(idx)) < 0.5
                x = x.copy()
                x[flip] = x[flip][..., ::-1]
            yield b, x, self.y_train[idx]

    def val_batches(self, batch_size):
        for b in range(0, len(self.y_val), batch_size):
            yield self.x_val[b:b + batch_size], self.y_val[b:b + batch_size]


def _normalize(x_train, x_val):
    axes = (0, 2, 3)
    mu = x_train.mean(axis=axes, keepdims=True)
    sd = x_train.std(axis=axes, keepdims=True)
    sd[sd == 0] = 1.0
    return (x_train - mu) / sd, (x_val - mu) / sd


def _split(x, y, n_train, n_val, seed):
    perm = np.random.default_rng([seed, 0xDA7A]).permutation(len(y))
    if n_val >= len(y):
        raise DatasetError("validation split would consume the whole dataset", n=len(y), n_val=n_val)
    val, train = perm[:n_val], perm[n_val:]
    if n_train:
        train = train[:n_train]
    return x[train], y[train], x[val], y[val]


def planted_task(seed, n, channels=8, signal_channels=2, image_size=6, classes=4,
                 separation=1.0, noise=0.45):
    """Labelled images whose class lives only in the mean of the first channels.

    Class means are distinct corners of a hypercube scaled by ``separation``;
    all channels carry i.i.d. uniform noise in [-noise, noise]. Per-pixel noise
    may exceed the separation, but noise draws whose spatial mean on a signal
    channel reaches ``separation / 2`` are redrawn, so the channel means (a
    linear function of the raw input) always separate the classes.
    """
    if signal_channels >= channels:
        raise DatasetError("planted task needs at least one nuisance channel")
    if classes > 2 ** signal_channels:
        raise DatasetError("too many classes for the signal channels",
                           classes=classes, signal_channels=signal_channels)
    rng = np.random.default_rng([seed, 0x91A7])
    corners = np.array([[(k >> b) & 1 for b in range(signal_channels)] for k in range(classes)],
                       dtype=float) * 2.0 - 1.0
    y = rng.integers(0, classes, n)
    x = rng.uniform(-noise, noise, size=(n, channels, image_size, image_size))
    for _ in range(1000):
        bad = np.abs(x[:, :signal_channels].mean(axis=(2, 3))).max(axis=1) >= separation / 2
        if not bad.any():
            break
        x[bad] = rng.uniform(-noise, noise, size=(int(bad.sum()), channels, image_size, image_size))
    else:
        raise DatasetError("noise too large for a separable planted task", noise=noise,
                           separation=separation)
    x[:, :signal_channels] += separation * corners[y][:, :, None, None]
    return x, y.astype(np.int64), list(range(signal_channels))


def blobs_task(seed, n, channels=3, image_size=8, classes=10, spread=1.0):
    """Gaussian class templates plus heavy pixel noise; overlapping classes."""
    rng = np.random.default_rng([seed, 0xB10B])
    templates = rng.standard_normal((classes, channels, image_size, image_size))
    y = rng.integers(0, classes, n)
    x = templates[y] + spread * rng.standard_normal((n, channels, image_size, image_size))
    return x, y.astype(np.int64)


def load_dataset(cfg, seed):
    """Build a DatasetHandle from a ``DatasetConfig``."""
    name = cfg.name
    meta = {}
    if name == "synthetic-planted":
        x, y, signal = planted_task(cfg.data_seed if cfg.data_seed is not None else seed,
                                    cfg.n_train + cfg.n_val, cfg.channels, cfg.signal_channels,
                                    cfg.image_size, cfg.classes, cfg.separation, cfg.noise)
        meta["signal_channels"] = signal
        num_classes = cfg.classes
        # left unnormalized: signal is unit scale by construction and rescaling the
        # nuisance channels to unit variance would drown it
        xtr, ytr, xva, yva = x[:cfg.n_train], y[:cfg.n_train], x[cfg.n_train:], y[cfg.n_train:]
    elif name == "synthetic-blobs":
        x, y = blobs_task(cfg.data_seed if cfg.data_seed is not None else seed,
                          cfg.n_train + cfg.n_val, cfg.channels, cfg.image_size, cfg.classes,
                          cfg.noise)
        num_classes = cfg.classes
        xtr, ytr, xva, yva = x[:cfg.n_train], y[:cfg.n_train], x[cfg.n_train:], y[cfg.n_train:]
        xtr, xva = _normalize(xtr, xva)
    elif name == "mnist":
        root = cfg.path
        imgs = read_idx(_find(root, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]))
        labels = read_idx(_find(root, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]))
        if imgs.ndim != 3 or labels.ndim != 1 or len(imgs) != len(labels):
            raise DatasetError("MNIST image/label files disagree", images=imgs.shape,
                               labels=labels.shape)
        x = imgs.astype(float)[:, None] / 255.0
        xtr, ytr, xva, yva = _split(x, labels.astype(np.int64), cfg.n_train, cfg.n_val, seed)
        xtr, xva = _normalize(xtr, xva)
        num_classes = 10
    elif name == "cifar10":
        root = cfg.path
        parts = []
        for i in range(1, 6):
            p = os.path.join(root, f"data_batch_{i}.bin")
            if os.path.exists(p):
                parts.append(read_cifar_batch(p))
        if not parts:
            raise DatasetError("no CIFAR-10 data_batch_*.bin files", path=str(root))
        x = np.concatenate([p[0] for p in parts]).astype(float) / 255.0
        y = np.concatenate([p[1] for p in parts])
        xtr, ytr, xva, yva = _split(x, y, cfg.n_train, cfg.n_val, seed)
        xtr, xva = _normalize(xtr, xva)
        num_classes = 10
    else:
        raise DatasetError("unknown dataset", name=name)
    return DatasetHandle(name, np.ascontiguousarray(xtr), ytr, np.ascontiguousarray(xva), yva,
                         num_classes, seed, augment=cfg.augment, meta=meta)


def _find(root, names):
    if root is None:
        raise DatasetError("dataset path not set")
    for n in names:
        for cand in (os.path.join(root, n), os.path.join(root, n + ".gz")):
            if os.path.exists(cand):
                return cand
    raise DatasetError("dataset file not found", path=str(root), looked_for=names)
