"""IDX and N-MNIST readers plus the two input encoders."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import DTYPE

log = logging.getLogger(__name__)

NMNIST_SIZE = 34
NMNIST_SHAPE = (2, NMNIST_SIZE, NMNIST_SIZE)
AER_DTYPE = np.dtype([("x", np.uint8), ("y", np.uint8), ("p", np.uint8), ("ts", np.uint32)])


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path):
    """Raw array stored in an IDX file (optionally gzipped). Only unsigned-byte payloads."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header, {len(data)} bytes", offset=len(data))
    if data[0] != 0 or data[1] != 0:
        raise FormatError(f"{path}: bad magic {data[:2].hex()}", offset=0)
    if data[2] != 0x08:
        raise FormatError(f"{path}: unsupported element type 0x{data[2]:02x}", offset=2)
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: header needs {header} bytes, file has {len(data)}", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for dims {dims}, got {len(data)}",
                          offset=min(len(data), expected))
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ConfigError("write_idx stores unsigned bytes only", field="dtype")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def load_idx(images_path, labels_path=None):
    """Images scaled to [0, 1] as float32, and labels (``None`` if no label file given or found)."""
    images = read_idx(images_path).astype(DTYPE) / DTYPE(255)
    if labels_path is None:
        guess = Path(str(images_path).replace("images-idx3", "labels-idx1"))
        labels_path = guess if guess.exists() and guess != Path(images_path) else None
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path).astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def parse_aer(data: bytes):
    """Decode 40-bit N-MNIST events: x, y, polarity bit + 23-bit big-endian timestamp."""
    if len(data) % 5:
        raise FormatError(f"length {len(data)} is not a multiple of 5", offset=len(data) - len(data) % 5)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 5).astype(np.uint32)
    ev = np.empty(len(raw), dtype=AER_DTYPE)
    ev["x"] = raw[:, 0]
    ev["y"] = raw[:, 1]
    ev["p"] = raw[:, 2] >> 7
    ev["ts"] = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]
    bad = np.flatnonzero((ev["x"] >= NMNIST_SIZE) | (ev["y"] >= NMNIST_SIZE))
    if bad.size:
        raise FormatError(f"event {bad[0]} outside the {NMNIST_SIZE}x{NMNIST_SIZE} sensor", offset=5 * int(bad[0]))
    return ev


def encode_aer(events):
    ev = np.asarray(events, dtype=AER_DTYPE)
    out = np.empty((len(ev), 5), dtype=np.uint8)
    ts = ev["ts"].astype(np.uint32)
    out[:, 0] = ev["x"]
    out[:, 1] = ev["y"]
    out[:, 2] = (ev["p"].astype(np.uint32) << 7) | ((ts >> 16) & 0x7F)
    out[:, 3] = (ts >> 8) & 0xFF
    out[:, 4] = ts & 0xFF
    return out.tobytes()


def load_nmnist(path):
    """Events of one N-MNIST ``.bin`` file as a structured array (fields x, y, p, ts)."""
    with open(path, "rb") as f:
        return parse_aer(f.read())


def bin_events(events, T):
    """Binary raster (T, 2, 34, 34): T equal windows over [0, max_ts], OR within a window."""
    if T <= 0:
        raise ConfigError("T must be positive", field="time_steps")
    raster = np.zeros((T,) + NMNIST_SHAPE, dtype=np.uint8)
    ev = np.asarray(events, dtype=AER_DTYPE)
    if len(ev) == 0:
        return raster
    ts = ev["ts"].astype(np.int64)
    span = int(ts.max()) + 1
    step = np.minimum(ts * T // span, T - 1)
    raster[step, ev["p"], ev["y"], ev["x"]] = 1
    return raster


@dataclass
class EncodedSample:
    currents: np.ndarray | None
    raster: np.ndarray | None
    label: int


def direct_encode(image, T, label=-1):
    """Pixel intensities as identical input currents at every step: shape (T, *image.shape)."""
    img = np.asarray(image, dtype=DTYPE)
    return EncodedSample(np.broadcast_to(img, (T,) + img.shape), None, label)


class ArrayDataset:
    """In-memory samples with their encoding.

    ``kind='static'`` stores images (n, C, H, W) for direct coding;
    ``kind='events'`` stores bit-packed rasters (n, T, 2, 34, 34).
    """

    def __init__(self, data, labels, kind, sample_shape=None):
        self.data = data
        self.labels = np.asarray(labels, dtype=np.int64)
        self.kind = kind
        self.sample_shape = sample_shape

    def __len__(self):
        return len(self.labels)

    def subset(self, n, rng=None):
        if n is None or n >= len(self):
            return self
        idx = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        idx = np.sort(idx[:n])
        return ArrayDataset(self.data[idx], self.labels[idx], self.kind, self.sample_shape)

    def batch(self, idx):
        idx = np.asarray(idx)
        if self.kind == "static":
            return self.data[idx], self.labels[idx]
        bits = np.unpackbits(self.data[idx], axis=-1, count=int(np.prod(self.sample_shape)))
        x = bits.reshape((len(idx),) + tuple(self.sample_shape)).astype(DTYPE)
        return x, self.labels[idx]


def _find(root, names):
    for name in names:
        for cand in (root / name, root / (name + ".gz")):
            if cand.exists():
                return cand
    raise ConfigError(f"none of {names} found under {root}", field="data_dir")


def load_fmnist(root, split):
    """Fashion-MNIST split ('train' or 'test') from the standard IDX file names."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    images, labels = load_idx(_find(root, [f"{prefix}-images-idx3-ubyte"]),
                              _find(root, [f"{prefix}-labels-idx1-ubyte"]))
    return ArrayDataset(images[:, None], labels, "static", images.shape[1:])


def load_nmnist_split(root, split, T, cache=True):
    """Binned N-MNIST split from ``root/Train/<digit>/*.bin`` (or ``Test``).

    Rasters are bit-packed in memory; a ``.npz`` cache is written next to the
    split directory when the location is writable.
    """
    root = Path(root)
    split_dir = root / ("Train" if split == "train" else "Test")
    if not split_dir.is_dir():
        raise ConfigError(f"{split_dir} is not a directory", field="data_dir")
    cache_path = root / f".nmnist_{split}_T{T}.npz"
    if cache and cache_path.exists():
        z = np.load(cache_path)
        return ArrayDataset(z["data"], z["labels"], "events", (T,) + NMNIST_SHAPE)
    files = sorted((int(d.name), f) for d in split_dir.iterdir() if d.is_dir() and d.name.isdigit()
                   for f in sorted(d.glob("*.bin")))
    if not files:
        raise ConfigError(f"no .bin files under {split_dir}", field="data_dir")
    packed = []
    labels = []
    for label, f in files:
        packed.append(np.packbits(bin_events(load_nmnist(f), T).reshape(-1)))
        labels.append(label)
    data = np.stack(packed)
    labels = np.asarray(labels)
    if cache:
        try:
            np.savez(cache_path, data=data, labels=labels)
        except OSError as e:
            log.info("not caching binned rasters: %s", e)
    return ArrayDataset(data, labels, "events", (T,) + NMNIST_SHAPE)


def load_dataset(name, root, split, T):
    if root is None:
        root = os.environ.get("SNN_DATA_DIR")
    if root is None or not Path(root).is_dir():
        raise ConfigError(f"data directory {root!r} does not exist", field="data_dir")
    if name == "fmnist":
        return load_fmnist(root, split)
    if name == "nmnist":
        return load_nmnist_split(root, split, T)
    raise ConfigError(f"unknown dataset {name!r}", field="dataset")
