"""IDX image/label files, dataset manifests and bundle ingestion.

IDX layout (big-endian): two zero bytes, a type code (0x08 = unsigned byte),
the number of dimensions, one u32 per dimension, then raw u8 data.
A manifest JSON ties an image file and a label file to a class count and
train/val/test index lists.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

U8 = 0x08


class DatasetError(ValueError):
    pass


def write_idx(path, array):
    a = np.ascontiguousarray(array)
    if a.dtype != np.uint8:
        raise DatasetError(f"IDX writer stores unsigned bytes only, got {a.dtype}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, U8, a.ndim))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DatasetError(f"{path}: too short for an IDX header")
    z0, z1, code, ndim = struct.unpack(">BBBB", data[:4])
    if z0 or z1 or code != U8:
        raise DatasetError(f"{path}: bad IDX magic {data[:4].hex()} (expected 000008xx)")
    head = 4 + 4 * ndim
    if ndim == 0 or len(data) < head:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    count = int(np.prod(dims))
    if len(data) - head != count:
        raise DatasetError(f"{path}: expected {count} data bytes for shape {dims}, found {len(data) - head}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims)


@dataclass
class DatasetBundle:
    images: np.ndarray  # uint8 (n, C, H, W)
    labels: np.ndarray  # uint8 (n,)
    num_classes: int
    splits: dict = field(default_factory=dict)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def split(self, name):
        if name not in self.splits:
            raise DatasetError(f"dataset has no {name!r} split (have {sorted(self.splits)})")
        idx = np.asarray(self.splits[name], dtype=np.int64)
        return self.images[idx], self.labels[idx].astype(np.int64)


def channel_stats(images):
    x = np.asarray(images, dtype=np.float64)
    x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
    return x.mean(axis=1), x.std(axis=1)


def validate_bundle(images, labels, num_classes, splits):
    if images.ndim != 4:
        raise DatasetError(f"images must be (n, C, H, W), got shape {images.shape}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise DatasetError(f"{len(images)} images but labels of shape {labels.shape}")
    if len(labels) and int(labels.max()) >= num_classes:
        raise DatasetError(f"label {int(labels.max())} out of range for {num_classes} classes")
    for name, idx in splits.items():
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= len(images)):
            raise DatasetError(f"split {name!r} indexes outside 0..{len(images) - 1}")


def write_bundle(directory, images, labels, num_classes, splits):
    """Write IDX files plus ``manifest.json`` into ``directory``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    validate_bundle(images, labels, num_classes, splits)
    write_idx(d / "images.idx", images)
    write_idx(d / "labels.idx", labels)
    manifest = {
        "images": "images.idx",
        "labels": "labels.idx",
        "num_classes": int(num_classes),
        "splits": {k: [int(i) for i in v] for k, v in splits.items()},
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")
    return path


def ingest(manifest_path) -> DatasetBundle:
    """Load and validate a bundle; normalisation statistics come from the train split only."""
    mp = Path(manifest_path)
    try:
        m = json.loads(mp.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"manifest {mp} not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {mp} is not valid JSON: {exc}") from exc
    for key in ("images", "labels", "num_classes", "splits"):
        if key not in m:
            raise DatasetError(f"manifest {mp} lacks {key!r}")
    images = read_idx(mp.parent / m["images"])
    labels = read_idx(mp.parent / m["labels"])
    validate_bundle(images, labels, int(m["num_classes"]), m["splits"])
    b = DatasetBundle(images, labels, int(m["num_classes"]), {k: list(v) for k, v in m["splits"].items()})
    if "train" not in b.splits or not b.splits["train"]:
        raise DatasetError(f"manifest {mp} needs a non-empty 'train' split")
    b.mean, b.std = channel_stats(b.split("train")[0])
    return b


def make_synthetic_bundle(directory, n_train=10000, n_val=1000, n_test=2000, seed=0):
    """Generate the procedural 10-class set and write it as a bundle."""
    from .synthetic import NUM_CLASSES, make_synthetic

    n = n_train + n_val + n_test
    images, labels = make_synthetic(n, seed)
    idx = np.arange(n)
    splits = {
        "train": idx[:n_train],
        "val": idx[n_train : n_train + n_val],
        "test": idx[n_train + n_val :],
    }
    return write_bundle(directory, images, labels, NUM_CLASSES, splits)
