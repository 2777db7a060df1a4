"""CIFAR-10 binary reader and a synthetic image generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class TruncatedFile(ValueError):
    pass


class BadLabel(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) in [0, 1]
    y: np.ndarray  # (N,) int64
    indices: Optional[np.ndarray] = None  # rows picked from the source

    def __len__(self):
        return len(self.y)


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # "cifar10" | "synthetic"
    path: Optional[str] = None
    train_size: int = 2000
    test_size: int = 1000
    seed: int = 0
    # synthetic only
    classes: int = 10
    image_size: int = 32
    noise: float = 0.1
    contrast: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def read_cifar10_file(path: Union[str, Path]):
    """Decode one binary batch file into (images in [0,1], labels)."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size % RECORD:
        raise TruncatedFile(f"{path}: {raw.size} bytes is not a multiple of {RECORD}")
    rec = raw.reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise BadLabel(f"{path}: record {bad} has label {labels[bad]}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _read_many(root: Path, names: List[str]):
    xs, ys = [], []
    for name in names:
        x, y = read_cifar10_file(root / name)
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


def subset_indices(n_available: int, size: int, seed: int) -> np.ndarray:
    """Sorted, seed-determined choice of ``size`` rows out of ``n_available``."""
    if size > n_available:
        raise ValueError(f"requested {size} records, only {n_available} available")
    return np.sort(np.random.default_rng([seed, 1]).permutation(n_available)[:size])


def load_cifar10(spec: DatasetSpec):
    """Return (train, test) subsets from a ``cifar-10-batches-bin`` directory."""
    if spec.path is None:
        raise ValueError("cifar10 source needs a path")
    root = Path(spec.path)
    missing = [n for n in TRAIN_FILES + TEST_FILES if not (root / n).exists()]
    if missing:
        raise FileNotFoundError(f"{root}: missing {', '.join(missing)}")
    xtr, ytr = _read_many(root, TRAIN_FILES)
    xte, yte = _read_many(root, TEST_FILES)
    itr = subset_indices(len(ytr), spec.train_size, spec.seed)
    ite = subset_indices(len(yte), spec.test_size, spec.seed + 1)
    return Dataset(xtr[itr], ytr[itr], itr), Dataset(xte[ite], yte[ite], ite)


def class_templates(classes: int, image_size: int, seed: int, contrast: float = 0.5) -> np.ndarray:
    """One smooth RGB template per class: a grey field plus three coloured Gaussian blobs."""
    rng = np.random.default_rng([seed, 11])
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    out = np.full((classes, 3, image_size, image_size), 0.5)
    for c in range(classes):
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, 2)
            width = rng.uniform(0.08, 0.25)
            colour = rng.uniform(-1.0, 1.0, 3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            out[c] += contrast * colour[:, None, None] * blob
    return np.clip(out, 0.0, 1.0)


def make_synthetic(classes: int = 10, per_class: int = 100, image_size: int = 32, seed: int = 0,
                   noise: float = 0.1, contrast: float = 0.5, template_seed: Optional[int] = None) -> Dataset:
    """Template + i.i.d. Gaussian pixel noise, clipped to [0, 1], classes interleaved.

    Templates depend on ``template_seed`` (defaults to ``seed``) so train and
    test splits can share them while drawing independent noise.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    tmpl = class_templates(classes, image_size, seed if template_seed is None else template_seed, contrast)
    rng = np.random.default_rng([seed, 12])
    y = np.tile(np.arange(classes), per_class)
    x = tmpl[y] + noise * rng.standard_normal((len(y), 3, image_size, image_size))
    return Dataset(np.clip(x, 0.0, 1.0), y.astype(np.int64), np.arange(len(y)))


def load_dataset(spec: DatasetSpec):
    """(train, test) for either source."""
    if spec.source == "cifar10":
        return load_cifar10(spec)
    if spec.source != "synthetic":
        raise ValueError(f"unknown dataset source {spec.source!r}")
    per_train = -(-spec.train_size // spec.classes)
    per_test = -(-spec.test_size // spec.classes)
    kw = dict(classes=spec.classes, image_size=spec.image_size, noise=spec.noise, contrast=spec.contrast,
              template_seed=spec.seed)
    tr = make_synthetic(per_class=per_train, seed=spec.seed * 2 + 1, **kw)
    te = make_synthetic(per_class=per_test, seed=spec.seed * 2 + 2, **kw)
    tr = Dataset(tr.x[: spec.train_size], tr.y[: spec.train_size], tr.indices[: spec.train_size])
    te = Dataset(te.x[: spec.test_size], te.y[: spec.test_size], te.indices[: spec.test_size])
    return tr, te


def write_cifar10_file(path: Union[str, Path], images_u8: np.ndarray, labels) -> Path:
    """Inverse of ``read_cifar10_file`` for uint8 images shaped (N, 3, 32, 32)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    path = Path(path)
    path.write_bytes(rec.tobytes())
    return path
