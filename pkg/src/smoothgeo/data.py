"""Datasets: two moons, IDX files, and the 8x8 digits preset."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import GridGeometry

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    data_range: tuple[float, float]
    geometry: GridGeometry = GridGeometry()
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")
        lo, hi = self.data_range
        if X.size and (X.min() < lo or X.max() > hi):
            raise ValueError("features fall outside data_range")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, index) -> Dataset:
        return dataclasses.replace(self, features=self.features[index], labels=self.labels[index])

    def to_unit(self) -> Dataset:
        """Rescale features to [0, 1]."""
        lo, hi = self.data_range
        return dataclasses.replace(self, features=(self.features - lo) / (hi - lo), data_range=(0.0, 1.0))


def gen_two_moons(n: int = 200, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles with Gaussian jitter."""
    from sklearn.datasets import make_moons

    if n < 2:
        raise ValueError("two moons needs n >= 2")
    X, y = make_moons(n_samples=n, noise=noise if noise > 0 else None, random_state=seed)
    return Dataset(X, y, (float(X.min()), float(X.max())), GridGeometry(), "two_moons")


# -------------------------------------------------------------------- IDX


def read_idx(path, magic: int) -> np.ndarray:
    """u8 IDX array with the expected magic number."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: truncated payload (no header)")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got}, expected {magic}")
    ndim = 3 if magic == IMAGE_MAGIC else 1
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IdxTruncatedError(f"{path}: truncated payload in header")
    shape = struct.unpack(f">{ndim}I", data[4:head])
    size = int(np.prod(shape))
    if len(data) < head + size:
        raise IdxTruncatedError(f"{path}: truncated payload ({len(data) - head} of {size} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=head).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors and image stacks")
    magic = IMAGE_MAGIC if a.ndim == 3 else LABEL_MAGIC
    head = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(head + a.astype(np.uint8).tobytes())


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    n, h, w = images.shape
    return Dataset(images.reshape(n, h * w).astype(np.float64), labels.astype(np.int64),
                   (0.0, 255.0), GridGeometry(h, w), name)


def downsample_8x8(ds: Dataset) -> Dataset:
    """28x28 digits to 8x8: crop a 2-pixel border, then 3x3 block means."""
    g = ds.geometry
    if (g.height, g.width) == (8, 8):
        return ds
    if (g.height, g.width) != (28, 28):
        raise ValueError(f"cannot downsample a {g.height}x{g.width} grid to 8x8")
    imgs = ds.features.reshape(-1, 28, 28)[:, 2:26, 2:26]
    small = imgs.reshape(-1, 8, 3, 8, 3).mean(axis=(2, 4))
    return dataclasses.replace(ds, features=small.reshape(-1, 64), geometry=GridGeometry(8, 8))


DIGIT_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def write_digits_idx(root, n_train: int = 1437) -> None:
    """Write the scikit-learn 8x8 digits as IDX files (pixel range 0..255)."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    imgs = np.round(bunch.images * (255.0 / 16.0)).astype(np.uint8)
    labels = bunch.target.astype(np.uint8)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_idx(root / DIGIT_FILES[0], imgs[:n_train])
    write_idx(root / DIGIT_FILES[1], labels[:n_train])
    write_idx(root / DIGIT_FILES[2], imgs[n_train:])
    write_idx(root / DIGIT_FILES[3], labels[n_train:])


def digits_preset(root=None) -> tuple[Dataset, Dataset]:
    """(train, test) 8x8 digit sets in native 0..255 units.

    Reads IDX files from ``root``; 28x28 files are downsampled. Without a
    root (or with missing files) the bundled scikit-learn digits are
    written there first.
    """
    import tempfile

    root = Path(root) if root is not None else Path(tempfile.gettempdir()) / "smoothgeo_digits"
    if not all((root / f).exists() for f in DIGIT_FILES):
        write_digits_idx(root)
    train = downsample_8x8(load_idx(root / DIGIT_FILES[0], root / DIGIT_FILES[1], "digits-train"))
    test = downsample_8x8(load_idx(root / DIGIT_FILES[2], root / DIGIT_FILES[3], "digits-test"))
    return train, test
