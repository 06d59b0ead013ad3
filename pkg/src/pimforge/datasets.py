"""Bundled synthetic digit task and an IDX (MNIST-format) reader."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

# 5x7 bitmap glyphs, one string per row
_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

_TEMPLATES = np.stack(
    [np.array([[int(ch) for ch in row] for row in _GLYPHS[d]], dtype=np.float64) for d in range(10)]
)


def synthetic_digits(n_samples: int, *, size: int = 16, seed: int = 0, noise: float = 0.15):
    """Randomly distorted renderings of the ten glyphs.

    Each sample gets a random scale, rotation, shear, translation, stroke
    blur and additive noise. Returns ``(X, y)`` with ``X`` of shape
    ``(n, 1, size, size)`` in ``[0, 1]`` and balanced labels.
    """
    rng = np.random.default_rng(seed)
    y = np.arange(n_samples) % 10
    rng.shuffle(y)
    X = np.empty((n_samples, 1, size, size))
    centre_out = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    centre_in = np.array([3.0, 2.0])
    for i, label in enumerate(y):
        glyph = _TEMPLATES[label]
        scale = rng.uniform(1.5, 2.0)
        angle = rng.uniform(-0.3, 0.3)
        shear = rng.uniform(-0.3, 0.3)
        stretch = rng.uniform(0.85, 1.15)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        A = rot @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([scale * stretch, scale / stretch])
        inv = np.linalg.inv(A)
        shift = rng.uniform(-1.5, 1.5, size=2)
        offset = centre_in - inv @ (centre_out + shift)
        img = ndimage.affine_transform(glyph, inv, offset=offset, output_shape=(size, size), order=1)
        img = ndimage.gaussian_filter(img, rng.uniform(0.4, 0.9))
        img = img / max(img.max(), 1e-9) * rng.uniform(0.7, 1.0)
        img = img + rng.normal(0.0, noise, size=img.shape)
        X[i, 0] = np.clip(img, 0.0, 1.0)
    return X, y.astype(np.int64)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into an array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise ValueError(f"{path}: not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if dtype_code not in dtypes:
        raise ValueError(f"{path}: unknown IDX type code {dtype_code:#x}")
    dims = struct.unpack(">" + "I" * ndim, data[4 : 4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=dtypes[dtype_code], offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} values, found {arr.size}")
    return arr.reshape(dims).astype(dtypes[dtype_code][1:], copy=False)


def write_idx(path, arr: np.ndarray) -> None:
    codes = {np.dtype("uint8"): 0x08, np.dtype("int8"): 0x09, np.dtype("int16"): 0x0B,
             np.dtype("int32"): 0x0C, np.dtype("float32"): 0x0D, np.dtype("float64"): 0x0E}
    arr = np.asarray(arr)
    header = struct.pack(">HBB", 0, codes[arr.dtype], arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def load_idx_dataset(images, labels, *, size: int | None = 16, limit: int | None = None):
    """Images scaled to ``[0, 1]`` with shape ``(n, 1, size, size)``.

    Images are resized with bilinear zoom when ``size`` differs from the
    stored resolution.
    """
    X = read_idx(images).astype(np.float64)
    y = read_idx(labels).astype(np.int64)
    if limit is not None:
        X, y = X[:limit], y[:limit]
    if X.max(initial=0) > 1.0:
        X = X / 255.0
    if size is not None and X.shape[1:] != (size, size):
        zoom = (1, size / X.shape[1], size / X.shape[2])
        X = np.clip(ndimage.zoom(X, zoom, order=1), 0.0, 1.0)
    return X[:, None, :, :], y


def load_dataset(spec: dict, base_dir=None):
    """Dataset from a config block. Returns ``(X_train, y_train, X_test, y_test)``.

    ``{"kind": "synthetic", "n_train": 3000, "n_test": 500, "seed": 0}`` or
    ``{"kind": "idx", "train_images": ..., "train_labels": ..., "test_images": ..., "test_labels": ...}``.
    """
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        seed = int(spec.get("seed", 0))
        size = int(spec.get("size", 16))
        Xtr, ytr = synthetic_digits(int(spec.get("n_train", 3000)), size=size, seed=seed)
        Xte, yte = synthetic_digits(int(spec.get("n_test", 500)), size=size, seed=seed + 1_000_003)
        return Xtr, ytr, Xte, yte
    if kind == "idx":
        base = Path(base_dir or ".")
        size = spec.get("size", 16)
        Xtr, ytr = load_idx_dataset(base / spec["train_images"], base / spec["train_labels"],
                                    size=size, limit=spec.get("train_limit"))
        Xte, yte = load_idx_dataset(base / spec["test_images"], base / spec["test_labels"],
                                    size=size, limit=spec.get("test_limit"))
        return Xtr, ytr, Xte, yte
    raise ValueError(f"unknown dataset kind {kind!r}")
