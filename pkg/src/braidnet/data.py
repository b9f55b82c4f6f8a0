"""Datasets: a seeded synthetic blob generator, IDX files, and batching."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterator

import numpy as np

# IDX type codes we read/write; ubyte payloads are scaled to [0, 1]
IDX_UBYTE = 0x08
IDX_FLOAT64 = 0x0E
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    """First two bytes are not zero, or the type code is unknown."""


class TruncatedPayloadError(IdxError):
    """File ends before the declared header or payload is complete."""


class CountMismatchError(IdxError):
    """Image and label files declare different sample counts."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------- synthetic


def _class_layout(num_classes: int, side: int):
    # centres evenly on a ring, alternating blob widths
    ang = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = 0.28 * side
    cy = (side - 1) / 2 + radius * np.sin(ang)
    cx = (side - 1) / 2 + radius * np.cos(ang)
    sigma = side * np.where(np.arange(num_classes) % 2 == 0, 0.07, 0.12)
    return cy, cx, sigma


def synth_blobs(num_classes: int = 10, samples_per_class: int = 200, image_side: int = 16,
                seed: int = 0, jitter: float = 1.0, noise: float = 0.1) -> Dataset:
    """One Gaussian blob per class at a class-specific place and width.

    Each sample jitters the centre by ``jitter`` pixels (std), scales the blob
    brightness in [0.6, 1.0], adds pixel noise with std ``noise`` and is
    quantised to 8 bits. Samples are grouped by class.
    """
    if image_side < 12:
        raise ValueError(f"image_side must be at least 12, got {image_side}")
    if num_classes < 2 or samples_per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    rng = np.random.default_rng(seed)
    cy, cx, sigma = _class_layout(num_classes, image_side)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    n = len(labels)
    yy, xx = np.mgrid[0:image_side, 0:image_side].astype(np.float64)
    oy = cy[labels] + jitter * rng.standard_normal(n)
    ox = cx[labels] + jitter * rng.standard_normal(n)
    amp = rng.uniform(0.6, 1.0, n)
    d2 = (yy[None] - oy[:, None, None]) ** 2 + (xx[None] - ox[:, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2 * sigma[labels][:, None, None] ** 2))
    img += noise * rng.standard_normal(img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255) / 255
    return Dataset(img[:, None], labels.astype(np.int64), num_classes)


def synth_split(num_classes=10, train_per_class=200, test_per_class=50, image_side=16, seed=0):
    """Train and test sets drawn from independent streams of the same generator."""
    ss = np.random.SeedSequence(seed).spawn(2)
    train = synth_blobs(num_classes, train_per_class, image_side, int(ss[0].generate_state(1)[0]))
    test = synth_blobs(num_classes, test_per_class, image_side, int(ss[1].generate_state(1)[0]))
    return train, test


# ---------------------------------------------------------------- IDX


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def idx_bytes(array, type_code: int = IDX_UBYTE) -> bytes:
    array = np.asarray(array)
    if type_code not in _IDX_DTYPES:
        raise IdxError(f"unsupported IDX type code {type_code:#x}")
    header = bytes([0, 0, type_code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_IDX_DTYPES[type_code]).tobytes()


def write_idx(path, array, type_code: int = IDX_UBYTE) -> None:
    _atomic_write(path, idx_bytes(array, type_code))


def read_idx(path) -> tuple[np.ndarray, int]:
    """Raw array and type code of one IDX file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the 4-byte magic")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise BadMagicError(f"{path}: bad IDX magic {raw[:4].hex()}")
    code, ndim = raw[2], raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedPayloadError(f"{path}: header declares {ndim} dims but file ends early")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - head < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - head} bytes, header needs {need}")
    arr = np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=head).reshape(dims)
    return arr, code


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images, icode = read_idx(images_path)
    labels, _ = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxError(f"{labels_path}: labels must be 1-d, got shape {labels.shape}")
    if images.ndim not in (3, 4):
        raise IdxError(f"{images_path}: images must be 3-d or 4-d, got shape {images.shape}")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)
    if icode == IDX_UBYTE:
        x = x / 255
    if images.ndim == 3:
        x = x[:, None]
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(x, y, num_classes)


def save_idx(dataset: Dataset, images_path, labels_path, type_code: int = IDX_UBYTE) -> None:
    """Write a dataset as an IDX pair; ubyte output requires 8-bit quantised inputs."""
    x = dataset.inputs
    if type_code == IDX_UBYTE:
        q = np.round(x * 255)
        if not np.array_equal(q / 255, x):
            raise IdxError("inputs are not 8-bit quantised; write with IDX_FLOAT64")
        x = q
    if x.shape[1] == 1:
        x = x[:, 0]
    write_idx(images_path, x, type_code)
    write_idx(labels_path, dataset.labels, IDX_UBYTE)


# ---------------------------------------------------------------- manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, num_classes: int, train: tuple[str, str], test: tuple[str, str]) -> dict:
    """JSON manifest of a train/test IDX quadruple; paths are stored relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    entry = {"num_classes": num_classes}
    for split, (img, lab) in (("train", train), ("test", test)):
        entry[split] = {
            "images": os.path.relpath(os.path.abspath(img), base),
            "labels": os.path.relpath(os.path.abspath(lab), base),
            "images_sha256": sha256_file(img),
            "labels_sha256": sha256_file(lab),
        }
    _atomic_write(path, (json.dumps(entry, indent=2, sort_keys=True) + "\n").encode())
    return entry


def load_manifest(path) -> tuple[Dataset, Dataset]:
    with open(path) as fh:
        entry = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for split in ("train", "test"):
        e = entry[split]
        paths = {}
        for part in ("images", "labels"):
            p = os.path.join(base, e[part])
            digest = e.get(f"{part}_sha256")
            if digest is not None and sha256_file(p) != digest:
                raise IdxError(f"checksum mismatch for {p}")
            paths[part] = p
        out.append(load_idx(paths["images"], paths["labels"], entry["num_classes"]))
    return out[0], out[1]


# ---------------------------------------------------------------- batching


def batch_indices(n: int, batch_size: int, shuffle_seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(inputs, labels)`` batches; the final partial batch is kept."""
    for idx in batch_indices(len(dataset), batch_size, shuffle_seed, epoch):
        yield dataset.inputs[idx], dataset.labels[idx]
