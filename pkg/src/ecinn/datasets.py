"""Synthetic datasets, the ECDS binary tensor format and PGM/PPM export."""
from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, TruncatedFileError

ECDS_MAGIC = b"ECDS"
ECDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIBB")

SPLITS = ("train", "test", "other")
KINDS = ("generic", "fakemnist", "blobs")


@dataclass
class Dataset:
    """``samples`` is ``(N, D)`` float32, ``labels`` is ``(N,)`` int64 in ``[0, num_classes)``."""

    samples: np.ndarray
    labels: np.ndarray
    geometry: tuple[int, int, int] | None
    num_classes: int
    split: str = "train"
    kind: str = "generic"

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            self.samples = self.samples.reshape(len(self.samples), -1)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.geometry is None:
            self.geometry = (self.samples.shape[1], 1, 1)
        self.geometry = tuple(int(g) for g in self.geometry)
        if int(np.prod(self.geometry)) != self.samples.shape[1]:
            raise ContractError(f"geometry {self.geometry} does not match dimension {self.samples.shape[1]}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ContractError("one label per sample required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must be in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("samples contain non-finite values")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")
        if self.kind not in KINDS:
            raise ContractError(f"unknown dataset kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.samples[idx], self.labels[idx], self.geometry, self.num_classes,
                       split or self.split, self.kind)


# -- generators ----------------------------------------------------------------

def _stroke_canvas(side: int, rng) -> np.ndarray:
    """One background image of 1-3 random quadratic Bezier strokes."""
    img = np.zeros((side, side))
    t = np.linspace(0.0, 1.0, 4 * side)[:, None]
    for _ in range(rng.integers(1, 4)):
        p0, p1, p2 = rng.uniform(0.5, side - 1.5, size=(3, 2))
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        rc = np.clip(np.rint(pts).astype(int), 0, side - 1)
        img[rc[:, 0], rc[:, 1]] = np.maximum(img[rc[:, 0], rc[:, 1]], rng.uniform(0.6, 1.0))
    return img


def gen_fakemnist(n: int, side: int = 14, k: int = 10, background="synthetic-strokes",
                  seed: int = 0, split: str = "train") -> Dataset:
    """Class-independent backgrounds with the label written into the left column.

    The pixel at (row ``y``, column 0) is set to 1.0 and rows ``0..k-1`` of
    column 0 are otherwise cleared.  ``background`` is ``"synthetic-strokes"``
    or an array of ``n`` images of shape ``(side, side)`` in ``[0, 1]``.
    """
    if side < k:
        raise ContractError(f"side {side} is smaller than the class count {k}: the strip does not fit")
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(background, str):
        if background != "synthetic-strokes":
            raise ContractError(f"unknown background {background!r}")
        images = np.stack([_stroke_canvas(side, rng) for _ in range(n)])
    else:
        images = np.array(background, dtype=np.float64)
        if images.shape != (n, side, side):
            raise ContractError(f"imported backgrounds must have shape {(n, side, side)}, got {images.shape}")
        images = np.clip(images, 0.0, 1.0)
    # labels are drawn only after every background, so they are independent of them
    labels = rng.integers(0, k, size=n)
    images[:, :k, 0] = 0.0
    images[np.arange(n), labels, 0] = 1.0
    return Dataset(images.reshape(n, -1), labels, (side, side, 1), k, split, "fakemnist")


def strip_indices(side: int, k: int) -> np.ndarray:
    """Flat indices of the ``k`` class-code pixels of a FakeMNIST image."""
    return np.arange(k) * side


def read_strip(dataset: Dataset) -> np.ndarray:
    """Label recovered from the strip alone (the zero-error reference rule)."""
    side = dataset.geometry[1]
    return np.argmax(dataset.samples[:, strip_indices(side, dataset.num_classes)], axis=1)


def gen_blobs(n: int, k: int = 2, dim: int = 2, centers=None, sigma: float = 0.5,
              seed: int = 0, split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters with class counts equal up to one."""
    if k < 2:
        raise ContractError("need at least two classes")
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    if centers is None:
        centers = np.zeros((k, dim))
        centers[:, 0] = np.linspace(-2.0, 2.0, k)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (k, dim):
        raise ContractError(f"centers must have shape {(k, dim)}")
    if len(np.unique(centers, axis=0)) < k:
        warnings.warn("gen_blobs: duplicate centers", stacklevel=2)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    samples = centers[labels] + sigma * rng.standard_normal((n, dim))
    return Dataset(samples, labels, (1, dim, 1), k, split, "blobs")


def load_idx_images(path, side: int | None = None) -> np.ndarray:
    """Read an IDX3 image file (optionally gzipped) into ``[0, 1]`` floats.

    With ``side`` set, images are block-averaged down to ``side x side``.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: IDX header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 2051:
        raise FormatError(f"{path}: not an IDX3 image file")
    if len(raw) < 16 + n * rows * cols:
        raise TruncatedFileError(f"{path}: image data truncated")
    images = np.frombuffer(raw, np.uint8, n * rows * cols, 16).reshape(n, rows, cols) / 255.0
    if side is not None and side != rows:
        if rows % side or cols % side:
            raise ContractError(f"cannot block-average {rows}x{cols} to {side}x{side}")
        f = rows // side
        images = images.reshape(n, side, f, side, f).mean(axis=(2, 4))
    return images


# -- ECDS binary format --------------------------------------------------------

def dumps(dataset: Dataset) -> bytes:
    h, w, c = dataset.geometry
    header = _HEADER.pack(ECDS_MAGIC, ECDS_VERSION, dataset.n, dataset.dim, h, w, c,
                          dataset.num_classes, SPLITS.index(dataset.split), KINDS.index(dataset.kind))
    return (header + dataset.samples.astype("<f4").tobytes()
            + dataset.labels.astype("<u4").tobytes())


def loads(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        if raw[:4] != ECDS_MAGIC[:len(raw[:4])]:
            raise FormatError("not an ECDS file (bad magic)")
        raise TruncatedFileError("ECDS header truncated")
    magic, version, n, d, h, w, c, k, split, kind = _HEADER.unpack_from(raw)
    if magic != ECDS_MAGIC:
        raise FormatError("not an ECDS file (bad magic)")
    if version != ECDS_VERSION:
        raise FormatError(f"unsupported ECDS version {version}")
    if h * w * c != d:
        raise FormatError(f"geometry {h}x{w}x{c} inconsistent with dimension {d}")
    if split >= len(SPLITS) or kind >= len(KINDS):
        raise FormatError("bad split/kind tag")
    expected = _HEADER.size + 4 * n * d + 4 * n
    if len(raw) < expected:
        raise TruncatedFileError(f"ECDS payload truncated: {len(raw)} of {expected} bytes")
    if len(raw) > expected:
        raise FormatError("trailing bytes after ECDS payload")
    off = _HEADER.size
    samples = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d)
    labels = np.frombuffer(raw, "<u4", n, off + 4 * n * d).astype(np.int64)
    try:
        return Dataset(samples.astype(np.float32), labels, (h, w, c), k, SPLITS[split], KINDS[kind])
    except ContractError as exc:
        raise FormatError(f"invalid ECDS content: {exc}") from exc


def save(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dumps(dataset))


def load(path) -> Dataset:
    return loads(Path(path).read_bytes())


# -- image export --------------------------------------------------------------

def to_uint8(vec, signed: bool = False, scale: float | None = None) -> np.ndarray:
    """Map values to 8-bit levels.

    Unsigned: clip to ``[0, 1]`` then scale.  Signed: zero maps to 128,
    ``+-scale`` to 255/1 (``scale`` defaults to the max magnitude).
    """
    v = np.asarray(vec, dtype=np.float64)
    if not signed:
        return np.rint(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)
    if scale is None:
        scale = float(np.abs(v).max())
    if scale <= 0:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.rint(128.0 + 127.0 * np.clip(v / scale, -1.0, 1.0)).astype(np.uint8)


def export_image(vec, geometry, path, signed: bool = False, scale: float | None = None) -> None:
    """Write a binary PGM (one channel) or PPM (three channels)."""
    h, w, c = geometry
    v = np.asarray(vec)
    if v.size != h * w * c:
        raise ContractError(f"vector of length {v.size} does not match geometry {geometry}")
    if c not in (1, 3):
        raise ContractError("only 1- or 3-channel images can be exported")
    pixels = to_uint8(v.reshape(h, w, c), signed, scale)
    kind = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(kind + f"\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a file written by :func:`export_image` as ``(h, w, c)`` uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    kind, dims, _maxval, data = parts
    w, h = (int(t) for t in dims.split())
    c = 1 if kind == b"P5" else 3
    return np.frombuffer(data, np.uint8, h * w * c).reshape(h, w, c)
