"""ECNN checkpoint format.

Layout (little-endian)::

    "ECNN" | u32 version | u32 D | u32 layer_count
    layer_count x (u8 tag | layer blob)
    extra blocks until EOF: u8 tag | blob        (GMM means, run metadata)

Layer blobs:

* coupling (tag 1): u32 hidden, f32 clamp, D mask bytes, then w1, b1, w2, b2 as f32
* permutation (tag 2): D x u32
* actnorm (tag 3): u8 initialized, log_scale, bias as f32
* GMM block (tag 16): u32 K, K*D f32 means
* metadata block (tag 17): u32 epochs completed
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError
from .flow import ActNorm, AffineCoupling, FlowModel, Permutation
from .gmm import LatentGMM

MAGIC = b"ECNN"
VERSION = 1
TAG_GMM = 16
TAG_META = 17


@dataclass
class Checkpoint:
    model: FlowModel
    gmm: LatentGMM | None
    epoch: int = 0


def _f32(a) -> bytes:
    return np.asarray(a, dtype="<f4").tobytes()


def dumps(model: FlowModel, gmm: LatentGMM | None = None, epoch: int = 0) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<III", VERSION, model.dim, len(model.layers)))
    for layer in model.layers:
        out.write(struct.pack("<B", layer.tag))
        if isinstance(layer, AffineCoupling):
            out.write(struct.pack("<If", layer.hidden, layer.clamp))
            out.write(layer.mask.astype(np.uint8).tobytes())
            for p in (layer.w1, layer.b1, layer.w2, layer.b2):
                out.write(_f32(p))
        elif isinstance(layer, Permutation):
            out.write(layer.perm.astype("<u4").tobytes())
        elif isinstance(layer, ActNorm):
            out.write(struct.pack("<B", int(layer.initialized)))
            out.write(_f32(layer.log_scale))
            out.write(_f32(layer.bias))
        else:
            raise TypeError(f"cannot serialize layer {type(layer).__name__}")
    if gmm is not None:
        out.write(struct.pack("<BI", TAG_GMM, gmm.k))
        out.write(_f32(gmm.means))
    out.write(struct.pack("<BI", TAG_META, epoch))
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"checkpoint truncated at byte {len(self.raw)} (needed {self.pos + n})")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), "<f4").reshape(shape).astype(np.float32)

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("not an ECNN checkpoint (bad magic)")
    version, dim, n_layers = r.unpack("<III")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for i in range(n_layers):
        (tag,) = r.unpack("<B")
        if tag == AffineCoupling.tag:
            hidden, clamp = r.unpack("<If")
            mask = np.frombuffer(r.take(dim), np.uint8).astype(bool)
            layer = AffineCoupling(mask, hidden, float(clamp))
            na, npass = layer.n_active, dim - layer.n_active
            layer.w1 = r.floats(npass, hidden)
            layer.b1 = r.floats(hidden)
            layer.w2 = r.floats(hidden, 2 * na)
            layer.b2 = r.floats(2 * na)
        elif tag == Permutation.tag:
            layer = Permutation(np.frombuffer(r.take(4 * dim), "<u4").astype(np.int64))
        elif tag == ActNorm.tag:
            (init,) = r.unpack("<B")
            layer = ActNorm(dim)
            layer.log_scale = r.floats(dim)
            layer.bias = r.floats(dim)
            layer.initialized = bool(init)
        else:
            raise FormatError(f"unknown layer tag {tag} at layer {i}")
        layers.append(layer)
    gmm = None
    epoch = 0
    while not r.done:
        (tag,) = r.unpack("<B")
        if tag == TAG_GMM:
            (k,) = r.unpack("<I")
            gmm = LatentGMM(r.floats(k, dim))
        elif tag == TAG_META:
            (epoch,) = r.unpack("<I")
        else:
            raise FormatError(f"unknown block tag {tag}")
    return Checkpoint(FlowModel(dim, layers, np.float32), gmm, epoch)


def save(path, model: FlowModel, gmm: LatentGMM | None = None, epoch: int = 0) -> bytes:
    raw = dumps(model, gmm, epoch)
    Path(path).write_bytes(raw)
    return raw


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def fingerprint(*blobs: bytes) -> bytes:
    """32-byte SHA-256 over the SHA-256 digests of ``blobs``."""
    h = hashlib.sha256()
    for b in blobs:
        h.update(hashlib.sha256(b).digest())
    return h.digest()
