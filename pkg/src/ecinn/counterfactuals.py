"""Closed-form latent-space counterfactuals and difference heatmaps.

A counterfactual for input ``x`` and target class ``q`` is
``f^-1(f(x) + alpha * delta(p, q))`` where ``p`` is the predicted class and
``delta(p, q)`` the difference of the empirical latent means of the samples
predicted as ``q`` and ``p``.  ``alpha0`` puts the corrected latent on the
decision hyperplane between the model means of ``p`` and ``q``; ``alpha1 =
4/5 + alpha0/2`` aims for a confident target prediction.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .errors import ContractError, FormatError, MissingGroupError, ParallelDirectionError, TruncatedFileError
from .flow import FlowModel
from .gmm import LatentGMM

PARALLEL_EPS = 1e-8
CONVENTIONS = ("mixed", "model", "empirical")

INDEX_MAGIC = b"ECIX"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIII")


@dataclass
class EcinnIndex:
    """Per-predicted-class empirical latent means."""

    empirical_means: np.ndarray
    group_sizes: np.ndarray
    fingerprint: bytes = bytes(32)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.empirical_means = np.asarray(self.empirical_means, dtype=np.float32)
        self.group_sizes = np.asarray(self.group_sizes, dtype=np.int64)
        if len(self.fingerprint) != 32:
            raise ContractError("fingerprint must be 32 bytes")

    @property
    def k(self) -> int:
        return self.empirical_means.shape[0]

    @property
    def dim(self) -> int:
        return self.empirical_means.shape[1]

    def mean(self, cls: int) -> np.ndarray:
        if not 0 <= cls < self.k:
            raise ContractError(f"class {cls} outside [0, {self.k})")
        if self.group_sizes[cls] == 0:
            raise MissingGroupError(cls)
        return self.empirical_means[cls].astype(np.float64)


def build_index(model: FlowModel, gmm: LatentGMM, dataset: Dataset, batch: int = 1000,
                fingerprint: bytes = bytes(32)) -> EcinnIndex:
    """Group ``dataset`` by predicted class and average the latents of each group."""
    if dataset.dim != model.dim:
        raise ContractError(f"dataset dimension {dataset.dim} != model dimension {model.dim}")
    sums = np.zeros((gmm.k, model.dim))
    counts = np.zeros(gmm.k, dtype=np.int64)
    for start in range(0, dataset.n, batch):
        z, _ = model.forward(dataset.samples[start:start + batch])
        pred = gmm.predict_latent(z)
        np.add.at(sums, pred, z)
        counts += np.bincount(pred, minlength=gmm.k)
    means = np.zeros_like(sums)
    nonempty = counts > 0
    means[nonempty] = sums[nonempty] / counts[nonempty, None]
    notes = []
    if nonempty.sum() <= 1:
        notes.append("degenerate index: all samples fall into a single predicted class")
    empty = np.flatnonzero(~nonempty)
    if empty.size:
        notes.append(f"empty groups: {empty.tolist()}")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return EcinnIndex(means, counts, fingerprint, notes)


def delta(index: EcinnIndex, p: int, q: int) -> np.ndarray:
    """``mean_q - mean_p`` of the empirical latent means."""
    return index.mean(q) - index.mean(p)


def alpha_zero_latent(z, mu_p, mu_q, direction) -> np.ndarray | float:
    """Step along ``direction`` that puts ``z`` on the bisecting hyperplane of ``mu_p``, ``mu_q``.

    Broadcasts over leading dimensions.
    """
    z, mu_p, mu_q, direction = (np.asarray(a, dtype=np.float64) for a in (z, mu_p, mu_q, direction))
    w = mu_q - mu_p
    b = -(0.5 * (mu_p + mu_q) * w).sum(axis=-1)
    num = (w * z).sum(axis=-1) + b
    den = (w * direction).sum(axis=-1)
    limit = PARALLEL_EPS * np.linalg.norm(w, axis=-1) * np.linalg.norm(direction, axis=-1)
    if np.any(np.abs(den) <= limit):
        raise ParallelDirectionError("direction is parallel to the decision boundary")
    alpha = -num / den
    return float(alpha) if np.ndim(alpha) == 0 else alpha


def boundary_and_direction(gmm, index, p, q, convention):
    """``(mu_p, mu_q, direction)`` under the chosen means convention.

    ``mixed``: boundary from model means, direction from empirical means.
    ``model`` / ``empirical``: both from the same source.
    """
    if convention not in CONVENTIONS:
        raise ContractError(f"unknown means convention {convention!r}")
    if convention == "empirical":
        mu_p, mu_q = index.mean(p), index.mean(q)
    else:
        mu_p, mu_q = gmm.means[p].astype(np.float64), gmm.means[q].astype(np.float64)
    if convention == "model":
        d = mu_q - mu_p
    else:
        d = delta(index, p, q)
    return mu_p, mu_q, d


def alpha_zero(gmm: LatentGMM, index: EcinnIndex, z, p: int, q: int, convention: str = "mixed") -> float:
    if p == q:
        raise ContractError("alpha_zero needs p != q")
    mu_p, mu_q, d = boundary_and_direction(gmm, index, p, q, convention)
    return alpha_zero_latent(z, mu_p, mu_q, d)


def alpha_one(alpha0):
    return 0.8 + alpha0 / 2.0


def heatmap(x, x_hat) -> np.ndarray:
    """Elementwise ``x_hat - x``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ContractError(f"heatmap shape mismatch: {x.shape} vs {x_hat.shape}")
    return x_hat - x


def counterfactual(model: FlowModel, gmm: LatentGMM, index: EcinnIndex, x, q: int, alpha: float,
                   convention: str = "mixed") -> np.ndarray:
    """``f^-1(f(x) + alpha * delta(C(x), q))`` with one forward and one inverse pass."""
    z, _ = model.forward(x)
    p = int(gmm.predict_latent(z))
    _, _, d = boundary_and_direction(gmm, index, p, q, convention)
    return model.inverse(z + alpha * d)


@dataclass
class CounterfactualResult:
    x: np.ndarray
    p: int
    q: int
    alpha0: float
    alpha1: float
    x_hat0: np.ndarray
    x_hat1: np.ndarray
    heat0: np.ndarray
    heat1: np.ndarray
    # classes of the corrected latents z + alpha * delta, i.e. C(x_hat) without another pass
    pred0: int
    pred1: int
    # posterior of q restricted to {p, q} at the corrected latents
    target_prob0: float
    target_prob1: float
    forward_passes: int
    inverse_passes: int
    same_class: bool = False

    def to_record(self, **extra) -> dict:
        rec = {
            "p": self.p,
            "q": self.q,
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "pred0": self.pred0,
            "pred1": self.pred1,
            "target_prob0": self.target_prob0,
            "target_prob1": self.target_prob1,
            "forward_passes": self.forward_passes,
            "inverse_passes": self.inverse_passes,
            "same_class": self.same_class,
        }
        rec.update(extra)
        return rec


def _restricted_target_prob(gmm: LatentGMM, z, p, q):
    d2 = gmm.sq_dists(z)
    idx = np.arange(d2.shape[0])
    # sigmoid of the log-odds of q against p
    logit = -0.5 * (d2[idx, q] - d2[idx, p])
    return 0.5 * (1.0 + np.tanh(0.5 * logit))


def explain_batch(model: FlowModel, gmm: LatentGMM, index: EcinnIndex, x, q,
                  convention: str = "mixed") -> list[CounterfactualResult]:
    """Tipping-point and convincing counterfactuals for every row of ``x``.

    One forward pass over the batch gives predictions and latents; one
    inverse pass per alpha value produces the two counterfactuals.  Each input
    therefore costs exactly one forward and two inverse evaluations.

    Pixel values are not clipped; ``x_hat = x + heat`` holds bitwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.int64), (n,))
    if np.any((q < 0) | (q >= gmm.k)):
        raise ContractError(f"target classes must be in [0, {gmm.k})")
    forward_calls = inverse_calls = 0

    z, _ = model.forward(x)
    forward_calls += 1
    p = np.atleast_1d(gmm.predict_latent(z))

    mu_p = np.empty_like(z)
    mu_q = np.empty_like(z)
    d = np.empty_like(z)
    for i in range(n):
        if p[i] == q[i]:
            mu_p[i] = mu_q[i] = d[i] = 0.0
        else:
            mu_p[i], mu_q[i], d[i] = boundary_and_direction(gmm, index, int(p[i]), int(q[i]), convention)
    same = p == q
    alpha0 = np.zeros(n)
    if np.any(~same):
        alpha0[~same] = alpha_zero_latent(z[~same], mu_p[~same], mu_q[~same], d[~same])
    alpha1 = alpha_one(alpha0)

    z0 = z + alpha0[:, None] * d
    z1 = z + alpha1[:, None] * d
    raw0 = model.inverse(z0)
    raw1 = model.inverse(z1)
    inverse_calls += 2
    heat0 = heatmap(x, raw0)
    heat1 = heatmap(x, raw1)
    x_hat0 = x + heat0
    x_hat1 = x + heat1

    pred0 = np.atleast_1d(gmm.predict_latent(z0))
    pred1 = np.atleast_1d(gmm.predict_latent(z1))
    prob0 = _restricted_target_prob(gmm, z0, p, q)
    prob1 = _restricted_target_prob(gmm, z1, p, q)

    return [
        CounterfactualResult(
            x=x[i], p=int(p[i]), q=int(q[i]),
            alpha0=float(alpha0[i]), alpha1=float(alpha1[i]),
            x_hat0=x_hat0[i], x_hat1=x_hat1[i], heat0=heat0[i], heat1=heat1[i],
            pred0=int(pred0[i]), pred1=int(pred1[i]),
            target_prob0=float(prob0[i]), target_prob1=float(prob1[i]),
            forward_passes=forward_calls, inverse_passes=inverse_calls,
            same_class=bool(same[i]),
        )
        for i in range(n)
    ]


def explain(model: FlowModel, gmm: LatentGMM, index: EcinnIndex, x, q: int,
            convention: str = "mixed") -> CounterfactualResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("explain takes a single sample; use explain_batch for batches")
    return explain_batch(model, gmm, index, x[None, :], [q], convention)[0]


# -- ECIX index file -------------------------------------------------------------

def index_dumps(index: EcinnIndex) -> bytes:
    return (_INDEX_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.k, index.dim)
            + index.group_sizes.astype("<u8").tobytes()
            + index.empirical_means.astype("<f4").tobytes()
            + index.fingerprint)


def index_loads(raw: bytes) -> EcinnIndex:
    if len(raw) < _INDEX_HEADER.size:
        raise TruncatedFileError("index header truncated")
    magic, version, k, d = _INDEX_HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise FormatError("not an ECIX index file (bad magic)")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    expected = _INDEX_HEADER.size + 8 * k + 4 * k * d + 32
    if len(raw) < expected:
        raise TruncatedFileError(f"index truncated: {len(raw)} of {expected} bytes")
    if len(raw) > expected:
        raise FormatError("trailing bytes after index payload")
    off = _INDEX_HEADER.size
    sizes = np.frombuffer(raw, "<u8", k, off).astype(np.int64)
    off += 8 * k
    means = np.frombuffer(raw, "<f4", k * d, off).reshape(k, d)
    off += 4 * k * d
    return EcinnIndex(means.astype(np.float32), sizes, bytes(raw[off:off + 32]))


def save_index(index: EcinnIndex, path) -> bytes:
    raw = index_dumps(index)
    Path(path).write_bytes(raw)
    return raw


def load_index(path) -> EcinnIndex:
    return index_loads(Path(path).read_bytes())
