"""Unit-variance Gaussian class model in latent space with a uniform class prior."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ContractError
from .flow import FlowModel

LOG_2PI = float(np.log(2.0 * np.pi))


class LatentGMM:
    """K class means in latent space; covariance is the identity, prior is ``1/K``."""

    def __init__(self, means, dtype=np.float32):
        means = np.array(means, dtype=dtype, ndmin=2)
        if not np.all(np.isfinite(means)):
            raise ContractError("GMM means must be finite")
        self.means = means

    @classmethod
    def init_onehot(cls, k: int, dim: int, radius: float = 1.0, dtype=np.float32) -> "LatentGMM":
        """``mu_y = radius * e_(y mod dim)``."""
        if k < 1:
            raise ContractError("need at least one class")
        means = np.zeros((k, dim))
        means[np.arange(k), np.arange(k) % dim] = radius
        return cls(means, dtype)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _latents(self, z):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[1] != self.dim:
            raise ContractError(f"latent dimension {z.shape[1]} != GMM dimension {self.dim}")
        return z, single

    def sq_dists(self, z) -> np.ndarray:
        z, single = self._latents(z)
        mu = self.means.astype(np.float64)
        d = ((z[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
        return d[0] if single else d

    def logliks(self, z) -> np.ndarray:
        """``log p_Z(z | y)`` for every class, shape ``(N, K)`` (or ``(K,)``)."""
        return -0.5 * self.sq_dists(z) - 0.5 * self.dim * LOG_2PI

    def class_loglik(self, z, y: int) -> float:
        if not 0 <= y < self.k:
            raise ContractError(f"class {y} outside [0, {self.k})")
        z, _ = self._latents(z)
        diff = z[0] - self.means[y].astype(np.float64)
        return float(-0.5 * diff @ diff - 0.5 * self.dim * LOG_2PI)

    def posterior(self, z) -> np.ndarray:
        """Softmax over ``-0.5 * ||z - mu_y||^2``."""
        return softmax(-0.5 * self.sq_dists(z), axis=-1)

    def predict_latent(self, z) -> np.ndarray:
        # argmin returns the first minimum: ties go to the lowest class index
        return np.argmin(self.sq_dists(z), axis=-1)

    def log_marginal(self, z) -> np.ndarray:
        """``log p_Z(z) = logsumexp_y log p_Z(z|y) - log K``."""
        return logsumexp(self.logliks(z), axis=-1) - np.log(self.k)


def classify(model: FlowModel, gmm: LatentGMM, x):
    """Predicted class of ``x`` (one forward pass)."""
    z, _ = model.forward(x)
    pred = gmm.predict_latent(z)
    return int(pred) if np.ndim(pred) == 0 else pred


def log_px(model: FlowModel, gmm: LatentGMM, x):
    z, logdet = model.forward(x)
    return gmm.log_marginal(z) + logdet


def bits_per_dim(model: FlowModel, gmm: LatentGMM, x):
    """``-log2 p_X(x) / D``; per sample for a batch."""
    lp = log_px(model, gmm, x)
    return -lp / (model.dim * np.log(2.0))
