"""Invertible transform stack: activation normalization, affine coupling, fixed permutations.

All layers act on row-batches of shape ``(N, D)``.  Parameters are stored in the
model's storage dtype (float32 by default); every forward, inverse and backward
computation runs in float64.

Each layer implements::

    forward(x)            -> (y, logdet[N], cache)
    inverse(y)            -> x
    backward(cache, gy, gld) -> (gx, {param_name: grad})

``FlowModel`` chains them and keeps the per-thread activation tape that
``backward`` consumes.
"""
from __future__ import annotations

import threading
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, NumericOverflowError, StateError

_EPS_STD = 1e-6


class ActNorm:
    """Per-dimension affine map ``y = x * exp(log_scale) + bias``."""

    tag = 3

    def __init__(self, dim: int, dtype=np.float32):
        self.dim = dim
        self.log_scale = np.zeros(dim, dtype=dtype)
        self.bias = np.zeros(dim, dtype=dtype)
        self.initialized = False

    def params(self) -> dict[str, np.ndarray]:
        return {"log_scale": self.log_scale, "bias": self.bias}

    def initialize(self, x: np.ndarray) -> None:
        """Data-dependent init: the batch ``x`` is mapped to zero mean, unit variance."""
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        log_scale = -np.log(std + _EPS_STD)
        self.log_scale[...] = log_scale
        self.bias[...] = -mean * np.exp(self.log_scale.astype(np.float64))
        self.initialized = True

    def forward(self, x):
        ls = self.log_scale.astype(np.float64)
        y = x * np.exp(ls) + self.bias.astype(np.float64)
        logdet = np.full(x.shape[0], ls.sum())
        return y, logdet, x

    def inverse(self, y):
        ls = self.log_scale.astype(np.float64)
        return (y - self.bias.astype(np.float64)) * np.exp(-ls)

    def backward(self, x, gy, gld):
        scale = np.exp(self.log_scale.astype(np.float64))
        gx = gy * scale
        grads = {
            "log_scale": (gy * x * scale).sum(axis=0) + gld.sum(),
            "bias": gy.sum(axis=0),
        }
        return gx, grads


class AffineCoupling:
    """Affine coupling layer with a two-layer ReLU subnet.

    ``mask`` marks the *active* dimensions.  The passive part ``x_p`` feeds
    ``h = relu(x_p W1 + b1)``, ``[s, t] = h W2 + b2``; the active part becomes
    ``x_a * exp(c * tanh(s / c)) + t``.  ``W2`` and ``b2`` start at zero so a
    fresh layer is the identity.
    """

    tag = 1

    def __init__(self, mask, hidden: int, clamp: float = 2.0, dtype=np.float32, rng=None):
        mask = np.asarray(mask, dtype=bool)
        n_active = int(mask.sum())
        if not 1 <= n_active <= mask.size - 1:
            raise ContractError(f"coupling mask needs 1..{mask.size - 1} active entries, got {n_active}")
        if clamp <= 0:
            raise ContractError("clamp must be positive")
        self.dim = mask.size
        self.mask = mask
        self.hidden = int(hidden)
        self.clamp = float(clamp)
        self._active = np.flatnonzero(mask)
        self._passive = np.flatnonzero(~mask)
        n_pass = self._passive.size
        rng = np.random.default_rng(0) if rng is None else rng
        self.w1 = (rng.standard_normal((n_pass, self.hidden)) * np.sqrt(2.0 / n_pass)).astype(dtype)
        self.b1 = np.zeros(self.hidden, dtype=dtype)
        self.w2 = np.zeros((self.hidden, 2 * n_active), dtype=dtype)
        self.b2 = np.zeros(2 * n_active, dtype=dtype)

    @property
    def n_active(self) -> int:
        return self._active.size

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _subnet(self, xp):
        pre = xp @ self.w1.astype(np.float64) + self.b1.astype(np.float64)
        h = np.maximum(pre, 0.0)
        out = h @ self.w2.astype(np.float64) + self.b2.astype(np.float64)
        na = self.n_active
        s_raw, t = out[:, :na], out[:, na:]
        th = np.tanh(s_raw / self.clamp)
        return pre, h, th, self.clamp * th, t

    def forward(self, x):
        xp = x[:, self._passive]
        xa = x[:, self._active]
        pre, h, th, log_s, t = self._subnet(xp)
        y = np.empty_like(x)
        y[:, self._passive] = xp
        y[:, self._active] = xa * np.exp(log_s) + t
        cache = (xp, xa, pre, h, th, log_s)
        return y, log_s.sum(axis=1), cache

    def inverse(self, y):
        yp = y[:, self._passive]
        ya = y[:, self._active]
        _, _, _, log_s, t = self._subnet(yp)
        x = np.empty_like(y)
        x[:, self._passive] = yp
        x[:, self._active] = (ya - t) * np.exp(-log_s)
        return x

    def backward(self, cache, gy, gld):
        xp, xa, pre, h, th, log_s = cache
        gya = gy[:, self._active]
        scale = np.exp(log_s)
        g_xa = gya * scale
        g_log_s = gya * xa * scale + gld[:, None]
        g_sraw = g_log_s * (1.0 - th * th)
        g_out = np.concatenate([g_sraw, gya], axis=1)
        w2 = self.w2.astype(np.float64)
        w1 = self.w1.astype(np.float64)
        g_h = g_out @ w2.T
        g_pre = g_h * (pre > 0)
        grads = {
            "w1": xp.T @ g_pre,
            "b1": g_pre.sum(axis=0),
            "w2": h.T @ g_out,
            "b2": g_out.sum(axis=0),
        }
        gx = np.empty_like(gy)
        gx[:, self._active] = g_xa
        gx[:, self._passive] = gy[:, self._passive] + g_pre @ w1.T
        return gx, grads


class Permutation:
    """Fixed reordering of dimensions, ``y[:, i] = x[:, perm[i]]``."""

    tag = 2

    def __init__(self, perm):
        perm = np.asarray(perm, dtype=np.int64)
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ContractError("perm is not a permutation of 0..D-1")
        self.dim = perm.size
        self.perm = perm
        self.inv_perm = np.argsort(perm)

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x):
        return x[:, self.perm], np.zeros(x.shape[0]), None

    def inverse(self, y):
        return y[:, self.inv_perm]

    def backward(self, cache, gy, gld):
        return gy[:, self.inv_perm], {}


def checkerboard_mask(dim: int, geometry: Sequence[int] | None = None, parity: int = 0) -> np.ndarray:
    """Checkerboard over (row, col) when a geometry is given, else even/odd index."""
    if geometry is not None:
        h, w, c = geometry
        rows, cols, _ = np.meshgrid(np.arange(h), np.arange(w), np.arange(c), indexing="ij")
        mask = ((rows + cols) % 2 == parity).reshape(-1)
    else:
        mask = np.arange(dim) % 2 == parity
    return mask


def half_mask(dim: int, first: bool = True) -> np.ndarray:
    mask = np.arange(dim) < dim // 2
    return mask if first else ~mask


class FlowModel:
    """Ordered stack of invertible layers with forward/inverse pass counters."""

    def __init__(self, dim: int, layers: list, dtype=np.float32):
        for i, layer in enumerate(layers):
            if layer.dim != dim:
                raise ContractError(f"layer {i} has dim {layer.dim}, model has {dim}")
        self.dim = dim
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self._lock = threading.Lock()
        self._forward_passes = 0
        self._inverse_passes = 0
        self._local = threading.local()

    @classmethod
    def build(cls, dim: int, blocks: int = 8, hidden: int = 64, clamp: float = 2.0,
              seed: int = 0, geometry=None, dtype=np.float32, permute: bool = True) -> "FlowModel":
        """``blocks`` repetitions of ActNorm -> AffineCoupling -> Permutation.

        Masks alternate checkerboard / half splits, flipping parity every other
        block so every dimension is transformed.  Permutations are random
        (seeded) unless ``permute`` is false, in which case they are identities.
        """
        if dim < 2:
            raise ContractError("flow dimension must be at least 2")
        if geometry is not None and int(np.prod(geometry)) != dim:
            geometry = None
        rng = np.random.default_rng(seed)
        layers = []
        for b in range(blocks):
            flip = (b // 2) % 2
            if b % 2 == 0:
                mask = checkerboard_mask(dim, geometry, parity=flip)
            else:
                mask = half_mask(dim, first=not flip)
            if mask.all() or not mask.any():
                mask = half_mask(dim, first=bool(b % 2))
            layers.append(ActNorm(dim, dtype))
            layers.append(AffineCoupling(mask, hidden, clamp, dtype, rng))
            layers.append(Permutation(rng.permutation(dim) if permute else np.arange(dim)))
        return cls(dim, layers, dtype)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def forward_passes(self) -> int:
        return self._forward_passes

    @property
    def inverse_passes(self) -> int:
        return self._inverse_passes

    def reset_counters(self) -> None:
        with self._lock:
            self._forward_passes = 0
            self._inverse_passes = 0

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                yield f"{i}.{name}", p

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    @property
    def max_abs_logdet_bound(self) -> float:
        """Upper bound on ``|logdet|`` implied by the clamps and current actnorm scales."""
        total = 0.0
        for layer in self.layers:
            if isinstance(layer, AffineCoupling):
                total += layer.n_active * layer.clamp
            elif isinstance(layer, ActNorm):
                total += float(np.abs(layer.log_scale.astype(np.float64)).sum())
        return total

    def _as_batch(self, x, what: str):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ContractError(f"{what} must have trailing dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError(f"{what} contains non-finite entries")
        return x, single

    # -- passes --------------------------------------------------------------

    def initialize(self, x) -> None:
        """Run data-dependent initialization of every uninitialized ActNorm layer."""
        h, _ = self._as_batch(x, "x")
        for layer in self.layers:
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.initialize(h)
            h, _, _ = layer.forward(h)

    def forward(self, x, record: bool = False):
        """Map inputs to latents. Returns ``(z, logdet)``.

        With ``record=True`` the activations are kept on a per-thread tape so a
        following :meth:`backward` call can compute gradients.
        """
        h, single = self._as_batch(x, "x")
        logdet = np.zeros(h.shape[0])
        tape = [] if record else None
        with np.errstate(over="ignore", invalid="ignore"):
            for layer in self.layers:
                h, ld, cache = layer.forward(h)
                logdet += ld
                if record:
                    tape.append(cache)
        with self._lock:
            self._forward_passes += 1
        if record:
            self._local.tape = (tape, h.shape[0])
        if single:
            return h[0], float(logdet[0])
        return h, logdet

    def inverse(self, z):
        h, single = self._as_batch(z, "z")
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(len(self.layers) - 1, -1, -1):
                h = self.layers[i].inverse(h)
                if not np.all(np.isfinite(h)):
                    raise NumericOverflowError(i)
        with self._lock:
            self._inverse_passes += 1
        return h[0] if single else h

    def backward(self, grad_z, grad_logdet):
        """Reverse-mode gradients of ``sum(grad_z * z) + sum(grad_logdet * logdet)``.

        Consumes the tape of the most recent ``forward(record=True)`` on this
        thread. Returns ``(grad_x, {param_name: grad})`` with float64 grads.
        """
        entry = getattr(self._local, "tape", None)
        if entry is None:
            raise StateError("backward called without a recorded forward pass")
        tape, n = entry
        self._local.tape = None
        gz = np.asarray(grad_z, dtype=np.float64)
        single = gz.ndim == 1
        gz = gz.reshape(n, self.dim) if not single else gz[None, :]
        if gz.shape != (n, self.dim):
            raise ContractError(f"grad_z shape {gz.shape} does not match recorded batch ({n}, {self.dim})")
        gld = np.broadcast_to(np.asarray(grad_logdet, dtype=np.float64), (n,))
        grads = {}
        g = gz
        for i in range(len(self.layers) - 1, -1, -1):
            g, layer_grads = self.layers[i].backward(tape[i], g, gld)
            for name, val in layer_grads.items():
                grads[f"{i}.{name}"] = val
        return (g[0] if single else g), grads


def randomize_parameters(model: FlowModel, rng, scale: float = 0.1) -> FlowModel:
    """Fill every parameter with ``scale``-sized Gaussian noise and mark actnorms initialized.

    Used to get a non-trivial model without training.
    """
    for layer in model.layers:
        for p in layer.params().values():
            p[...] = rng.standard_normal(p.shape) * scale
        if isinstance(layer, ActNorm):
            layer.initialized = True
    return model
