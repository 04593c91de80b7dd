"""Desk-scale surrogate of the information-bottleneck objective.

``loss = mean(-log p_X(x)) + beta * mean(-log p(y | x))``, optimized with Adam
over dequantized minibatches and a milestone learning-rate schedule.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .datasets import Dataset
from .errors import ContractError, DivergedError
from .flow import FlowModel
from .gmm import LOG_2PI, LatentGMM

log = logging.getLogger(__name__)

GMM_PARAM = "gmm.means"


@dataclass
class TrainConfig:
    beta: float = 1.0
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 128
    noise_sigma: float = 1.0 / 256
    rng_seed: int = 0
    # (epoch, multiplier) pairs; ``None`` means x0.1 at 80% of the epochs
    milestones: list[tuple[int, float]] | None = None
    clip_norm: float = 10.0
    eval_batch: int = 1000

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be nonnegative")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be nonnegative")

    def resolved_milestones(self) -> list[tuple[int, float]]:
        if self.milestones is not None:
            return sorted(self.milestones)
        return [(int(round(0.8 * self.epochs)), 0.1)] if self.epochs > 1 else []

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for at, mult in self.resolved_milestones():
            if epoch >= at:
                lr *= mult
        return lr


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    nll: float
    ce: float
    bpd: float
    err: float
    seconds: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    CSV_HEADER = "epoch,loss,nll,ce,bpd,err,seconds"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(f"{r.epoch},{r.loss:.9g},{r.nll:.9g},{r.ce:.9g},{r.bpd:.9g},{r.err:.9g},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class LossResult:
    loss: float
    nll: float
    ce: float
    grads: dict[str, np.ndarray]


def loss(model: FlowModel, gmm: LatentGMM, x, y, beta: float, batch_index: int = 0) -> LossResult:
    """Objective value and gradients for every flow parameter and the GMM means.

    One recorded forward pass; the NLL term uses the change-of-variables
    density, the CE term the nearest-mean posterior.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("batch must be a nonempty (N, D) array")
    if y.shape != (x.shape[0],) or y.min() < 0 or y.max() >= gmm.k:
        raise ContractError(f"labels must be in [0, {gmm.k})")
    n = x.shape[0]
    z, logdet = model.forward(x, record=True)
    mu = gmm.means.astype(np.float64)
    diff = z[:, None, :] - mu[None, :, :]
    ll = -0.5 * (diff ** 2).sum(axis=-1) - 0.5 * model.dim * LOG_2PI
    lse = logsumexp(ll, axis=1)
    nll_i = -(lse - np.log(gmm.k) + logdet)
    ce_i = lse - ll[np.arange(n), y]
    nll = float(nll_i.mean())
    ce = float(ce_i.mean())
    total = nll + beta * ce
    if not np.isfinite(total):
        model._local.tape = None
        raise DivergedError(-1, batch_index)

    post = softmax(ll, axis=1)
    onehot = np.zeros_like(post)
    onehot[np.arange(n), y] = 1.0
    g_ll = (-post + beta * (post - onehot)) / n
    # d ll_k / dz = -(z - mu_k), d ll_k / d mu_k = (z - mu_k)
    row = g_ll.sum(axis=1)
    g_z = -(row[:, None] * z - g_ll @ mu)
    g_mu = g_ll.T @ z - g_ll.sum(axis=0)[:, None] * mu
    g_logdet = np.full(n, -1.0 / n)
    _, grads = model.backward(g_z, g_logdet)
    grads[GMM_PARAM] = g_mu
    return LossResult(total, nll, ce, grads)


def dequantize(x, sigma: float, rng) -> np.ndarray:
    """``x + eps`` with ``eps ~ N(0, sigma^2)`` i.i.d.; identity for ``sigma == 0``."""
    x = np.asarray(x)
    if sigma < 0:
        raise ContractError("sigma must be nonnegative")
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = p.astype(np.float64) - update


def trainable_parameters(model: FlowModel, gmm: LatentGMM) -> dict[str, np.ndarray]:
    params = dict(model.named_parameters())
    params[GMM_PARAM] = gmm.means
    return params


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def evaluate(model: FlowModel, gmm: LatentGMM, dataset: Dataset, batch: int = 1000) -> tuple[float, float]:
    """Mean bits-per-dim and classification error on ``dataset``."""
    if dataset.n == 0:
        return float("nan"), float("nan")
    bpd_sum = 0.0
    wrong = 0
    for start in range(0, dataset.n, batch):
        xb = dataset.samples[start:start + batch]
        z, logdet = model.forward(xb)
        lp = gmm.log_marginal(z) + logdet
        bpd_sum += float((-lp / (model.dim * np.log(2.0))).sum())
        wrong += int((gmm.predict_latent(z) != dataset.labels[start:start + batch]).sum())
    return bpd_sum / dataset.n, wrong / dataset.n


def train(model: FlowModel, gmm: LatentGMM, dataset: Dataset, config: TrainConfig,
          held_out: Dataset | None = None, start_epoch: int = 0, on_epoch=None,
          optimizer: Adam | None = None) -> TrainReport:
    """Train in place for ``config.epochs`` epochs starting at ``start_epoch``.

    ``on_epoch(record)`` is called after each completed epoch.  On a
    non-finite loss a :class:`DivergedError` carrying the partial report is
    raised.
    """
    if dataset.dim != model.dim:
        raise ContractError(f"dataset dimension {dataset.dim} != model dimension {model.dim}")
    report = TrainReport()
    if config.epochs <= 0 or dataset.n == 0:
        return report
    held_out = dataset if held_out is None else held_out
    rng = np.random.default_rng(config.rng_seed)
    # fast-forward the stream so a resumed run sees the same shuffles as an uninterrupted one
    for _ in range(start_epoch):
        rng = np.random.default_rng(rng.integers(2 ** 63))
    params = trainable_parameters(model, gmm)
    opt = optimizer or Adam(params)

    for epoch in range(start_epoch, start_epoch + config.epochs):
        epoch_rng = rng
        rng = np.random.default_rng(rng.integers(2 ** 63))
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        order = epoch_rng.permutation(dataset.n)
        sums = np.zeros(3)
        seen = 0
        for bi, start in enumerate(range(0, dataset.n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = dequantize(dataset.samples[idx].astype(np.float64), config.noise_sigma, epoch_rng)
            if epoch == start_epoch and bi == 0:
                model.initialize(xb)
            try:
                res = loss(model, gmm, xb, dataset.labels[idx], config.beta, batch_index=bi)
            except DivergedError as exc:
                raise DivergedError(epoch, exc.batch_index, report) from None
            clip_global_norm(res.grads, config.clip_norm)
            opt.step(res.grads, lr)
            sums += np.array([res.loss, res.nll, res.ce]) * idx.size
            seen += idx.size
        bpd, err = evaluate(model, gmm, held_out, config.eval_batch)
        mean_loss, mean_nll, mean_ce = sums / seen
        rec = EpochRecord(epoch, float(mean_loss), float(mean_nll), float(mean_ce), float(bpd), float(err),
                          time.perf_counter() - t0)
        if not np.isfinite(bpd):
            report.records.append(rec)
            raise DivergedError(epoch, -1, report)
        report.records.append(rec)
        log.info("epoch %d loss=%.4f nll=%.4f ce=%.4f bpd=%.4f err=%.4f (%.1fs)",
                 epoch, mean_loss, mean_nll, mean_ce, bpd, err, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
    return report
