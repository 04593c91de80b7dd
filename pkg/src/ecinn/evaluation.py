"""Aggregate metrics for a trained model + index on a held-out split."""
from __future__ import annotations

import numpy as np

from .counterfactuals import EcinnIndex, boundary_and_direction, explain_batch
from .datasets import Dataset, strip_indices
from .flow import FlowModel
from .gmm import LatentGMM
from .training import evaluate

METRICS_VERSION = 1
METRIC_FIELDS = (
    "version",
    "n_test",
    "test_error",
    "bpd",
    "n_explained",
    "flip_rate",
    "tip_rate",
    "max_boundary_residual",
    "heat_identity",
    "forward_passes_per_explain",
    "inverse_passes_per_explain",
    "strip_lit_rate",
    "localization_rate",
    "strip_flip_rate",
    "top2_strip_rate",
)


def boundary_residual(z, mu_p, mu_q) -> np.ndarray:
    """``| |z-mu_p| - |z-mu_q| | / (|z-mu_p| + |z-mu_q|)`` row-wise."""
    a = np.linalg.norm(z - mu_p, axis=-1)
    b = np.linalg.norm(z - mu_q, axis=-1)
    return np.abs(a - b) / (a + b)


def random_targets(pred, k: int, rng) -> np.ndarray:
    """A uniformly random class different from each prediction."""
    return (np.asarray(pred) + rng.integers(1, k, size=np.shape(pred))) % k


def strip_scores(results, side: int, k: int):
    """Per-result FakeMNIST localization checks on the convincing counterfactual.

    Returns ``(lit, ratio, top2)``: the target strip pixel value in
    ``x_hat1``, the on-strip / off-strip mean absolute heat ratio, and whether
    the two largest heat entries are the strip pixels of ``p`` and ``q``.
    """
    strip = strip_indices(side, k)
    off = np.setdiff1d(np.arange(side * side), strip)
    lit = np.array([r.x_hat1[strip[r.q]] for r in results])
    ratio = np.array([
        np.abs(r.heat1[strip]).mean() / max(np.abs(r.heat1[off]).mean(), np.finfo(float).tiny)
        for r in results
    ])
    top2 = np.array([
        set(np.argsort(-np.abs(r.heat1), kind="stable")[:2].tolist()) == {strip[r.p], strip[r.q]}
        for r in results
    ])
    return lit, ratio, top2


def evaluate_run(model: FlowModel, gmm: LatentGMM, index: EcinnIndex, test: Dataset,
                 n_explain: int = 200, seed: int = 0, convention: str = "mixed") -> dict:
    """Test error, BPD and counterfactual metrics on ``n_explain`` random test inputs."""
    bpd, err = evaluate(model, gmm, test)
    rng = np.random.default_rng(seed)
    n = min(n_explain, test.n)
    sel = np.sort(rng.choice(test.n, n, replace=False))
    x = test.samples[sel].astype(np.float64)
    z, _ = model.forward(x)
    p = gmm.predict_latent(z)
    q = random_targets(p, gmm.k, rng)
    results = explain_batch(model, gmm, index, x, q, convention)

    x_hat1 = np.array([r.x_hat1 for r in results])
    z1, _ = model.forward(x_hat1)
    flipped = gmm.predict_latent(z1) == q
    tip = np.array([0.45 <= r.target_prob0 <= 0.55 for r in results])
    mu = gmm.means.astype(np.float64)
    if convention == "empirical":
        mu = index.empirical_means.astype(np.float64)
    dirs = np.array([boundary_and_direction(gmm, index, int(r.p), int(r.q), convention)[2] for r in results])
    z0 = z + np.array([r.alpha0 for r in results])[:, None] * dirs
    resid = boundary_residual(z0, mu[p], mu[q])
    identity = all(
        np.array_equal(r.heat0 + r.x, r.x_hat0) and np.array_equal(r.heat1 + r.x, r.x_hat1) for r in results
    )
    metrics = {
        "version": METRICS_VERSION,
        "n_test": test.n,
        "test_error": err,
        "bpd": bpd,
        "n_explained": n,
        "flip_rate": float(flipped.mean()),
        "tip_rate": float(tip.mean()),
        "max_boundary_residual": float(resid.max()),
        "heat_identity": int(identity),
        "forward_passes_per_explain": max(r.forward_passes for r in results),
        "inverse_passes_per_explain": max(r.inverse_passes for r in results),
        "strip_lit_rate": "",
        "localization_rate": "",
        "strip_flip_rate": "",
        "top2_strip_rate": "",
    }
    if test.kind == "fakemnist":
        lit, ratio, top2 = strip_scores(results, test.geometry[0], test.num_classes)
        metrics.update(
            strip_lit_rate=float((lit > 0.5).mean()),
            localization_rate=float((ratio >= 5.0).mean()),
            strip_flip_rate=float(((lit > 0.5) & (ratio >= 5.0)).mean()),
            top2_strip_rate=float(top2.mean()),
        )
    return metrics


def metrics_csv(metrics: dict) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.9g}"
        return str(v)

    return ",".join(METRIC_FIELDS) + "\n" + ",".join(fmt(metrics[f]) for f in METRIC_FIELDS) + "\n"
