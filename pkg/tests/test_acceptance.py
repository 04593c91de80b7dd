"""Acceptance gate: one test (and one summary line) per criterion.

Each test records ``(passed, detail)`` in ``conftest.ACCEPTANCE`` before
asserting, so the terminal summary lists every criterion even when some fail.
"""
import time

import numpy as np
import pytest

import conftest
from conftest import EXPLAIN_AUDIT, random_model, run_fakemnist_pipeline
from ecinn.counterfactuals import alpha_zero_latent, explain_batch
from ecinn.evaluation import boundary_residual
from ecinn.flow import FlowModel, randomize_parameters
from ecinn.gmm import LatentGMM
from ecinn.training import loss, trainable_parameters
from oracles import bisect_boundary_alpha, grads_close, numeric_jacobian, numeric_param_grad


def record(key, ok, detail):
    conftest.ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, f"{key}: {detail}"


def metrics_row(path):
    header, values = path.read_text().splitlines()
    return dict(zip(header.split(","), values.split(",")))


def test_1_invertibility(fakemnist_run, blob_run):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    fresh = randomize_parameters(FlowModel.build(196, seed=5), np.random.default_rng(6), scale=0.1)
    cases = {
        "random D=196": (fresh, rng.random((1000, 196))),
        "FakeMNIST-mini": (fakemnist_run.model, fakemnist_run.test.samples[:1000]),
        "FakeMNIST-mini uniform": (fakemnist_run.model, rng.random((1000, 196))),
        "blobs": (blob_run.model, rng.normal(0, 3, (1000, 2))),
    }
    errs = {}
    for name, (model, x) in cases.items():
        assert model.dtype == np.float32
        z, _ = model.forward(x)
        errs[name] = float(np.abs(model.inverse(z) - x).max())
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + f"; {dt:.1f}s"
    record("1. invertibility", worst < 1e-4 and dt < 10, detail)


def test_2_logdet_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2)
    for dim in (2, 4, 6, 8):
        model = random_model(dim, blocks=4, hidden=16, seed=20 + dim, scale=0.3)
        x = rng.standard_normal((100, dim))
        _, logdet = model.forward(x)
        _, num = np.linalg.slogdet(numeric_jacobian(lambda v: model.forward(v)[0], x, step=1e-4))
        rel = np.abs(logdet - num) / np.maximum(np.abs(num), 1e-12)
        worst = max(worst, float(rel.max()))
    dt = time.perf_counter() - t0
    record("2. log-det oracle", worst < 1e-3 and dt < 30, f"max relative error {worst:.2e} over 400 inputs; {dt:.1f}s")


def test_3_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    model = random_model(4, blocks=2, hidden=8, seed=30, scale=0.3)
    gmm = LatentGMM(rng.standard_normal((3, 4)), dtype=np.float64)
    x = rng.standard_normal((16, 4))
    y = rng.integers(0, 3, 16)
    res = loss(model, gmm, x, y, beta=1.0)
    failures = []
    params = trainable_parameters(model, gmm)
    for name, p in params.items():
        num = numeric_param_grad(lambda: loss(model, gmm, x, y, 1.0).loss, p, step=1e-5)
        if not grads_close(res.grads[name], num, rel=1e-3, abs_floor=1e-6).all():
            failures.append(name)
    dt = time.perf_counter() - t0
    record("3. gradient oracle", not failures and dt < 60,
           f"{len(params)} tensors checked, failing: {failures or 'none'}; {dt:.1f}s")


def test_4_fakemnist(fakemnist_run):
    m = metrics_row(fakemnist_run.paths.metrics)
    err = float(m["test_error"])
    flip = float(m["strip_flip_rate"])
    detail = (f"test error {err:.4f}, strip flip {flip:.3f} (lit>0.5 {float(m['strip_lit_rate']):.3f}, "
              f"on/off >= 5x {float(m['localization_rate']):.3f}, top-2 strip {float(m['top2_strip_rate']):.3f}) "
              f"over {m['n_explained']} inputs")
    record("4. FakeMNIST-mini", err <= 0.01 and flip >= 0.9 and m["n_explained"] == "200", detail)


def test_5_boundary_property():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    n = 10_000
    dims = rng.integers(2, 11, n)
    worst_resid = worst_gap = 0.0
    for dim in np.unique(dims):
        m = int((dims == dim).sum())
        z = rng.normal(0, 3, (m, dim))
        mu_p = rng.normal(0, 2, (m, dim))
        mu_q = rng.normal(0, 2, (m, dim))
        d = rng.normal(0, 2, (m, dim))
        alpha = alpha_zero_latent(z, mu_p, mu_q, d)
        resid = boundary_residual(z + alpha[:, None] * d, mu_p, mu_q)
        ref = bisect_boundary_alpha(z, mu_p, mu_q, d)
        gap = np.abs(alpha - ref) / np.maximum(1.0, np.abs(ref))
        worst_resid = max(worst_resid, float(resid.max()))
        worst_gap = max(worst_gap, float(gap.max()))
    dt = time.perf_counter() - t0
    record("5. boundary property", worst_resid < 1e-6 and worst_gap < 1e-8 and dt < 5,
           f"max residual {worst_resid:.2e}, max |closed form - bisection| {worst_gap:.2e} over {n}; {dt:.1f}s")


def test_6_class_flip(blob_run):
    model, gmm, index, test = blob_run.model, blob_run.gmm, blob_run.index, blob_run.test
    x = test.samples.astype(np.float64)
    z, _ = model.forward(x)
    q = 1 - gmm.predict_latent(z)
    results = explain_batch(model, gmm, index, x, q)
    z1, _ = model.forward(np.array([r.x_hat1 for r in results]))
    flip = float((gmm.predict_latent(z1) == q).mean())
    # posterior of the reconstructed tipping-point counterfactual, via a real forward pass
    z0, _ = model.forward(np.array([r.x_hat0 for r in results]))
    post = gmm.posterior(z0)
    idx = np.arange(len(results))
    restricted = post[idx, q] / (post[idx, q] + post[idx, 1 - q])
    tip = float(((restricted >= 0.45) & (restricted <= 0.55)).mean())
    record("6. class-flip rate", flip >= 0.95 and tip >= 0.9,
           f"alpha1 flip {flip:.3f}, alpha0 posterior in [0.45, 0.55] {tip:.3f} over {len(results)} inputs")


def test_7_pass_counters(blob_run):
    model = blob_run.model
    x = blob_run.test.samples[:50].astype(np.float64)
    ok_local = True
    for i in range(50):
        f0, i0 = model.forward_passes, model.inverse_passes
        r = explain_batch(model, blob_run.gmm, blob_run.index, x[i:i + 1], [1])[0]
        ok_local &= (model.forward_passes - f0, model.inverse_passes - i0) == (1, 2)
        ok_local &= (r.forward_passes, r.inverse_passes) == (1, 2)
    bad = EXPLAIN_AUDIT["counter_violations"]
    record("7. pass counters", ok_local and not bad and EXPLAIN_AUDIT["calls"] > 0,
           f"{EXPLAIN_AUDIT['calls']} explain calls / {EXPLAIN_AUDIT['results']} results audited suite-wide, "
           f"violations: {len(bad)}")


def test_8_heat_identity(fakemnist_run, blob_run):
    rng = np.random.default_rng(8)
    fm = fakemnist_run
    sel = rng.choice(fm.test.n, 100, replace=False)
    x = fm.test.samples[sel].astype(np.float64)
    z, _ = fm.model.forward(x)
    q = (fm.gmm.predict_latent(z) + rng.integers(1, 10, 100)) % 10
    results = explain_batch(fm.model, fm.gmm, fm.index, x, q)
    direct = all(np.array_equal(r.heat0 + r.x, r.x_hat0) and np.array_equal(r.heat1 + r.x, r.x_hat1)
                 for r in results)
    violations = EXPLAIN_AUDIT["identity_violations"]
    record("8. heatmap identity", direct and violations == 0,
           f"{EXPLAIN_AUDIT['results']} results audited suite-wide, bitwise violations: {violations}")


@pytest.mark.slow
def test_9_determinism(fakemnist_run, tmp_path_factory):
    second = run_fakemnist_pipeline(tmp_path_factory.mktemp("fakemnist_b"))
    same = {
        name: getattr(fakemnist_run.paths, name).read_bytes() == getattr(second.paths, name).read_bytes()
        for name in ("train", "test", "ckpt", "index", "metrics")
    }
    record("9. determinism", all(same.values()),
           "byte-identical: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items()))
