import types
from pathlib import Path

import numpy as np
import pytest

import ecinn
import ecinn.counterfactuals as cf_mod

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# -- suite-wide audit of explain calls ------------------------------------------------
#
# Every explain_batch call made anywhere in the suite (library, evaluation, CLI)
# goes through this wrapper.  It checks the pass counters against the model's
# global counters and the bitwise heatmap identity, and keeps a tally for the
# acceptance summary.

EXPLAIN_AUDIT = {"calls": 0, "results": 0, "counter_violations": [], "identity_violations": 0}
ACCEPTANCE = {}

_original_explain_batch = cf_mod.explain_batch


def _audited_explain_batch(model, *args, **kwargs):
    f0, i0 = model.forward_passes, model.inverse_passes
    results = _original_explain_batch(model, *args, **kwargs)
    df, di = model.forward_passes - f0, model.inverse_passes - i0
    EXPLAIN_AUDIT["calls"] += 1
    EXPLAIN_AUDIT["results"] += len(results)
    if (df, di) != (1, 2) or any((r.forward_passes, r.inverse_passes) != (1, 2) for r in results):
        EXPLAIN_AUDIT["counter_violations"].append((df, di))
    for r in results:
        if not (np.array_equal(r.heat0 + r.x, r.x_hat0) and np.array_equal(r.heat1 + r.x, r.x_hat1)):
            EXPLAIN_AUDIT["identity_violations"] += 1
    assert (df, di) == (1, 2), f"explain used {df} forward / {di} inverse passes"
    return results


def pytest_configure(config):
    import ecinn.cli
    import ecinn.evaluation

    for mod in (cf_mod, ecinn, ecinn.cli, ecinn.evaluation):
        mod.explain_batch = _audited_explain_batch


def pytest_collection_modifyitems(session, config, items):
    # acceptance runs last so the suite-wide audit has seen every explain call
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda s: int(s.split(".")[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")


# -- shared models ------------------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(dim, blocks=2, hidden=8, seed=0, scale=0.3, dtype=np.float64):
    from ecinn.flow import FlowModel, randomize_parameters

    model = FlowModel.build(dim, blocks=blocks, hidden=hidden, seed=seed, dtype=dtype)
    return randomize_parameters(model, np.random.default_rng(seed + 1), scale)


@pytest.fixture(scope="session")
def blob_run():
    """2-class blob model trained as in configs/blobs.*.cfg."""
    from ecinn.training import TrainConfig, train

    tr = ecinn.gen_blobs(1000, 2, 2, [[-2.0, 0.0], [2.0, 0.0]], 0.5, seed=101, split="train")
    te = ecinn.gen_blobs(1000, 2, 2, [[-2.0, 0.0], [2.0, 0.0]], 0.5, seed=202, split="test")
    model = ecinn.FlowModel.build(2, seed=0)
    gmm = ecinn.LatentGMM.init_onehot(2, 2)
    report = train(model, gmm, tr, TrainConfig(epochs=30, batch_size=64, noise_sigma=0.0, rng_seed=0), held_out=te)
    index = ecinn.build_index(model, gmm, tr)
    return types.SimpleNamespace(model=model, gmm=gmm, train=tr, test=te, index=index, report=report)


def run_fakemnist_pipeline(workdir: Path) -> types.SimpleNamespace:
    """gen -> train -> index -> eval through the CLI with the FakeMNIST-mini configs."""
    from ecinn import checkpoint
    from ecinn.cli import main
    from ecinn.counterfactuals import load_index
    from ecinn.datasets import load

    workdir = Path(workdir)
    data = workdir / "data"
    paths = types.SimpleNamespace(
        train=data / "train.ecds", test=data / "test.ecds", ckpt=workdir / "model.ecnn",
        report=workdir / "train.csv", index=workdir / "index.ecix", metrics=workdir / "metrics.csv",
    )
    assert main(["gen", "--config", str(CONFIGS / "fakemnist-mini.gen.cfg"), "--out-dir", str(data)]) == 0
    assert main(["train", "--config", str(CONFIGS / "fakemnist-mini.train.cfg"), "--train", str(paths.train),
                 "--test", str(paths.test), "--out", str(paths.ckpt), "--report", str(paths.report)]) == 0
    assert main(["index", "--checkpoint", str(paths.ckpt), "--data", str(paths.train), "--out", str(paths.index)]) == 0
    assert main(["eval", "--config", str(CONFIGS / "fakemnist-mini.eval.cfg"), "--checkpoint", str(paths.ckpt),
                 "--index", str(paths.index), "--data", str(paths.test), "--out", str(paths.metrics)]) == 0
    state = checkpoint.load(paths.ckpt)
    return types.SimpleNamespace(paths=paths, model=state.model, gmm=state.gmm, index=load_index(paths.index),
                                 train=load(paths.train), test=load(paths.test))


@pytest.fixture(scope="session")
def fakemnist_run(tmp_path_factory):
    return run_fakemnist_pipeline(tmp_path_factory.mktemp("fakemnist_a"))
