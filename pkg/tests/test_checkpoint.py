import numpy as np
import pytest

import ecinn
from ecinn import checkpoint
from ecinn.errors import FormatError, TruncatedFileError
from ecinn.gmm import LatentGMM

from conftest import random_model


@pytest.fixture
def trained_like(rng):
    model = random_model(6, blocks=3, hidden=8, seed=4, dtype=np.float32)
    gmm = LatentGMM(rng.standard_normal((3, 6)))
    return model, gmm


def test_round_trip_is_bit_exact(trained_like, rng, tmp_path):
    model, gmm = trained_like
    raw = checkpoint.save(tmp_path / "m.ecnn", model, gmm, epoch=12)
    state = checkpoint.load(tmp_path / "m.ecnn")
    assert state.epoch == 12
    np.testing.assert_array_equal(state.gmm.means, gmm.means)
    x = rng.standard_normal((20, 6))
    z0, ld0 = model.forward(x)
    z1, ld1 = state.model.forward(x)
    assert z0.tobytes() == z1.tobytes() and ld0.tobytes() == ld1.tobytes()
    assert checkpoint.dumps(state.model, state.gmm, state.epoch) == raw


def test_layout_header(trained_like):
    model, gmm = trained_like
    raw = checkpoint.dumps(model, gmm)
    assert raw[:4] == b"ECNN"
    assert int.from_bytes(raw[4:8], "little") == checkpoint.VERSION
    assert int.from_bytes(raw[8:12], "little") == 6
    assert int.from_bytes(raw[12:16], "little") == len(model.layers)
    assert raw[16] == 3  # first layer is an ActNorm


def test_uninitialized_flag_survives():
    model = ecinn.FlowModel.build(4, blocks=1, hidden=4)
    state = checkpoint.loads(checkpoint.dumps(model))
    assert state.gmm is None
    assert not state.model.layers[0].initialized


def test_parameters_are_float32(trained_like):
    state = checkpoint.loads(checkpoint.dumps(*trained_like))
    assert all(p.dtype == np.float32 for _, p in state.model.named_parameters())


def test_errors(trained_like):
    raw = checkpoint.dumps(*trained_like)
    with pytest.raises(FormatError):
        checkpoint.loads(b"ECNX" + raw[4:])
    for cut in (2, 10, 40, len(raw) - 3):
        with pytest.raises(TruncatedFileError):
            checkpoint.loads(raw[:cut])
    bad = bytearray(raw)
    bad[16] = 9
    with pytest.raises(FormatError):
        checkpoint.loads(bytes(bad))


def test_fingerprint():
    a = checkpoint.fingerprint(b"abc", b"def")
    assert len(a) == 32
    assert a != checkpoint.fingerprint(b"abcd", b"ef")
    assert a == checkpoint.fingerprint(b"abc", b"def")
