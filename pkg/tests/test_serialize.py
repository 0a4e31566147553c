import io

import numpy as np
import pytest

from oct1d import serialize
from oct1d.architectures import build_model


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4, 5)), "b.c": np.array(2.5), "empty": np.zeros((0, 3)),
              "f32": rng.standard_normal(7).astype(np.float32)}
    path = tmp_path / "snap.bin"
    serialize.save(path, arrays)
    back = serialize.load(path)
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v.astype(np.float64))


def test_model_state_round_trip(tmp_path):
    model = build_model("octfcn", 3, 16, seed=4)
    serialize.save(tmp_path / "m.bin", model.state_dict())
    other = build_model("octfcn", 3, 16, seed=5)
    other.load_state_dict(serialize.load(tmp_path / "m.bin"))
    x = np.random.default_rng(1).standard_normal((2, 16, 1))
    np.testing.assert_array_equal(model.forward(x).data, other.forward(x).data)


def test_bad_magic_and_truncation():
    with pytest.raises(serialize.SnapshotError):
        serialize.read_snapshot(io.BytesIO(b"NOPE" + b"\0" * 12))
    buf = io.BytesIO()
    serialize.write_snapshot(buf, {"x": np.ones(4)})
    with pytest.raises(serialize.SnapshotError):
        serialize.read_snapshot(io.BytesIO(buf.getvalue()[:-3]))
