import struct

import numpy as np
import pytest

from conftest import synthetic_windows
from mhformer import checkpoint
from mhformer.config import TrainConfig, tiny_config
from mhformer.model import init_params
from mhformer.training import Amsgrad, train


def test_save_load_save_is_byte_identical(tmp_path, tiny):
    params = init_params(tiny, 0)
    a = tmp_path / "a.mhfc"
    checkpoint.save_training_state(a, params, tiny, TrainConfig(), epoch=3, loss=0.25, history=[0.5, 0.25])
    cfg, tc, loaded, optim, header = checkpoint.load_training_state(a)
    b = tmp_path / "b.mhfc"
    checkpoint.save_training_state(b, loaded, cfg, tc, epoch=header["epoch"], loss=header["loss"],
                                   history=header["extra"]["epoch_losses"])
    assert a.read_bytes() == b.read_bytes()
    assert cfg == tiny and tc == TrainConfig() and optim == {}
    for n, t in params.items():
        assert np.array_equal(t.data, loaded[n].data) and t.dtype == loaded[n].dtype


def test_layout(tmp_path):
    arrs = {"a": np.arange(3, dtype=np.float32), "b": np.eye(2)}
    buf = checkpoint.encode(arrs, {"k": 1})
    assert buf[:4] == b"MHFC"
    version, hlen = struct.unpack("<IQ", buf[4:16])
    assert version == 1
    assert len(buf) == 16 + hlen + 12 + 32
    header, tensors = checkpoint.decode(buf)
    assert list(header) == ["model_config", "train_config", "epoch", "loss", "extra", "tensors"]
    assert header["tensors"]["b"] == {"dtype": "float64", "shape": [2, 2], "offset": 12, "length": 32}
    assert np.array_equal(tensors["a"], arrs["a"]) and tensors["a"].dtype == np.float32
    assert np.frombuffer(buf[16 + hlen:16 + hlen + 4], "<f4")[0] == 0.0


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "not an MHFC"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-1], "past end"),
    (lambda b: b + b"\0", "size"),
    (lambda b: b[:20], "truncated"),
])
def test_corruption_is_detected(mutate, msg):
    buf = checkpoint.encode({"w": np.ones((2, 3))}, {})
    with pytest.raises(checkpoint.CheckpointError, match=msg):
        checkpoint.decode(mutate(buf))


def test_unsupported_dtype():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.encode({"i": np.arange(3)}, {})


def test_optimizer_state_roundtrip(tmp_path):
    x, y, sk = synthetic_windows(16)
    cfg = tiny_config(J=5)
    tc = TrainConfig(epochs=2, batch_size=4, seed=1)
    params = init_params(cfg, 0)
    res = train(params, cfg, x, y, tc, sk.pairs)
    path = tmp_path / "s.mhfc"
    checkpoint.save_training_state(path, params, cfg, tc, res.optimizer, 2, res.epoch_losses[-1], res.epoch_losses)
    _, _, loaded, optim, header = checkpoint.load_training_state(path)
    opt = Amsgrad(loaded.names())
    opt.load_state_arrays(optim, header["extra"]["optimizer"]["step"])
    assert opt.step_count == res.optimizer.step_count == 8
    for n in params.names():
        for a, b in zip(opt.state[n], res.optimizer.state[n]):
            assert np.array_equal(a, b)
