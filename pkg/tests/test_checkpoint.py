import struct

import numpy as np
import pytest

from xrseg.checkpoint import (
    MAGIC,
    AdamState,
    BadMagicError,
    SpecMismatchError,
    TruncatedPayloadError,
    UnknownTensorError,
    VersionMismatchError,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
)
from xrseg.data import gen_synthetic
from xrseg.models import ModelSpec, build_model
from xrseg.training import TrainConfig, train


def trained(arch="segnet"):
    model = build_model(ModelSpec(arch=arch, base_channels=2, depth=2, input_hw=(16, 16), seed=4))
    ds = gen_synthetic(4, (16, 16), seed=0)
    state = AdamState()
    train(model, ds, ds, TrainConfig(batch_size=2, epochs=1), state=state)
    return model, state


@pytest.mark.parametrize("arch", ["segnet", "resunet", "unet"])
def test_round_trip_bit_exact(arch, tmp_path):
    model, state = trained(arch)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, 7, path)
    loaded, lstate, epoch = load_checkpoint(path)
    assert epoch == 7 and loaded.spec == model.spec and lstate.t == state.t
    for name, p in model.params.items():
        assert np.array_equal(p.data, loaded.params[name].data)
        assert np.array_equal(state.m[name], lstate.m[name])
    for name, b in model.buffers.items():
        assert np.array_equal(b.mean, loaded.buffers[name].mean)
        assert np.array_equal(b.var, loaded.buffers[name].var)
    r = np.random.default_rng(0)
    for _ in range(20):
        x = r.random((2, 1, 16, 16), dtype=np.float32)
        assert np.array_equal(model.forward(x).data, loaded.forward(x).data)
    assert checkpoint_bytes(loaded, lstate, 7) == path.read_bytes()


def test_layout_header(tmp_path):
    model, _ = trained()
    data = checkpoint_bytes(model)
    assert data[:8] == MAGIC
    assert struct.unpack("<I", data[8:12]) == (1,)
    (n,) = struct.unpack("<I", data[12:16])
    assert b"arch=segnet" in data[16 : 16 + n]


def write(tmp_path, data):
    path = tmp_path / "x.ckpt"
    path.write_bytes(data)
    return path


def test_truncated(tmp_path):
    model, state = trained()
    data = checkpoint_bytes(model, state, 1)
    for cut in (len(data) - 1, len(data) // 2, 20):
        with pytest.raises(TruncatedPayloadError, match="truncated payload"):
            load_checkpoint(write(tmp_path, data[:cut]))


def test_bad_magic_and_version(tmp_path):
    data = checkpoint_bytes(trained()[0])
    with pytest.raises(BadMagicError):
        load_checkpoint(write(tmp_path, b"NOTACKPT" + data[8:]))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(write(tmp_path, data[:8] + struct.pack("<I", 2) + data[12:]))


def test_spec_mismatch(tmp_path):
    model, _ = trained()
    path = write(tmp_path, checkpoint_bytes(model))
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, expect_arch="resunet")
    other = ModelSpec(arch="resunet", base_channels=2, depth=2, input_hw=(16, 16))
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, expect_spec=other)


def test_unknown_tensor(tmp_path):
    model, _ = trained()
    data = checkpoint_bytes(model)
    name = b"head.bias"
    assert data.count(name) == 1
    with pytest.raises(UnknownTensorError):
        load_checkpoint(write(tmp_path, data.replace(name, b"head.bogs")))


def test_atomic_overwrite(tmp_path):
    model, state = trained()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, 1, path)
    save_checkpoint(model, state, 2, path)
    assert load_checkpoint(path)[2] == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]
