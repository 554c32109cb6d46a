import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest

from capsdense.checkpoint import load_checkpoint, read_tensors, save_checkpoint, write_tensors
from capsdense.errors import ContractError, IntegrityError
from capsdense.models import build, tiny_dcnet_spec
from capsdense.trainer import AdamState, load_training_checkpoint, save_training_checkpoint, TrainState


def sample_tensors():
    rng = np.random.default_rng(0)
    return OrderedDict([
        ("a", rng.standard_normal((2, 3)).astype(np.float32)),
        ("scalar", np.asarray(5.0, dtype=np.float32)),
        ("b.kernel", rng.standard_normal((4, 1, 3, 3)).astype(np.float32)),
        ("empty", np.zeros((0, 2), dtype=np.float32)),
    ])


def test_layout(tmp_path):
    write_tensors(tmp_path / "c", OrderedDict(x=np.array([1.5, -2.0], dtype=np.float32)))
    raw = (tmp_path / "c").read_bytes()
    assert raw[:4] == b"CDCK"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<I", raw[12:16]) == (1,)
    assert raw[16:17] == b"x"
    assert struct.unpack("<BII", raw[17:26]) == (0, 1, 2)
    payload = raw[26:34]
    assert np.frombuffer(payload, "<f4").tolist() == [1.5, -2.0]
    assert struct.unpack("<I", raw[34:]) == (zlib.crc32(payload),)


def test_round_trip_bit_exact(tmp_path):
    tensors = sample_tensors()
    write_tensors(tmp_path / "c", tensors)
    back = read_tensors(tmp_path / "c")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_corruption_detected(tmp_path):
    write_tensors(tmp_path / "c", sample_tensors())
    raw = bytearray((tmp_path / "c").read_bytes())
    raw[-10] ^= 0x40
    (tmp_path / "c").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="CRC32"):
        read_tensors(tmp_path / "c")


@pytest.mark.parametrize("cut", [3, 20, 60, 1])
def test_truncation_detected(tmp_path, cut):
    write_tensors(tmp_path / "c", sample_tensors())
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "c").write_bytes(raw[:len(raw) - cut] if cut > 1 else raw[:3])
    with pytest.raises(IntegrityError):
        read_tensors(tmp_path / "c")


def test_trailing_bytes_and_bad_magic(tmp_path):
    write_tensors(tmp_path / "c", sample_tensors())
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "c").write_bytes(raw + b"\0")
    with pytest.raises(IntegrityError):
        read_tensors(tmp_path / "c")
    (tmp_path / "c").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(IntegrityError, match="magic"):
        read_tensors(tmp_path / "c")


def test_params_and_optimizer_round_trip(tmp_path):
    params = sample_tensors()
    opt = OrderedDict(step=np.asarray(3, dtype=np.float32), **{"m/a": np.ones((2, 3), np.float32)})
    save_checkpoint(tmp_path / "ck", params, opt, {"epoch": 4})
    p2, o2, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"epoch": 4}
    assert all(p2[k].tobytes() == params[k].tobytes() for k in params)
    assert int(o2["step"]) == 3 and o2["m/a"].shape == (2, 3)


def test_training_checkpoint_round_trip(tmp_path):
    model = build(tiny_dcnet_spec(), 3)
    adam = AdamState(step=7)
    for k, p in model.params.items():
        adam.m[k] = np.full(p.shape, 0.25, np.float32)
        adam.v[k] = np.full(p.shape, 0.5, np.float32)
    save_training_checkpoint(tmp_path / "ck", model, TrainState(adam, epoch=2))
    fresh = build(tiny_dcnet_spec(), 99)
    state, meta = load_training_checkpoint(tmp_path / "ck", fresh)
    assert state.epoch == 2 and state.adam.step == 7 and meta["spec"]["kind"] == "dcnet"
    for k in model.params:
        assert fresh.params[k].data.tobytes() == model.params[k].data.tobytes()
        assert state.adam.m[k].tobytes() == adam.m[k].tobytes()


def test_mismatched_spec_names_parameter(tmp_path):
    from dataclasses import replace

    model = build(tiny_dcnet_spec(), 0)
    save_training_checkpoint(tmp_path / "ck", model, TrainState(AdamState()))
    other = build(replace(tiny_dcnet_spec(), decoder="baseline"), 0)
    with pytest.raises(ContractError, match="decoder.fc4"):
        load_training_checkpoint(tmp_path / "ck", other)
