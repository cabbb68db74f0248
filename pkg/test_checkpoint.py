import struct

import numpy as np
import pytest

from src.checkpoint import MAGIC, load_checkpoint, read_checkpoint_tensors, save_checkpoint
from src.data_loader import load_dataset
from src.errors import CheckpointError
from src.model import AffordanceDetector


@pytest.fixture
def saved(tmp_path, tiny_config):
    detector = AffordanceDetector(tiny_config, seed=9, iteration=70000)
    path = tmp_path / "model.ckpt"
    save_checkpoint(detector, path)
    return detector, path


def test_round_trip_is_bit_exact(saved):
    detector, path = saved
    loaded = load_checkpoint(path)
    assert loaded.config == detector.config
    assert loaded.iteration == 70000
    assert loaded.seed == 9
    assert set(loaded.params) == set(detector.params)
    for name, value in detector.params.items():
        assert loaded.params[name].tobytes() == value.tobytes(), name
        assert np.array_equal(loaded.velocity[name], detector.velocity[name])


def test_file_layout(saved):
    _, path = saved
    data = path.read_bytes()
    assert data[:4] == MAGIC
    version, count = struct.unpack("<II", data[4:12])
    assert version == 1
    tensors = read_checkpoint_tensors(path)
    assert len(tensors) == count
    assert "__config__" in tensors
    assert any(name.startswith("velocity.") for name in tensors)


def test_resume_matches_uninterrupted_run(tmp_path, tiny_config, tiny_dataset):
    example = load_dataset(tiny_dataset, 2, 4)[0]

    straight = AffordanceDetector(tiny_config, seed=4)
    expected = [straight.train_step(example).total for _ in range(3)]

    first = AffordanceDetector(tiny_config, seed=4)
    totals = [first.train_step(example).total for _ in range(2)]
    save_checkpoint(first, tmp_path / "mid.ckpt")
    resumed = load_checkpoint(tmp_path / "mid.ckpt")
    totals.append(resumed.train_step(example).total)

    assert totals == expected
    for name in straight.params:
        assert np.array_equal(straight.params[name], resumed.params[name]), name


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="magic") as err:
        load_checkpoint(path)
    assert err.value.offset == 0


def test_unknown_version(saved):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 7)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncated_file_reports_offset(saved):
    _, path = saved
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated") as err:
        load_checkpoint(path)
    assert err.value.offset is not None
    assert err.value.offset <= len(data) - 10


def test_trailing_bytes_rejected(saved):
    _, path = saved
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_config_mismatch_rejected(tmp_path, tiny_config):
    detector = AffordanceDetector(tiny_config)
    detector.params["head.cls.bias"] = np.zeros(7, dtype=np.float32)
    save_checkpoint(detector, tmp_path / "odd.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "odd.ckpt")
