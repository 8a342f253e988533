import struct

import numpy as np
import pytest

from volscan.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from volscan.errors import (BadMagicError, ManifestMismatchError, TruncatedError, UnknownArchitectureError,
                            VersionError)
from volscan.models import ModelConfig, make_model

DIMS = (8, 16, 16)


@pytest.fixture
def trained(tmp_path):
    m = make_model("convlstm", DIMS, seed=3)
    rng = np.random.default_rng(0)
    m.forward(rng.random((2,) + DIMS).astype(np.float32), train=True)
    path = tmp_path / "ck.vsck"
    save_checkpoint(m, path)
    return m, path


def test_header_layout(trained):
    _, path = trained
    data = path.read_bytes()
    assert data[:4] == bytes([0x56, 0x53, 0x43, 0x4B])
    version, block_len = struct.unpack("<HI", data[4:10])
    assert version == 1
    assert data[10:10 + block_len].decode() == "model=convlstm\nfilters=32,32,64,64\ninput_dims=8,16,16\nseed=3\n"


@pytest.mark.parametrize("kind", ["convlstm", "mil-product", "cnn3d"])
def test_round_trip_bitwise(tmp_path, kind):
    m = make_model(kind, DIMS, seed=1)
    rng = np.random.default_rng(1)
    m.forward(rng.random((2,) + DIMS).astype(np.float32), train=True)
    save_checkpoint(m, tmp_path / "a.vsck")
    m2 = load_checkpoint(tmp_path / "a.vsck")
    for a, b in zip(m.params(), m2.params()):
        assert a.name == b.name
        np.testing.assert_array_equal(a.value, b.value)
    for (_, a), (_, b) in zip(m.stats(), m2.stats()):
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.var, b.var)
        assert a.count == b.count
    x = rng.random((3,) + DIMS).astype(np.float32)
    np.testing.assert_array_equal(m.predict(x), m2.predict(x))
    assert checkpoint_bytes(m2) == (tmp_path / "a.vsck").read_bytes()


def test_bad_magic(trained, tmp_path):
    _, path = trained
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)


def test_bad_version(trained, tmp_path):
    _, path = trained
    data = bytearray(path.read_bytes())
    data[4:6] = struct.pack("<H", 2)
    bad = tmp_path / "bad"
    bad.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        load_checkpoint(bad)


@pytest.mark.parametrize("cut", [3, 20, 200, -1, -1000])
def test_truncated(trained, tmp_path, cut):
    _, path = trained
    data = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(data[:cut])
    with pytest.raises((TruncatedError, BadMagicError)):
        load_checkpoint(bad)


def test_trailing_bytes(trained, tmp_path):
    _, path = trained
    bad = tmp_path / "bad"
    bad.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(TruncatedError, match="trailing"):
        load_checkpoint(bad)


def test_unknown_architecture(trained, tmp_path):
    _, path = trained
    data = path.read_bytes().replace(b"model=convlstm", b"model=convxxxx")
    bad = tmp_path / "bad"
    bad.write_bytes(data)
    with pytest.raises(UnknownArchitectureError):
        load_checkpoint(bad)


def test_other_config_is_a_manifest_mismatch(trained):
    _, path = trained
    with pytest.raises(ManifestMismatchError):
        load_checkpoint(path, expected=ModelConfig("mil-max", DIMS))
    with pytest.raises(ManifestMismatchError):
        load_checkpoint(path, expected=ModelConfig("convlstm", (8, 32, 32)))
    load_checkpoint(path, expected=ModelConfig("convlstm", DIMS))


def test_stats_entries_named(trained):
    _, path = trained
    _, params, stats = parse_checkpoint(path.read_bytes())
    assert stats[0][0] == "unit1.conv1.bn.running_mean"
    assert stats[2][0] == "unit1.conv1.bn.num_batches" and stats[2][1].shape == ()
