import json

import numpy as np
import pytest

from tfno import dataio
from tfno import ressim as rs
from tfno.dataio import (FormatError, read_checkpoint, read_dataset, read_pgm,
                         write_checkpoint, write_csv, write_dataset, write_pgm)
from tfno.ndtensor import Tensor


@pytest.fixture
def dataset(rng):
    n, c, nx, ny, nt = 3, 8, 8, 8, 4
    return rs.Dataset(
        inputs=rng.random((n, c, nx, ny, nt), dtype=np.float32),
        targets=rng.random((n, 1, nx, ny, nt), dtype=np.float32),
        families=("withdrawal", "injection", "withdrawal"),
        constants={"p_lo": 1e6, "p_hi": 2e7, "logk_lo": -1.0, "logk_hi": 6.0,
                   "q_lo": -2e5, "q_hi": 1e5},
        seed=77,
    )


def test_dataset_roundtrip(tmp_path, dataset):
    path = tmp_path / "d.tfno"
    write_dataset(path, dataset, gen_config={"seed": 77})
    back = read_dataset(path)
    np.testing.assert_array_equal(back.inputs, dataset.inputs)
    np.testing.assert_array_equal(back.targets, dataset.targets)
    assert back.families == dataset.families
    assert back.constants == dataset.constants
    assert back.seed == 77


def test_dataset_magic_and_endianness(tmp_path, dataset):
    path = tmp_path / "d.tfno"
    write_dataset(path, dataset)
    raw = path.read_bytes()
    assert raw[:4] == b"TFNO"
    assert raw[4] == 1
    counts = np.frombuffer(raw[5:29], dtype="<u4")
    assert list(counts) == [3, 8, 8, 4, 8, 1]


def test_dataset_manifest_contents(tmp_path, dataset):
    path = tmp_path / "d.tfno"
    write_dataset(path, dataset, gen_config={"seed": 77})
    manifest = json.loads(dataio.manifest_path(path).read_text())
    assert manifest["seed"] == 77
    assert manifest["family_counts"] == {"withdrawal": 2, "injection": 1}
    assert manifest["family_counts"]["withdrawal"] + manifest["family_counts"]["injection"] == 3
    assert manifest["input_channels"] == list(rs.INPUT_CHANNELS)
    assert "normalization_constants" in manifest


def test_dataset_truncation_detected(tmp_path, dataset):
    path = tmp_path / "d.tfno"
    write_dataset(path, dataset)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises((FormatError, ValueError)):
        read_dataset(path)


def test_dataset_wrong_magic(tmp_path):
    path = tmp_path / "x.tfno"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(FormatError):
        read_dataset(path)


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    params = {
        "w": Tensor(rng.standard_normal((3, 4))),
        "b": Tensor(rng.standard_normal(4)),
        "scalar": Tensor(np.asarray(1.25)),
    }
    echo = {"seed": 1, "operator": {"d_v": 4}}
    path = tmp_path / "m.tfnc"
    write_checkpoint(path, params, echo)
    got_echo, blocks = read_checkpoint(path)
    assert got_echo == echo
    assert set(blocks) == set(params)
    for k in params:
        assert blocks[k].tobytes() == params[k].data.tobytes()
        assert blocks[k].shape == params[k].shape
    assert path.read_bytes()[:4] == b"TFNC"


def test_checkpoint_wrong_magic(tmp_path):
    path = tmp_path / "m.tfnc"
    path.write_bytes(b"TFNO" + bytes(16))
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_csv_rfc4180_quoting(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, ("a", "b"), [("x,y", 'say "hi"'), (1.5, 2)])
    lines = path.read_bytes().decode().split("\r\n")
    assert lines[0] == "a,b"
    assert lines[1] == '"x,y","say ""hi"""'
    assert lines[2] == "1.5,2"


def test_csv_float_repr_roundtrip(tmp_path):
    path = tmp_path / "f.csv"
    val = 0.1234567890123456789
    write_csv(path, ("v",), [(val,)])
    back = float(path.read_bytes().decode().split("\r\n")[1])
    assert back == val


def test_pgm_structure_and_roundtrip(tmp_path, rng):
    field = rng.random((6, 9))
    path = tmp_path / "h.pgm"
    write_pgm(path, field, 0.0, 1.0)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n")
    assert b"65535" in raw
    pix, lo, hi = read_pgm(path)
    assert pix.shape == (6, 9)
    assert (lo, hi) == (0.0, 1.0)
    np.testing.assert_allclose(pix / 65535.0, field, atol=1.0 / 65535)


def test_pgm_constant_field(tmp_path):
    path = tmp_path / "c.pgm"
    write_pgm(path, np.full((3, 3), 0.7))
    pix, lo, hi = read_pgm(path)
    assert lo == hi == 0.7
    assert not pix.any()


def test_pgm_rejects_non_2d():
    with pytest.raises(ValueError):
        write_pgm("/tmp/never.pgm", np.zeros((2, 2, 2)))
