"""Binary record / dataset / PGM round-trips and failure modes."""

import struct

import numpy as np
import pytest

from moesr.dataio import (CKPT_MAGIC, DATA_MAGIC, load_split, read_manifest,
                          read_pgm, read_records, write_dataset, write_pgm,
                          write_records)


def test_records_round_trip(tmp_path, rng):
    path = tmp_path / "r.bin"
    recs = {
        "a": rng.standard_normal((3, 4)).astype(np.float32).astype(np.float64),
        "b": np.array(2.5),
        "long/nested.name": np.arange(6.0).reshape(1, 2, 3),
    }
    write_records(path, DATA_MAGIC, recs)
    back = read_records(path, DATA_MAGIC)
    assert list(back) == list(recs)  # insertion order preserved
    for k in recs:
        np.testing.assert_allclose(back[k], recs[k], atol=1e-7)
        assert back[k].shape == np.asarray(recs[k]).shape


def test_payload_is_float32_quantized(tmp_path):
    path = tmp_path / "q.bin"
    x = np.array([1.0 + 1e-12, np.pi])
    write_records(path, DATA_MAGIC, {"x": x})
    back = read_records(path, DATA_MAGIC)["x"]
    np.testing.assert_array_equal(back, x.astype(np.float32).astype(np.float64))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.bin"
    write_records(path, DATA_MAGIC, {"x": np.ones(2)})
    with pytest.raises(ValueError, match="bad magic"):
        read_records(path, CKPT_MAGIC)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.bin"
    write_records(path, DATA_MAGIC, {"x": np.ones((8, 8))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(ValueError, match="truncated"):
        read_records(path, DATA_MAGIC)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "v.bin"
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<I", 999))
    with pytest.raises(ValueError, match="version"):
        read_records(path, DATA_MAGIC)


def test_dataset_round_trip(tmp_path, rng):
    pairs = {s: {"hr": rng.random((8, 8)), "lr": rng.random((4, 4)),
                 "bias": np.ones((8, 8)), "warp": np.zeros((2, 8, 8))}
             for s in (11, 22, 33)}
    splits = {"train": [11, 22], "val": [33]}
    write_dataset(tmp_path, {"hr_size": 8}, pairs, splits)

    man = read_manifest(tmp_path)
    assert man["spec"]["hr_size"] == 8
    assert man["splits"] == {"train": [11, 22], "val": [33]}

    seeds, recs = load_split(tmp_path, "train")
    assert seeds == [11, 22]
    np.testing.assert_allclose(recs[0]["hr"], pairs[11]["hr"], atol=1e-7)
    np.testing.assert_allclose(recs[1]["lr"], pairs[22]["lr"], atol=1e-7)

    with pytest.raises(KeyError):
        load_split(tmp_path, "test")


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 48).reshape(6, 8)
    path = tmp_path / "i.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == (6, 8)
    # 8-bit quantization error bound
    assert np.max(np.abs(back * 255 - np.rint(img * 255))) < 0.5 + 1e-9
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.ones((2, 2, 2)))


def test_pgm_rejects_other_formats(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(ValueError, match="binary PGM"):
        read_pgm(p)
