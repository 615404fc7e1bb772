import numpy as np
import pytest

from spike2.serial import (
    ContainerError,
    load_checkpoint,
    load_tensors,
    pack_tensors,
    parse_manifest,
    save_checkpoint,
    save_tensors,
    unpack_tensors,
)


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4, 5)),
        "empty-ish": np.array([1e-300, -0.0, np.pi]),
        "scalar2d": rng.normal(size=(1, 1)),
    }
    path = tmp_path / "t.bin"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == np.asarray(tensors[k]).shape
        assert back[k].tobytes() == np.ascontiguousarray(tensors[k], dtype=np.float64).tobytes()


def test_bad_magic_rejected():
    blob = pack_tensors({"x": np.zeros((2, 2))})
    with pytest.raises(ContainerError):
        unpack_tensors(b"XXXXXXXX" + blob[8:])


def test_truncation_rejected():
    blob = pack_tensors({"x": np.zeros((2, 2))})
    with pytest.raises(ContainerError):
        unpack_tensors(blob[:-4])


def test_trailing_garbage_rejected():
    blob = pack_tensors({"x": np.zeros((2, 2))})
    with pytest.raises(ContainerError):
        unpack_tensors(blob + b"\x00")


def test_checkpoint_crc_catches_byte_flip(tmp_path):
    ckpt = tmp_path / "ck"
    save_checkpoint(ckpt, {"w": np.arange(6, dtype=float).reshape(2, 3)}, {"note": "x"})
    tensors, manifest = load_checkpoint(ckpt)
    assert manifest["note"] == "x"
    np.testing.assert_array_equal(tensors["w"], np.arange(6).reshape(2, 3))

    raw = bytearray((ckpt / "weights.bin").read_bytes())
    raw[-3] ^= 0x40  # flip one bit inside tensor data
    (ckpt / "weights.bin").write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load_checkpoint(ckpt)


def test_manifest_parse_errors():
    with pytest.raises(ContainerError):
        parse_manifest("just a line without equals")
    entries = parse_manifest("# comment\n\na=1\nb = two \n")
    assert entries == {"a": "1", "b": "two"}
