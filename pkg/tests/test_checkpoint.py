import json
import struct

import numpy as np
import pytest

from growformer.checkpoint import (
    MAGIC,
    BadMagicError,
    ChecksumError,
    CheckpointError,
    ShapeError,
    VersionMismatchError,
    file_digest,
    load,
    save,
)
from growformer.transformer import DECODER, ModelConfig, param_shapes

from helpers import random_model

CFG = ModelConfig(variant=DECODER, n_layers=2, hidden=16, n_heads=2, d_ff=24, vocab=20, max_seq=8)


def _header(raw: bytes) -> tuple[dict, int]:
    hlen = struct.unpack("<I", raw[8:12])[0]
    return json.loads(raw[12:12 + hlen]), 12 + hlen


def _rewrite_header(raw: bytes, header: dict) -> bytes:
    _, start = _header(raw)
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return raw[:8] + struct.pack("<I", len(body)) + body + raw[start:]


def test_round_trip_is_bitwise(tmp_path):
    params = random_model(CFG, 0)
    save(CFG, params, tmp_path / "m.grwf")
    cfg, back = load(tmp_path / "m.grwf")
    assert cfg == CFG
    assert list(back) == list(param_shapes(CFG))
    for name in params:
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name].view(np.uint32), params[name].view(np.uint32))


def test_layout_fields(tmp_path):
    save(CFG, random_model(CFG, 1), tmp_path / "m.grwf")
    raw = (tmp_path / "m.grwf").read_bytes()
    assert raw[:4] == MAGIC == b"GRWF"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    header, start = _header(raw)
    assert header["config"] == CFG.to_dict()
    last = header["tensors"][-1]
    assert start + last["offset"] + last["nbytes"] == len(raw)


def test_two_saves_are_byte_identical(tmp_path):
    params = random_model(CFG, 2)
    save(CFG, params, tmp_path / "a.grwf")
    save(CFG, {k: v.copy() for k, v in params.items()}, tmp_path / "b.grwf")
    assert file_digest(tmp_path / "a.grwf") == file_digest(tmp_path / "b.grwf")


def test_save_leaves_no_temp_files_and_overwrites(tmp_path):
    save(CFG, random_model(CFG, 3), tmp_path / "m.grwf")
    save(CFG, random_model(CFG, 4), tmp_path / "m.grwf")
    assert [p.name for p in tmp_path.iterdir()] == ["m.grwf"]
    assert np.array_equal(load(tmp_path / "m.grwf")[1]["head.b"], random_model(CFG, 4)["head.b"])


def test_corrupted_payload_byte_fails_checksum(tmp_path):
    path = tmp_path / "m.grwf"
    save(CFG, random_model(CFG, 5), path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x40
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.grwf"
    save(CFG, random_model(CFG, 6), path)
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagicError):
        load(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionMismatchError):
        load(path)


def test_shape_inconsistent_with_config(tmp_path):
    path = tmp_path / "m.grwf"
    save(CFG, random_model(CFG, 7), path)
    raw = path.read_bytes()
    header, _ = _header(raw)
    header["config"]["vocab"] = 21
    path.write_bytes(_rewrite_header(raw, header))
    with pytest.raises(ShapeError):
        load(path)
    header, _ = _header(raw)
    header["tensors"] = header["tensors"][:-1]
    path.write_bytes(_rewrite_header(raw, header))
    with pytest.raises(ShapeError):
        load(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "m.grwf"
    save(CFG, random_model(CFG, 8), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load(path)


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, ChecksumError, ShapeError}
    assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)
