"""Checkpoint round-trip and corruption handling."""

import numpy as np
import pytest

from flexdepth.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from flexdepth.model import ModelConfig, init_params

CONFIG = ModelConfig(enc_layers=3, dec_layers=2, width=16, heads=2,
                     ffn_width=20, vocab_size=10, max_len=14)


def test_round_trip_is_bit_exact(tmp_path):
    params = init_params(CONFIG, seed=11)
    meta = {"step": 250, "seed": 11, "note": "unit", "loss": 0.125}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, CONFIG, params, meta)

    config, loaded, metadata = load_checkpoint(path)
    assert config == CONFIG
    assert metadata == meta
    assert loaded.equal(params)
    for name, v in loaded.items():
        assert v.dtype == np.float64
        np.testing.assert_array_equal(v, params[name])


def test_save_is_deterministic(tmp_path):
    params = init_params(CONFIG, seed=1)
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, CONFIG, params, {"k": 1})
    save_checkpoint(b, CONFIG, params, {"k": 1})
    assert a.read_bytes() == b.read_bytes()


def test_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    params = init_params(CONFIG, seed=0)
    save_checkpoint(path, CONFIG, params, {})
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_truncated_payload(tmp_path):
    path = tmp_path / "cut.ckpt"
    params = init_params(CONFIG, seed=0)
    save_checkpoint(path, CONFIG, params, {})
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 64])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_truncated_header(tmp_path):
    path = tmp_path / "stub.ckpt"
    path.write_bytes(MAGIC + b"\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_corrupt_header_json(tmp_path):
    path = tmp_path / "garbled.ckpt"
    params = init_params(CONFIG, seed=0)
    save_checkpoint(path, CONFIG, params, {})
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC) + 8] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.ckpt")
