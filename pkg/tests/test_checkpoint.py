"""Checkpoint container: bit-exact round-trips and distinct corruption errors."""

import json

import numpy as np
import pytest

from qforget.checkpoint import (ModelConfig, load_checkpoint, save_checkpoint)
from qforget.errors import ChecksumError, SchemaError
from qforget.model import init_model

CFG = ModelConfig(vocab_size=13, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                  context_len=8, seed=5)


def make(tmp_path):
    ck = init_model(CFG)
    ck.provenance = "target"
    stem = tmp_path / "ck"
    save_checkpoint(ck, stem)
    return ck, stem


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        ck, stem = make(tmp_path)
        loaded = load_checkpoint(stem)
        assert loaded.provenance == "target"
        assert loaded.config == CFG
        for name in ck.params:
            assert loaded.params[name].dtype == np.float64
            assert np.array_equal(loaded.params[name], ck.params[name])
            assert loaded.params[name].tobytes() == ck.params[name].tobytes()

    def test_save_is_deterministic(self, tmp_path):
        ck, _ = make(tmp_path)
        save_checkpoint(ck, tmp_path / "a")
        save_checkpoint(ck, tmp_path / "b")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestCorruption:
    def test_truncated_blob_is_checksum_error(self, tmp_path):
        _, stem = make(tmp_path)
        blob = stem.with_suffix(".bin").read_bytes()
        stem.with_suffix(".bin").write_bytes(blob[:-16])
        with pytest.raises(ChecksumError):
            load_checkpoint(stem)

    def test_flipped_byte_is_checksum_error(self, tmp_path):
        _, stem = make(tmp_path)
        blob = bytearray(stem.with_suffix(".bin").read_bytes())
        blob[10] ^= 0xFF
        stem.with_suffix(".bin").write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_checkpoint(stem)

    def test_wrong_shape_is_schema_error_naming_parameter(self, tmp_path):
        ck, stem = make(tmp_path)
        # rewrite with a wrong-shaped parameter but a consistent checksum
        bad = ck.copy()
        bad.params["block0.attn_q"] = bad.params["block0.attn_q"][:4]
        from qforget.checkpoint import _write_container
        _write_container(stem, bad.params, {
            "kind": "checkpoint", "config": CFG.to_dict(), "provenance": ""})
        with pytest.raises(SchemaError, match="block0.attn_q"):
            load_checkpoint(stem)

    def test_missing_parameter_is_schema_error(self, tmp_path):
        ck, stem = make(tmp_path)
        bad = ck.copy()
        del bad.params["lm_head"]
        from qforget.checkpoint import _write_container
        _write_container(stem, bad.params, {
            "kind": "checkpoint", "config": CFG.to_dict(), "provenance": ""})
        with pytest.raises(SchemaError):
            load_checkpoint(stem)

    def test_manifest_is_valid_json_with_crc(self, tmp_path):
        _, stem = make(tmp_path)
        manifest = json.loads(stem.with_suffix(".json").read_text())
        assert manifest["kind"] == "checkpoint"
        assert isinstance(manifest["crc32"], int)
        names = [e["name"] for e in manifest["params"]]
        assert names == sorted(names, key=names.index)  # manifest order preserved
        offsets = [e["offset"] for e in manifest["params"]]
        assert offsets == sorted(offsets)
