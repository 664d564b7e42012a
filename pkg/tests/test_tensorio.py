"""Binary tensor container and dataset manifest round trips."""
from __future__ import annotations

import numpy as np
import pytest

from pactkit.tensorio import (
    Manifest,
    ManifestRecord,
    TensorFileError,
    read_manifest,
    read_named_tensors,
    read_tensor,
    write_manifest,
    write_named_tensors,
    write_tensor,
)


class TestTensorRoundTrip:
    def test_payload_bit_identical(self, tmp_path):
        """Write-then-read returns the float32 payload bit for bit."""
        rng = np.random.default_rng(0)
        original = rng.normal(size=(3, 4, 5)).astype(np.float64)
        path = tmp_path / "t.tns"
        write_tensor(path, original)
        loaded, meta = read_tensor(path)
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded, original.astype("<f4"))
        assert meta is None

    def test_metadata_round_trip(self, tmp_path):
        path = tmp_path / "t.tns"
        meta_in = {"id": "s0001", "noise_sigma": 0.25, "kind": "rect"}
        write_tensor(path, np.ones((2, 2)), metadata=meta_in)
        _, meta_out = read_tensor(path)
        assert meta_out == meta_in

    def test_mmap_matches_load(self, tmp_path):
        rng = np.random.default_rng(1)
        original = rng.normal(size=(4, 6, 8))
        path = tmp_path / "t.tns"
        write_tensor(path, original, metadata={"k": 1})
        eager, meta_e = read_tensor(path)
        lazy, meta_l = read_tensor(path, mmap=True)
        np.testing.assert_array_equal(np.asarray(lazy), eager)
        assert meta_e == meta_l

    def test_one_dimensional(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.arange(7, dtype=np.float32))
        loaded, _ = read_tensor(path)
        np.testing.assert_array_equal(loaded, np.arange(7, dtype=np.float32))


class TestTensorErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones((2, 2)))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFileError, match="bad magic"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones((8, 8)))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(TensorFileError, match="truncated"):
            read_tensor(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones((8, 8)))
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(TensorFileError, match="truncated"):
            read_tensor(path)

    def test_errors_are_distinct(self, tmp_path):
        """Corrupt-magic and short-file failures carry different messages."""
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones(4))
        raw = path.read_bytes()
        path.write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(TensorFileError) as magic_err:
            read_tensor(path)
        path.write_bytes(raw[:12])
        with pytest.raises(TensorFileError) as trunc_err:
            read_tensor(path)
        assert str(magic_err.value) != str(trunc_err.value)


class TestNamedTensors:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        tensors = {
            "weight": rng.normal(size=(3, 5)).astype(np.float32),
            "bias": rng.normal(size=(5,)).astype(np.float32),
            "scalar": np.float32(2.5),
        }
        header = {"k": 16, "kind": "synthesis"}
        path = tmp_path / "ckpt.tns"
        write_named_tensors(path, tensors, header)
        loaded, header_out = read_named_tensors(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(
                loaded[name], np.asarray(tensors[name], dtype=np.float32)
            )
        assert header_out == header

    def test_plain_tensor_rejected(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor(path, np.ones(3))
        with pytest.raises(TensorFileError, match="named-tensor"):
            read_named_tensors(path)


class TestManifest:
    def build(self, root):
        records = [
            ManifestRecord("s0000", "train", "tensors/s0000_rect.tns",
                           "tensors/s0000_point.tns"),
            ManifestRecord("s0001", "val", "tensors/s0001_rect.tns",
                           "tensors/s0001_point.tns"),
            ManifestRecord("s0002", "test", "tensors/s0002_rect.tns",
                           "tensors/s0002_point.tns"),
        ]
        header = {"seed": "7", "n": "3", "noise_fraction": "0.0267"}
        return Manifest(root=root, records=records, header=header)

    def test_round_trip(self, tmp_path):
        manifest = self.build(tmp_path)
        path = tmp_path / "manifest.tsv"
        write_manifest(manifest, path)
        loaded = read_manifest(path)
        assert loaded.records == manifest.records
        assert loaded.header == manifest.header
        assert loaded.root == tmp_path

    def test_split_ids(self, tmp_path):
        manifest = self.build(tmp_path)
        assert manifest.ids() == ["s0000", "s0001", "s0002"]
        assert manifest.ids("train") == ["s0000"]
        assert manifest.ids("val") == ["s0001"]
        assert manifest.ids("test") == ["s0002"]

    def test_file_paths(self, tmp_path):
        manifest = self.build(tmp_path)
        assert manifest.input_file("s0001") == tmp_path / "tensors/s0001_rect.tns"
        assert manifest.target_file("s0001") == tmp_path / "tensors/s0001_point.tns"

    def test_unknown_id(self, tmp_path):
        with pytest.raises(KeyError):
            self.build(tmp_path).record("s9999")

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("s0000\ttrain\tonly_three_fields\n")
        with pytest.raises(ValueError, match="malformed"):
            read_manifest(path)
