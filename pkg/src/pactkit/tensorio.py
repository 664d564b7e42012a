"""Binary tensor container and dataset manifest I/O.

One container format serves measurement tensors, volumes, and model
checkpoints. Layout, all integers little-endian:

    bytes 0..7    magic "PACTTNS1"
    u32           ndim
    ndim x u64    dims
    u32           dtype code (1 = IEEE float32 LE)
    payload       prod(dims) * 4 bytes, row-major
    [u64 + bytes] optional UTF-8 metadata block preceded by its byte length

Metadata is JSON when written by this package; readers treat it as an
opaque string. Multi-tensor files (checkpoints) store one flat payload
and record name/shape/offset triples in the metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PACTTNS1"
DTYPE_F32 = 1

__all__ = [
    "TensorFileError",
    "write_tensor",
    "read_tensor",
    "write_named_tensors",
    "read_named_tensors",
    "ManifestRecord",
    "Manifest",
    "write_manifest",
    "read_manifest",
]


class TensorFileError(Exception):
    """Raised for malformed tensor files."""


def write_tensor(path, array, metadata: dict | None = None) -> None:
    """Write an array as float32 in the container format."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<I", DTYPE_F32))
        fh.write(arr.tobytes())
        if metadata is not None:
            blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFileError(f"truncated tensor file: {what} cut short")
    return buf


def read_tensor(path, mmap: bool = False):
    """Read a container file; returns (array, metadata dict or None).

    With mmap=True the payload is returned as a read-only memory map,
    avoiding a full load for patch-wise access.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise TensorFileError(f"bad magic {magic!r}, not a tensor file")
        ndim = struct.unpack("<I", _read_exact(fh, 4, "header"))[0]
        dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "dims"))
        code = struct.unpack("<I", _read_exact(fh, 4, "dtype"))[0]
        if code != DTYPE_F32:
            raise TensorFileError(f"unsupported dtype code {code}")
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
        offset = fh.tell()
        if mmap:
            fh.seek(0, 2)
            if fh.tell() - offset < n_bytes:
                raise TensorFileError("truncated tensor file: payload cut short")
            arr = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=tuple(dims))
            fh.seek(offset + n_bytes)
        else:
            buf = _read_exact(fh, n_bytes, "payload")
            arr = np.frombuffer(buf, dtype="<f4").reshape(dims)
        meta = None
        head = fh.read(8)
        if head:
            if len(head) != 8:
                raise TensorFileError("truncated tensor file: metadata length cut short")
            m_len = struct.unpack("<Q", head)[0]
            meta = json.loads(_read_exact(fh, m_len, "metadata").decode("utf-8"))
    return arr, meta


def write_named_tensors(path, tensors: dict, header: dict | None = None) -> None:
    """Write named arrays into one container (used for model checkpoints)."""
    names = list(tensors)
    flats = [np.asarray(tensors[n], dtype="<f4").ravel() for n in names]
    offsets = np.concatenate([[0], np.cumsum([f.size for f in flats])])
    meta = {
        "tensors": [
            {"name": n, "shape": list(np.asarray(tensors[n]).shape), "offset": int(offsets[i])}
            for i, n in enumerate(names)
        ],
        "header": header or {},
    }
    payload = np.concatenate(flats) if flats else np.zeros(0, dtype="<f4")
    write_tensor(path, payload, meta)


def read_named_tensors(path) -> tuple[dict, dict]:
    """Inverse of write_named_tensors; returns (tensors, header)."""
    flat, meta = read_tensor(path)
    if not meta or "tensors" not in meta:
        raise TensorFileError("file carries no named-tensor metadata")
    out = {}
    for rec in meta["tensors"]:
        shape = tuple(rec["shape"])
        n = int(np.prod(shape)) if shape else 1
        off = int(rec["offset"])
        out[rec["name"]] = np.array(flat[off : off + n]).reshape(shape)
    return out, meta.get("header", {})


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    split: str
    input_path: str
    target_path: str


@dataclass
class Manifest:
    """Dataset index: records plus the generation config snapshot and seed."""

    root: Path
    records: list[ManifestRecord] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def ids(self, split: str | None = None) -> list[str]:
        return [r.id for r in self.records if split is None or r.split == split]

    def record(self, sample_id: str) -> ManifestRecord:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(sample_id)

    def input_file(self, sample_id: str) -> Path:
        return self.root / self.record(sample_id).input_path

    def target_file(self, sample_id: str) -> Path:
        return self.root / self.record(sample_id).target_path


def write_manifest(manifest: Manifest, path) -> None:
    lines = [f"# {k} = {v}" for k, v in manifest.header.items()]
    lines += [
        f"{r.id}\t{r.split}\t{r.input_path}\t{r.target_path}" for r in manifest.records
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    header: dict = {}
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                header[k.strip()] = v.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"malformed manifest line: {line!r}")
        records.append(ManifestRecord(*parts))
    return Manifest(root=path.parent, records=records, header=header)
