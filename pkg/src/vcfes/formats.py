"""On-disk formats for backbone embeddings and dataset manifests."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatMismatch, IoFailure, MalformedFile

EMBEDDINGS_MAGIC = b"VCFE"
EMBEDDINGS_VERSION = 1
_EMB_HEADER = struct.Struct("<4sHII")


def write_embeddings(path, embeddings):
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    n, dim = embeddings.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_EMB_HEADER.pack(EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION, n, dim))
            fh.write(np.ascontiguousarray(embeddings, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_embeddings(path):
    """Return an (N, D) float32 array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(data) < _EMB_HEADER.size:
        raise MalformedFile(f"{path}: truncated header")
    magic, version, n, dim = _EMB_HEADER.unpack_from(data)
    if magic != EMBEDDINGS_MAGIC:
        raise MalformedFile(f"{path}: bad magic {magic!r}")
    if version != EMBEDDINGS_VERSION:
        raise FormatMismatch(f"{path}: embeddings version {version}")
    payload = data[_EMB_HEADER.size:]
    if len(payload) != 4 * n * dim:
        raise MalformedFile(f"{path}: payload {len(payload)} bytes, expected {4 * n * dim}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, dim).astype(np.float32)


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    identity: int
    embedding_index: int
    mask_stem: str


def write_manifest(path, records):
    lines = [f"{r.image_id},{r.identity},{r.embedding_index},{r.mask_stem}\n"
             for r in records]
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedFile(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            records.append(ManifestRecord(parts[0], int(parts[1]), int(parts[2]), parts[3]))
        except ValueError:
            raise MalformedFile(f"{path}:{lineno}: non-integer identity or index") from None
    return records
