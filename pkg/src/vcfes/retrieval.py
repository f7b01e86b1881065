"""Gallery index and viewpoint-conditioned fused-distance ranking."""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (DimensionMismatch, DuplicateImageId, FormatMismatch,
                     IoFailure, MalformedFile)
from .heads import SPACES, PerSpaceEmbeddings
from .masks import AreaRatios

COMBINE_MODES = ("query_only", "min_pair")
FUSION_MODES = ("global_only", "largest_view", "all_views")
INDEX_MAGIC = b"VCIX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_MIN_CHUNK = 256


@dataclass(frozen=True)
class GalleryEntry:
    identity: int
    image_id: str
    spaces: PerSpaceEmbeddings
    area_ratios: AreaRatios


@dataclass(frozen=True)
class DistanceBreakdown:
    d_global: float
    d_front: float
    d_side: float
    d_rear: float
    fused: float

    @classmethod
    def from_row(cls, dists, fused):
        return cls(*(float(v) for v in dists), float(fused))


@dataclass(frozen=True)
class RankedHit:
    image_id: str
    identity: int
    distances: DistanceBreakdown


def space_distance(a, b):
    """L2 distance between two unit vectors; 2.0 if either is all-zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"vector shapes {a.shape} and {b.shape} differ")
    if not a.any() or not b.any():
        return kernels.DEGENERATE_DISTANCE
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _check_combine(combine):
    if combine not in COMBINE_MODES:
        raise ValueError(f"combine must be one of {COMBINE_MODES}, got {combine!r}")


def side_weights(query_ar, entry_ratios, combine="query_only", mode="all_views"):
    """(N, 3) front/side/rear weights for every gallery entry.

    ``mode`` selects the ablation: ``global_only`` zeroes every side,
    ``largest_view`` keeps only the query's largest side at weight 1
    (ties go to front, then side, then rear).
    """
    query_ar = np.asarray(query_ar, dtype=np.float64)
    entry_ratios = np.asarray(entry_ratios, dtype=np.float64).reshape(-1, 3)
    n = entry_ratios.shape[0]
    if mode == "global_only":
        return np.zeros((n, 3))
    if mode == "largest_view":
        weights = np.zeros((n, 3))
        if query_ar.max() > 0:
            weights[:, int(np.argmax(query_ar))] = 1.0
        return weights
    if mode != "all_views":
        raise ValueError(f"mode must be one of {FUSION_MODES}, got {mode!r}")
    _check_combine(combine)
    if combine == "query_only":
        return np.broadcast_to(query_ar, (n, 3)).copy()
    return np.minimum(query_ar[None, :], entry_ratios)


def fused_distance(query_spaces, query_ar, entry, combine="query_only"):
    if query_spaces.dim != entry.spaces.dim:
        raise DimensionMismatch(
            f"query d={query_spaces.dim} but gallery entry d={entry.spaces.dim}")
    dists = np.array([space_distance(query_spaces.vectors[s], entry.spaces.vectors[s])
                      for s in range(len(SPACES))])
    weights = side_weights(query_ar.as_array(), entry.area_ratios.as_array(), combine)
    return DistanceBreakdown.from_row(dists, kernels.fuse(dists[None], weights)[0])


class GalleryIndex:
    """Immutable exhaustive-search gallery.

    Embeddings are stored as float32 (the on-disk precision) and area
    ratios as float64.
    """

    def __init__(self, identities, image_ids, vectors, ratios, dim=None):
        self.identities = np.asarray(identities, dtype=np.int64).reshape(-1)
        self.image_ids = list(image_ids)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.size == 0:
            vectors = vectors.reshape(0, len(SPACES), dim or 0)
        self.vectors = np.ascontiguousarray(vectors)
        self.ratios = np.ascontiguousarray(ratios, dtype=np.float64).reshape(-1, 3)
        self.dim = int(self.vectors.shape[2]) if dim is None else int(dim)
        n = len(self.image_ids)
        if (self.identities.shape[0] != n or self.vectors.shape[0] != n
                or self.ratios.shape[0] != n):
            raise DimensionMismatch("gallery arrays disagree on entry count")
        if self.vectors.shape[1:] != (len(SPACES), self.dim):
            raise DimensionMismatch(f"gallery vectors must be (N, 4, {self.dim})")
        seen = set()
        for image_id in self.image_ids:
            if image_id in seen:
                raise DuplicateImageId(f"image_id {image_id!r} appears twice")
            seen.add(image_id)
        order = sorted(range(n), key=self.image_ids.__getitem__)
        self._id_rank = np.empty(n, dtype=np.int64)
        self._id_rank[order] = np.arange(n)
        for array in (self.identities, self.vectors, self.ratios, self._id_rank):
            array.setflags(write=False)

    def __len__(self):
        return len(self.image_ids)

    @property
    def roster(self):
        return sorted(set(self.identities.tolist()))

    def entry(self, i):
        return GalleryEntry(int(self.identities[i]), self.image_ids[i],
                            PerSpaceEmbeddings(self.vectors[i]),
                            AreaRatios.from_array(self.ratios[i]))

    @property
    def entries(self):
        return [self.entry(i) for i in range(len(self))]

    def rank_order(self, fused):
        """Indices sorted by fused distance, ties by image_id."""
        return np.lexsort((self._id_rank, np.asarray(fused)))


def build_index(entries, dim=None):
    entries = list(entries)
    if not entries:
        return GalleryIndex([], [], np.zeros((0, len(SPACES), dim or 0)), np.zeros((0, 3)),
                            dim=dim or 0)
    dims = {e.spaces.dim for e in entries}
    if len(dims) != 1 or (dim is not None and dims != {dim}):
        raise DimensionMismatch(f"entries disagree on embedding dim: {sorted(dims)}")
    return GalleryIndex(
        [e.identity for e in entries],
        [e.image_id for e in entries],
        np.stack([e.spaces.vectors for e in entries]),
        np.stack([e.area_ratios.as_array() for e in entries]),
    )


def save_index(index, path):
    chunks = [_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, len(index), index.dim)]
    for i in range(len(index)):
        raw_id = index.image_ids[i].encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise ValueError(f"image_id too long: {index.image_ids[i][:40]}...")
        chunks.append(struct.pack("<IH", int(index.identities[i]), len(raw_id)))
        chunks.append(raw_id)
        chunks.append(np.ascontiguousarray(index.vectors[i], dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(index.ratios[i], dtype="<f8").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write index {path}: {exc}") from exc


def load_index(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read index {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise MalformedFile(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(data)
    if magic != INDEX_MAGIC:
        raise MalformedFile(f"{path}: bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise FormatMismatch(f"{path}: index version {version}, expected {INDEX_VERSION}")
    pos = _HEADER.size
    vec_bytes = 4 * len(SPACES) * dim
    identities, image_ids, vectors, ratios = [], [], [], []
    try:
        for _ in range(count):
            identity, id_len = struct.unpack_from("<IH", data, pos)
            pos += 6
            image_ids.append(data[pos:pos + id_len].decode("utf-8"))
            pos += id_len
            if pos + vec_bytes + 24 > len(data):
                raise MalformedFile(f"{path}: truncated entry")
            vectors.append(np.frombuffer(data, "<f4", len(SPACES) * dim, pos)
                           .reshape(len(SPACES), dim))
            pos += vec_bytes
            ratios.append(np.frombuffer(data, "<f8", 3, pos))
            pos += 24
            identities.append(identity)
    except (struct.error, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if pos != len(data):
        raise MalformedFile(f"{path}: {len(data) - pos} trailing bytes")
    if not count:
        return GalleryIndex([], [], np.zeros((0, len(SPACES), dim)), np.zeros((0, 3)), dim)
    return GalleryIndex(identities, image_ids, np.stack(vectors), np.stack(ratios), dim)


def gallery_space_distances(index, query_vectors, threads=None):
    """(N, 4) per-space distances, scanned in ordered chunks across threads."""
    query_vectors = np.asarray(query_vectors, dtype=np.float64)
    if query_vectors.shape != (len(SPACES), index.dim):
        raise DimensionMismatch(
            f"query embeddings {query_vectors.shape} vs gallery d={index.dim}")
    n = len(index)
    threads = kernels.thread_count() if threads is None else max(1, int(threads))
    chunks = min(threads, max(1, n // _MIN_CHUNK))
    if chunks <= 1:
        return kernels.space_distances(query_vectors, index.vectors)
    bounds = np.linspace(0, n, chunks + 1).astype(int)
    with ThreadPoolExecutor(max_workers=chunks) as pool:
        parts = list(pool.map(
            lambda lo_hi: kernels.space_distances(query_vectors,
                                                  index.vectors[lo_hi[0]:lo_hi[1]]),
            zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts, axis=0)


def score_gallery(index, query_spaces, query_ar, combine="query_only", mode="all_views",
                  threads=None):
    """Per-space and fused distances from one query to every gallery entry."""
    dists = gallery_space_distances(index, query_spaces.vectors, threads)
    weights = side_weights(query_ar.as_array(), index.ratios, combine, mode)
    return dists, kernels.fuse(dists, weights)


def query_topk(index, query_spaces, query_ar, k=10, combine="query_only", mode="all_views",
               threads=None):
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    dists, fused = score_gallery(index, query_spaces, query_ar, combine, mode, threads)
    order = index.rank_order(fused)[:k]
    return [RankedHit(index.image_ids[i], int(index.identities[i]),
                      DistanceBreakdown.from_row(dists[i], fused[i]))
            for i in order]
