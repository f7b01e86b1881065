"""File-level glue between the on-disk dataset and the in-memory modules."""
from __future__ import annotations

import logging
import os

import numpy as np

from .errors import DimensionMismatch, EmptyForeground, IoFailure, MalformedFile
from .evaluation import QueryItem
from .formats import read_embeddings, read_manifest
from .heads import PerSpaceEmbeddings, project_batch
from .masks import AreaRatios, area_ratios_from_files
from .retrieval import GalleryEntry, build_index
from .training import TrainingSample

log = logging.getLogger(__name__)


def dataset_paths(directory, split):
    return {"manifest": os.path.join(directory, f"{split}.csv"),
            "embeddings": os.path.join(directory, "embeddings.vcfe"),
            "masks": os.path.join(directory, "masks")}


def require_paths(**paths):
    """Fail before any computation if an input path is missing."""
    for name, path in paths.items():
        if path is None:
            raise IoFailure(f"no {name} path given")
        if not os.path.exists(path):
            raise IoFailure(f"{name} path does not exist: {path}")


def load_samples(manifest, embeddings, masks):
    """TrainingSample list for a manifest; crops with an empty foreground are skipped."""
    records = read_manifest(manifest)
    table = read_embeddings(embeddings)
    samples = []
    for rec in records:
        if not 0 <= rec.embedding_index < table.shape[0]:
            raise MalformedFile(
                f"{manifest}: embedding_index {rec.embedding_index} out of range")
        try:
            ratios = area_ratios_from_files(masks, rec.mask_stem)
        except EmptyForeground:
            log.warning("skipping %s: empty foreground mask", rec.image_id)
            continue
        samples.append(TrainingSample(table[rec.embedding_index], rec.identity,
                                      ratios.as_array(), rec.image_id))
    return samples


def embed_samples(samples, heads):
    if not samples:
        return np.zeros((0, 4, heads.embed_dim))
    x = np.stack([np.asarray(s.embedding, dtype=np.float64) for s in samples])
    if x.shape[1] != heads.input_dim:
        raise DimensionMismatch(
            f"embeddings have D={x.shape[1]} but checkpoint expects D={heads.input_dim}")
    return project_batch(x, heads)


def gallery_from_samples(samples, heads):
    vectors = embed_samples(samples, heads)
    entries = [GalleryEntry(s.identity, s.image_id,
                            PerSpaceEmbeddings(vectors[i].astype(np.float32)),
                            AreaRatios.from_array(s.area_ratios))
               for i, s in enumerate(samples)]
    return build_index(entries, dim=heads.embed_dim)


def queries_from_samples(samples, heads):
    vectors = embed_samples(samples, heads)
    return [QueryItem(s.image_id, s.identity, PerSpaceEmbeddings(vectors[i]),
                      AreaRatios.from_array(s.area_ratios))
            for i, s in enumerate(samples)]
