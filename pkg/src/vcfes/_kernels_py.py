"""Pure numpy implementations of the hot kernels.

Signatures mirror ``_kernels.pyx`` exactly; ``vcfes.kernels`` picks one
at import time.
"""
import numpy as np

DEGENERATE_DISTANCE = 2.0


def space_distances(query, gallery):
    """Per-space L2 distances between one query and every gallery entry.

    query: (4, d) float64; gallery: (N, 4, d) float32 or float64.
    Returns (N, 4) float64. An all-zero vector on either side scores 2.0.
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery)
    diff = gallery.astype(np.float64) - query[None, :, :]
    out = np.sqrt(np.einsum("nsd,nsd->ns", diff, diff))
    q_dead = ~np.any(query != 0.0, axis=1)
    g_dead = ~np.any(gallery != 0.0, axis=2)
    out[g_dead | q_dead[None, :]] = DEGENERATE_DISTANCE
    return out


def fuse(dists, weights):
    """Weighted sum of per-space distances, halved.

    dists: (N, 4) with columns global/front/side/rear; weights: (N, 3)
    per-side weights for front/side/rear.
    """
    dists = np.asarray(dists, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return (dists[:, 0] + dists[:, 1] * weights[:, 0]
            + dists[:, 2] * weights[:, 1] + dists[:, 3] * weights[:, 2]) / 2.0


def pairwise_distances(vectors):
    """Exact (N, N) Euclidean distance matrix of row vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    diff = vectors[:, None, :] - vectors[None, :, :]
    return np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))


def batch_hard(dist, labels, valid=None):
    """Hardest positive and hardest negative column per anchor row.

    Only columns flagged in ``valid`` (default: all) are candidates. Ties
    resolve to the lowest index. Returns two int64 arrays; -1 marks an
    anchor without a positive or without a negative.
    """
    dist = np.asarray(dist, dtype=np.float64)
    labels = np.asarray(labels)
    n = dist.shape[0]
    cand = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool) & cand[None, :]
    neg_mask = ~same & cand[None, :]
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    pos[~pos_mask.any(axis=1)] = -1
    neg[~neg_mask.any(axis=1)] = -1
    return pos.astype(np.int64), neg.astype(np.int64)
