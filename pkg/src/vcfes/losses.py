"""Composite training objective and its analytic gradient.

The objective is ``lambda_id * L_id + lambda_triplet * L_triplet`` where
``L_triplet`` sums batch-hard triplet losses over the four spaces and
``L_id`` is either ArcFace cross-entropy averaged over the spaces or a
softmin over fused distances to per-identity prototypes.

Everything here runs in float64. Gradients are chained by hand through
normalize(W x + b), the hinge, the margin branch and the class-row
normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BadTarget, DegenerateBatch, DimensionMismatch, MissingPrototypes, NonFiniteLoss
from .heads import (ACOS_CLAMP, NORM_FLOOR, SPACES, linear_outputs, margin_cosine,
                    unit_class_weights)

ID_MODES = ("arcface_ce", "softmin_distance")


@dataclass
class Batch:
    embeddings: np.ndarray
    labels: np.ndarray
    ratios: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.ratios = np.asarray(self.ratios, dtype=np.float64).reshape(-1, 3)
        n = self.embeddings.shape[0]
        if self.labels.shape[0] != n or self.ratios.shape[0] != n:
            raise DimensionMismatch("batch arrays disagree on sample count")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class LossReport:
    id_loss: float
    triplet_loss_per_space: tuple
    triplet_loss: float
    total: float

    def as_dict(self):
        return {"id_loss": self.id_loss,
                "triplet_per_space": dict(zip(SPACES, self.triplet_loss_per_space)),
                "triplet_loss": self.triplet_loss,
                "total": self.total}


@dataclass
class Gradients:
    weights: np.ndarray
    biases: np.ndarray
    class_weights: np.ndarray

    def scaled(self, factor):
        return Gradients(self.weights * factor, self.biases * factor,
                         self.class_weights * factor)

    def __add__(self, other):
        return Gradients(self.weights + other.weights, self.biases + other.biases,
                         self.class_weights + other.class_weights)


@dataclass
class _Forward:
    x: np.ndarray
    vectors: np.ndarray
    norms: np.ndarray
    labels: np.ndarray
    ratios: np.ndarray
    mining: list = field(default_factory=list)


def normalize(z):
    norms = np.linalg.norm(z, axis=-1)
    safe = np.maximum(norms, NORM_FLOOR)[..., None]
    return np.where(norms[..., None] < NORM_FLOOR, 0.0, z / safe), norms


def triplet_loss_space(anchor, positive, negative, margin):
    anchor, positive, negative = (np.asarray(v, dtype=np.float64)
                                  for v in (anchor, positive, negative))
    if not anchor.shape == positive.shape == negative.shape:
        raise DimensionMismatch("triplet vectors differ in shape")
    d_ap = np.sqrt(np.sum((anchor - positive) ** 2))
    d_an = np.sqrt(np.sum((anchor - negative) ** 2))
    return float(max(0.0, d_ap - d_an + margin))


def check_pk_batch(labels):
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if ids.size < 2:
        raise DegenerateBatch("batch holds a single identity; no negatives exist")
    if counts.min() < 2:
        raise DegenerateBatch(
            f"identity {ids[np.argmin(counts)]} has a single sample; no positive exists")


def anchor_weights(ratios, space, weighting="uniform"):
    """Per-sample triplet weights for one space.

    ``uniform`` gives every sample weight 1. ``visibility`` keeps weight 1
    in the global space and uses the sample's area ratio of the side in
    the side spaces, so samples that do not show a side drop out of that
    space's triplets entirely.
    """
    n = ratios.shape[0]
    if weighting == "uniform" or space == 0:
        return np.ones(n)
    if weighting != "visibility":
        raise ValueError(f"unknown triplet weighting {weighting!r}")
    return ratios[:, space - 1].copy()


def _mine_space(vectors, labels, margin, weights=None):
    dist = kernels.pairwise_distances(vectors)
    valid = None if weights is None else (weights > 0).astype(np.uint8)
    pos, neg = kernels.batch_hard(dist, labels, valid)
    rows = np.arange(len(labels))
    hinge = dist[rows, pos] - dist[rows, neg] + margin
    usable = (pos >= 0) & (neg >= 0)
    if weights is not None:
        usable &= weights > 0
    hinge = np.where(usable, hinge, -np.inf)
    return dist, pos, neg, hinge


def batch_triplet_loss(vectors, labels, margin, ratios=None, weighting="uniform"):
    """Batch-hard hinge per space for (N, 4, d) unit vectors.

    Each space's value is sum_i w_i * max(0, hinge_i) / N; with uniform
    weighting that is the mean hinge over anchors.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    check_pk_batch(labels)
    n = len(labels)
    ratios = np.zeros((n, 3)) if ratios is None else np.asarray(ratios, dtype=np.float64)
    out = []
    for s in range(vectors.shape[1]):
        w = anchor_weights(ratios, s, weighting)
        hinge = _mine_space(vectors[:, s], labels, margin, w)[3]
        out.append(float(np.sum(w * np.maximum(hinge, 0.0)) / n))
    return tuple(out)


def _triplet_forward_backward(fwd, margin, weighting="uniform"):
    n, n_spaces, _ = fwd.vectors.shape
    losses, grad = [], np.zeros_like(fwd.vectors)
    rows = np.arange(n)
    fwd.mining = []
    for s in range(n_spaces):
        v = fwd.vectors[:, s]
        w = anchor_weights(fwd.ratios, s, weighting)
        dist, pos, neg, hinge = _mine_space(v, fwd.labels, margin, w)
        active = hinge > 0
        fwd.mining.append((pos, neg, active))
        losses.append(float(np.sum(w * np.where(active, hinge, 0.0)) / n))
        for i in rows[active]:
            for j, sign in ((pos[i], 1.0), (neg[i], -1.0)):
                d_ij = dist[i, j]
                if d_ij == 0.0:
                    continue
                e = w[i] * (v[i] - v[j]) / d_ij
                grad[i, s] += sign * e / n
                grad[j, s] -= sign * e / n
    return tuple(losses), grad


def _log_softmax_ce(logits, labels):
    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = logits - shift - np.log(denom)
    rows = np.arange(len(labels))
    return -log_probs[rows, labels], exp / denom


def _arcface_forward_backward(fwd, arcface, weighting="uniform"):
    n, n_spaces, _ = fwd.vectors.shape
    K = arcface.num_classes
    if fwd.labels.min() < 0 or fwd.labels.max() >= K:
        raise BadTarget(f"labels must lie in [0, {K})")
    rows = np.arange(n)
    onehot = np.zeros((n, K))
    onehot[rows, fwd.labels] = 1.0
    total = 0.0
    g_vec = np.zeros_like(fwd.vectors)
    g_cls = np.zeros_like(arcface.class_weights)
    scale, margin = arcface.scale, arcface.margin
    for s in range(n_spaces):
        raw = arcface.class_weights[s]
        row_norms = np.linalg.norm(raw, axis=1)
        units = unit_class_weights(raw)
        v = fwd.vectors[:, s]
        cosine = v @ units.T
        logits = scale * cosine
        if margin != 0:
            shifted, slope = margin_cosine(cosine[rows, fwd.labels], margin)
            logits[rows, fwd.labels] = scale * shifted
        ce, probs = _log_softmax_ce(logits, fwd.labels)
        w = anchor_weights(fwd.ratios, s, weighting)
        total += np.sum(w * ce)
        # d logit / d cos: scale off-target, scale * d cos(theta+m) / d cos on target
        g_logits = w[:, None] * (probs - onehot) / (n * n_spaces)
        dcos = np.full((n, K), scale)
        if margin != 0:
            dcos[rows, fwd.labels] = scale * slope
        g_cos = g_logits * dcos
        g_vec[:, s] = g_cos @ units
        g_units = g_cos.T @ v
        radial = np.sum(g_units * units, axis=1, keepdims=True)
        g_cls[s] = (g_units - units * radial) / np.maximum(row_norms, NORM_FLOOR)[:, None]
    return total / (n * n_spaces), g_vec, g_cls


def prototype_distances(vectors, ratios, prototypes):
    """Fused distances (N, K) from samples to identity prototypes.

    Also returns the (N, K, 4) per-space distances and the (N, 4) weights.
    """
    diff = vectors[:, None, :, :] - prototypes[None, :, :, :]
    per_space = np.sqrt(np.sum(diff * diff, axis=-1))
    weights = np.concatenate([np.ones((vectors.shape[0], 1)), ratios], axis=1)
    fused = np.einsum("nks,ns->nk", per_space, weights) / 2.0
    return fused, per_space, weights, diff


def _softmin_forward_backward(fwd, prototypes, temperature):
    if prototypes is None:
        raise MissingPrototypes("softmin_distance mode needs identity prototypes")
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 3 or prototypes.shape[1:] != fwd.vectors.shape[1:]:
        raise MissingPrototypes(
            f"prototypes must be (K, 4, {fwd.vectors.shape[2]}), got {prototypes.shape}")
    K = prototypes.shape[0]
    if fwd.labels.min() < 0 or fwd.labels.max() >= K:
        raise BadTarget(f"labels must lie in [0, {K})")
    n = len(fwd.labels)
    fused, per_space, weights, diff = prototype_distances(fwd.vectors, fwd.ratios, prototypes)
    ce, probs = _log_softmax_ce(-fused / temperature, fwd.labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), fwd.labels] = 1.0
    g_fused = -(probs - onehot) / (n * temperature)
    # d fused / d per_space[n,k,s] = weights[n,s] / 2
    g_dist = g_fused[:, :, None] * weights[:, None, :] / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(per_space[..., None] > 0, diff / per_space[..., None], 0.0)
    g_vec = np.einsum("nks,nksd->nsd", g_dist, unit)
    return float(ce.mean()), g_vec


def _forward(batch, heads):
    z = linear_outputs(batch.embeddings, heads)
    vectors, norms = normalize(z)
    return _Forward(batch.embeddings, vectors, norms, batch.labels, batch.ratios)


def _backprop_heads(fwd, g_vec, heads):
    v, norms = fwd.vectors, fwd.norms
    radial = np.sum(g_vec * v, axis=-1, keepdims=True)
    alive = (norms >= NORM_FLOOR)[..., None]
    g_z = np.where(alive, (g_vec - v * radial) / np.maximum(norms, NORM_FLOOR)[..., None], 0.0)
    g_w = np.einsum("nsd,nk->sdk", g_z, fwd.x)
    g_b = g_z.sum(axis=0) if heads.use_bias else np.zeros_like(heads.biases)
    return g_w, g_b


def id_loss(batch, heads, arcface, mode="arcface_ce", prototypes=None, temperature=0.1,
            weighting="uniform"):
    fwd = _forward(batch, heads)
    if mode == "arcface_ce":
        return float(_arcface_forward_backward(fwd, arcface, weighting)[0])
    if mode == "softmin_distance":
        return _softmin_forward_backward(fwd, prototypes, temperature)[0]
    raise ValueError(f"unknown ID-loss mode {mode!r}")


def evaluate_objective(batch, heads, arcface, config, prototypes=None, want_grad=True):
    """Loss report and (optionally) gradients for every trainable tensor.

    ``config`` needs lambda_id, lambda_triplet, triplet_margin, id_mode
    and softmin_temperature attributes.
    """
    check_pk_batch(batch.labels)
    fwd = _forward(batch, heads)
    weighting = getattr(config, "view_weighting", "uniform")
    trip_per_space, g_trip = _triplet_forward_backward(fwd, config.triplet_margin, weighting)
    trip = float(sum(trip_per_space))
    g_cls = np.zeros_like(arcface.class_weights)
    if config.lambda_id == 0:
        id_value, g_id = 0.0, np.zeros_like(fwd.vectors)
    elif config.id_mode == "arcface_ce":
        id_value, g_id, g_cls = _arcface_forward_backward(fwd, arcface, weighting)
    elif config.id_mode == "softmin_distance":
        id_value, g_id = _softmin_forward_backward(fwd, prototypes, config.softmin_temperature)
    else:
        raise ValueError(f"unknown ID-loss mode {config.id_mode!r}")
    total = config.lambda_id * id_value + config.lambda_triplet * trip
    report = LossReport(float(id_value), trip_per_space, trip, float(total))
    if not np.isfinite(total):
        raise NonFiniteLoss(f"objective is not finite: {report}")
    if not want_grad:
        return report, None, fwd
    g_vec = config.lambda_id * g_id + config.lambda_triplet * g_trip
    g_w, g_b = _backprop_heads(fwd, g_vec, heads)
    grads = Gradients(g_w, g_b, config.lambda_id * g_cls)
    if not all(np.all(np.isfinite(g)) for g in (g_w, g_b, grads.class_weights)):
        raise NonFiniteLoss("gradient contains non-finite entries")
    return report, grads, fwd


def total_loss(batch, heads, arcface, config, prototypes=None):
    return evaluate_objective(batch, heads, arcface, config, prototypes, want_grad=False)[0]


def loss_gradients(batch, heads, arcface, config, prototypes=None):
    return evaluate_objective(batch, heads, arcface, config, prototypes)[1]


def kink_signature(fwd, arcface=None):
    """Discrete state of the objective: mining picks, active hinges, clamp and cap zones.

    Two parameter settings with equal signatures lie on the same smooth
    piece of the objective.
    """
    parts = []
    for pos, neg, active in fwd.mining:
        parts.extend((pos.tobytes(), neg.tobytes(), active.tobytes()))
    if arcface is not None:
        rows = np.arange(len(fwd.labels))
        for s in range(fwd.vectors.shape[1]):
            c = fwd.vectors[:, s] @ unit_class_weights(arcface.class_weights[s]).T
            c_y = c[rows, fwd.labels]
            capped = np.arccos(np.clip(c_y, -1.0, 1.0)) + arcface.margin >= np.pi
            parts.append((np.abs(c_y) > 1.0 - ACOS_CLAMP).tobytes() + capped.tobytes())
    return b"|".join(parts)
