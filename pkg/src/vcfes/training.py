"""Training configuration, PK batch sampling and the optimization loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, DegenerateDataset
from .heads import DEFAULT_EMBED_DIM, DEFAULT_M_ARC, DEFAULT_S_ARC, init_heads, project_batch
from .losses import ID_MODES, Batch, evaluate_objective

OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    lambda_id: float = 1.0
    lambda_triplet: float = 1.0
    triplet_margin: float = 0.3
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_P: int = 8
    batch_K: int = 4
    seed: int = 0
    optimizer: str = "adam"
    softmin_temperature: float = 0.1
    id_mode: str = "arcface_ce"
    view_weighting: str = "uniform"
    embed_dim: int = DEFAULT_EMBED_DIM
    s_arc: float = DEFAULT_S_ARC
    m_arc: float = DEFAULT_M_ARC
    use_bias: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.lambda_id < 0 or self.lambda_triplet < 0:
            raise ConfigError("lambda_id and lambda_triplet must be non-negative")
        if self.lambda_id == 0 and self.lambda_triplet == 0:
            raise ConfigError("lambda_id and lambda_triplet must not both be zero")
        if self.triplet_margin < 0:
            raise ConfigError("triplet_margin must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be a positive integer")
        if self.batch_P < 2 or self.batch_K < 2:
            raise ConfigError("batch_P and batch_K must both be >= 2")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.id_mode not in ID_MODES:
            raise ConfigError(f"id_mode must be one of {ID_MODES}")
        if not self.softmin_temperature > 0:
            raise ConfigError("softmin_temperature must be positive")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if not self.s_arc > 0 or not 0 <= self.m_arc < math.pi / 2:
            raise ConfigError("need s_arc > 0 and 0 <= m_arc < pi/2")
        return self

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        defaults = cls()
        values = {}
        for key, value in mapping.items():
            kind = type(getattr(defaults, key))
            try:
                if kind is bool and isinstance(value, str):
                    value = value.lower() in ("1", "true", "yes", "on")
                values[key] = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {value!r}") from None
        return cls(**values)

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainingSample:
    embedding: np.ndarray
    identity: int
    area_ratios: np.ndarray
    image_id: str


@dataclass
class HistoryRecord:
    epoch: int
    batch: int
    report: object

    def to_json(self):
        r = self.report
        return json.dumps({
            "epoch": self.epoch, "batch": self.batch, "id_loss": r.id_loss,
            "triplet_per_space": list(r.triplet_loss_per_space), "total": r.total,
        }, sort_keys=True)


@dataclass
class FitResult:
    heads: object
    arcface: object
    history: list

    def epoch_totals(self):
        totals = {}
        for rec in self.history:
            totals.setdefault(rec.epoch, []).append(rec.report.total)
        return [float(np.mean(totals[e])) for e in sorted(totals)]


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def pk_batches(labels, P, K, rng):
    """One epoch of PK batches as lists of sample indices.

    Identities are shuffled and grouped P at a time; each contributes up
    to K shuffled samples. A trailing group with one identity is folded
    into the previous batch.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    ids = ids[rng.permutation(ids.size)]
    groups = [list(ids[i:i + P]) for i in range(0, ids.size, P)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        groups[-2].extend(groups.pop())
    batches = []
    for group in groups:
        batch = []
        for identity in group:
            members = np.flatnonzero(labels == identity)
            batch.extend(members[rng.permutation(members.size)][:K].tolist())
        batches.append(batch)
    return batches


def identity_prototypes(heads, embeddings, labels, ratios, num_classes):
    """Per-identity prototypes, (K, 4, d), renormalized to unit length.

    The global prototype is the plain mean of an identity's projected
    embeddings; each side prototype weights samples by how much of that
    side they show.
    """
    vectors = project_batch(embeddings, heads)
    weights = np.concatenate([np.ones((len(labels), 1)), np.asarray(ratios)], axis=1)
    protos = np.zeros((num_classes,) + vectors.shape[1:])
    for k in range(num_classes):
        members = labels == k
        if members.any():
            protos[k] = np.einsum("ns,nsd->sd", weights[members], vectors[members])
    norms = np.linalg.norm(protos, axis=-1, keepdims=True)
    return np.where(norms > 0, protos / np.where(norms > 0, norms, 1.0), 0.0)


def _stack(dataset):
    x = np.stack([np.asarray(s.embedding, dtype=np.float64) for s in dataset])
    labels = np.array([s.identity for s in dataset], dtype=np.int64)
    ratios = np.stack([np.asarray(s.area_ratios, dtype=np.float64).reshape(3)
                       for s in dataset])
    return x, labels, ratios


def fit(dataset, config, on_batch=None):
    """Train heads on a sequence of TrainingSample.

    ``on_batch`` is called with every HistoryRecord as it is produced.
    """
    config.validate()
    dataset = list(dataset)
    if not dataset:
        raise DegenerateDataset("training set is empty")
    x, labels, ratios = _stack(dataset)
    if labels.min() < 0:
        raise DegenerateDataset("identity labels must be non-negative")
    counts = np.bincount(labels)
    usable = np.flatnonzero(counts >= 2)
    if usable.size < 2:
        raise DegenerateDataset("need at least two identities with two or more samples")
    keep = np.isin(labels, usable)
    x, labels, ratios = x[keep], labels[keep], ratios[keep]
    num_classes = int(counts.size)

    rng = np.random.default_rng(config.seed)
    heads, arcface = init_heads(int(rng.integers(2**63)), x.shape[1], config.embed_dim,
                                num_classes, config.s_arc, config.m_arc, config.use_bias)
    params = [heads.weights, heads.biases, arcface.class_weights]
    if config.optimizer == "adam":
        opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    else:
        opt = SGD(config.learning_rate)

    history = []
    for epoch in range(config.epochs):
        prototypes = None
        if config.id_mode == "softmin_distance" and config.lambda_id > 0:
            prototypes = identity_prototypes(heads, x, labels, ratios, num_classes)
        for b, idx in enumerate(pk_batches(labels, config.batch_P, config.batch_K, rng)):
            batch = Batch(x[idx], labels[idx], ratios[idx])
            report, grads, _ = evaluate_objective(batch, heads, arcface, config, prototypes)
            opt.step(params, [grads.weights, grads.biases, grads.class_weights])
            record = HistoryRecord(epoch, b, report)
            history.append(record)
            if on_batch is not None:
                on_batch(record)
    return FitResult(heads, arcface, history)
