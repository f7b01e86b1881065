"""Parallel linear projection heads and per-space ArcFace classifiers."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import BadTarget, DimensionMismatch, FormatMismatch, IoFailure, MalformedFile

SPACES = ("global", "front", "side", "rear")
NORM_FLOOR = 1e-12
ACOS_CLAMP = 1e-7
CHECKPOINT_VERSION = 1
DEFAULT_BACKBONE_DIM = 384
DEFAULT_EMBED_DIM = 128
DEFAULT_S_ARC = 30.0
DEFAULT_M_ARC = 0.30


@dataclass
class HeadParameters:
    """Linear heads for the four spaces.

    weights has shape (4, d, D) and biases (4, d), indexed in ``SPACES``
    order. Held in float64; checkpoints store float32.
    """

    weights: np.ndarray
    biases: np.ndarray
    use_bias: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[0] != len(SPACES):
            raise DimensionMismatch(f"weights must be (4, d, D), got {self.weights.shape}")
        if self.biases.shape != self.weights.shape[:2]:
            raise DimensionMismatch(
                f"biases {self.biases.shape} do not match weights {self.weights.shape}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("head parameters must be finite")

    @property
    def input_dim(self):
        return self.weights.shape[2]

    @property
    def embed_dim(self):
        return self.weights.shape[1]

    def copy(self):
        return HeadParameters(self.weights.copy(), self.biases.copy(), self.use_bias)


@dataclass
class ArcFaceHead:
    """Class-weight matrices (4, K, d) plus the shared scale and margin."""

    class_weights: np.ndarray
    scale: float = DEFAULT_S_ARC
    margin: float = DEFAULT_M_ARC

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.class_weights.ndim != 3 or self.class_weights.shape[0] != len(SPACES):
            raise DimensionMismatch(
                f"class weights must be (4, K, d), got {self.class_weights.shape}")
        if not self.scale > 0:
            raise ValueError("ArcFace scale must be positive")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("ArcFace margin must lie in [0, pi/2)")

    @property
    def num_classes(self):
        return self.class_weights.shape[1]

    def copy(self):
        return ArcFaceHead(self.class_weights.copy(), self.scale, self.margin)


@dataclass(frozen=True)
class PerSpaceEmbeddings:
    """Unit vectors for the four spaces, shape (4, d).

    A space whose projection collapsed to zero holds an all-zero row and
    is reported by ``degenerate``.
    """

    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 2 or vectors.shape[0] != len(SPACES):
            raise DimensionMismatch(f"expected (4, d) embeddings, got {vectors.shape}")
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def degenerate(self):
        return ~np.any(self.vectors != 0, axis=1)

    def __getitem__(self, space):
        return self.vectors[SPACES.index(space)]


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_heads(seed, input_dim=DEFAULT_BACKBONE_DIM, embed_dim=DEFAULT_EMBED_DIM,
               num_classes=1, scale=DEFAULT_S_ARC, margin=DEFAULT_M_ARC, use_bias=True):
    if min(input_dim, embed_dim, num_classes) < 1:
        raise ValueError("dimensions and class count must be >= 1")
    rng = np.random.default_rng(seed)
    weights = _glorot(rng, (len(SPACES), embed_dim, input_dim), input_dim, embed_dim)
    biases = np.zeros((len(SPACES), embed_dim))
    classes = _glorot(rng, (len(SPACES), num_classes, embed_dim), embed_dim, num_classes)
    return (HeadParameters(weights, biases, use_bias),
            ArcFaceHead(classes, scale, margin))


def _normalize_rows(z):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    dead = norms < NORM_FLOOR
    out = z / np.maximum(norms, NORM_FLOOR)
    return np.where(dead, 0.0, out), norms[..., 0]


def linear_outputs(x, heads):
    """Pre-normalization head outputs, (N, 4, d) for x of shape (N, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != heads.input_dim:
        raise DimensionMismatch(
            f"backbone embeddings must be (N, {heads.input_dim}), got {x.shape}")
    z = np.einsum("sdk,nk->nsd", heads.weights, x)
    if heads.use_bias:
        z = z + heads.biases[None]
    return z


def project_batch(x, heads):
    """Project (N, D) backbone embeddings to (N, 4, d) unit vectors."""
    vectors, _ = _normalize_rows(linear_outputs(x, heads))
    return vectors


def project(x, heads):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("project takes a single backbone embedding")
    if not np.all(np.isfinite(x)):
        raise ValueError("backbone embedding must be finite")
    return PerSpaceEmbeddings(project_batch(x[None], heads)[0])


def unit_class_weights(class_weights):
    norms = np.linalg.norm(class_weights, axis=-1, keepdims=True)
    return class_weights / np.maximum(norms, NORM_FLOOR)


def margin_cosine(cosine, margin):
    """cos(theta + margin) and its derivative with respect to cos(theta).

    The shifted angle is capped at pi so the result never exceeds the
    unshifted cosine; the cap is C1 because sin(pi) = 0. Inside the arccos
    clamp zone the value is constant and the derivative is zero.
    """
    cosine = np.asarray(cosine, dtype=np.float64)
    c = np.clip(cosine, -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)
    theta = np.arccos(c)
    shifted = theta + margin
    value = np.cos(np.minimum(shifted, np.pi))
    smooth = (c == cosine) & (shifted < np.pi)
    slope = np.where(smooth, np.sin(np.minimum(shifted, np.pi)) / np.sin(theta), 0.0)
    return value, slope


def margin_logit(cosine, scale, margin):
    if margin == 0:
        return scale * cosine
    return scale * margin_cosine(cosine, margin)[0]


def arcface_logits(v, head, space, target=None):
    """Scaled cosine logits of unit vector ``v`` against one space's classes.

    With a target, that class's logit gets the additive angular margin.
    """
    s = SPACES.index(space) if isinstance(space, str) else int(space)
    rows = unit_class_weights(head.class_weights[s])
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (rows.shape[1],):
        raise DimensionMismatch(f"vector length {v.shape} does not match d={rows.shape[1]}")
    cosine = rows @ v
    logits = head.scale * cosine
    if target is not None:
        if not 0 <= target < head.num_classes:
            raise BadTarget(f"target {target} outside [0, {head.num_classes})")
        logits[target] = margin_logit(cosine[target], head.scale, head.margin)
    return logits


# -- checkpoint directory -------------------------------------------------

def _write_tensor(path, array):
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def _read_tensor(path, shape):
    expected = 4 * int(np.prod(shape))
    try:
        size = os.path.getsize(path)
    except OSError as exc:
        raise IoFailure(f"missing tensor file {path}") from exc
    if size != expected:
        raise MalformedFile(f"{path}: {size} bytes, expected {expected}")
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float64)


def save_checkpoint(directory, heads, arcface):
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create checkpoint dir {directory}: {exc}") from exc
    D, d, K = heads.input_dim, heads.embed_dim, arcface.num_classes
    tensors = {}
    for s, space in enumerate(SPACES):
        for name, array in ((f"W_{space}", heads.weights[s]),
                            (f"b_{space}", heads.biases[s]),
                            (f"C_{space}", arcface.class_weights[s])):
            _write_tensor(os.path.join(directory, f"{name}.f32"), array)
            tensors[name] = {"file": f"{name}.f32", "shape": list(array.shape)}
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "D": D, "d": d, "K": K,
        "spaces": list(SPACES),
        "s_arc": arcface.scale, "m_arc": arcface.margin,
        "use_bias": heads.use_bias,
        "tensors": tensors,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatMismatch(
            f"checkpoint format_version {manifest.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}")
    if manifest.get("spaces") != list(SPACES):
        raise FormatMismatch(f"unexpected space list {manifest.get('spaces')}")
    try:
        D, d, K = int(manifest["D"]), int(manifest["d"]), int(manifest["K"])
        tensors = manifest["tensors"]
        stacks = {"W": [], "b": [], "C": []}
        expected = {"W": [d, D], "b": [d], "C": [K, d]}
        for space in SPACES:
            for kind in stacks:
                entry = tensors[f"{kind}_{space}"]
                if list(entry["shape"]) != expected[kind]:
                    raise MalformedFile(f"tensor {kind}_{space} has shape {entry['shape']}")
                stacks[kind].append(
                    _read_tensor(os.path.join(directory, entry["file"]), expected[kind]))
        heads = HeadParameters(np.stack(stacks["W"]), np.stack(stacks["b"]),
                               bool(manifest.get("use_bias", True)))
        arcface = ArcFaceHead(np.stack(stacks["C"]), float(manifest["s_arc"]),
                              float(manifest["m_arc"]))
    except (KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: missing field {exc}") from exc
    return heads, arcface
