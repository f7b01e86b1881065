"""Desk-scale synthetic re-identification data with explicit viewpoint structure.

Each identity owns one latent signature per side (front/side/rear). A
view at azimuth phi sees the three signatures weighted by its area
ratios; the backbone embedding is a fixed random linear lift of the
ratio-weighted sum of the three signatures plus gaussian noise.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .formats import ManifestRecord, write_embeddings, write_manifest
from .heads import SPACES, HeadParameters
from .masks import AreaRatios, BinaryMask, MaskSet, area_ratios, clamp_to_foreground, save_mask_set
from .training import TrainingSample

SPLITS = ("train", "query", "gallery")
SNAP = 1e-12


@dataclass(frozen=True)
class SyntheticSpec:
    num_identities: int = 20
    views_per_identity: int = 12
    backbone_dim: int = 32
    signature_dim: int = 8
    noise_sigma: float = 0.15
    distractor_overlap: float = 0.3
    seed: int = 7
    mask_width: int = 64
    mask_height: int = 48
    mask_margin: int = 6

    def validate(self):
        if self.num_identities < 2 or self.views_per_identity < 2:
            raise ConfigError("need at least 2 identities and 2 views per identity")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0.0 <= self.distractor_overlap <= 1.0:
            raise ConfigError("distractor_overlap must lie in [0, 1]")
        if self.backbone_dim < 1 or self.signature_dim < 1:
            raise ConfigError("dimensions must be positive")
        if min(self.mask_width, self.mask_height) <= 2 * self.mask_margin:
            raise ConfigError("mask margin leaves no foreground")
        return self


@dataclass(frozen=True)
class VehiclePrototype:
    identity: int
    signatures: np.ndarray  # (3, signature_dim): front, side, rear


def viewpoint_to_area_ratios(azimuth):
    """Visible-side fractions for a camera at ``azimuth`` degrees (0 = head-on)."""
    phi = math.radians(float(azimuth))
    raw = np.array([max(0.0, math.cos(phi)), abs(math.sin(phi)), max(0.0, -math.cos(phi))])
    raw[raw < SNAP] = 0.0
    return AreaRatios.from_array(raw / raw.sum())


def split_of(view):
    """Views 0, 3, 6, ... train; 1, 4, 7, ... are queries; 2, 5, 8, ... gallery.

    With evenly spaced azimuths the training split then holds the
    head-on, pure-side and pure-rear views.
    """
    return SPLITS[view % 3]


def apportion(ratios, total):
    """Integer pixel counts summing to ``total``, each within 1 of ratio * total."""
    exact = np.asarray(ratios, dtype=np.float64) * total
    counts = np.floor(exact).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def render_masks(ratios, spec):
    """Rectangular foreground split into left-to-right front/side/rear strips."""
    h, w, m = spec.mask_height, spec.mask_width, spec.mask_margin
    fg = np.zeros((h, w), dtype=np.uint8)
    fg[m:h - m, m:w - m] = 1
    # column-major pixel order inside the foreground rectangle
    cols, rows = np.meshgrid(np.arange(m, w - m), np.arange(m, h - m))
    flat_rows, flat_cols = rows.T.reshape(-1), cols.T.reshape(-1)
    counts = apportion(ratios.as_array(), flat_rows.size)
    sides = []
    start = 0
    for count in counts:
        side = np.zeros((h, w), dtype=np.uint8)
        side[flat_rows[start:start + count], flat_cols[start:start + count]] = 1
        sides.append(BinaryMask.from_array(side))
        start += count
    return MaskSet(BinaryMask.from_array(fg), *sides)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    prototypes: list
    lift: np.ndarray
    embeddings: np.ndarray
    records: list
    masks: dict
    generating_ratios: dict
    samples: dict

    def split(self, name):
        return self.samples[name]

    def write(self, out_dir):
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
        write_embeddings(os.path.join(out_dir, "embeddings.vcfe"), self.embeddings)
        for name in SPLITS:
            write_manifest(os.path.join(out_dir, f"{name}.csv"),
                           [r for r in self.records if split_of_id(r.image_id) == name])
        for record in self.records:
            save_mask_set(self.masks[record.mask_stem], os.path.join(out_dir, "masks"),
                          record.mask_stem)
        with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8") as fh:
            json.dump(asdict(self.spec), fh, indent=2, sort_keys=True)
            fh.write("\n")


def image_id_for(identity, view):
    return f"id{identity:04d}_v{view:03d}"


def split_of_id(image_id):
    return split_of(int(image_id.rsplit("_v", 1)[1]))


def _lift_matrix(rng, out_dim, in_dim):
    gauss = rng.standard_normal((out_dim, in_dim))
    if out_dim >= in_dim:
        q, r = np.linalg.qr(gauss)
        return q * np.sign(np.diag(r))[None, :]
    return gauss / math.sqrt(out_dim)


def generate(spec=None):
    spec = (spec or SyntheticSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    n_id, n_view, sd = spec.num_identities, spec.views_per_identity, spec.signature_dim
    rho = spec.distractor_overlap
    common = rng.standard_normal((3, sd))
    unique = rng.standard_normal((n_id, 3, sd))
    signatures = math.sqrt(rho) * common[None] + math.sqrt(1.0 - rho) * unique
    lift = _lift_matrix(rng, spec.backbone_dim, sd)
    noise = rng.standard_normal((n_id, n_view, spec.backbone_dim))

    prototypes = [VehiclePrototype(i, signatures[i]) for i in range(n_id)]
    embeddings = np.zeros((n_id * n_view, spec.backbone_dim), dtype=np.float32)
    records, masks, gen_ratios = [], {}, {}
    samples = {name: [] for name in SPLITS}
    for i in range(n_id):
        for v in range(n_view):
            k = i * n_view + v
            ratios = viewpoint_to_area_ratios(360.0 * v / n_view)
            mixed = ratios.as_array() @ signatures[i]
            embeddings[k] = lift @ mixed + spec.noise_sigma * noise[i, v]
            stem = image_id = image_id_for(i, v)
            mask_set = render_masks(ratios, spec)
            masks[stem] = mask_set
            gen_ratios[stem] = ratios
            records.append(ManifestRecord(image_id, i, k, stem))
            measured = area_ratios(clamp_to_foreground(mask_set))
            samples[split_of(v)].append(
                TrainingSample(embeddings[k], i, measured.as_array(), image_id))
    return SyntheticDataset(spec, prototypes, lift, embeddings, records, masks,
                            gen_ratios, samples)


def oracle_heads(dataset):
    """Heads that undo the lift, giving every space the unlifted signature mix.

    Embedding dim is signature_dim; no bias.
    """
    unlift = np.linalg.pinv(dataset.lift)
    weights = np.stack([unlift] * len(SPACES))
    return HeadParameters(weights, np.zeros((len(SPACES), unlift.shape[0])), use_bias=False)
