"""Top-k, CMC and mAP over fused-distance rankings."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGallery, NoRelevant
from .heads import PerSpaceEmbeddings
from .masks import AreaRatios
from .retrieval import FUSION_MODES, score_gallery

MAP_DEFINITION = "full-ranking"


@dataclass(frozen=True)
class QueryItem:
    image_id: str
    identity: int
    spaces: PerSpaceEmbeddings
    area_ratios: AreaRatios


@dataclass
class EvalProtocol:
    queries: list
    gallery: object
    exclude_self: bool = True
    combine: str = "query_only"
    mode: str = "all_views"
    # test hook: multiplies every fused distance before ranking
    distance_scale: float = 1.0
    threads: int | None = None


@dataclass
class MetricReport:
    top1: float
    top5: float
    map: float
    cmc: list
    num_queries: int
    num_skipped: int
    mode: str = "all_views"
    skipped_ids: list = field(default_factory=list)

    def to_dict(self):
        return {"top1": self.top1, "top5": self.top5, "map": self.map, "cmc": list(self.cmc),
                "num_queries": self.num_queries, "num_skipped": self.num_skipped,
                "mode": self.mode, "map_definition": MAP_DEFINITION}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def average_precision(flags):
    """Mean of precision@i over the 1-based positions i holding a relevant item.

    Sums are correctly rounded (fsum) so the result does not depend on
    summation order.
    """
    flags = np.asarray(flags, dtype=bool)
    hits = np.flatnonzero(flags)
    if hits.size == 0:
        raise NoRelevant("ranking contains no relevant item")
    return math.fsum(j / int(p) for j, p in enumerate(hits + 1, 1)) / hits.size


def rank_query(protocol, query):
    """Gallery indices in rank order (after self-exclusion) plus distances."""
    gallery = protocol.gallery
    dists, fused = score_gallery(gallery, query.spaces, query.area_ratios,
                                 protocol.combine, protocol.mode, protocol.threads)
    if protocol.distance_scale != 1.0:
        fused = fused * protocol.distance_scale
    order = gallery.rank_order(fused)
    if protocol.exclude_self:
        keep = np.array([gallery.image_ids[i] != query.image_id for i in order], dtype=bool)
        order = order[keep]
    return order, dists, fused


def evaluate(protocol):
    gallery = protocol.gallery
    n = len(gallery)
    if n == 0:
        raise EmptyGallery("gallery is empty")
    length = max(n, 5)
    hit_at = np.zeros(length)
    aps = []
    skipped = []
    for query in protocol.queries:
        order, _, _ = rank_query(protocol, query)
        flags = gallery.identities[order] == query.identity
        if not flags.any():
            skipped.append(query.image_id)
            continue
        hit_at[int(np.argmax(flags)):] += 1
        aps.append(average_precision(flags))
    used = len(aps)
    cmc = (hit_at / used).tolist() if used else [0.0] * length
    return MetricReport(
        top1=cmc[0], top5=cmc[4], map=math.fsum(aps) / used if used else 0.0, cmc=cmc,
        num_queries=used, num_skipped=len(skipped), mode=protocol.mode,
        skipped_ids=skipped)


def compare_modes(protocol, modes=FUSION_MODES):
    reports = {}
    for mode in modes:
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {FUSION_MODES}")
        reports[mode] = evaluate(EvalProtocol(
            protocol.queries, protocol.gallery, protocol.exclude_self, protocol.combine,
            mode, protocol.distance_scale, protocol.threads))
    return reports


def mode_deltas(reports, baseline="global_only"):
    """Per-metric differences of every mode against ``baseline``."""
    if baseline not in reports:
        return {}
    base = reports[baseline]
    return {mode: {"top1": r.top1 - base.top1, "top5": r.top5 - base.top5,
                   "map": r.map - base.map}
            for mode, r in reports.items() if mode != baseline}


def rank_table(protocol, k=None):
    """Lines of ``query_id,rank,gallery_id,fused,d_global,d_front,d_side,d_rear``."""
    lines = ["query_id,rank,gallery_id,fused,d_global,d_front,d_side,d_rear"]
    for query in protocol.queries:
        order, dists, fused = rank_query(protocol, query)
        for rank, i in enumerate(order[:k] if k else order, 1):
            values = ",".join(f"{v:.17g}" for v in (fused[i], *dists[i]))
            lines.append(f"{query.image_id},{rank},{protocol.gallery.image_ids[i]},{values}")
    return lines
