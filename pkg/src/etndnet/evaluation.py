"""Single-query retrieval evaluation: distance matrix, CMC curve and mAP."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, NoValidGallery

METRICS = ("euclidean", "cosine")


@dataclass
class EvalSet:
    query: np.ndarray
    query_ids: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    query_cams: np.ndarray | None = None
    gallery_cams: np.ndarray | None = None

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64)
        self.gallery = np.asarray(self.gallery, dtype=np.float64)
        if self.query.ndim != 2 or self.gallery.ndim != 2 or self.query.shape[1] != self.gallery.shape[1]:
            raise DimensionMismatch(f"query {self.query.shape} and gallery {self.gallery.shape} embeddings differ")
        self.query_ids = np.asarray(self.query_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)

    @property
    def has_cameras(self) -> bool:
        return self.query_cams is not None and self.gallery_cams is not None


@dataclass
class RankingResult:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    num_skipped: int = 0
    info: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        return {
            **self.info,
            "cmc": [float(v) for v in self.cmc],
            "rank1": self.rank1,
            "map": float(self.map),
            "num_skipped_queries": int(self.num_skipped),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def pairwise_distances(queries, gallery, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"cannot compare {q.shape} with {g.shape}")
    if metric == "euclidean":
        return cdist(q, g, "euclidean")
    if metric == "cosine":
        return 1.0 - l2_normalize(q) @ l2_normalize(g).T
    raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


def rank_query(dist_row: np.ndarray, matches: np.ndarray, keep: np.ndarray, max_rank: int):
    """CMC row and AP for one query, or ``None`` when nothing matches."""
    order = np.argsort(dist_row, kind="stable")
    order = order[keep[order]]
    hits = matches[order]
    if not hits.any():
        return None
    cmc = np.zeros(max_rank)
    first = int(np.argmax(hits))
    cmc[first:] = 1
    positions = np.flatnonzero(hits) + 1
    ap = float(np.mean(np.arange(1, len(positions) + 1) / positions))
    return cmc, ap


def evaluate(eval_set: EvalSet, metric: str = "euclidean", max_rank: int = 20,
             cross_camera_filter: bool = True, normalize: bool = True, dist: np.ndarray | None = None) -> RankingResult:
    """Rank the gallery for every query.

    With ``cross_camera_filter`` (and camera labels present), gallery items
    sharing both identity and camera with the query are discarded. Queries
    left without a correct match are skipped and counted.
    """
    es = eval_set
    if dist is None:
        q, g = (l2_normalize(es.query), l2_normalize(es.gallery)) if normalize else (es.query, es.gallery)
        dist = pairwise_distances(q, g, metric)
    filtering = cross_camera_filter and es.has_cameras
    cmc_sum = np.zeros(max_rank)
    aps, skipped = [], 0
    for i in range(dist.shape[0]):
        matches = es.gallery_ids == es.query_ids[i]
        keep = np.ones(len(es.gallery_ids), dtype=bool)
        if filtering:
            keep &= ~(matches & (np.asarray(es.gallery_cams) == es.query_cams[i]))
        ranked = rank_query(dist[i], matches, keep, max_rank)
        if ranked is None:
            skipped += 1
            continue
        cmc_sum += ranked[0]
        aps.append(ranked[1])
    if not aps:
        raise NoValidGallery("no query has a valid gallery match")
    aps = np.array(aps)
    info = {"metric": metric, "cross_camera_filter": bool(filtering)}
    return RankingResult(cmc_sum / len(aps), float(aps.mean()), aps, skipped, info)
