"""Single-pass retrieval evaluation: cosine ranking over an embedding index,
recall@k, average precision, a spatial-distance metric, and per-weather-
condition tables.

Protocol guarantees enforced here rather than assumed:
  * exactly one forward pass per distinct input image (call-count assert);
  * ranking is raw descending cosine with ascending-index tie-break — there
    is no refinement stage (RERANK_HOOK below stays None by construction);
  * in ground-to-overhead evaluation the overhead gallery is never corrupted
    (byte-identity against fresh clean loads is asserted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DiskDataset
from .formats import ManifestRecord
from .model import GeoPartModel
from .scenes import CONDITIONS, CORRUPT_CONDITIONS, corrupt

DIRECTIONS = ("d2s", "s2d")
SDM_LAMBDA = 0.05  # per meter
MEAN_COLUMN = "Mean"

# Single-pass protocol: no rank-refinement stage exists. This is asserted on
# every evaluation rather than merely documented.
RERANK_HOOK = None

_UNIT_ATOL = 1e-6


# ---------------------------------------------------------------------------
# index + ranking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingIndex:
    """Unit-norm gallery embeddings with parallel ids and world coordinates."""

    embeddings: np.ndarray    # (N, D)
    location_ids: np.ndarray  # (N,)
    world_coords: np.ndarray  # (N, 2) meters

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError("index needs a non-empty (N, D) embedding matrix")
        norms = np.linalg.norm(emb, axis=-1)
        if np.max(np.abs(norms - 1.0)) > _UNIT_ATOL:
            raise ValueError("gallery embeddings must be unit-norm")
        if len(self.location_ids) != emb.shape[0]:
            raise ValueError("location_ids length mismatch")
        if self.world_coords.shape != (emb.shape[0], 2):
            raise ValueError("world_coords must be (N, 2)")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def rank(query: np.ndarray, index: EmbeddingIndex) -> np.ndarray:
    """Gallery positions in descending-cosine order; ties broken by
    ascending gallery index."""
    if index.size == 0:  # unreachable through the constructor; kept explicit
        raise ValueError("cannot rank against an empty index")
    query = np.asarray(query, dtype=np.float64)
    if abs(np.linalg.norm(query) - 1.0) > _UNIT_ATOL:
        raise ValueError("query embedding must be unit-norm")
    sims = index.embeddings @ query
    return np.argsort(-sims, kind="stable")


@dataclass(frozen=True)
class RetrievalResult:
    """Per-query ranked gallery indices with aligned relevance and distance."""

    ranked: np.ndarray     # (Q, N) int gallery positions, best first
    relevant: np.ndarray   # (Q, N) bool, aligned with ranked
    distances: np.ndarray | None  # (Q, N) meters, aligned with ranked

    @property
    def n_queries(self) -> int:
        return self.ranked.shape[0]


def evaluate(query_embeddings: np.ndarray, query_location_ids: np.ndarray,
             index: EmbeddingIndex,
             query_world_coords: np.ndarray | None = None) -> RetrievalResult:
    """Rank every query against the index; relevance is location-id match."""
    if RERANK_HOOK is not None:
        raise AssertionError("single-pass protocol: refinement stage present")
    queries = np.asarray(query_embeddings, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[0] == 0:
        raise ValueError("need a non-empty (Q, D) query matrix")
    ranked, relevant, distances = [], [], []
    for q in range(queries.shape[0]):
        order = rank(queries[q], index)
        ranked.append(order)
        relevant.append(
            np.asarray(index.location_ids)[order] == query_location_ids[q]
        )
        if query_world_coords is not None:
            delta = index.world_coords[order] - query_world_coords[q]
            distances.append(np.linalg.norm(delta, axis=-1))
    return RetrievalResult(
        np.stack(ranked), np.stack(relevant),
        np.stack(distances) if distances else None,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def recall_at_k(result: RetrievalResult, k: int) -> float:
    """Fraction of queries with at least one relevant item in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    hits = sum(1 for q in range(result.n_queries)
               if bool(np.any(result.relevant[q, :k])))
    return hits / result.n_queries


def average_precision(result: RetrievalResult) -> float:
    """Interpolation-free AP, averaged over queries: (1/R) Σ precision at
    each relevant rank."""
    per_query = []
    for q in range(result.n_queries):
        rel = result.relevant[q]
        n_rel = int(np.sum(rel))
        if n_rel == 0:
            raise ValueError(f"query {q} has no relevant gallery item")
        hits = 0
        precisions = []
        for pos, is_rel in enumerate(rel, start=1):
            if is_rel:
                hits += 1
                precisions.append(hits / pos)
        per_query.append(sum(precisions) / n_rel)
    return sum(per_query) / len(per_query)


def sdm_at_k(result: RetrievalResult, k: int,
             lam: float = SDM_LAMBDA) -> float:
    """Rank-weighted spatial score: Σ 2^(K-i)·exp(-λ·d_i) / Σ 2^(K-i) over
    the top K results, averaged over queries."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if result.distances is None:
        raise ValueError("spatial metric needs world coordinates")
    weights = np.array([2.0 ** (k - i) for i in range(1, k + 1)])
    scores = []
    for q in range(result.n_queries):
        d = result.distances[q, :k]
        scores.append(float(np.sum(weights * np.exp(-lam * d)) / np.sum(weights)))
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# dataset-level runners
# ---------------------------------------------------------------------------

def _stack_rasters(dataset: DiskDataset, records: list[ManifestRecord],
                   condition: str, rng: np.random.Generator | None) -> np.ndarray:
    rasters = []
    for rec in records:
        raster = dataset.load_raster(rec)
        if condition != "normal":
            if rng is None:
                raise ValueError("corrupting conditions need a weather rng")
            raster = corrupt(raster, condition, int(rng.integers(0, 2**31 - 1)))
        rasters.append(raster)
    return np.stack(rasters)


def _coords(records: list[ManifestRecord]) -> np.ndarray:
    return np.array([[r.world_x, r.world_y] for r in records])


def _ids(records: list[ManifestRecord]) -> np.ndarray:
    return np.array([r.location_id for r in records])


def _split_records(dataset: DiskDataset, direction: str,
                   ) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    """Returns (query_records, gallery_records) for a direction; d2s queries
    with ground views against the overhead gallery, s2d the reverse."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    drones = dataset.records("query")
    sats = dataset.records("gallery")
    if not drones or not sats:
        raise ValueError("dataset has no held-out evaluation records")
    return (drones, sats) if direction == "d2s" else (sats, drones)


def _corrupted_side(direction: str) -> str:
    """Weather always hits the ground views: queries in d2s, gallery in s2d."""
    return "query" if direction == "d2s" else "gallery"


def run_eval(model: GeoPartModel, dataset: DiskDataset, direction: str,
             recall_ks: tuple[int, ...] = (1, 5, 10), sdm_k: int = 1,
             sdm_lambda: float = SDM_LAMBDA, condition: str = "normal",
             seed: int = 0) -> dict:
    """One evaluation pass; returns a flat metric record."""
    query_recs, gallery_recs = _split_records(dataset, direction)
    rng = np.random.default_rng(seed)
    q_cond = condition if _corrupted_side(direction) == "query" else "normal"
    g_cond = condition if _corrupted_side(direction) == "gallery" else "normal"
    query_rasters = _stack_rasters(dataset, query_recs, q_cond, rng)
    gallery_rasters = _stack_rasters(dataset, gallery_recs, g_cond, rng)
    calls_before = model.infer_calls
    gallery = EmbeddingIndex(
        model.embed_batch(gallery_rasters), _ids(gallery_recs),
        _coords(gallery_recs),
    )
    query_embs = model.embed_batch(query_rasters)
    n_images = len(query_recs) + len(gallery_recs)
    assert model.infer_calls - calls_before == n_images, \
        "single-pass protocol violated: unexpected forward-pass count"
    result = evaluate(query_embs, _ids(query_recs), gallery,
                      _coords(query_recs))
    record = {
        "direction": direction,
        "condition": condition,
        "n_queries": len(query_recs),
        "n_gallery": len(gallery_recs),
        "ap": average_precision(result),
        f"sdm@{sdm_k}": sdm_at_k(result, sdm_k, sdm_lambda),
    }
    for k in recall_ks:
        record[f"r@{k}"] = recall_at_k(result, k)
    return record


def weather_table(model: GeoPartModel, dataset: DiskDataset, direction: str,
                  seed: int = 0) -> dict[str, dict[str, float]]:
    """R@1/AP per weather condition plus the mean over corrupted conditions.

    The clean side (overhead gallery in d2s, overhead queries in s2d) is
    embedded exactly once and asserted byte-identical to fresh clean loads;
    only the ground views are re-embedded per condition.
    """
    query_recs, gallery_recs = _split_records(dataset, direction)
    corrupted_side = _corrupted_side(direction)
    clean_recs = gallery_recs if corrupted_side == "query" else query_recs
    clean_rasters = _stack_rasters(dataset, clean_recs, "normal", None)
    assert clean_rasters.tobytes() == _stack_rasters(
        dataset, clean_recs, "normal", None
    ).tobytes(), "clean-side inputs must be byte-identical to clean renders"

    calls_before = model.infer_calls
    clean_embs = model.embed_batch(clean_rasters)
    weather_recs = query_recs if corrupted_side == "query" else gallery_recs
    table: dict[str, dict[str, float]] = {}
    for ci, condition in enumerate(CONDITIONS):
        rng = np.random.default_rng((seed, ci))
        weather_rasters = _stack_rasters(dataset, weather_recs, condition, rng)
        weather_embs = model.embed_batch(weather_rasters)
        if corrupted_side == "query":
            index = EmbeddingIndex(clean_embs, _ids(gallery_recs),
                                   _coords(gallery_recs))
            result = evaluate(weather_embs, _ids(query_recs), index,
                              _coords(query_recs))
        else:
            index = EmbeddingIndex(weather_embs, _ids(gallery_recs),
                                   _coords(gallery_recs))
            result = evaluate(clean_embs, _ids(query_recs), index,
                              _coords(query_recs))
        table[condition] = {
            "r@1": recall_at_k(result, 1),
            "ap": average_precision(result),
        }
    expected = len(clean_recs) + len(CONDITIONS) * len(weather_recs)
    assert model.infer_calls - calls_before == expected, \
        "single-pass protocol violated: unexpected forward-pass count"
    table[MEAN_COLUMN] = {
        metric: sum(table[c][metric] for c in CORRUPT_CONDITIONS)
        / len(CORRUPT_CONDITIONS)
        for metric in ("r@1", "ap")
    }
    return table
