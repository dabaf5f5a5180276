"""Exact top-K cosine retrieval and membership leakage risk.

A query "leaks" when its true identity appears among the labels of its K
most similar gallery rows; the risk is the fraction of leaking queries.
Similarities are computed in float64 by a blocked matrix product. Ties are
broken toward the lower gallery row, which keeps results identical to a
stable full sort regardless of blocking or worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .seeding import rng_for
from .tensorio import EmbeddingSet


class ZeroRowError(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalIndex:
    rows: np.ndarray  # (n, d) unit-norm float64
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class RiskReport:
    k: int
    risk: float
    n_queries: int
    hits: np.ndarray
    curve: list = field(default_factory=list)


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise ZeroRowError("cannot normalize a zero vector")
    return x / norms


def build_index(gallery: EmbeddingSet) -> RetrievalIndex:
    if gallery.n < 1:
        raise ValueError("gallery must hold at least one row")
    rows = _normalize(gallery.rows)
    rows.setflags(write=False)
    labels = gallery.labels.copy()
    labels.setflags(write=False)
    return RetrievalIndex(rows, labels)


def _select_topk(sims: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k largest entries, ties to the lower column."""
    n = sims.shape[1]
    if k == n:
        return np.lexsort((np.broadcast_to(np.arange(n), sims.shape), -sims), axis=1)
    part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(sims, part, axis=1)
    kth = vals.min(axis=1)
    out = np.take_along_axis(part, np.lexsort((part, -vals), axis=1), axis=1)
    # rows where the k-th value is tied beyond the partition need the full candidate set
    crowded = np.flatnonzero((sims >= kth[:, None]).sum(axis=1) > k)
    for r in crowded:
        cand = np.flatnonzero(sims[r] >= kth[r])
        order = np.lexsort((cand, -sims[r, cand]))
        out[r] = cand[order[:k]]
    return out


def _topk_block(index: RetrievalIndex, queries: np.ndarray, k: int) -> np.ndarray:
    return _select_topk(queries @ index.rows.T, k)


def top_k_indices(index: RetrievalIndex, queries: np.ndarray, k: int,
                  workers: int = 1, block: int = 512) -> np.ndarray:
    """(n_queries, k) gallery row indices, most similar first."""
    if not 1 <= k <= index.n:
        raise ValueError(f"K must lie in [1, {index.n}], got {k}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != index.dim:
        raise DimMismatch(f"query dim {queries.shape[1]} != gallery dim {index.dim}")
    queries = _normalize(queries)
    starts = range(0, queries.shape[0], block)
    with threadpool_limits(limits=1):
        if workers <= 1:
            parts = [_topk_block(index, queries[s:s + block], k) for s in starts]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda s: _topk_block(index, queries[s:s + block], k), starts))
    if not parts:
        return np.zeros((0, k), dtype=np.int64)
    return np.concatenate(parts)


def top_k(index: RetrievalIndex, query: np.ndarray, k: int) -> list[int]:
    """Labels of the k gallery rows most similar to one query."""
    return index.labels[top_k_indices(index, query, k)[0]].tolist()


def leakage_risk(queries: EmbeddingSet, index: RetrievalIndex, k: int = 2, workers: int = 1) -> RiskReport:
    if queries.n and queries.dim != index.dim:
        raise DimMismatch(f"query dim {queries.dim} != gallery dim {index.dim}")
    if queries.n == 0:
        return RiskReport(k, 0.0, 0, np.zeros(0, dtype=bool))
    idx = top_k_indices(index, queries.rows, k, workers=workers)
    hits = (index.labels[idx] == queries.labels[:, None]).any(axis=1)
    return RiskReport(k, float(hits.mean()), queries.n, hits)


def risk_curve(queries: EmbeddingSet, gallery: EmbeddingSet, k: int, id_counts, seed: int,
               workers: int = 1) -> list[tuple[int, float]]:
    """Leakage risk on seeded identity subsets of growing size."""
    shared = np.intersect1d(np.unique(queries.labels), np.unique(gallery.labels))
    rng = rng_for(seed, 0xC0FE)
    order = rng.permutation(shared)
    points = []
    for count in id_counts:
        count = int(count)
        if count < 1 or count > len(shared):
            raise ValueError(f"identity count {count} outside [1, {len(shared)}] shared identities")
        ids = order[:count]
        q = queries.subset(np.flatnonzero(np.isin(queries.labels, ids)))
        g = gallery.subset(np.flatnonzero(np.isin(gallery.labels, ids)))
        if k > g.n:
            raise ValueError(f"K={k} exceeds the {g.n} gallery rows of a {count}-identity subset")
        points.append((count, leakage_risk(q, build_index(g), k, workers).risk))
    return points


def curve_csv(points, k: int) -> str:
    lines = ["n_ids,k,risk"] + [f"{n},{k},{r:.6f}" for n, r in points]
    return "\n".join(lines) + "\n"
