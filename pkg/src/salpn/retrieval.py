"""Exact Euclidean ranking and the Recall@K / AP evaluation protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import read_fmap, write_fmap


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    class_id: int
    vector: np.ndarray


@dataclass(frozen=True)
class RankingResult:
    query_id: str
    order: tuple[str, ...]
    distances: np.ndarray
    rank_of_first_positive: int | None
    positive_ranks: tuple[int, ...] = ()


def _matrix(gallery) -> np.ndarray:
    G = np.stack([np.asarray(r.vector, dtype=np.float64) for r in gallery])
    if G.ndim != 2:
        raise ValueError("gallery vectors must be one-dimensional")
    return G


def _rank_with(query: EmbeddingRecord, gallery, G: np.ndarray) -> RankingResult:
    q = np.asarray(query.vector, dtype=np.float64)
    if q.shape != (G.shape[1],):
        raise ValueError(f"query dimension {q.shape} != gallery dimension {G.shape[1]}")
    d = np.sqrt(((G - q) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    pos = tuple(i + 1 for i, g in enumerate(order) if gallery[g].class_id == query.class_id)
    return RankingResult(
        query_id=query.id,
        order=tuple(gallery[i].id for i in order),
        distances=d[order],
        rank_of_first_positive=pos[0] if pos else None,
        positive_ranks=pos,
    )


def rank(query: EmbeddingRecord, gallery) -> RankingResult:
    """Sort the whole gallery by Euclidean distance; ties keep gallery order.

    Gallery items sharing the query's ``class_id`` are positives.
    """
    if not gallery:
        raise ValueError("empty gallery")
    return _rank_with(query, gallery, _matrix(gallery))


def recall_at_k(results, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("recall is undefined without queries")
    hits = sum(1 for r in results
               if r.rank_of_first_positive is not None and r.rank_of_first_positive <= k)
    return hits / len(results)


def average_precision(result: RankingResult, positives=None) -> float:
    """Mean of precision at each positive hit.

    ``positives`` is a set of gallery ids; by default the result's own
    class-matched ranks are used.
    """
    if positives is not None:
        positives = set(positives)
        ranks = [i + 1 for i, gid in enumerate(result.order) if gid in positives]
        n_pos = len(positives)
    else:
        ranks = list(result.positive_ranks)
        n_pos = len(ranks)
    if n_pos == 0 or not ranks:
        raise ValueError(f"query {result.query_id!r} has no positive in the gallery")
    return sum(hit / r for hit, r in enumerate(ranks, start=1)) / n_pos


def evaluate(queries, gallery, k_list=(1, 5, 10)) -> dict:
    """Mean AP and R@K over ``queries``, with a per-query breakdown."""
    if not queries:
        raise ValueError("no queries")
    if not gallery:
        raise ValueError("empty gallery")
    G = _matrix(gallery)
    classes = {g.class_id for g in gallery}
    results = []
    per_query = []
    for q in queries:
        if q.class_id not in classes:
            raise ValueError(f"query {q.id!r}: class {q.class_id} absent from gallery")
        r = _rank_with(q, gallery, G)
        results.append(r)
        per_query.append({"id": q.id, "rank": r.rank_of_first_positive, "ap": average_precision(r)})
    return {
        "recall": {str(k): recall_at_k(results, k) for k in k_list},
        "map": float(np.mean([p["ap"] for p in per_query])),
        "per_query": per_query,
    }


def write_embeddings(path, records) -> None:
    """FMAP1 matrix ``(1, n, dim)`` plus a ``<path>.jsonl`` sidecar of ids/classes."""
    path = Path(path)
    M = _matrix(records).astype(np.float32)
    write_fmap(path, M[None])
    Path(str(path) + ".jsonl").write_text(
        "".join(json.dumps({"id": r.id, "class_id": int(r.class_id)}) + "\n" for r in records))


def read_embeddings(path, sidecar=None) -> list[EmbeddingRecord]:
    path = Path(path)
    t = read_fmap(path)
    if t.shape[0] != 1:
        raise ValueError("embedding file must hold a single (n, dim) matrix")
    side = Path(sidecar) if sidecar else Path(str(path) + ".jsonl")
    meta = [json.loads(line) for line in side.read_text().splitlines() if line.strip()]
    if len(meta) != t.shape[1]:
        raise ValueError(f"sidecar lists {len(meta)} records, matrix has {t.shape[1]} rows")
    return [EmbeddingRecord(m["id"], int(m["class_id"]), t[0, i].astype(np.float64))
            for i, m in enumerate(meta)]
