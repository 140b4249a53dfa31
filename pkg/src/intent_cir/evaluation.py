"""Retrieval metrics and diagnostic exports.

CSV schemas
-----------
similarity CSV:  B rows of B comma-separated raw cosine values (``repr`` floats).
loyalty-rank CSV: header ``query,similarity_rank,loyalty_rank``; ranks are
0-based positions of the true target when the query's row is sorted
descending (ties by ascending column index).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import composer as cmp
from .objectives import cosine_matrix, loyalty, similarity_matrix
from .pnm import write_pgm_u8


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """Descending order per row; equal scores keep ascending column order."""
    return np.argsort(-np.asarray(scores), axis=1, kind="stable")


def pooled_queries(params: cmp.ComposerParams, images: np.ndarray, token_lists) -> np.ndarray:
    return cmp.pool(cmp.encode_batch(params, images, list(token_lists)), params.config.pool)


def pooled_gallery(params: cmp.ComposerParams, gallery: np.ndarray) -> np.ndarray:
    return cmp.pool(cmp.encode_batch(params, gallery), params.config.pool)


def rank_all(params: cmp.ComposerParams, queries, gallery: np.ndarray) -> np.ndarray:
    """RankingTable: row ``i`` lists gallery indices from most to least similar."""
    gallery = np.asarray(gallery)
    if len(gallery) == 0:
        raise ValueError("cannot rank against an empty gallery")
    images = np.stack([q[0] for q in queries])
    tokens = [tuple(q[1]) for q in queries]
    return rank_rows(cosine_matrix(pooled_queries(params, images, tokens), pooled_gallery(params, gallery)))


def truth_positions(rankings: np.ndarray, truths) -> np.ndarray:
    rankings = np.asarray(rankings)
    truths = np.asarray(truths)
    hits = rankings == truths[:, None]
    if not np.all(hits.sum(axis=1) == 1):
        raise ValueError("every truth index must occur exactly once in its ranking")
    return hits.argmax(axis=1)


def recall_at_k(rankings: np.ndarray, truths, k: int) -> float:
    rankings = np.asarray(rankings)
    if not 1 <= k <= rankings.shape[1]:
        raise ValueError(f"k={k} outside [1, {rankings.shape[1]}]")
    return float(np.mean(truth_positions(rankings, truths) < k))


def restrict_rankings(rankings: np.ndarray, subsets) -> list[list[int]]:
    """Order each subset by its position in the full ranking."""
    out = []
    for row, subset in zip(np.asarray(rankings), subsets):
        members = set(int(s) for s in subset)
        out.append([int(g) for g in row if int(g) in members])
    return out


def subset_recall_at_k(rankings: np.ndarray, subsets, truths, k: int) -> float:
    restricted = restrict_rankings(rankings, subsets)
    hits = []
    for order, truth in zip(restricted, truths):
        if int(truth) not in order:
            raise ValueError(f"truth {truth} missing from its candidate subset")
        if not 1 <= k <= len(order):
            raise ValueError(f"k={k} outside [1, {len(order)}]")
        hits.append(order.index(int(truth)) < k)
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------


def heat_values(cos: np.ndarray) -> np.ndarray:
    """Linear map of [-1, 1] to 8-bit grey, half-up rounding."""
    return np.floor(255.0 * (np.clip(cos, -1.0, 1.0) + 1.0) / 2.0 + 0.5).astype(np.uint8)


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def export_similarity_heat(params: cmp.ComposerParams, queries, targets: np.ndarray, path: str | Path) -> np.ndarray:
    """Write ``<path>.csv`` (raw cosines) and ``<path>.pgm`` (heat image); return the matrix."""
    if len(queries) != len(targets):
        raise ValueError("need one target per query")
    images = np.stack([q[0] for q in queries])
    cos = cosine_matrix(pooled_queries(params, images, [q[1] for q in queries]), pooled_gallery(params, np.asarray(targets)))
    path = Path(path)
    write_matrix_csv(path.with_suffix(".csv"), cos)
    write_pgm_u8(path.with_suffix(".pgm"), heat_values(cos))
    return cos


def loyalty_ranks(s: np.ndarray, l: np.ndarray, y: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Position of each query's true column under similarity and under loyalty ordering."""
    s = np.asarray(s)
    truths = np.argmax(np.eye(len(s)) if y is None else np.asarray(y), axis=1)
    return truth_positions(rank_rows(s), truths), truth_positions(rank_rows(l), truths)


def write_rank_csv(path: str | Path, sim_rank, loy_rank) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query", "similarity_rank", "loyalty_rank"])
        for i, (a, b) in enumerate(zip(sim_rank, loy_rank)):
            w.writerow([i, int(a), int(b)])


def export_loyalty_ranks(s: np.ndarray, l: np.ndarray, y: np.ndarray | None, path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    sim_rank, loy_rank = loyalty_ranks(s, l, y)
    write_rank_csv(path, sim_rank, loy_rank)
    return sim_rank, loy_rank


def block_ranks(
    params: cmp.ComposerParams, triplets, batch_size: int, tau: float = 0.07, enable_pwr: bool = True, enable_nwr: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Per-query truth ranks under similarity and loyalty ordering within consecutive in-batch blocks.

    A trailing partial block is dropped, as in training.
    """
    sims, loys = [], []
    for start in range(0, len(triplets) - batch_size + 1, batch_size):
        block = triplets[start:start + batch_size]
        c = pooled_queries(params, np.stack([t.reference for t in block]), [t.tokens for t in block])
        g = pooled_gallery(params, np.stack([t.target for t in block]))
        s = similarity_matrix(c, g, tau)
        a, b = loyalty_ranks(s, loyalty(s, None, enable_pwr, enable_nwr).l)
        sims.append(a)
        loys.append(b)
    if not sims:
        raise ValueError(f"need at least {batch_size} triplets for one block")
    return np.concatenate(sims), np.concatenate(loys)


def batch_rank_statistics(
    params: cmp.ComposerParams, triplets, batch_size: int, tau: float = 0.07, enable_pwr: bool = True, enable_nwr: bool = True
) -> tuple[float, float]:
    """Mean truth rank under similarity and loyalty ordering over consecutive in-batch blocks."""
    sims, loys = block_ranks(params, triplets, batch_size, tau, enable_pwr, enable_nwr)
    return float(sims.mean()), float(loys.mean())
