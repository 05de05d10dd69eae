"""Exact AUC, model evaluation, and translated-feature neighbor analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Correspondence, EncodedDataset
from .model import ModelAssembly, SingleDomainModel

_EVAL_CHUNK = 8192


class UndefinedAUCError(ValueError):
    """AUC is undefined without at least one positive and one negative."""


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank of their group."""
    n = scores.size
    order = np.argsort(scores, kind="mergesort")
    ordered = scores[order]
    boundaries = np.flatnonzero(np.diff(ordered)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    group_rank = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1 .. end
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties as 1/2.

    Exact rank-sum computation, O(n log n); no binning.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.size != y.size:
        raise ValueError(f"auc: {s.size} scores vs {y.size} labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("auc: labels must be exactly 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = _average_ranks(s)
    return float((ranks[y == 1.0].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _logloss_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    l = logits.ravel()
    y = labels.ravel()
    per = np.maximum(l, 0.0) - l * y + np.log1p(np.exp(-np.abs(l)))
    return float(per.mean())


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    pos = v >= 0
    out = np.empty_like(v)
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _model_logits(model: ModelAssembly, split: EncodedDataset, stage: int, domain: str) -> np.ndarray:
    out = np.empty((split.n, 1))
    for start in range(0, split.n, _EVAL_CHUNK):
        idx = np.arange(start, min(start + _EVAL_CHUNK, split.n))
        batch = split.batch(idx)
        if stage == 1:
            logits = model.score(domain, model.latent(domain, batch))
        elif stage == 2:
            z = model.latent(model.aug_domain, batch)
            from .model import augment  # local to avoid import noise at module top

            logits = model.score_aug(augment(z, model.translated(model.aug_domain, z)))
        else:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        out[idx] = logits.values
    return out


def evaluate(model: ModelAssembly, split: EncodedDataset, stage: int = 1, domain: str = "target") -> dict:
    """Deterministic full-split metrics: exact AUC, mean logloss, and count."""
    logits = _model_logits(model, split, stage, domain)
    return {
        "auc": auc(_stable_sigmoid(logits), split.labels),
        "logloss": _logloss_from_logits(logits, split.labels),
        "n": split.n,
    }


def evaluate_baseline(model: SingleDomainModel, split: EncodedDataset) -> dict:
    out = np.empty((split.n, 1))
    for start in range(0, split.n, _EVAL_CHUNK):
        idx = np.arange(start, min(start + _EVAL_CHUNK, split.n))
        out[idx] = model.logits(split.batch(idx)).values
    return {
        "auc": auc(_stable_sigmoid(out), split.labels),
        "logloss": _logloss_from_logits(out, split.labels),
        "n": split.n,
    }


# ---------------------------------------------------------------------------
# translated-feature content analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryNeighbors:
    query_index: int
    query_item: int
    expected_source_item: int
    neighbor_indices: tuple[int, ...]
    neighbor_items: tuple[int, ...]
    distances: tuple[float, ...]
    hits: tuple[bool, ...]


@dataclass(frozen=True)
class NeighborReport:
    queries: tuple[QueryNeighbors, ...]
    hit_rate: float
    chance_rate: float
    k: int
    metric: str
    n_candidates: int

    def neighbor_item_matrix(self) -> np.ndarray:
        return np.array([q.neighbor_items for q in self.queries], dtype=np.int64)

    def query_items(self) -> np.ndarray:
        return np.array([q.query_item for q in self.queries], dtype=np.int64)


def _latents(model: ModelAssembly, split: EncodedDataset, domain: str, rows: np.ndarray) -> np.ndarray:
    out = np.empty((rows.size, model.config.d))
    for start in range(0, rows.size, _EVAL_CHUNK):
        idx = rows[start : start + _EVAL_CHUNK]
        out[start : start + idx.size] = model.latent(domain, split.batch(idx)).values
    return out


def knn_translation_analysis(
    model: ModelAssembly,
    source_split: EncodedDataset,
    target_split: EncodedDataset,
    correspondence: Correspondence | None,
    k: int = 5,
    metric: str = "cosine",
    normalize: bool = False,
    item_field: str = "item_id",
) -> NeighborReport:
    """For every positive target example, translate its latent feature and
    retrieve the k nearest positive source latents.

    With a ground-truth correspondence, a neighbor whose item is the query
    item's paired source item counts as a hit; the chance rate is the naive
    k / n_candidates reference.
    """
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"metric must be 'cosine' or 'euclidean', got '{metric}'")
    src_pos = np.flatnonzero(source_split.labels.ravel() == 1.0)
    tgt_pos = np.flatnonzero(target_split.labels.ravel() == 1.0)
    if k < 1 or k > src_pos.size:
        raise ValueError(f"k={k} invalid for {src_pos.size} source candidates")
    if tgt_pos.size == 0:
        raise ValueError("no positive target examples to analyze")

    candidates = _latents(model, source_split, "source", src_pos)
    queries = _latents(model, target_split, "target", tgt_pos)
    queries = queries @ model.translators["target"].values.T

    if normalize or metric == "cosine":
        cn = candidates / np.maximum(np.linalg.norm(candidates, axis=1, keepdims=True), 1e-12)
        qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    else:
        cn, qn = candidates, queries
    if metric == "cosine":
        dist = 1.0 - qn @ cn.T
    else:
        sq = (qn * qn).sum(1)[:, None] - 2.0 * qn @ cn.T + (cn * cn).sum(1)[None, :]
        dist = np.sqrt(np.maximum(sq, 0.0))

    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    row = np.arange(part.shape[0])[:, None]
    order = np.argsort(dist[row, part], axis=1, kind="mergesort")
    top = part[row, order]

    src_items = source_split.columns[item_field][src_pos]
    tgt_items = target_split.columns[item_field][tgt_pos]
    corr_arr = correspondence.as_array() if correspondence is not None else None

    out = []
    n_hit = 0
    for qi in range(tgt_pos.size):
        nbr = top[qi]
        items = src_items[nbr]
        expected = int(corr_arr[tgt_items[qi]]) if corr_arr is not None else -1
        hits = tuple(bool(it == expected) for it in items) if corr_arr is not None else (False,) * k
        n_hit += int(any(hits))
        out.append(
            QueryNeighbors(
                query_index=int(tgt_pos[qi]),
                query_item=int(tgt_items[qi]),
                expected_source_item=expected,
                neighbor_indices=tuple(int(src_pos[j]) for j in nbr),
                neighbor_items=tuple(int(i) for i in items),
                distances=tuple(float(dist[qi, j]) for j in nbr),
                hits=hits,
            )
        )
    return NeighborReport(
        queries=tuple(out),
        hit_rate=n_hit / tgt_pos.size,
        chance_rate=k / src_pos.size,
        k=k,
        metric=metric,
        n_candidates=int(src_pos.size),
    )


def write_neighbor_report(report: NeighborReport, path) -> None:
    """JSON Lines, one query per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for q in report.queries:
            rec = {
                "query_index": q.query_index,
                "query_item": q.query_item,
                "expected_source_item": q.expected_source_item,
                "neighbors": [
                    {"index": i, "item": it, "distance": d, "hit": h}
                    for i, it, d, h in zip(q.neighbor_indices, q.neighbor_items, q.distances, q.hits)
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def knn_null_hit_rates(
    report: NeighborReport, correspondence: Correspondence, n_permutations: int, seed: int
) -> np.ndarray:
    """Hit rates under random item correspondences (permutation null)."""
    neighbor_items = report.neighbor_item_matrix()
    q_items = report.query_items()
    n_source_items = correspondence.as_array().size
    rng = np.random.default_rng(np.random.SeedSequence([0x9E16B0, seed]))
    rates = np.empty(n_permutations)
    for b in range(n_permutations):
        null_map = rng.permutation(n_source_items)
        expected = null_map[q_items]
        rates[b] = (neighbor_items == expected[:, None]).any(axis=1).mean()
    return rates
