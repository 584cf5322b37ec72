"""Filtered ranking, metric aggregation, and report emission.

Every test triple (h, r, t) contributes two predictions: the tail query
(h, r, ?) with gold t, and the head query rewritten as the tail query
(t, r', ?) with gold h under the reverse relation r'. Ranking is filtered:
candidates known to be true for the same (head, relation) anywhere in
train/valid/test are excluded, except the gold entity itself. Ties are
rank-averaged by default.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .numkernel import matmul

DEGREE_BUCKETS = ("1", "2", "3-5", "6-10", "11-100", ">100")
TIE_BREAKS = ("average", "pessimistic", "optimistic")
DIRECTIONS = ("head", "tail")


def degree_bucket(degree: int) -> str:
    if degree <= 1:
        return "1"
    if degree == 2:
        return "2"
    if degree <= 5:
        return "3-5"
    if degree <= 10:
        return "6-10"
    if degree <= 100:
        return "11-100"
    return ">100"


def filtered_rank(scores: np.ndarray, gold: int, filter_ids: np.ndarray,
                  tie_break: str = "average") -> float:
    """Rank of the gold entity among all entities minus the other known-true ones.

    rank = 1 + #better + #ties/2 under average tie handling; pessimistic
    counts every tie as better, optimistic counts none.
    """
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"tie_break must be one of {TIE_BREAKS}, got {tie_break!r}")
    if not 0 <= gold < scores.shape[0]:
        raise ValueError(f"gold id {gold} out of range [0, {scores.shape[0]})")
    gold_score = scores[gold]
    keep = np.ones(scores.shape[0], dtype=bool)
    if filter_ids is not None and len(filter_ids):
        keep[np.asarray(filter_ids, dtype=np.int64)] = False
    keep[gold] = True
    kept = scores[keep]
    greater = int(np.count_nonzero(kept > gold_score))
    ties = int(np.count_nonzero(kept == gold_score)) - 1  # the gold itself
    if tie_break == "average":
        return 1.0 + greater + ties / 2.0
    if tie_break == "pessimistic":
        return 1.0 + greater + ties
    return 1.0 + greater


@dataclass
class MetricBlock:
    count: int
    mr: float
    mrr: float
    hits1: float
    hits10: float

    @classmethod
    def from_ranks(cls, ranks: np.ndarray) -> "MetricBlock":
        if ranks.size == 0:
            return cls(0, float("nan"), float("nan"), float("nan"), float("nan"))
        return cls(
            count=int(ranks.size),
            mr=float(ranks.mean()),
            mrr=float((1.0 / ranks).mean()),
            hits1=float((ranks <= 1.0).mean()),
            hits10=float((ranks <= 10.0).mean()),
        )


@dataclass
class EvalReport:
    split: str
    overall: MetricBlock
    by_category: dict = field(default_factory=dict)       # (category, direction) ->
    by_category_merged: dict = field(default_factory=dict)  # effective category ->
    by_degree: dict = field(default_factory=dict)         # bucket label ->

    def validate(self):
        """Structural sanity asserted on every report."""
        if self.overall.count:
            assert self.overall.mr >= 1.0
            assert 0.0 < self.overall.mrr <= 1.0
            assert self.overall.hits1 <= self.overall.hits10
            # 1/x is convex, so mean(1/rank) >= 1/mean(rank).
            assert self.overall.mrr >= 1.0 / self.overall.mr - 1e-12
        for table in (self.by_category, self.by_category_merged, self.by_degree):
            total = sum(block.count for block in table.values())
            assert total == self.overall.count, "bucket counts must sum to total predictions"


def _query_table(dataset: Dataset, split: str) -> dict:
    """Flatten a split into per-prediction arrays (tail query + rewritten head query)."""
    if split not in ("train", "valid", "test"):
        raise ValueError(f"unknown split {split!r}")
    triples = getattr(dataset, split)
    n = len(triples)
    heads = np.concatenate([triples[:, 0], triples[:, 2]])
    rels = np.concatenate([triples[:, 1], triples[:, 1] + dataset.n_relations])
    golds = np.concatenate([triples[:, 2], triples[:, 0]])
    directions = np.array(["tail"] * n + ["head"] * n)
    categories = np.array([dataset.relation_categories[int(r)] for r in rels])
    buckets = np.array([degree_bucket(int(dataset.entity_degree[g])) for g in golds])
    return {
        "heads": heads, "rels": rels, "golds": golds,
        "directions": directions, "categories": categories, "buckets": buckets,
    }


def _resolve_workers(num_workers) -> int:
    cap = os.environ.get("DEEPE_NUM_WORKERS")
    cap = int(cap) if cap else None
    if num_workers is None:
        num_workers = cap or 1
    elif cap:
        num_workers = min(num_workers, cap)
    return max(1, num_workers)


def evaluate(model, dataset: Dataset, split: str = "test", batch_size: int = 512,
             tie_break: str = "average", num_workers: int | None = None) -> EvalReport:
    """Filtered-ranking evaluation of a frozen model on one split.

    The projected entity table t' is computed once; query batches then only
    run the feature network. Batches may fan out over a thread pool
    (DEEPE_NUM_WORKERS caps the width) and merge deterministically by index.
    """
    table = _query_table(dataset, split)
    heads, rels, golds = table["heads"], table["rels"], table["golds"]
    tprime = model.project_forward("eval")
    n_queries = len(heads)
    ranks = np.zeros(n_queries, dtype=np.float64)
    chunks = [
        (start, min(start + batch_size, n_queries))
        for start in range(0, n_queries, batch_size)
    ]

    def rank_chunk(bounds):
        start, stop = bounds
        v = model.feature_forward(heads[start:stop], rels[start:stop], "eval")
        scores = matmul(v, tprime.T)
        out = np.zeros(stop - start, dtype=np.float64)
        for i in range(stop - start):
            key = (int(heads[start + i]), int(rels[start + i]))
            filt = dataset.filter_index.get(key)
            out[i] = filtered_rank(scores[i], int(golds[start + i]), filt, tie_break)
        return start, out

    workers = _resolve_workers(num_workers)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for start, out in pool.map(rank_chunk, chunks):
                ranks[start:start + len(out)] = out
    else:
        for bounds in chunks:
            start, out = rank_chunk(bounds)
            ranks[start:start + len(out)] = out

    report = EvalReport(split=split, overall=MetricBlock.from_ranks(ranks))
    categories = table["categories"]
    directions = table["directions"]
    original_cats = np.where(
        directions == "tail", categories,
        np.array([_transpose(c) for c in categories]),
    )
    for cat in ("1-1", "1-N", "N-1", "N-N"):
        for direction in DIRECTIONS:
            mask = (original_cats == cat) & (directions == direction)
            if mask.any():
                report.by_category[(cat, direction)] = MetricBlock.from_ranks(ranks[mask])
        merged = categories == cat
        if merged.any():
            report.by_category_merged[cat] = MetricBlock.from_ranks(ranks[merged])
    for bucket in DEGREE_BUCKETS:
        mask = table["buckets"] == bucket
        if mask.any():
            report.by_degree[bucket] = MetricBlock.from_ranks(ranks[mask])
    report.validate()
    return report


def _transpose(category: str) -> str:
    return {"1-1": "1-1", "1-N": "N-1", "N-1": "1-N", "N-N": "N-N"}[category]


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def emit_report(report: EvalReport, out_dir: str) -> dict:
    """Write overall.csv, by_category.csv and by_degree.csv; returns the paths.

    by_category has one row per (category, direction) pair: 8 rows on a
    dataset where every category occurs. Categories reflect the original
    relation, so a head prediction under an N-1 relation lands in the
    (N-1, head) row. by_degree buckets are 1, 2, 3-5, 6-10, 11-100, >100 by
    the training degree of the entity being predicted.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    paths["overall"] = os.path.join(out_dir, "overall.csv")
    with open(paths["overall"], "w", encoding="utf-8") as fh:
        fh.write("split,count,mr,mrr,hits1,hits10\n")
        o = report.overall
        fh.write(
            f"{report.split},{o.count},{_fmt(o.mr)},{_fmt(o.mrr)},"
            f"{_fmt(o.hits1)},{_fmt(o.hits10)}\n"
        )

    paths["by_category"] = os.path.join(out_dir, "by_category.csv")
    with open(paths["by_category"], "w", encoding="utf-8") as fh:
        fh.write("category,direction,count,mr,mrr,hits1,hits10\n")
        for cat in ("1-1", "1-N", "N-1", "N-N"):
            for direction in DIRECTIONS:
                block = report.by_category.get((cat, direction))
                if block is None:
                    continue
                fh.write(
                    f"{cat},{direction},{block.count},{_fmt(block.mr)},"
                    f"{_fmt(block.mrr)},{_fmt(block.hits1)},{_fmt(block.hits10)}\n"
                )

    paths["by_degree"] = os.path.join(out_dir, "by_degree.csv")
    with open(paths["by_degree"], "w", encoding="utf-8") as fh:
        fh.write("bucket,count,mrr\n")
        fh.write(f"# buckets: {','.join(DEGREE_BUCKETS)}\n")
        for bucket in DEGREE_BUCKETS:
            block = report.by_degree.get(bucket)
            if block is None:
                continue
            fh.write(f"{bucket},{block.count},{_fmt(block.mrr)}\n")
    return paths
