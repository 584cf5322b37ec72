"""Triple ingestion, vocabularies, reverse-relation augmentation, and indices.

Triples are TSV lines ``head<TAB>relation<TAB>tail``. Vocabulary ids are
assigned by first appearance scanning train, then valid, then test, so
reloading the same files always produces the same ids. Every original
relation r gets a reverse twin with id r + |R|; for each training triple
(h, r, t) the augmented split also contains (t, r + |R|, h), which reduces
head prediction to tail prediction under the reverse relation.
"""
from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Malformed input files or inconsistent dataset state."""


CATEGORIES = ("1-1", "1-N", "N-1", "N-N")
_TRANSPOSED = {"1-1": "1-1", "1-N": "N-1", "N-1": "1-N", "N-N": "N-N"}
CATEGORY_THRESHOLD = 1.5


@dataclass
class DatasetStats:
    n_entities: int
    n_relations: int
    n_train: int
    n_valid: int
    n_test: int


@dataclass
class Dataset:
    entity_names: list
    relation_names: list
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    train_augmented: np.ndarray = None
    filter_index: dict = field(default_factory=dict)
    train_tails: dict = field(default_factory=dict)
    relation_categories: dict = field(default_factory=dict)
    category_fallback: set = field(default_factory=set)
    entity_degree: np.ndarray = None
    entity_in_degree: np.ndarray = None
    entity_out_degree: np.ndarray = None

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def stats(self) -> DatasetStats:
        return DatasetStats(
            self.n_entities, self.n_relations,
            len(self.train), len(self.valid), len(self.test),
        )

    def entity_vocab_hash(self) -> str:
        return _vocab_hash(self.entity_names)

    def relation_vocab_hash(self) -> str:
        return _vocab_hash(self.relation_names)


def _vocab_hash(names) -> str:
    digest = hashlib.sha256()
    for name in names:
        digest.update(name.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def _parse_tsv(path: str) -> list:
    triples = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(
                    f"{path}:{line_no}: expected 3 tab-separated fields, got {len(fields)}"
                )
            triples.append(tuple(fields))
    return triples


def reverse_triples(triples: np.ndarray, n_relations: int) -> np.ndarray:
    """(h, r, t) -> (t, r + |R|, h) for every row."""
    rev = np.empty_like(triples)
    rev[:, 0] = triples[:, 2]
    rev[:, 1] = triples[:, 1] + n_relations
    rev[:, 2] = triples[:, 0]
    return rev


def augment_with_reverses(triples: np.ndarray, n_relations: int) -> np.ndarray:
    return np.concatenate([triples, reverse_triples(triples, n_relations)], axis=0)


def _group_tails_by_query(triples: np.ndarray) -> dict:
    """Map (head, relation) -> sorted unique tail ids, via one lexsort.

    Equivalent to accumulating per-key sets but linear-ish in the triple
    count, which matters on million-triple inputs.
    """
    if len(triples) == 0:
        return {}
    s = triples[np.lexsort((triples[:, 2], triples[:, 1], triples[:, 0]))]
    keep = np.concatenate(([True], (s[1:] != s[:-1]).any(axis=1)))
    u = s[keep]
    hr_changed = (u[1:, 0] != u[:-1, 0]) | (u[1:, 1] != u[:-1, 1])
    starts = np.concatenate(([0], np.nonzero(hr_changed)[0] + 1, [len(u)]))
    heads = u[starts[:-1], 0].tolist()
    rels = u[starts[:-1], 1].tolist()
    tails = u[:, 2]
    return {
        (heads[i], rels[i]): tails[starts[i]:starts[i + 1]].copy()
        for i in range(len(heads))
    }


def build_filter_index(dataset: Dataset) -> dict:
    """All known-true tails per (head, augmented relation) across every split.

    Both directions are folded in, so the index answers head queries (via the
    reverse relation) as well as tail queries.
    """
    combined = np.concatenate([
        augment_with_reverses(split, dataset.n_relations)
        for split in (dataset.train, dataset.valid, dataset.test)
    ])
    return _group_tails_by_query(combined)


def build_train_tails(dataset: Dataset) -> dict:
    """Train-split-only tails per (head, augmented relation); multi-label targets."""
    return _group_tails_by_query(dataset.train_augmented)


def categorize_relations(dataset: Dataset) -> tuple[dict, set]:
    """Classify every relation as 1-1 / 1-N / N-1 / N-N from train-split fan-out.

    tph is triples per distinct head, hpt triples per distinct tail, both
    thresholded at 1.5. Reverse relations inherit the transposed category.
    Relations that never occur in train are classified from valid+test and
    flagged in the returned fallback set.
    """
    by_rel = defaultdict(list)
    for h, r, t in dataset.train:
        by_rel[int(r)].append((int(h), int(t)))
    fallback = set()
    for split in (dataset.valid, dataset.test):
        for h, r, t in split:
            if int(r) not in by_rel:
                fallback.add(int(r))
    for split in (dataset.valid, dataset.test):
        for h, r, t in split:
            if int(r) in fallback:
                by_rel[int(r)].append((int(h), int(t)))

    categories = {}
    for rel, pairs in by_rel.items():
        heads = {h for h, _ in pairs}
        tails = {t for _, t in pairs}
        tph = len(pairs) / len(heads)
        hpt = len(pairs) / len(tails)
        wide_tail = tph >= CATEGORY_THRESHOLD
        wide_head = hpt >= CATEGORY_THRESHOLD
        if wide_tail and wide_head:
            cat = "N-N"
        elif wide_tail:
            cat = "1-N"
        elif wide_head:
            cat = "N-1"
        else:
            cat = "1-1"
        categories[rel] = cat
    for rel in list(categories):
        categories[rel + dataset.n_relations] = _TRANSPOSED[categories[rel]]
    return categories, fallback


def entity_degrees(dataset: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Training degree per entity: head plus tail occurrences in original-direction train.

    A self-loop counts twice. Also returns the out-degree (head occurrences)
    and in-degree (tail occurrences) separately, since published
    degree-bucket plots do not pin down which direction they count.
    """
    n = dataset.n_entities
    out_deg = np.bincount(dataset.train[:, 0], minlength=n).astype(np.int64)
    in_deg = np.bincount(dataset.train[:, 2], minlength=n).astype(np.int64)
    return out_deg + in_deg, in_deg, out_deg


def dataset_from_triples(train, valid, test) -> Dataset:
    """Build the full Dataset (vocabs, augmentation, indices) from string triples."""
    entity_ids, relation_ids = {}, {}
    entity_names, relation_names = [], []

    def _entity(name: str) -> int:
        if name not in entity_ids:
            entity_ids[name] = len(entity_names)
            entity_names.append(name)
        return entity_ids[name]

    def _relation(name: str) -> int:
        if name not in relation_ids:
            relation_ids[name] = len(relation_names)
            relation_names.append(name)
        return relation_ids[name]

    encoded = []
    for split in (train, valid, test):
        rows = np.empty((len(split), 3), dtype=np.int64)
        for i, (h, r, t) in enumerate(split):
            rows[i, 0] = _entity(h)
            rows[i, 1] = _relation(r)
            rows[i, 2] = _entity(t)
        encoded.append(rows)

    ds = Dataset(entity_names, relation_names, *encoded)
    ds.train_augmented = augment_with_reverses(ds.train, ds.n_relations)
    ds.filter_index = build_filter_index(ds)
    ds.train_tails = build_train_tails(ds)
    ds.relation_categories, ds.category_fallback = categorize_relations(ds)
    ds.entity_degree, ds.entity_in_degree, ds.entity_out_degree = entity_degrees(ds)
    return ds


def load_tsv(train_path: str, valid_path: str, test_path: str) -> Dataset:
    for path in (train_path, valid_path, test_path):
        try:
            with open(path, encoding="utf-8"):
                pass
        except OSError as exc:
            raise DataError(f"cannot read triple file {path}: {exc}") from exc
    return dataset_from_triples(
        _parse_tsv(train_path), _parse_tsv(valid_path), _parse_tsv(test_path)
    )


def stats_report(dataset: Dataset) -> str:
    """Line-oriented key=value summary of the loaded dataset."""
    stats = dataset.stats()
    deg = dataset.entity_degree
    lines = [
        f"n_entities={stats.n_entities}",
        f"n_relations={stats.n_relations}",
        f"n_train={stats.n_train}",
        f"n_valid={stats.n_valid}",
        f"n_test={stats.n_test}",
        f"n_train_augmented={len(dataset.train_augmented)}",
        "degree_definition=head+tail occurrences in original-direction train triples",
        f"mean_degree={deg.mean():.6g}",
        f"mean_in_degree={dataset.entity_in_degree.mean():.6g}",
        f"mean_out_degree={dataset.entity_out_degree.mean():.6g}",
        f"frac_degree_below_10={(deg < 10).mean():.6g}",
    ]
    return "\n".join(lines) + "\n"
