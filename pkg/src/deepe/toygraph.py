"""A small deterministic rule-generated knowledge graph for sanity harnesses.

50 entities, 5 relations, 500 triples. The rules are mutually redundant
(each relation has an inverse or symmetric twin), so held-out facts stay
inferable from the training split, and the relation set covers all four
fan-out categories:

    next        e_i -> e_{i+1 mod 50}                 1-1
    prev        e_{i+1 mod 50} -> e_i                 1-1   (inverse of next)
    in_group    e_i -> e_{45 + (i mod 5)}             N-1   (5 hub entities)
    has_member  e_{45 + (i mod 5)} -> e_i             1-N   (inverse of in_group)
    peer        e_i <-> e_{i+k}, k in {7, 11, 17}     N-N   (symmetric)
"""
from __future__ import annotations

import os

from .data import Dataset, dataset_from_triples
from .numkernel import Rng

N_ENTITIES = 50


def _name(i: int) -> str:
    return f"e{i:02d}"


def toy_triples() -> list:
    triples = []
    n = N_ENTITIES
    for i in range(n):
        triples.append((_name(i), "next", _name((i + 1) % n)))
        triples.append((_name((i + 1) % n), "prev", _name(i)))
        group = _name(45 + (i % 5))
        triples.append((_name(i), "in_group", group))
        triples.append((group, "has_member", _name(i)))
        for offset in (7, 11, 17):
            triples.append((_name(i), "peer", _name((i + offset) % n)))
            triples.append((_name((i + offset) % n), "peer", _name(i)))
    # symmetric pairs are generated twice; keep first occurrences only
    seen = set()
    unique = []
    for triple in triples:
        if triple not in seen:
            seen.add(triple)
            unique.append(triple)
    return unique


def split_triples(triples: list, seed: int = 0, valid_frac: float = 0.1,
                  test_frac: float = 0.1) -> tuple[list, list, list]:
    order = Rng(seed).child(5).permutation(len(triples))
    n_valid = int(len(triples) * valid_frac)
    n_test = int(len(triples) * test_frac)
    valid = [triples[i] for i in order[:n_valid]]
    test = [triples[i] for i in order[n_valid:n_valid + n_test]]
    train = [triples[i] for i in order[n_valid + n_test:]]
    return train, valid, test


def toy_dataset(seed: int = 0) -> Dataset:
    return dataset_from_triples(*split_triples(toy_triples(), seed))


def write_toy_dataset(dir_path: str, seed: int = 0) -> tuple[str, str, str]:
    """Materialize the toy graph as train.txt/valid.txt/test.txt TSV files."""
    os.makedirs(dir_path, exist_ok=True)
    paths = []
    for name, triples in zip(("train", "valid", "test"), split_triples(toy_triples(), seed)):
        path = os.path.join(dir_path, f"{name}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            for h, r, t in triples:
                fh.write(f"{h}\t{r}\t{t}\n")
        paths.append(path)
    return tuple(paths)
