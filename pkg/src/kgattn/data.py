"""Triple loading, vocabularies, reciprocal augmentation, and batching.

Input files are UTF-8 text with one tab-separated ``head relation tail``
fact per line (the distributed FB15k-237/WN18RR format). Identifiers are
assigned densely in first-seen order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLIT_FILES = ("train.txt", "valid.txt", "test.txt")


class TripleFormatError(ValueError):
    """A line of a triple file did not have exactly three tab-separated fields."""


class UnknownNameError(ValueError):
    """An entity or relation name is absent from a fixed vocabulary."""


class DoubleReciprocalError(ValueError):
    """Reciprocal augmentation applied to an already-augmented store."""


class MissingQueryError(KeyError):
    """A (source, relation) query has no entry in the filter index."""


class Vocabulary:
    """Bijective name<->id maps for entities and relations (dense ids)."""

    def __init__(self):
        self._entity_ids: dict[str, int] = {}
        self._relation_ids: dict[str, int] = {}
        self._entity_names: list[str] = []
        self._relation_names: list[str] = []
        self.frozen = False

    @property
    def n_entities(self) -> int:
        return len(self._entity_names)

    @property
    def n_relations(self) -> int:
        return len(self._relation_names)

    def entity_id(self, name: str) -> int:
        idx = self._entity_ids.get(name)
        if idx is None:
            if self.frozen:
                raise UnknownNameError(f"unknown entity {name!r}")
            idx = len(self._entity_names)
            self._entity_ids[name] = idx
            self._entity_names.append(name)
        return idx

    def relation_id(self, name: str) -> int:
        idx = self._relation_ids.get(name)
        if idx is None:
            if self.frozen:
                raise UnknownNameError(f"unknown relation {name!r}")
            idx = len(self._relation_names)
            self._relation_ids[name] = idx
            self._relation_names.append(name)
        return idx

    def entity_name(self, idx: int) -> str:
        return self._entity_names[idx]

    def relation_name(self, idx: int) -> str:
        return self._relation_names[idx]

    def decode_triple(self, triple) -> tuple[str, str, str]:
        s, r, t = triple
        return (self.entity_name(s), self.relation_name(r), self.entity_name(t))

    def write(self, entities_path, relations_path):
        """Dump both maps as ``name<TAB>id`` text for reproducibility."""
        for path, names in (
            (entities_path, self._entity_names),
            (relations_path, self._relation_names),
        ):
            with open(path, "w", encoding="utf-8") as fh:
                for idx, name in enumerate(names):
                    fh.write(f"{name}\t{idx}\n")


class TripleStore:
    """Integer-encoded (source, relation, target) facts as flat arrays."""

    def __init__(self, sources, relations, targets):
        self.sources = np.asarray(sources, dtype=np.int64)
        self.relations = np.asarray(relations, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.int64)
        if not (len(self.sources) == len(self.relations) == len(self.targets)):
            raise ValueError("source/relation/target arrays must have equal length")

    def __len__(self) -> int:
        return len(self.sources)

    def __iter__(self):
        return zip(
            self.sources.tolist(), self.relations.tolist(), self.targets.tolist()
        )

    def max_relation(self) -> int:
        return int(self.relations.max()) if len(self) else -1


@dataclass
class QueryBatch:
    """One 1-N training batch: a true target per (source, relation) row."""

    sources: np.ndarray
    relations: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.sources)


def _parse_lines(path) -> list[tuple[str, str, str]]:
    rows = []
    seen = set()
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(fields)}"
                )
            row = tuple(fields)
            if row in seen:
                duplicates += 1
                continue
            seen.add(row)
            rows.append(row)
    if duplicates:
        log.warning("%s: dropped %d duplicate triples", path, duplicates)
    return rows


def _encode_rows(rows, vocab: Vocabulary) -> TripleStore:
    sources = np.empty(len(rows), dtype=np.int64)
    relations = np.empty(len(rows), dtype=np.int64)
    targets = np.empty(len(rows), dtype=np.int64)
    for i, (head, rel, tail) in enumerate(rows):
        sources[i] = vocab.entity_id(head)
        relations[i] = vocab.relation_id(rel)
        targets[i] = vocab.entity_id(tail)
    return TripleStore(sources, relations, targets)


def load_triples(path, vocab: Vocabulary | None = None):
    """Read one split file into a :class:`TripleStore`.

    Without ``vocab`` a fresh vocabulary is built in first-seen order.
    A supplied vocabulary is treated as fixed: unseen names raise
    :class:`UnknownNameError` (building the union over splits is
    :func:`load_dataset`'s job).
    """
    rows = _parse_lines(path)
    if vocab is None:
        vocab = Vocabulary()
        return _encode_rows(rows, vocab), vocab
    was_frozen = vocab.frozen
    vocab.frozen = True
    try:
        return _encode_rows(rows, vocab), vocab
    finally:
        vocab.frozen = was_frozen


@dataclass
class Dataset:
    name: str
    train: TripleStore
    valid: TripleStore
    test: TripleStore
    vocab: Vocabulary

    def split(self, name: str) -> TripleStore:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


def load_dataset(directory) -> Dataset:
    """Load train/valid/test from a directory, building one union vocabulary.

    The vocabulary covers all three splits in a single pass (train, then
    valid, then test), so entities that only occur in evaluation splits are
    still representable. Afterwards the vocabulary is frozen.
    """
    directory = Path(directory)
    missing = [f for f in SPLIT_FILES if not (directory / f).is_file()]
    if missing:
        raise FileNotFoundError(
            f"{directory}: missing split files: {', '.join(missing)}"
        )
    vocab = Vocabulary()
    stores = {
        name: _encode_rows(_parse_lines(directory / f"{name}.txt"), vocab)
        for name in ("train", "valid", "test")
    }
    vocab.frozen = True
    return Dataset(directory.name, stores["train"], stores["valid"],
                   stores["test"], vocab)


def add_reciprocals(store: TripleStore, vocab: Vocabulary) -> TripleStore:
    """Append the inverse fact (t, r + |R|, s) for every (s, r, t).

    The output has exactly twice as many triples; relation ids in
    [|R|, 2|R|) denote inverses.
    """
    n_rel = vocab.n_relations
    if len(store) and store.max_relation() >= n_rel:
        raise DoubleReciprocalError(
            f"store already contains inverse relation ids (max id "
            f"{store.max_relation()} >= |R| = {n_rel})"
        )
    return TripleStore(
        np.concatenate([store.sources, store.targets]),
        np.concatenate([store.relations, store.relations + n_rel]),
        np.concatenate([store.targets, store.sources]),
    )


def inverse_triple(triple, n_relations: int):
    """Map (s, r, t) <-> (t, r^-1, s); applying it twice is the identity."""
    s, r, t = triple
    if r >= n_relations:
        return (t, r - n_relations, s)
    return (t, r + n_relations, s)


class FilterIndex:
    """(source, relation) -> set of all known-true targets across splits."""

    def __init__(self, mapping: dict[tuple[int, int], np.ndarray]):
        self._mapping = mapping

    def __len__(self) -> int:
        return len(self._mapping)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._mapping

    def items(self):
        return self._mapping.items()

    def targets(self, source: int, relation: int) -> np.ndarray:
        try:
            return self._mapping[(source, relation)]
        except KeyError:
            raise MissingQueryError(
                f"no filter entry for query ({source}, {relation})"
            ) from None


def target_groups(*stores: TripleStore) -> dict[tuple[int, int], np.ndarray]:
    """Group true targets by (source, relation) over the given stores."""
    groups: dict[tuple[int, int], set] = {}
    for store in stores:
        for s, r, t in store:
            groups.setdefault((s, r), set()).add(t)
    return {
        key: np.fromiter(sorted(vals), dtype=np.int64, count=len(vals))
        for key, vals in groups.items()
    }


def build_filter_index(train: TripleStore, valid: TripleStore,
                       test: TripleStore) -> FilterIndex:
    """Union index over all splits; duplicates collapse into one entry."""
    return FilterIndex(target_groups(train, valid, test))


def batch_queries(store: TripleStore, batch_size: int, seed: int,
                  epoch: int = 0):
    """Yield shuffled :class:`QueryBatch` chunks covering the store once.

    The permutation is a deterministic function of (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng((seed, 17, epoch)).permutation(len(store))
    for start in range(0, len(store), batch_size):
        idx = order[start:start + batch_size]
        yield QueryBatch(
            store.sources[idx], store.relations[idx], store.targets[idx]
        )
