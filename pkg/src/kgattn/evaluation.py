"""Filtered link-prediction evaluation: ranks, MRR, Hits@k.

Each test triple (s, r, t) produces two queries: (s, r, ?) ranking the
true target, and the reciprocal (t, r^-1, ?) ranking the true source
(reciprocal learning turns source perturbation into a target-side query).
Candidates that form other known-true triples are filtered out, the true
answer itself always stays in. Equal-scored candidates are broken by
placing the true answer uniformly at random among them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FilterIndex, TripleStore


@dataclass
class DirectionReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    count: int


@dataclass
class EvalReport:
    """MRR and Hits@{1,3,10} over all ranks, with per-direction breakdown.

    ``target_side`` covers (s, r, ?) queries, ``source_side`` the
    reciprocal (t, r^-1, ?) queries; ``count`` is their total.
    """

    mrr: float
    hits1: float
    hits3: float
    hits10: float
    count: int
    target_side: DirectionReport | None = None
    source_side: DirectionReport | None = None

    def as_dict(self) -> dict:
        return {
            "mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3,
            "hits10": self.hits10, "count": self.count,
        }

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in
                   (self.mrr, self.hits1, self.hits3, self.hits10))


def rank_query(scores: np.ndarray, true_target: int, filter_targets,
               rng) -> int:
    """Rank (1-based) of the true target among non-filtered candidates.

    Filtering removes every known-true candidate except the true target
    itself. Ties with the true score are resolved by a uniform random
    offset, equivalent to shuffling the true answer among equal-scored
    candidates before a stable descending sort.
    """
    scores = np.asarray(scores)
    if not 0 <= true_target < scores.shape[0]:
        raise IndexError(
            f"true target {true_target} out of range for {scores.shape[0]} entities"
        )
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[np.asarray(list(filter_targets), dtype=np.int64)] = False
    keep[true_target] = True
    true_score = scores[true_target]
    greater = int(np.count_nonzero(keep & (scores > true_score)))
    ties = int(np.count_nonzero(keep & (scores == true_score))) - 1
    offset = int(rng.integers(ties + 1)) if ties > 0 else 0
    return 1 + greater + offset


def _direction(ranks: np.ndarray) -> DirectionReport:
    return DirectionReport(
        mrr=float((1.0 / ranks).mean()),
        hits1=float((ranks <= 1).mean()),
        hits3=float((ranks <= 3).mean()),
        hits10=float((ranks <= 10).mean()),
        count=int(ranks.size),
    )


def report_from_ranks(target_ranks, source_ranks=None) -> EvalReport:
    target_ranks = np.asarray(target_ranks, dtype=np.float64)
    parts = [target_ranks]
    source = None
    if source_ranks is not None:
        source_ranks = np.asarray(source_ranks, dtype=np.float64)
        parts.append(source_ranks)
        source = _direction(source_ranks)
    ranks = np.concatenate(parts)
    overall = _direction(ranks)
    return EvalReport(
        mrr=overall.mrr, hits1=overall.hits1, hits3=overall.hits3,
        hits10=overall.hits10, count=overall.count,
        target_side=_direction(target_ranks), source_side=source,
    )


def evaluate(model, triples: TripleStore, filter_index: FilterIndex,
             seed: int = 0, batch_size: int = 512) -> EvalReport:
    """Evaluate both directions of every triple with the model in eval mode.

    Tie-breaking rng streams are derived per query from (seed, query index),
    so chunking or reordering the work cannot change the report.
    """
    n_rel = model.n_relations
    target_ranks = np.empty(len(triples), dtype=np.int64)
    source_ranks = np.empty(len(triples), dtype=np.int64)
    for start in range(0, len(triples), batch_size):
        stop = min(start + batch_size, len(triples))
        src = triples.sources[start:stop]
        rel = triples.relations[start:stop]
        tgt = triples.targets[start:stop]
        forward = model.score_queries(src, rel).data
        backward = model.score_queries(tgt, rel + n_rel).data
        for i in range(stop - start):
            s, r, t = int(src[i]), int(rel[i]), int(tgt[i])
            query_index = 2 * (start + i)
            target_ranks[start + i] = rank_query(
                forward[i], t, filter_index.targets(s, r),
                np.random.default_rng((seed, 29, query_index)),
            )
            source_ranks[start + i] = rank_query(
                backward[i], s, filter_index.targets(t, r + n_rel),
                np.random.default_rng((seed, 29, query_index + 1)),
            )
    return report_from_ranks(target_ranks, source_ranks)
