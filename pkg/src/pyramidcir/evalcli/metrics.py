"""Recall metrics over ranked candidate lists."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import DataError, ParameterError


def _check_k(k: int) -> None:
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")


def target_ranks(rankings: Sequence[Sequence[str]], targets: Sequence[str]) -> np.ndarray:
    """Zero-based position of each query's target in its ranking."""
    if len(rankings) != len(targets):
        raise DataError(f"{len(rankings)} rankings for {len(targets)} targets")
    out = np.empty(len(targets), dtype=np.int64)
    for n, (ranking, tgt) in enumerate(zip(rankings, targets)):
        try:
            out[n] = list(ranking).index(tgt)
        except ValueError:
            raise DataError(f"query {n}: target {tgt!r} is not among the ranked candidates") from None
    return out


def recall_at_k(rankings: Sequence[Sequence[str]], targets: Sequence[str], k: int) -> float:
    _check_k(k)
    if not len(targets):
        raise DataError("no queries to evaluate")
    return float(np.mean(target_ranks(rankings, targets) < k))


def restrict(ranking: Sequence[str], subset: Sequence[str]) -> list[str]:
    """Subset members in the order the full ranking gives them."""
    keep = set(subset)
    return [c for c in ranking if c in keep]


def subset_recall_at_k(rankings: Sequence[Sequence[str]], targets: Sequence[str],
                       subsets: Sequence[Sequence[str]], k: int) -> float:
    _check_k(k)
    if len(subsets) != len(targets):
        raise DataError(f"{len(subsets)} subsets for {len(targets)} targets")
    restricted = []
    for n, (ranking, tgt, sub) in enumerate(zip(rankings, targets, subsets)):
        if tgt not in sub:
            raise DataError(f"query {n}: target {tgt!r} missing from its subset")
        restricted.append(restrict(ranking, sub))
    return recall_at_k(restricted, targets, k)


@dataclass
class MetricsReport:
    recall: dict  # K -> Recall@K
    subset_recall: dict  # K -> Recall_subset@K
    n_queries: int
    timings: dict = field(default_factory=dict)  # stage -> seconds

    @property
    def r_mean(self) -> float:
        vals = list(self.recall.values()) + list(self.subset_recall.values())
        return float(np.mean(vals)) if vals else 0.0

    def columns(self) -> dict:
        """Flat, ordered metric columns: R@K..., Rs@K..., R_mean."""
        row = {f"R@{k}": v for k, v in sorted(self.recall.items())}
        row.update({f"Rs@{k}": v for k, v in sorted(self.subset_recall.items())})
        row["R_mean"] = self.r_mean
        return row

    def to_dict(self, timings: bool = False) -> dict:
        d = {"n_queries": self.n_queries,
             "recall": {str(k): v for k, v in sorted(self.recall.items())},
             "subset_recall": {str(k): v for k, v in sorted(self.subset_recall.items())},
             "r_mean": self.r_mean}
        if timings:
            d["timings"] = dict(sorted(self.timings.items()))
        return d


def evaluate(rankings: Sequence[Sequence[str]], targets: Sequence[str],
             subsets: Sequence[Sequence[str]] | None = None, ks: Sequence[int] = (1, 5, 10, 50),
             subset_ks: Sequence[int] = (1, 2, 3), timings: Mapping[str, float] | None = None) -> MetricsReport:
    recall = {int(k): recall_at_k(rankings, targets, k) for k in ks}
    sub = {}
    if subsets is not None:
        sub = {int(k): subset_recall_at_k(rankings, targets, subsets, k) for k in subset_ks}
    return MetricsReport(recall, sub, len(targets), dict(timings or {}))
