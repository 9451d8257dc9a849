"""Top-k list evaluation: accuracy, consumer fairness, provider fairness.

Six values per run: Recall@k and nDCG@k, their absolute between-gender
gaps, the average proportion of long-tail items in the lists (APLT), and
the normalized gap in position-discounted exposure between head and tail
items. Everything is a pure function of the lists and the ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .dataset import GENDERS, HEAD, TAIL
from .errors import ValidationError


@dataclass
class TopKLists:
    """Ranked recommendation lists, one per evaluated user.

    Positions are 1-based; masked items never appear. truncated holds the
    users whose unmasked candidate pool was smaller than k.
    """

    k: int
    lists: dict[int, tuple[int, ...]]
    truncated: frozenset[int] = frozenset()

    def __post_init__(self):
        for u, items in self.lists.items():
            if len(items) > self.k:
                raise ValidationError(f"user {u} has a list longer than k={self.k}")
            if len(set(items)) != len(items):
                raise ValidationError(f"user {u} has repeated items in the list")


@dataclass
class MetricReport:
    """All six metrics for one (model, dataset, split) run, in percent."""

    recall: float
    ndcg: float
    delta_recall: float
    delta_ndcg: float
    aplt: float
    delta_exp: float
    per_user: dict[int, tuple[float, float]] = field(default_factory=dict)
    group_means: dict[str, tuple[float, float]] = field(default_factory=dict)
    group_counts: dict[str, int] = field(default_factory=dict)

    def values(self) -> tuple[float, float, float, float, float, float]:
        return (self.recall, self.ndcg, self.delta_recall, self.delta_ndcg, self.aplt, self.delta_exp)

    def to_dict(self) -> dict:
        return {
            "recall": self.recall,
            "ndcg": self.ndcg,
            "delta_recall": self.delta_recall,
            "delta_ndcg": self.delta_ndcg,
            "aplt": self.aplt,
            "delta_exp": self.delta_exp,
            "per_user": [[u, r, n] for u, (r, n) in sorted(self.per_user.items())],
            "group_means": {g: list(v) for g, v in sorted(self.group_means.items())},
            "group_counts": dict(sorted(self.group_counts.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            recall=d["recall"],
            ndcg=d["ndcg"],
            delta_recall=d["delta_recall"],
            delta_ndcg=d["delta_ndcg"],
            aplt=d["aplt"],
            delta_exp=d["delta_exp"],
            per_user={int(u): (r, n) for u, r, n in d.get("per_user", [])},
            group_means={g: tuple(v) for g, v in d.get("group_means", {}).items()},
            group_counts={g: int(c) for g, c in d.get("group_counts", {}).items()},
        )


def recall_at_k(ranked, relevant, k: int) -> float:
    """Fraction of the user's relevant items found in the first k positions."""
    if not relevant:
        raise ValidationError("recall undefined for an empty relevant set")
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-relevance nDCG with the 1/log2(position + 1) discount."""
    if not relevant:
        raise ValidationError("nDCG undefined for an empty relevant set")
    dcg = 0.0
    for pos, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(pos + 1)
    ideal = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


def group_gap(per_user_values: dict[int, float], user_groups: dict[int, str]) -> float:
    """Absolute difference between the two gender groups' mean values."""
    sums = {g: 0.0 for g in GENDERS}
    counts = {g: 0 for g in GENDERS}
    for user, value in per_user_values.items():
        g = user_groups[user]
        sums[g] += value
        counts[g] += 1
    for g in GENDERS:
        if counts[g] == 0:
            raise ValidationError(f"group {g} has no evaluated users")
    return abs(sums["M"] / counts["M"] - sums["F"] / counts["F"])


def aplt(lists: dict[int, tuple[int, ...]], item_groups: dict[int, str]) -> float:
    """Mean over users of the share of long-tail items in their list."""
    if not lists:
        raise ValidationError("APLT undefined for an empty set of lists")
    total = 0.0
    for items in lists.values():
        if items:
            total += sum(1 for i in items if item_groups[i] == TAIL) / len(items)
    return total / len(lists)


def delta_exposure(lists: dict[int, tuple[int, ...]], item_groups: dict[int, str]) -> float:
    """Normalized gap in discounted exposure between head and tail items.

    Each list position p contributes weight 1/log2(p + 1) to the group of
    the item shown there; the result is |E_head - E_tail| / (E_head + E_tail).
    """
    if not lists:
        raise ValidationError("exposure gap undefined for an empty set of lists")
    exposure = {HEAD: 0.0, TAIL: 0.0}
    for items in lists.values():
        for pos, item in enumerate(items, start=1):
            exposure[item_groups[item]] += 1.0 / math.log2(pos + 1)
    total = exposure[HEAD] + exposure[TAIL]
    if total == 0.0:
        raise ValidationError("total exposure is zero (all lists empty)")
    return abs(exposure[HEAD] - exposure[TAIL]) / total


def evaluate_run(
    lists: TopKLists,
    test_pairs,
    user_groups: dict[int, str],
    item_groups: dict[int, str],
    k: int = 20,
) -> MetricReport:
    """Assemble the six-metric report for one set of top-k lists.

    lists must cover exactly the users that have test positives; all
    values are reported as percentages.
    """
    relevant: dict[int, set[int]] = {}
    for u, i in test_pairs:
        relevant.setdefault(int(u), set()).add(int(i))
    if set(lists.lists) != set(relevant):
        missing = set(relevant) - set(lists.lists)
        extra = set(lists.lists) - set(relevant)
        raise ValidationError(
            f"lists do not cover exactly the users with test positives "
            f"(missing {len(missing)}, extra {len(extra)})"
        )
    per_recall = {}
    per_ndcg = {}
    for u, items in lists.lists.items():
        per_recall[u] = recall_at_k(items, relevant[u], k)
        per_ndcg[u] = ndcg_at_k(items, relevant[u], k)
    d_recall = group_gap(per_recall, user_groups)
    d_ndcg = group_gap(per_ndcg, user_groups)
    group_means = {}
    group_counts = {}
    for g in GENDERS:
        members = [u for u in lists.lists if user_groups[u] == g]
        group_counts[g] = len(members)
        group_means[g] = (
            100.0 * sum(per_recall[u] for u in members) / len(members),
            100.0 * sum(per_ndcg[u] for u in members) / len(members),
        )
    n = len(lists.lists)
    return MetricReport(
        recall=100.0 * sum(per_recall.values()) / n,
        ndcg=100.0 * sum(per_ndcg.values()) / n,
        delta_recall=100.0 * d_recall,
        delta_ndcg=100.0 * d_ndcg,
        aplt=100.0 * aplt(lists.lists, item_groups),
        delta_exp=100.0 * delta_exposure(lists.lists, item_groups),
        per_user={u: (100.0 * per_recall[u], 100.0 * per_ndcg[u]) for u in lists.lists},
        group_means=group_means,
        group_counts=group_counts,
    )
