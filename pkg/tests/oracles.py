"""Naive reference implementations used to cross-check the metric module.

Deliberately written as plain loops with no shared code so they stay an
independent oracle for the vectorized/production paths.
"""

import math


def naive_recall(ranked, relevant, k):
    hit = 0
    for item in list(ranked)[:k]:
        if item in relevant:
            hit += 1
    return hit / len(relevant)


def naive_ndcg(ranked, relevant, k):
    dcg = 0.0
    position = 0
    for item in list(ranked)[:k]:
        position += 1
        if item in relevant:
            dcg += 1.0 / math.log2(position + 1)
    ideal = 0.0
    for position in range(1, min(k, len(relevant)) + 1):
        ideal += 1.0 / math.log2(position + 1)
    return dcg / ideal


def naive_group_gap(per_user, groups):
    buckets = {"M": [], "F": []}
    for user, value in per_user.items():
        buckets[groups[user]].append(value)
    mean_m = sum(buckets["M"]) / len(buckets["M"])
    mean_f = sum(buckets["F"]) / len(buckets["F"])
    return abs(mean_m - mean_f)


def naive_aplt(lists, item_groups):
    shares = []
    for items in lists.values():
        tail = 0
        for item in items:
            if item_groups[item] == "tail":
                tail += 1
        shares.append(tail / len(items) if items else 0.0)
    return sum(shares) / len(shares)


def naive_delta_exposure(lists, item_groups):
    head = 0.0
    tail = 0.0
    for items in lists.values():
        position = 0
        for item in items:
            position += 1
            weight = 1.0 / math.log2(position + 1)
            if item_groups[item] == "head":
                head += weight
            else:
                tail += weight
    return abs(head - tail) / (head + tail)


def naive_report(lists, test_pairs, user_groups, item_groups, k):
    """All six metrics as percentages, computed the slow way."""
    relevant = {}
    for u, i in test_pairs:
        relevant.setdefault(u, set()).add(i)
    per_recall = {u: naive_recall(items, relevant[u], k) for u, items in lists.items()}
    per_ndcg = {u: naive_ndcg(items, relevant[u], k) for u, items in lists.items()}
    n = len(lists)
    return {
        "recall": 100.0 * sum(per_recall.values()) / n,
        "ndcg": 100.0 * sum(per_ndcg.values()) / n,
        "delta_recall": 100.0 * naive_group_gap(per_recall, user_groups),
        "delta_ndcg": 100.0 * naive_group_gap(per_ndcg, user_groups),
        "aplt": 100.0 * naive_aplt(lists, item_groups),
        "delta_exp": 100.0 * naive_delta_exposure(lists, item_groups),
    }


def random_instance(rng, max_users=20, max_items=50, max_k=10):
    """A random small evaluation instance: lists, test pairs, groups, k."""
    n_users = int(rng.integers(2, max_users + 1))
    n_items = int(rng.integers(4, max_items + 1))
    k = int(rng.integers(1, max_k + 1))
    item_groups = {i: ("head" if rng.random() < 0.3 else "tail") for i in range(n_items)}
    if all(g == "tail" for g in item_groups.values()):
        item_groups[0] = "head"
    user_groups = {u: ("M" if rng.random() < 0.6 else "F") for u in range(n_users)}
    user_groups[0] = "M"
    user_groups[1] = "F"
    lists = {}
    test_pairs = []
    for u in range(n_users):
        size = int(rng.integers(1, min(k, n_items) + 1))
        lists[u] = tuple(int(x) for x in rng.choice(n_items, size=size, replace=False))
        n_rel = int(rng.integers(1, min(6, n_items + 1)))
        for item in rng.choice(n_items, size=n_rel, replace=False):
            test_pairs.append((u, int(item)))
    return lists, test_pairs, user_groups, item_groups, k
