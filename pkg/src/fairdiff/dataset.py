"""Interaction data: ingestion, filtering, temporal splits, and group partitions.

Feedback is implicit: every rating or check-in counts as one positive,
duplicates keep the earliest timestamp. User groups are the binary gender
label shipped with the data; item groups split the catalog into the most
popular head fraction versus the long tail of the training interactions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, ParseError, ValidationError
from .nncore import named_stream

GENDERS = ("M", "F")
HEAD = "head"
TAIL = "tail"


def _id_key(s: str):
    # numeric ids sort numerically, everything else lexicographically after them
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass
class Dataset:
    """Implicit-feedback dataset with one binary gender label per user.

    users/items are deterministic orderings of the ids appearing in
    interactions; interactions hold (user, item, timestamp) with at most
    one entry per (user, item) pair.
    """

    users: tuple[str, ...]
    items: tuple[str, ...]
    interactions: tuple[tuple[str, str, int], ...]
    gender: dict[str, str]

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.users)}

    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.items)}


def build_dataset(
    interactions: list[tuple[str, str, int]], gender: dict[str, str]
) -> Dataset:
    """Normalize raw triples into a Dataset.

    Deduplicates (user, item) pairs keeping the earliest timestamp, derives
    the user/item sets from the interactions, and validates gender labels.
    """
    best: dict[tuple[str, str], int] = {}
    for user, item, ts in interactions:
        ts = int(ts)
        if ts < 0:
            raise ValidationError(f"negative timestamp for user {user}, item {item}")
        key = (user, item)
        if key not in best or ts < best[key]:
            best[key] = ts
    users = sorted({u for u, _ in best}, key=_id_key)
    items = sorted({i for _, i in best}, key=_id_key)
    for u in users:
        g = gender.get(u)
        if g is None:
            raise ValidationError(f"user {u} appears in interactions but has no gender label")
        if g not in GENDERS:
            raise ValidationError(f"user {u} has invalid gender label {g!r}")
    rows = sorted(
        ((u, i, t) for (u, i), t in best.items()),
        key=lambda r: (_id_key(r[0]), r[2], _id_key(r[1])),
    )
    kept_gender = {u: gender[u] for u in users}
    return Dataset(tuple(users), tuple(items), tuple(rows), kept_gender)


def _read_users_ml1m(path) -> dict[str, str]:
    gender = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 '::' fields, got {len(parts)}")
            user, g = parts[0], parts[1]
            if g not in GENDERS:
                raise ValidationError(f"{path}:{lineno}: user {user} has gender {g!r}, expected M or F")
            gender[user] = g
    return gender


def ingest_ml1m(ratings_path, users_path) -> Dataset:
    """Read MovieLens-1M style '::'-separated ratings and users files.

    Every rating becomes one implicit interaction regardless of its value.
    """
    gender = _read_users_ml1m(users_path)
    triples = []
    with open(ratings_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(f"{ratings_path}:{lineno}: expected 4 '::' fields, got {len(parts)}")
            user, item, _rating, ts = parts
            try:
                ts_val = int(ts)
            except ValueError:
                raise ParseError(f"{ratings_path}:{lineno}: bad timestamp {ts!r}") from None
            if user not in gender:
                raise ValidationError(
                    f"{ratings_path}:{lineno}: user {user} missing from users file"
                )
            triples.append((user, item, ts_val))
    return build_dataset(triples, gender)


def ingest_canonical(interactions_path, users_path) -> Dataset:
    """Read the canonical TSV pair: `user item timestamp` and `user gender`."""
    gender = {}
    with open(users_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{users_path}:{lineno}: expected 2 tab fields, got {len(parts)}")
            user, g = parts
            if g not in GENDERS:
                raise ValidationError(f"{users_path}:{lineno}: user {user} has gender {g!r}, expected M or F")
            gender[user] = g
    triples = []
    with open(interactions_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"{interactions_path}:{lineno}: expected 3 tab fields, got {len(parts)}"
                )
            user, item, ts = parts
            try:
                ts_val = int(ts)
            except ValueError:
                raise ParseError(f"{interactions_path}:{lineno}: bad timestamp {ts!r}") from None
            if user not in gender:
                raise ValidationError(
                    f"{interactions_path}:{lineno}: user {user} missing from users file"
                )
            triples.append((user, item, ts_val))
    return build_dataset(triples, gender)


def save_canonical(d: Dataset, interactions_path, users_path) -> None:
    """Write a Dataset back out as the canonical TSV pair."""
    with open(interactions_path, "w", encoding="utf-8") as fh:
        for user, item, ts in d.interactions:
            fh.write(f"{user}\t{item}\t{ts}\n")
    with open(users_path, "w", encoding="utf-8") as fh:
        for user in d.users:
            fh.write(f"{user}\t{d.gender[user]}\n")


def filter_min_interactions(d: Dataset, n: int) -> Dataset:
    """Iteratively drop users and items with fewer than n interactions.

    Repeats until a fixed point: removing a sparse item can push a user
    below the threshold and vice versa.
    """
    if n < 1:
        raise ConfigError("minimum interaction count must be >= 1")
    rows = list(d.interactions)
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for u, i, _ in rows:
            user_counts[u] = user_counts.get(u, 0) + 1
            item_counts[i] = item_counts.get(i, 0) + 1
        bad_users = {u for u, c in user_counts.items() if c < n}
        bad_items = {i for i, c in item_counts.items() if c < n}
        if not bad_users and not bad_items:
            break
        rows = [r for r in rows if r[0] not in bad_users and r[1] not in bad_items]
    if not rows:
        raise ValidationError(f"empty after filtering with minimum {n} interactions")
    return build_dataset(rows, d.gender)


@dataclass
class SplitDataset:
    """Per-user chronological split plus the user and item group partitions.

    train/validation/test are (n, 3) int arrays of (user index, item index,
    timestamp) rows; user_groups maps user index to M/F, item_groups maps
    item index to head/tail.
    """

    users: tuple[str, ...]
    items: tuple[str, ...]
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    user_groups: dict[int, str]
    item_groups: dict[int, str]
    _train_csr: sparse.csr_matrix | None = field(default=None, repr=False, compare=False)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def phase(self, name: str) -> np.ndarray:
        if name not in ("train", "validation", "test"):
            raise ConfigError(f"unknown phase {name!r}")
        return getattr(self, name)

    def pairs(self, name: str) -> set[tuple[int, int]]:
        arr = self.phase(name)
        return {(int(u), int(i)) for u, i in arr[:, :2]}

    def items_by_user(self, name: str) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for u, i, _ in self.phase(name):
            out.setdefault(int(u), []).append(int(i))
        return out

    def train_csr(self) -> sparse.csr_matrix:
        if self._train_csr is None:
            data = np.ones(len(self.train))
            mat = sparse.csr_matrix(
                (data, (self.train[:, 0], self.train[:, 1])),
                shape=(self.n_users, self.n_items),
            )
            mat.sum_duplicates()
            self._train_csr = mat
        return self._train_csr

    def __eq__(self, other):
        if not isinstance(other, SplitDataset):
            return NotImplemented
        return (
            self.users == other.users
            and self.items == other.items
            and np.array_equal(self.train, other.train)
            and np.array_equal(self.validation, other.validation)
            and np.array_equal(self.test, other.test)
            and self.user_groups == other.user_groups
            and self.item_groups == other.item_groups
        )


def split_sizes(m: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Rounding rule for one user's m interactions.

    Train takes max(1, floor(r_train * m)), validation floor(r_val * m),
    test the remainder; test must stay nonempty.
    """
    n_train = max(1, math.floor(ratios[0] * m))
    n_val = math.floor(ratios[1] * m)
    n_test = m - n_train - n_val
    return n_train, n_val, n_test


def temporal_split(
    d: Dataset,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    head_fraction: float = 0.2,
) -> SplitDataset:
    """Per-user chronological hold-out split.

    Each user's interactions are ordered by timestamp (item id breaking
    ties); the earliest go to train, then validation, then test.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or ratios[0] <= 0:
        raise ConfigError("ratios must be three non-negative values with positive train share")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must sum to 1")
    uindex = d.user_index()
    iindex = d.item_index()
    per_user: dict[str, list[tuple[str, int]]] = {u: [] for u in d.users}
    for u, i, ts in d.interactions:
        per_user[u].append((i, ts))
    train_rows, val_rows, test_rows = [], [], []
    for u in d.users:
        rows = sorted(per_user[u], key=lambda r: (r[1], _id_key(r[0])))
        m = len(rows)
        if m < 3:
            raise ValidationError(f"user {u} has only {m} interactions, need at least 3 to split")
        n_train, n_val, n_test = split_sizes(m, ratios)
        if n_train < 1 or n_test < 1:
            raise ValidationError(f"user {u}: split of {m} interactions leaves an empty portion")
        ui = uindex[u]
        for item, ts in rows[:n_train]:
            train_rows.append((ui, iindex[item], ts))
        for item, ts in rows[n_train : n_train + n_val]:
            val_rows.append((ui, iindex[item], ts))
        for item, ts in rows[n_train + n_val :]:
            test_rows.append((ui, iindex[item], ts))
    train = np.array(train_rows, dtype=np.int64).reshape(-1, 3)
    validation = np.array(val_rows, dtype=np.int64).reshape(-1, 3)
    test = np.array(test_rows, dtype=np.int64).reshape(-1, 3)
    user_groups = {uindex[u]: d.gender[u] for u in d.users}
    item_groups = partition_items_by_popularity(
        [(int(u), int(i)) for u, i, _ in train], d.n_items, head_fraction
    )
    return SplitDataset(d.users, d.items, train, validation, test, user_groups, item_groups)


def partition_items_by_popularity(
    train_pairs, n_items: int, head_fraction: float = 0.2
) -> dict[int, str]:
    """Label the round(head_fraction * n_items) most-trained items head, rest tail.

    Popularity counts come from the train interactions only; count ties
    break by ascending item index.
    """
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValidationError("cannot partition items from an empty train set")
    counts = np.zeros(n_items, dtype=np.int64)
    for _, i in train_pairs:
        counts[i] += 1
    order = np.lexsort((np.arange(n_items), -counts))
    n_head = int(round(head_fraction * n_items))
    groups = {}
    for rank, item in enumerate(order):
        groups[int(item)] = HEAD if rank < n_head else TAIL
    return groups


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic biased dataset generator.

    popularity_exponent shapes the item popularity power law; group_bias
    in [0, 1] tilts male users toward head items and female users toward
    the tail by the same mixture weight.
    """

    n_users: int
    n_items: int
    density: float
    popularity_exponent: float
    group_bias: float
    female_fraction: float
    seed: int

    def validate(self) -> None:
        if self.n_users < 2 or self.n_items < 2:
            raise ConfigError("need at least 2 users and 2 items")
        if not 0.0 < self.density < 1.0:
            raise ConfigError("density must lie in (0, 1)")
        if self.popularity_exponent < 0.0:
            raise ConfigError("popularity_exponent must be non-negative")
        if not 0.0 <= self.group_bias <= 1.0:
            raise ConfigError("group_bias must lie in [0, 1]")
        if not 0.0 < self.female_fraction < 1.0:
            raise ConfigError("female_fraction must lie in (0, 1)")


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic power-law dataset with a tunable gender/popularity bias.

    Each user draws a fixed quota of distinct items via weighted sampling
    without replacement. Male users mix the base popularity distribution
    with a head-only tilt of weight group_bias; female users mix with the
    matching tail-only tilt, so the head-share gap grows with group_bias.
    """
    cfg.validate()
    total = int(round(cfg.density * cfg.n_users * cfg.n_items))
    if total > cfg.n_users * cfg.n_items:
        raise ConfigError("requested more interactions than there are user/item cells")
    base_quota, extra = divmod(total, cfg.n_users)
    quotas = [base_quota + (1 if u < extra else 0) for u in range(cfg.n_users)]
    if max(quotas) > cfg.n_items:
        raise ConfigError("density infeasible: a user quota exceeds the item count")

    weights = (np.arange(1, cfg.n_items + 1, dtype=float)) ** (-cfg.popularity_exponent)
    base = weights / weights.sum()
    n_head = int(round(0.2 * cfg.n_items))
    head_mask = np.zeros(cfg.n_items, dtype=bool)
    head_mask[np.argsort(-weights, kind="stable")[:n_head]] = True
    head_only = np.where(head_mask, weights, 0.0)
    tail_only = np.where(~head_mask, weights, 0.0)
    head_only /= head_only.sum()
    tail_only /= tail_only.sum()

    n_female = int(round(cfg.female_fraction * cfg.n_users))
    if n_female < 1 or n_female >= cfg.n_users:
        raise ConfigError("female_fraction leaves a gender group empty")
    perm = named_stream(cfg.seed, "synthetic", "gender").permutation(cfg.n_users)
    female = np.zeros(cfg.n_users, dtype=bool)
    female[perm[:n_female]] = True

    b = cfg.group_bias
    p_male = (1.0 - b) * base + b * head_only
    p_female = (1.0 - b) * base + b * tail_only

    triples = []
    gender = {}
    for u in range(cfg.n_users):
        uid = str(u)
        gender[uid] = "F" if female[u] else "M"
        p = p_female if female[u] else p_male
        feasible = int(np.count_nonzero(p))
        if quotas[u] > feasible:
            raise ConfigError(
                f"user {uid}: quota {quotas[u]} exceeds the {feasible} items "
                "with positive probability at this group_bias"
            )
        rng = named_stream(cfg.seed, "synthetic", "user", u)
        # exponential race: the m smallest keys are a weighted sample w/o replacement
        keys = np.full(cfg.n_items, np.inf)
        pos = p > 0
        keys[pos] = rng.exponential(size=int(pos.sum())) / p[pos]
        chosen = np.argsort(keys, kind="stable")[: quotas[u]]
        for ts, item in enumerate(chosen):
            triples.append((uid, str(int(item)), ts))
    return build_dataset(triples, gender)
