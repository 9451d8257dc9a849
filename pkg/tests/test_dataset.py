"""Ingestion, filtering, temporal splits, popularity partition, synthetic data."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairdiff import dataset as ds
from fairdiff.errors import ConfigError, ParseError, ValidationError


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def toy_dataset(triples, gender=None):
    users = {u for u, _, _ in triples}
    gender = gender or {u: "M" for u in users}
    return ds.build_dataset(list(triples), gender)


class TestIngestMl1m:
    def test_basic_parse_counts(self, tmp_path):
        ratings = write(tmp_path, "ratings.dat", "1::10::5::100\n1::11::3::200\n2::10::4::50\n")
        users = write(tmp_path, "users.dat", "1::M::25::4::55455\n2::F::30::2::10010\n")
        d = ds.ingest_ml1m(ratings, users)
        assert d.n_users == 2
        assert d.n_items == 2
        assert len(d.interactions) == 3
        assert d.gender == {"1": "M", "2": "F"}

    def test_duplicate_pair_keeps_earliest(self, tmp_path):
        ratings = write(tmp_path, "ratings.dat", "1::10::5::100\n1::10::3::200\n")
        users = write(tmp_path, "users.dat", "1::M::25::4::55455\n")
        d = ds.ingest_ml1m(ratings, users)
        assert d.interactions == (("1", "10", 100),)

    def test_empty_ratings_file(self, tmp_path):
        ratings = write(tmp_path, "ratings.dat", "")
        users = write(tmp_path, "users.dat", "1::M::25::4::55455\n")
        d = ds.ingest_ml1m(ratings, users)
        assert d.n_users == 0
        assert len(d.interactions) == 0

    def test_malformed_line_names_line_number(self, tmp_path):
        ratings = write(tmp_path, "ratings.dat", "1::10::5::100\n1::11::5\n")
        users = write(tmp_path, "users.dat", "1::M::25::4::55455\n")
        with pytest.raises(ParseError, match=":2:"):
            ds.ingest_ml1m(ratings, users)

    def test_user_missing_from_users_file(self, tmp_path):
        ratings = write(tmp_path, "ratings.dat", "9::10::5::100\n")
        users = write(tmp_path, "users.dat", "1::M::25::4::55455\n")
        with pytest.raises(ValidationError, match="user 9"):
            ds.ingest_ml1m(ratings, users)


class TestIngestCanonical:
    def test_single_line(self, tmp_path):
        inter = write(tmp_path, "i.tsv", "u1\ti1\t0\n")
        users = write(tmp_path, "u.tsv", "u1\tF\n")
        d = ds.ingest_canonical(inter, users)
        assert d.n_users == 1 and d.n_items == 1 and len(d.interactions) == 1
        assert d.gender["u1"] == "F"

    def test_invalid_gender_names_user(self, tmp_path):
        inter = write(tmp_path, "i.tsv", "u1\ti1\t0\n")
        users = write(tmp_path, "u.tsv", "u1\tX\n")
        with pytest.raises(ValidationError, match="u1"):
            ds.ingest_canonical(inter, users)

    def test_roundtrip_through_save(self, tmp_path):
        d = toy_dataset([("1", "7", 5), ("1", "8", 6), ("2", "7", 1)], {"1": "M", "2": "F"})
        ds.save_canonical(d, tmp_path / "i.tsv", tmp_path / "u.tsv")
        back = ds.ingest_canonical(tmp_path / "i.tsv", tmp_path / "u.tsv")
        assert back == d


class TestFilterMinInteractions:
    def test_fixed_point_unchanged(self):
        triples = [(u, i, int(u) * 10 + int(i)) for u in "12" for i in "34"]
        d = toy_dataset(triples)
        assert ds.filter_min_interactions(d, 2) == d

    def test_hand_traced_cascade(self):
        # 3 users x 1 item, n=2: the item has 3 interactions but two users
        # have only one each... all three users have exactly one interaction,
        # so all users fall, then the item falls and the result is empty
        d = toy_dataset([("1", "9", 1), ("2", "9", 2), ("3", "9", 3)])
        with pytest.raises(ValidationError, match="empty after filtering"):
            ds.filter_min_interactions(d, 2)

    def test_cascading_removal(self):
        # u3 has one interaction; dropping it leaves item B with one
        # interaction, which then drops, but u1/u2 survive via items A and C
        triples = [
            ("1", "A", 1), ("1", "B", 2), ("1", "C", 3),
            ("2", "A", 4), ("2", "C", 5),
            ("3", "B", 6),
        ]
        d = toy_dataset(triples)
        out = ds.filter_min_interactions(d, 2)
        assert set(out.users) == {"1", "2"}
        assert set(out.items) == {"A", "C"}
        assert len(out.interactions) == 4

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        triples = [
            (str(rng.integers(8)), str(rng.integers(8)), int(rng.integers(100)))
            for _ in range(60)
        ]
        d = toy_dataset(list({(u, i): (u, i, t) for u, i, t in triples}.values()))
        once = ds.filter_min_interactions(d, 2)
        assert ds.filter_min_interactions(once, 2) == once


class TestTemporalSplit:
    def test_ten_interactions_split_7_1_2(self):
        d = toy_dataset([("1", str(i), i) for i in range(1, 11)])
        split = ds.temporal_split(d)
        assert len(split.train) == 7
        assert len(split.validation) == 1
        assert len(split.test) == 2
        # earliest timestamps land in train
        assert sorted(split.train[:, 2].tolist()) == [1, 2, 3, 4, 5, 6, 7]
        assert split.validation[0, 2] == 8
        assert sorted(split.test[:, 2].tolist()) == [9, 10]

    @pytest.mark.parametrize(
        "m,expected",
        [(3, (2, 0, 1)), (4, (2, 0, 2)), (5, (3, 0, 2)), (6, (4, 0, 2)),
         (7, (4, 0, 3)), (8, (5, 0, 3)), (9, (6, 0, 3)), (10, (7, 1, 2))],
    )
    def test_rounding_rule_small_users(self, m, expected):
        assert ds.split_sizes(m, (0.7, 0.1, 0.2)) == expected
        d = toy_dataset([("1", str(i), i) for i in range(m)])
        split = ds.temporal_split(d)
        assert (len(split.train), len(split.validation), len(split.test)) == expected

    def test_tied_timestamps_break_by_item_id(self):
        d = toy_dataset([("1", str(i), 5) for i in (3, 1, 4, 2, 0)])
        split = ds.temporal_split(d)
        # items sorted ascending; train takes the 3 lowest ids
        train_items = sorted(split.items[i] for i in split.train[:, 1])
        assert train_items == ["0", "1", "2"]
        assert sorted(split.items[i] for i in split.test[:, 1]) == ["3", "4"]

    def test_too_few_interactions_errors(self):
        d = toy_dataset([("1", "0", 1), ("1", "1", 2)])
        with pytest.raises(ValidationError, match="user 1"):
            ds.temporal_split(d)

    def test_bad_ratios(self):
        d = toy_dataset([("1", str(i), i) for i in range(5)])
        with pytest.raises(ConfigError):
            ds.temporal_split(d, ratios=(0.5, 0.1, 0.2))

    def test_partition_and_ordering_invariants(self):
        rng = np.random.default_rng(3)
        triples = []
        for u in range(12):
            times = rng.choice(1000, size=rng.integers(3, 30), replace=False)
            items = rng.choice(40, size=len(times), replace=False)
            triples.extend((str(u), str(it), int(t)) for it, t in zip(items, times))
        d = toy_dataset(triples)
        split = ds.temporal_split(d)
        all_pairs = split.pairs("train") | split.pairs("validation") | split.pairs("test")
        assert len(all_pairs) == len(d.interactions)
        assert not split.pairs("train") & split.pairs("validation")
        assert not split.pairs("train") & split.pairs("test")
        assert not split.pairs("validation") & split.pairs("test")
        for u in range(split.n_users):
            tr = split.train[split.train[:, 0] == u][:, 2]
            va = split.validation[split.validation[:, 0] == u][:, 2]
            te = split.test[split.test[:, 0] == u][:, 2]
            if len(va):
                assert tr.max() <= va.min()
                assert va.max() <= te.min()
            else:
                assert tr.max() <= te.min()


class TestPopularityPartition:
    def test_distinct_counts_top2(self):
        pairs = []
        for item in range(10):
            pairs.extend((u, item) for u in range(item + 1))
        groups = ds.partition_items_by_popularity(pairs, 10)
        heads = {i for i, g in groups.items() if g == ds.HEAD}
        assert heads == {8, 9}

    def test_all_tied_head_is_lowest_id(self):
        pairs = [(0, i) for i in range(5)]
        groups = ds.partition_items_by_popularity(pairs, 5)
        assert groups[0] == ds.HEAD
        assert all(groups[i] == ds.TAIL for i in range(1, 5))

    def test_determinism(self):
        rng = np.random.default_rng(1)
        pairs = [(int(rng.integers(20)), int(rng.integers(15))) for _ in range(200)]
        assert ds.partition_items_by_popularity(pairs, 15) == ds.partition_items_by_popularity(
            pairs, 15
        )

    def test_power_law_head_holds_majority(self):
        cfg = ds.SyntheticConfig(
            n_users=200, n_items=100, density=0.08, popularity_exponent=1.2,
            group_bias=0.0, female_fraction=0.4, seed=11,
        )
        d = ds.generate_synthetic(cfg)
        split = ds.temporal_split(d)
        head_idx = {i for i, g in split.item_groups.items() if g == ds.HEAD}
        in_head = sum(1 for _, i, _ in split.train if int(i) in head_idx)
        assert in_head > 0.5 * len(split.train)

    def test_empty_train_errors(self):
        with pytest.raises(ValidationError):
            ds.partition_items_by_popularity([], 5)


class TestGenerateSynthetic:
    def test_deterministic_given_seed(self):
        cfg = ds.SyntheticConfig(100, 50, 0.1, 1.0, 0.5, 0.3, seed=5)
        assert ds.generate_synthetic(cfg) == ds.generate_synthetic(cfg)

    def test_unbiased_head_share_gap_small(self):
        # 1e5 interactions, group_bias 0: head share differs by < 2%
        cfg = ds.SyntheticConfig(1000, 500, 0.2, 1.0, 0.0, 0.5, seed=7)
        d = ds.generate_synthetic(cfg)
        assert len(d.interactions) == 100_000
        gap = _head_share_gap(d)
        assert abs(gap) < 0.02

    def test_bias_grows_with_group_bias(self):
        gaps = []
        for bias in (0.2, 0.8):
            cfg = ds.SyntheticConfig(400, 300, 0.1, 1.0, bias, 0.5, seed=9)
            gaps.append(_head_share_gap(ds.generate_synthetic(cfg)))
        assert gaps[1] > gaps[0] > 0

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            ds.SyntheticConfig(1, 50, 0.1, 1.0, 0.0, 0.3, 0).validate()
        with pytest.raises(ConfigError):
            ds.SyntheticConfig(10, 50, 1.5, 1.0, 0.0, 0.3, 0).validate()
        with pytest.raises(ConfigError):
            ds.SyntheticConfig(10, 50, 0.1, 1.0, 2.0, 0.3, 0).validate()


def _head_share_gap(d: ds.Dataset) -> float:
    """Male minus female share of interactions landing on head-quantile items."""
    n_head = int(round(0.2 * d.n_items))
    head = {str(i) for i in range(n_head)}
    counts = {"M": [0, 0], "F": [0, 0]}
    for u, i, _ in d.interactions:
        g = d.gender[u]
        counts[g][0] += i in head
        counts[g][1] += 1
    return counts["M"][0] / counts["M"][1] - counts["F"][0] / counts["F"][1]


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=3, max_value=40), st.integers(min_value=0, max_value=10**6))
def test_split_sizes_always_partition(m, _seed):
    tr, va, te = ds.split_sizes(m, (0.7, 0.1, 0.2))
    assert tr >= 1 and va >= 0 and te >= 1
    assert tr + va + te == m
