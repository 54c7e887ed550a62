import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcrec.data import (HEAD, MID, TAIL, Dataset, DataSplit, k_core_filter,
                        kl_divergence_uniform, load_interactions, load_split,
                        save_interactions, save_split, split_random,
                        split_temporal, subgroup_partition, verify_partition)
from bcrec.errors import ConfigError, DataError

from conftest import make_dataset


def write(tmp_path, text, name="log.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoad:
    def test_basic_counts(self, tmp_path):
        ds = load_interactions(write(tmp_path, "a b\na c\nd b\n"), sep=" ")
        assert ds.num_users == 2
        assert ds.num_items == 2
        assert len(ds) == 3
        assert ds.user_pop.tolist() == [2, 1]
        assert ds.item_pop.tolist() == [2, 1]

    def test_duplicates_collapse(self, tmp_path):
        ds = load_interactions(write(tmp_path, "a b\na b\n"), sep=" ")
        assert len(ds) == 1

    def test_duplicate_keeps_earliest_timestamp(self, tmp_path):
        ds = load_interactions(write(tmp_path, "a b 9\na b 2\n"), sep=" ")
        assert len(ds) == 1
        assert ds.timestamps.tolist() == [2]

    def test_random_log_matches_line_tally(self, tmp_path, rng):
        lines = []
        tally_u, tally_i, pairs = {}, {}, set()
        for _ in range(1000):
            u, i = f"u{rng.integers(40)}", f"i{rng.integers(60)}"
            lines.append(f"{u}\t{i}")
            if (u, i) not in pairs:
                pairs.add((u, i))
                tally_u[u] = tally_u.get(u, 0) + 1
                tally_i[i] = tally_i.get(i, 0) + 1
        ds = load_interactions(write(tmp_path, "\n".join(lines) + "\n"))
        assert len(ds) == len(pairs)
        assert ds.num_users == len(tally_u)
        assert ds.num_items == len(tally_i)
        for raw, cnt in tally_u.items():
            assert ds.user_pop[ds.user_index[raw]] == cnt
        for raw, cnt in tally_i.items():
            assert ds.item_pop[ds.item_index[raw]] == cnt

    def test_malformed_line_names_line_number(self, tmp_path):
        with pytest.raises(DataError, match=":2:"):
            load_interactions(write(tmp_path, "a b\nbroken\n"), sep=" ")
        with pytest.raises(DataError, match=":1:"):
            load_interactions(write(tmp_path, "a b c d\n"), sep=" ")
        with pytest.raises(DataError, match="timestamp"):
            load_interactions(write(tmp_path, "a b xyz\n"), sep=" ")

    def test_empty_file_rejected(self, tmp_path):
        with pytest.raises(DataError, match="no interactions"):
            load_interactions(write(tmp_path, "# only a comment\n"), sep=" ")

    def test_comments_skipped(self, tmp_path):
        ds = load_interactions(write(tmp_path, "# header\na b\n"), sep=" ")
        assert len(ds) == 1

    def test_round_trip(self, tmp_path, rng):
        lines = [f"u{rng.integers(20)} i{rng.integers(30)} {rng.integers(100)}"
                 for _ in range(300)]
        ds = load_interactions(write(tmp_path, "\n".join(lines) + "\n"), sep=" ")
        save_interactions(ds, tmp_path / "again.txt", sep=" ")
        again = load_interactions(tmp_path / "again.txt", sep=" ")
        assert ds == again

    def test_id_maps_pin_ids_and_reject_unknowns(self, tmp_path):
        base = load_interactions(write(tmp_path, "a b\nc d\n"), sep=" ")
        p2 = write(tmp_path, "c b\n", name="second.txt")
        sub = load_interactions(p2, sep=" ", id_maps=(base.user_ids, base.item_ids))
        assert sub.num_users == 2 and sub.num_items == 2
        assert sub.users.tolist() == [1] and sub.items.tolist() == [0]
        p3 = write(tmp_path, "zzz b\n", name="third.txt")
        with pytest.raises(DataError, match="zzz"):
            load_interactions(p3, sep=" ", id_maps=(base.user_ids, base.item_ids))


class TestKCore:
    def test_already_k_core_unchanged(self):
        pairs = [(u, i) for u in range(3) for i in range(3)]
        ds = make_dataset(pairs)
        out = k_core_filter(ds, 3)
        assert out == ds

    def test_star_graph_collapses_to_empty(self):
        ds = make_dataset([(0, i) for i in range(5)])
        out = k_core_filter(ds, 2)
        assert len(out) == 0
        assert out.num_users == 0 and out.num_items == 0

    def test_cascading_removal(self):
        # 2-core: removing item 2 (degree 1) drops user 2 below 2, cascading
        pairs = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 1), (2, 2)]
        ds = make_dataset(pairs)
        out = k_core_filter(ds, 2)
        kept = {(out.user_ids[u], out.item_ids[i])
                for u, i in zip(out.users.tolist(), out.items.tolist())}
        assert kept == {("u0", "i0"), ("u0", "i1"), ("u1", "i0"), ("u1", "i1")}

    @settings(deadline=None, max_examples=30)
    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)),
                    min_size=1, max_size=40, unique=True),
           st.integers(1, 4))
    def test_output_degrees_and_idempotence(self, pairs, k):
        ds = make_dataset(pairs)
        out = k_core_filter(ds, k)
        if len(out):
            assert out.user_pop.min() >= k
            assert out.item_pop.min() >= k
        assert k_core_filter(out, k) == out


class TestSplitRandom:
    def long_tail(self, rng, n_users=30, n_items=40, n=600):
        pairs = set()
        while len(pairs) < n:
            u = int(rng.integers(n_users))
            i = min(int(rng.zipf(1.3)) - 1, n_items - 1)
            pairs.add((u, i))
        return make_dataset(sorted(pairs), n_users, n_items)

    def test_deterministic_under_seed(self, rng):
        ds = self.long_tail(rng)
        s1 = split_random(ds, seed=7)
        s2 = split_random(ds, seed=7)
        for name, m in s1.members().items():
            assert m == s2.members()[name]

    def test_partition_property(self, rng):
        ds = self.long_tail(rng)
        split = split_random(ds, seed=3)
        verify_partition(ds, split)
        assert split.test_balanced is not None

    def test_members_share_id_space(self, rng):
        ds = self.long_tail(rng)
        split = split_random(ds, seed=3)
        for m in split.members().values():
            assert m.num_users == ds.num_users
            assert m.num_items == ds.num_items
            assert m.user_ids == ds.user_ids

    def test_zero_balanced_frac(self, rng):
        ds = self.long_tail(rng)
        split = split_random(ds, balanced_frac=0.0, train_frac=0.60,
                             val_frac=0.10, test_frac=0.30, seed=5)
        assert split.test_balanced is None
        n = len(ds)
        assert len(split.train) == pytest.approx(0.6 * n, abs=2)
        assert len(split.validation) == pytest.approx(0.1 * n, abs=2)
        verify_partition(ds, split)

    def test_balanced_member_is_flatter_than_train(self, rng):
        ds = self.long_tail(rng, n_users=60, n_items=50, n=1500)
        split = split_random(ds, seed=11)
        kl_bal = kl_divergence_uniform(split.test_balanced.item_pop)
        kl_train = kl_divergence_uniform(split.train.item_pop)
        assert kl_bal < kl_train

    def test_bad_fractions_rejected(self, rng):
        ds = self.long_tail(rng)
        with pytest.raises(ConfigError):
            split_random(ds, balanced_frac=-0.1)
        with pytest.raises(ConfigError):
            split_random(ds, train_frac=0.0)
        with pytest.raises(ConfigError):
            split_random(ds, balanced_frac=0.5, train_frac=0.4, val_frac=0.2, test_frac=0.2)


class TestSplitTemporal:
    def test_direct_slice(self):
        ds = make_dataset([(u, u) for u in range(10)], 10, 10,
                          timestamps=list(range(1, 11)))
        split = split_temporal(ds)
        assert split.train.timestamps.tolist() == [1, 2, 3, 4, 5, 6, 7]
        assert split.validation.timestamps.tolist() == [8]
        assert split.test_temporal.timestamps.tolist() == [9, 10]
        verify_partition(ds, split)

    def test_ties_follow_input_order(self):
        ds = make_dataset([(u, 0) for u in range(10)], 10, 1, timestamps=[5] * 10)
        split = split_temporal(ds)
        assert split.train.users.tolist() == list(range(7))
        assert split.validation.users.tolist() == [7]
        assert split.test_temporal.users.tolist() == [8, 9]

    def test_sort_invariance(self, rng):
        n = 50
        ts = rng.permutation(1000)[:n]
        pairs = [(int(rng.integers(10)), k) for k in range(n)]
        ds_sorted = make_dataset([p for _, p in sorted(zip(ts, pairs))], 10, n,
                                 timestamps=sorted(ts))
        order = rng.permutation(n)
        ds_shuffled = make_dataset([pairs[k] for k in order], 10, n,
                                   timestamps=[ts[k] for k in order])
        a = split_temporal(ds_sorted)
        b = split_temporal(ds_shuffled)
        for name in ("train", "validation", "test_temporal"):
            ma, mb = getattr(a, name), getattr(b, name)
            assert set(zip(ma.users.tolist(), ma.items.tolist())) == \
                set(zip(mb.users.tolist(), mb.items.tolist()))

    def test_missing_timestamps_rejected(self):
        ds = make_dataset([(0, 0), (1, 1)], 2, 2)
        with pytest.raises(ConfigError, match="timestamps"):
            split_temporal(ds)


class TestKlDivergence:
    def test_uniform_counts_zero(self):
        assert kl_divergence_uniform(np.array([5, 5, 5, 5])) == pytest.approx(0.0)

    def test_two_bucket_analytic(self):
        expect = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        assert kl_divergence_uniform(np.array([3, 1])) == pytest.approx(expect, abs=1e-9)
        assert kl_divergence_uniform(np.array([3, 1])) == pytest.approx(0.130812, abs=1e-6)

    def test_degenerate_distribution(self):
        assert kl_divergence_uniform(np.array([1, 0, 0, 0])) == pytest.approx(math.log(4), abs=1e-12)

    def test_all_zero_rejected(self):
        with pytest.raises(DataError):
            kl_divergence_uniform(np.array([0, 0]))

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.integers(0, 50), min_size=1, max_size=30).filter(lambda c: sum(c) > 0))
    def test_nonnegative_and_zero_iff_uniform(self, counts):
        kl = kl_divergence_uniform(np.array(counts))
        assert kl >= -1e-12
        nz = [c for c in counts if c > 0]
        if len(set(counts)) == 1:
            assert kl == pytest.approx(0.0, abs=1e-12)


class TestSubgroupPartition:
    def test_simple_thirds(self):
        labels = subgroup_partition(np.array([9, 8, 7, 6, 5, 4, 3, 2, 1]))
        assert labels.tolist() == [HEAD] * 3 + [MID] * 3 + [TAIL] * 3

    def test_tie_break_by_id(self):
        labels = subgroup_partition(np.array([4, 4, 4, 4, 4, 4]))
        assert labels.tolist() == [HEAD, HEAD, MID, MID, TAIL, TAIL]

    def test_matches_sort_oracle_and_sizes(self, rng):
        pops = rng.integers(0, 50, size=100)
        labels = subgroup_partition(pops)
        order = sorted(range(100), key=lambda i: (-pops[i], i))
        expect = {}
        for rank, i in enumerate(order):
            expect[i] = HEAD if rank < 34 else (MID if rank < 68 else TAIL)
        assert all(labels[i] == expect[i] for i in range(100))
        counts = np.bincount(labels, minlength=3)
        assert counts.tolist() == [34, 34, 32]

    @settings(deadline=None, max_examples=40)
    @given(st.lists(st.integers(0, 9), min_size=1, max_size=25))
    def test_every_item_labeled_once(self, pops):
        labels = subgroup_partition(np.array(pops))
        assert len(labels) == len(pops)
        assert set(labels.tolist()) <= {HEAD, MID, TAIL}
        counts = np.bincount(labels, minlength=3)
        third = math.ceil(len(pops) / 3)
        assert counts[0] == min(third, len(pops))


class TestSplitPersistence:
    def test_save_load_round_trip(self, tmp_path, rng):
        ds = TestSplitRandom().long_tail(rng)
        split = split_random(ds, seed=2)
        save_split(split, tmp_path / "out", extra={"seed": 2})
        again = load_split(tmp_path / "out")
        for name, m in split.members().items():
            assert again.members()[name] == m

    def test_manifest_contents(self, tmp_path, rng):
        import json

        ds = TestSplitRandom().long_tail(rng)
        split = split_random(ds, seed=2)
        save_split(split, tmp_path / "out", extra={"seed": 2})
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["kl_log_base"] == "e"
        assert manifest["members"]["train"]["interactions"] == len(split.train)
        assert manifest["members"]["train"]["kl_uniform_items"] == pytest.approx(
            kl_divergence_uniform(split.train.item_pop))
