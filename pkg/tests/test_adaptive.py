import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fedshard.adaptive import (
    MergePlan,
    RoundRange,
    allocate_rounds_a2,
    allocate_rounds_literal,
    cluster_shards,
    estimate_round_range,
    merge_shards_a1,
    random_partition,
)
from fedshard.numkit import RejectedInputError

angles = st.lists(st.floats(-math.pi, math.pi, allow_nan=False), min_size=1, max_size=24)


def best_three_split(a):
    """Brute-force optimal contiguous 3-clustering of sorted 1-D data."""
    a = sorted(a)
    best, cost_best = None, math.inf
    for i, j in itertools.combinations(range(1, len(a)), 2):
        parts = [a[:i], a[i:j], a[j:]]
        cost = sum(np.sum((np.array(p) - np.mean(p)) ** 2) for p in parts)
        if cost < cost_best:
            best, cost_best = (i, j), cost
    return best


class TestClusterShards:
    def test_constant_input_is_one_cluster(self):
        assert cluster_shards([0.3] * 5) == [1] * 5

    def test_empty(self):
        assert cluster_shards([]) == []

    def test_well_separated_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            centres = np.sort(rng.uniform(-3, 3, 3))
            assume_gap = np.min(np.diff(centres))
            if assume_gap < 1.0:
                continue
            sizes = rng.integers(2, 5, 3)
            a = np.concatenate([c + rng.uniform(-0.05, 0.05, s) for c, s in zip(centres, sizes)])
            rng.shuffle(a)
            labels = cluster_shards(a)
            i, j = best_three_split(a)
            order = np.argsort(a, kind="stable")
            expect = np.empty(a.size, dtype=int)
            expect[order[:i]], expect[order[i:j]], expect[order[j:]] = 0, 1, 2
            assert labels == expect.tolist()

    @given(angles)
    def test_labels_are_contiguous_in_angle(self, a):
        labels = cluster_shards(a)
        assert set(labels) <= {0, 1, 2}
        ordered = [lab for _, lab in sorted(zip(a, labels))]
        assert ordered == sorted(ordered)

    @settings(max_examples=60)
    @given(angles)
    def test_is_a_lloyd_fixed_point(self, a):
        arr = np.asarray(a)
        assume(np.ptp(arr) > 1e-6)
        labels = np.asarray(cluster_shards(a))
        cents = {k: arr[labels == k].mean() for k in set(labels.tolist())}
        for x, lab in zip(arr, labels):
            assert abs(x - cents[lab]) <= min(abs(x - c) for c in cents.values()) + 1e-9


class TestMergePlan:
    def test_overlap_rejected(self):
        with pytest.raises(RejectedInputError):
            MergePlan(((0, 1), (1, 2)))

    @given(st.integers(1, 40), st.integers(2, 5), st.integers(0, 1000))
    def test_random_partition(self, n, R, seed):
        plan = random_partition(n, R, seed)
        assert sorted(i for g in plan.groups for i in g) == list(range(n))
        assert plan.num_groups == math.ceil(n / R)
        assert all(len(g) <= R for g in plan.groups)
        assert plan == random_partition(n, R, seed)


class TestMergeA1:
    @given(angles, st.integers(2, 4), st.data())
    def test_partition_properties(self, a, R, data):
        counts = data.draw(st.lists(st.integers(1, 8), min_size=len(a), max_size=len(a)))
        plan = merge_shards_a1(a, counts, R, 0)
        assert sorted(i for g in plan.groups for i in g) == list(range(len(a)))
        assert plan.num_groups == math.ceil(len(a) / R)
        assert all(1 <= len(g) <= R for g in plan.groups)

    def test_is_deterministic(self):
        a = [0.3, -0.2, 0.9, -1.1, 0.0, 0.4]
        assert merge_shards_a1(a, [1] * 6, 2, 5) == merge_shards_a1(a, [1] * 6, 2, 5)

    def test_groups_span_all_clusters(self):
        # nine shards, three per cluster, rate three
        a = [-1.0, -1.05, -0.95, 0.0, 0.02, -0.02, 1.0, 1.05, 0.95]
        labels = cluster_shards(a)
        assert sorted(labels) == [0, 0, 0, 1, 1, 1, 2, 2, 2]
        plan = merge_shards_a1(a, [1] * 9, 3, 0)
        assert plan.num_groups == 3
        for g in plan.groups:
            assert sorted(labels[i] for i in g) == [0, 1, 2]

    def test_equal_angles_fall_back_to_random(self):
        assert merge_shards_a1([0.1] * 8, [1] * 8, 2, 7) == random_partition(8, 2, 7)

    def test_pairs_opposite_extremes(self):
        # two near-average, three negative, three positive shards
        a = [0.0, 0.01, -1.0, -1.1, -0.9, 1.0, 1.1, 0.9]
        plan = merge_shards_a1(a, [1] * 8, 2, 0)
        for g in plan.groups:
            if 0 in g or 1 in g:
                continue
            signs = sorted(np.sign(a[i]) for i in g)
            assert signs == [-1.0, 1.0]

    def test_balances_client_counts(self):
        a = [-1.0, -1.0, 1.0, 1.0, 0.0, 0.0]
        counts = [4, 1, 1, 4, 2, 2]
        plan = merge_shards_a1(a, counts, 2, 0)
        loads = [sum(counts[i] for i in g) for g in plan.groups]
        assert max(loads) - min(loads) <= 3

    def test_rejects(self):
        with pytest.raises(RejectedInputError):
            merge_shards_a1([0.0, 1.0], [1], 2, 0)
        with pytest.raises(RejectedInputError):
            merge_shards_a1([0.0, 1.0], [1, 1], 1, 0)


class TestRounds:
    def test_extremes_map_to_range_ends(self):
        rr = RoundRange(4, 7)
        out = allocate_rounds_a2([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]], rr)
        assert out[0] == 7 and out[-1] == 4

    def test_equal_variance_gives_midpoint(self):
        assert allocate_rounds_a2([[0.0, 1.0]] * 3, RoundRange(4, 7)) == [6, 6, 6]

    @given(st.lists(st.lists(st.floats(-3, 3), min_size=1, max_size=4), min_size=1, max_size=8),
           st.integers(1, 5), st.integers(0, 5))
    def test_in_range_and_monotone(self, children, low, width):
        rr = RoundRange(low, low + width)
        out = allocate_rounds_a2(children, rr)
        assert all(rr.low <= t <= rr.high for t in out)
        var = [np.var(c) for c in children]
        for i, j in itertools.combinations(range(len(out)), 2):
            if var[i] < var[j] - 1e-9:
                assert out[i] >= out[j]

    def test_literal_form_diverges(self):
        out = allocate_rounds_literal([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]], RoundRange(4, 7))
        assert out[0] == math.inf
        assert out[-1] == pytest.approx(7.0)
        assert all(t >= 7 for t in out)

    def test_range_validation_and_estimate(self):
        with pytest.raises(RejectedInputError):
            RoundRange(5, 4)
        assert estimate_round_range() == RoundRange(4, 7)
        assert estimate_round_range([6, 3, 9]) == RoundRange(3, 9)
        with pytest.raises(RejectedInputError):
            allocate_rounds_a2([], RoundRange())
