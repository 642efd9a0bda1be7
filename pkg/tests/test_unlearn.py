import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedshard.unlearn import (
    RejectedRequestError,
    count_cost,
    find_affected,
    structured_scratch,
    sweep_all_single_costs,
    unlearn,
    unlearn_multi,
    unlearn_report,
)

T0 = 5


class TestExactness:
    @pytest.mark.parametrize("leavers", [[0], [5], [1, 6], [2, 3], [0, 3, 4, 7]])
    def test_matches_structured_scratch(self, trained, leavers):
        cache, clients = trained()
        _, theta, _ = unlearn(cache, leavers, clients)
        ref = structured_scratch(cache, clients, leavers)
        assert np.array_equal(theta, ref.final_model)

    def test_sequential_requests_compose(self, trained):
        cache, clients = trained()
        once, _, _ = unlearn(cache, [1], clients)
        twice, theta, _ = unlearn(once, [6], clients)
        assert twice.removed == (1, 6)
        assert np.array_equal(theta, structured_scratch(cache, clients, [1, 6]).final_model)

    def test_random_merge_tree(self, trained):
        cache, clients = trained(merge="random")
        _, theta, _ = unlearn(cache, [4], clients)
        assert np.array_equal(theta, structured_scratch(cache, clients, [4]).final_model)

    def test_unaffected_shards_keep_their_bits(self, trained):
        cache, clients = trained()
        new, _, ledger = unlearn(cache, [3], clients)
        for p in range(1, cache.P + 1):
            for a, b in zip(cache.stages[p], new.stages[p]):
                if a.index not in ledger.affected[p]:
                    assert a.theta_final is b.theta_final

    def test_original_cache_untouched(self, trained):
        cache, clients = trained()
        before = [[(n.client_ids, n.theta_final) for n in st_] for st_ in cache.stages]
        unlearn(cache, [0, 1], clients)
        after = [[(n.client_ids, n.theta_final) for n in st_] for st_ in cache.stages]
        assert all(x[0] == y[0] and x[1] is y[1] for a, b in zip(before, after) for x, y in zip(a, b))
        assert 0 in cache.client_alphas

    def test_emptied_shard_is_dropped(self, trained):
        cache, clients = trained()
        pair = list(cache.stages[1][0].client_ids)
        new, _, ledger = unlearn(cache, pair, clients)
        assert new.stages[1][0].dropped and new.stages[1][0].theta_final is None
        assert ledger.actual_client_rounds < ledger.paper_mode_client_rounds
        assert not set(pair) & set(new.client_alphas)


class TestCost:
    def test_single_client_cost(self, trained):
        cache, _ = trained()
        R, P = cache.R, cache.P
        expect = T0 * R * (R**P - 1) // (R - 1)
        for c in cache.clients:
            full_size, actual = count_cost(cache, [c])
            assert full_size == expect == 70
            assert actual == expect - T0 * P

    def test_one_shard_per_stage(self, trained):
        cache, _ = trained()
        for c in cache.clients:
            assert all(len(v) == 1 for v in find_affected(cache, [c]).values())

    def test_spread_pair_is_worst_case(self, trained):
        cache, _ = trained()
        left = cache.stages[2][0].client_ids[0]
        right = cache.stages[2][1].client_ids[0]
        assert count_cost(cache, [left, right])[0] == 20 * T0

    def test_shared_first_shard_costs_one_path(self, trained):
        cache, _ = trained()
        pair = cache.stages[1][0].client_ids
        assert count_cost(cache, pair)[0] == count_cost(cache, [pair[0]])[0]

    @settings(max_examples=40, deadline=None)
    @given(st.sets(st.integers(0, 7), min_size=1, max_size=7))
    def test_count_is_monotone_and_bounded(self, trained, gone):
        cache, _ = trained()
        full_size, actual = count_cost(cache, gone)
        assert full_size >= actual >= 0
        assert full_size <= cache.training_client_rounds()
        assert full_size >= count_cost(cache, [min(gone)])[0]

    def test_ledger_matches_count(self, trained):
        cache, clients = trained()
        _, _, ledger = unlearn(cache, [2, 7], clients)
        assert (ledger.paper_mode_client_rounds, ledger.actual_client_rounds) == count_cost(cache, [2, 7])
        assert 1 <= ledger.p_prime < cache.P

    def test_p_prime(self, trained):
        cache, clients = trained()
        _, _, ledger = unlearn(cache, [0], clients)
        assert ledger.p_prime == cache.P - 1

    def test_sweep(self, trained):
        cache, clients = trained()
        z = sweep_all_single_costs(cache)
        assert z == {c: 70.0 for c in range(8)}
        with pytest.raises(ValueError):
            sweep_all_single_costs(cache, mode="full")
        with pytest.raises(ValueError):
            sweep_all_single_costs(cache, mode="guess")

    def test_report_fields(self, trained):
        cache, clients = trained()
        _, theta, ledger = unlearn(cache, [3], clients)
        rep = unlearn_report(cache, ledger, theta)
        assert rep["request"] == [3] and rep["paper_mode_client_rounds"] == 70
        assert len(rep["model_digest"]) == 64


class TestRejections:
    @pytest.mark.parametrize("leavers", [[], [1, 1], [99], list(range(8))])
    def test_bad_requests(self, trained, leavers):
        cache, clients = trained()
        with pytest.raises(RejectedRequestError):
            unlearn(cache, leavers, clients)

    def test_already_removed(self, trained):
        cache, clients = trained()
        new, _, _ = unlearn(cache, [2], clients)
        with pytest.raises(RejectedRequestError):
            unlearn(new, [2], clients)

    def test_missing_data(self, trained):
        cache, clients = trained()
        with pytest.raises(RejectedRequestError):
            unlearn(cache, [0], clients[:4])

    def test_multi_needs_two(self, trained):
        cache, clients = trained()
        with pytest.raises(RejectedRequestError):
            unlearn_multi(cache, [1], clients)
