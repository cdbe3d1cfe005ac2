import time

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from volrecon.graph import AbsoluteWindow, ObservedVolumes, RelativeWindow, build_graph
from volrecon.match_extend import (
    CandidateSolution,
    approx_lc_substring,
    complete_from_observations,
    find_best_candidate,
    is_backed,
    match_and_extend,
    merge,
    noisy_clique,
    solution_sums,
    solution_support,
    trim_unbacked_ends,
)
from volrecon.model import Database, exact_volumes, reverse

NOISY_V = [29, 58, 79, 89, 98, 108, 128, 160, 178, 209, 239, 268, 299]
NOISY_OBS = ObservedVolumes(tuple(NOISY_V), AbsoluteWindow(1, 3))
CAND_A = CandidateSolution((29, 99, 81, 30))
CAND_B = CandidateSolution((29, 180, 30, 60))


def _classical_lcs(a, b):
    """Quadratic longest common substring; ties to earliest start in a, then in b."""
    best = (0, 0, 0)
    for i in range(len(a)):
        for j in range(len(b)):
            k = 0
            while i + k < len(a) and j + k < len(b) and a[i + k] == b[j + k]:
                k += 1
            if k > best[0]:
                best = (k, i, j)
    return best


# -- approximate longest common substring ------------------------------------------


def test_lcs_worked_example():
    m = approx_lc_substring(CAND_A, CAND_B, 0.05)
    assert m.common == (29,)
    assert m.base_span == (0, 1) and m.cand_span == (0, 1)


def test_lcs_identical_lists():
    xs = [4, 8, 15, 16, 23, 42]
    m = approx_lc_substring(xs, xs, 0)
    assert m.common == tuple(xs) and m.base_span == m.cand_span == (0, 6)


def test_lcs_elementwise_tolerance():
    m = approx_lc_substring([100, 200, 300], [101, 199, 300], 0.02)
    assert m.common == (100, 200, 300)
    assert approx_lc_substring([100, 200, 300], [101, 199, 300], 0.001).common == (300,)


def test_lcs_without_agreement():
    assert approx_lc_substring([1, 2], [7, 9], 0).common == ()
    with pytest.raises(ValueError):
        approx_lc_substring([], [1], 0)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=12), st.lists(st.integers(1, 4), min_size=1, max_size=12))
def test_lcs_at_zero_budget_is_classical(a, b):
    k, i, j = _classical_lcs(a, b)
    m = approx_lc_substring(a, b, 0)
    assert len(m.common) == k
    if k:
        assert m.base_span == (i, i + k) and m.cand_span == (j, j + k)
        assert list(m.common) == a[i : i + k]


# -- merge ---------------------------------------------------------------------------


def test_merge_worked_example():
    out = merge(CAND_A, CAND_B, 0.05, NOISY_OBS)
    assert out.merged.segments == (29, 99, 81, 30, 60)
    # the subdivision 180 = 99 + 81 needs the run 29 + 99 = 128, which is observed
    assert out.missing_volumes == 0
    # either order of the two solutions gives the same database
    assert merge(CAND_B, CAND_A, 0.05, NOISY_OBS).merged.segments == (29, 99, 81, 30, 60)


def test_merge_counts_unbacked_subdivisions():
    sparse = ObservedVolumes((5, 7), AbsoluteWindow(1, 3))
    out = merge(CAND_A, CAND_B, 0.05, sparse)
    assert out.merged.segments == (29, 99, 81, 30, 60) and out.missing_volumes == 1


def test_merge_with_itself():
    out = merge(CAND_A, CAND_A, 0.05, NOISY_OBS)
    assert out.merged == CAND_A and out.missing_volumes == 0


def test_merge_aborts_without_relation():
    out = merge([10, 20], [40, 5], 0.01, ObservedVolumes((10, 20, 40, 5), RelativeWindow(0.01)))
    assert out.aborted and out.merged is None


def test_merge_end_cases():
    obs = ObservedVolumes((10, 20, 30, 50, 60, 70, 80), RelativeWindow(0))
    # (a)/(b): one side runs out, the other side's remainder is appended
    assert merge([10, 20], [10, 20, 30], 0, obs).merged.segments == (10, 20, 30)
    assert merge([50, 10, 20], [10, 20], 0, obs).merged.segments == (50, 10, 20)
    # (c): single leftovers 30 and 80 after the block become (30, 50) when 50 is observed
    assert merge([10, 20, 30], [10, 20, 80], 0, obs).merged.segments == (10, 20, 30, 50)
    # ... and (50, 30) before it
    assert merge([30, 10, 20], [80, 10, 20], 0, obs).merged.segments == (50, 30, 10, 20)
    # (d): without the difference among the observations the merge aborts
    assert merge([10, 20, 30], [10, 20, 95], 0, obs).aborted


@given(
    st.lists(st.integers(1, 50), min_size=2, max_size=8),
    st.data(),
)
def test_merge_of_two_coarsenings_keeps_length_and_span(counts, data):
    prefix = np.cumsum(counts).tolist()
    obs = ObservedVolumes(tuple(exact_volumes(Database(tuple(counts))).distinct()), RelativeWindow(0))
    keep_a = data.draw(st.lists(st.sampled_from(prefix[:-1]), unique=True)) + [prefix[-1]]
    keep_b = data.draw(st.lists(st.sampled_from(prefix[:-1]), unique=True)) + [prefix[-1]]
    a = np.diff([0, *sorted(keep_a)]).tolist()
    b = np.diff([0, *sorted(keep_b)]).tolist()
    out = merge(a, b, 0, obs)
    assume(not out.aborted)
    assert len(out.merged) >= max(len(a), len(b))
    assert sum(out.merged) >= max(sum(a), sum(b))


# -- best candidate ---------------------------------------------------------------------


def test_best_candidate_worked_example():
    pick = find_best_candidate(CAND_A, [CAND_B], 0.05, NOISY_OBS)
    assert pick.candidate == CAND_B and pick.index == 0
    assert pick.outcome.merged.segments == (29, 99, 81, 30, 60)
    assert pick.outcome.missing_volumes == 0


def test_best_candidate_includes_base_itself():
    pick = find_best_candidate(CAND_A, [CandidateSolution((500, 3)), CAND_A], 0.05, NOISY_OBS)
    assert pick.candidate == CAND_A and pick.outcome.missing_volumes == 0 and pick.index == 1


def test_best_candidate_all_abort():
    log = []
    assert find_best_candidate([10, 20], [[40, 5], [41, 6]], 0.01, NOISY_OBS, log=log) is None
    assert [r["outcome"] for r in log] == ["aborted", "aborted"]
    assert set(log[0]) == {"candidate", "outcome", "missing_volumes", "merged_length"}


def test_best_candidate_ties_go_to_earlier_candidate():
    pick = find_best_candidate(CAND_A, [CAND_B, CAND_B], 0.05, NOISY_OBS)
    assert pick.index == 0
    with pytest.raises(ValueError):
        find_best_candidate(CAND_A, [CAND_B], 0.05, NOISY_OBS, rank="vibes")


def test_length_bounds_reject_merges():
    assert find_best_candidate(CAND_A, [CAND_A], 0.05, NOISY_OBS, min_length=5) is None
    assert find_best_candidate(CAND_A, [CAND_B], 0.05, NOISY_OBS, max_length=4) is None


# -- full reconstruction ------------------------------------------------------------------


def test_worked_example_end_to_end():
    t0 = time.perf_counter()
    res = match_and_extend(NOISY_V, 5, 0.05, window=AbsoluteWindow(1, 3))
    assert time.perf_counter() - t0 < 1.0
    assert res.success and res.segments == (29, 99, 81, 30, 60)
    assert res.database() == Database((29, 99, 81, 30, 60))
    d = res.to_dict()
    assert d["counts"] == [29, 99, 81, 30, 60] and d["success"]


def test_every_prefix_of_worked_example_is_observed():
    res = match_and_extend(NOISY_V, 5, 0.05, window=AbsoluteWindow(1, 3))
    assert all(NOISY_OBS.supports(p) for p in np.cumsum(res.segments).tolist())


def test_degenerate_input_reports_partial():
    res = match_and_extend([10, 25], 4, 0.01)
    assert not res.success and res.recovered_length < 4
    assert solution_support(res.segments, ObservedVolumes((10, 25), AbsoluteWindow(0, 0))).unexplained == 0
    with pytest.raises(ValueError):
        res.database()
    with pytest.raises(ValueError):
        match_and_extend([10], 0, 0)
    with pytest.raises(ValueError):
        match_and_extend([10], 2, 0, ell=-1)


def test_log_is_kept_on_request():
    res = match_and_extend(NOISY_V, 5, 0.05, window=AbsoluteWindow(1, 3), keep_log=True)
    assert res.log and {"candidate", "outcome", "missing_volumes", "merged_length"} <= set(res.log[0])
    assert match_and_extend(NOISY_V, 5, 0.05, window=AbsoluteWindow(1, 3)).log == []


def _dense(n_max):
    return st.integers(3, 8).flatmap(
        lambda N: st.lists(st.integers(1, n_max), min_size=N, max_size=N).map(lambda c: Database(tuple(c)))
    )


@given(_dense(250).filter(lambda db: db.n >= 100))
def test_noiseless_recovers_truth_or_reversal(db):
    res = match_and_extend(exact_volumes(db).values(), db.N, 0)
    assert res.success
    assert res.segments in (db.counts, reverse(db).counts)


@given(_dense(15))
def test_noiseless_small_databases_are_recovered_up_to_homometry(db):
    # With very few records, different databases can share the same set of
    # range volumes; any such answer is as good as the truth.
    res = match_and_extend(exact_volumes(db).values(), db.N, 0)
    assert res.success and min(res.segments) >= 1
    if res.segments not in (db.counts, reverse(db).counts):
        assert exact_volumes(Database(res.segments)).distinct() == exact_volumes(db).distinct()


def test_reconstruction_is_deterministic():
    a = match_and_extend(NOISY_V, 5, 0.05, window=AbsoluteWindow(1, 3))
    b = match_and_extend(NOISY_V, 5, 0.05, window=AbsoluteWindow(1, 3))
    assert a.to_dict() == b.to_dict()


# -- single-clique baseline -------------------------------------------------------------


def test_noisy_clique_exact_volumes():
    db = Database((30, 100, 80, 30, 60))
    res = noisy_clique(exact_volumes(db).values(), 5, 0)
    assert res.success and res.segments in (db.counts, reverse(db).counts)


def test_noisy_clique_partial_when_the_clique_is_short():
    res = noisy_clique([10, 25], 3, 0)
    assert not res.success and res.recovered_length == 1


def test_solution_support_of_truth_is_perfect():
    db = Database((30, 100, 80, 30, 60))
    obs = build_graph(exact_volumes(db).values(), 0).observed()
    assert tuple(solution_support(db.counts, obs)) == (0, 0, 0)
    assert sorted(solution_sums([1, 2])) == [1, 2, 3]


# -- trimming and completion ----------------------------------------------------------

EXACT = ObservedVolumes(tuple(sorted(set(exact_volumes(Database((5, 11, 10, 16))).values()))), AbsoluteWindow(0, 0))


def test_trim_drops_unbacked_end_values():
    # no run through the trailing 7 or the leading 3 is an observed volume
    assert trim_unbacked_ends((5, 11, 10, 16, 7), EXACT) == (5, 11, 10, 16)
    assert trim_unbacked_ends((3, 5, 11, 10), EXACT) == (5, 11, 10)
    assert trim_unbacked_ends((5, 11, 10, 16), EXACT) == (5, 11, 10, 16)
    assert len(trim_unbacked_ends((99,), EXACT)) == 1


def test_backed_check():
    assert is_backed((5, 11, 10, 16), EXACT)
    assert not is_backed((5, 11, 10, 16, 7), EXACT)


def test_completion_adds_an_end_value():
    assert complete_from_observations((5, 11, 10), 4, EXACT) == (5, 11, 10, 16)


def test_completion_splits_a_merged_value():
    # 21 splits as 11 + 10 (every new run observed), not 10 + 11
    assert complete_from_observations((5, 21, 16), 4, EXACT) == (5, 11, 10, 16)


def test_completion_stops_at_n_or_without_support():
    assert complete_from_observations((5, 11, 10, 16), 4, EXACT) == (5, 11, 10, 16)
    assert complete_from_observations((5, 21, 16), 3, EXACT) == (5, 21, 16)
    lone = ObservedVolumes((10,), AbsoluteWindow(0, 0))
    # a second 10 has half its runs observed; a third would have a third
    assert complete_from_observations((10,), 3, lone) == (10, 10)


def test_completion_can_be_disabled():
    assert match_and_extend([10, 25], 4, 0.01, complete=False).recovered_length == 1
