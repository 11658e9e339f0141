"""Selection strategies and the selection success rate."""

import collections
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrospect import (
    EmptyCandidates,
    MalformedSelection,
    ReplayGateway,
    SelectionCandidate,
    SsrRecord,
    WrongArity,
    build_selection_prompt,
    compute_ssr,
    make_plan,
    parse_selection_output,
    request_digest,
    select_completion,
    select_random,
)
from helpers import SequenceGateway


def plan():
    return make_plan([("Open the app", ["Click the icon"], "start the app")])


def candidates(action_lists=("Step 0:\n- a, b", "Step 0:\n- c, d", "Step 0:\n- e, f")):
    return [SelectionCandidate(index=i, action_list=text, plan=plan()) for i, text in enumerate(action_lists, 1)]


GOOD_OUTPUT = (
    "Pair 1 follows the plan but stops early. Score: 7\n"
    "Pair 2 reaches the goal state. Score: 9\n"
    "Pair 3 diverges at the first step. Score: 4\n"
    "Best Pair: 2"
)


class TestSelectRandom:
    def test_single_candidate_always_zero(self):
        for seed in (0, 1, 99999):
            assert select_random(1, seed) == 0

    def test_deterministic_per_seed(self):
        assert select_random(3, 42) == select_random(3, 42)

    def test_zero_candidates_rejected(self):
        with pytest.raises(EmptyCandidates):
            select_random(0, 0)

    def test_roughly_uniform_over_seeds(self):
        counts = collections.Counter(select_random(3, seed) for seed in range(3000))
        for index in range(3):
            assert abs(counts[index] / 3000 - 1 / 3) < 0.05


class TestBuildPrompt:
    def test_contains_contract_phrases_and_inputs(self):
        request = build_selection_prompt("Sort the table.", candidates())
        text = request.messages[0].parts[0].text
        assert "Best Pair" in text
        assert "Sort the table." in text
        for marker in ("- a, b", "- c, d", "- e, f"):
            assert marker in text
        assert text.count("1. **Open the app**:") == 3  # the shared plan fills all three slots

    def test_wrong_arity_rejected(self):
        with pytest.raises(WrongArity):
            build_selection_prompt("i", candidates()[:2])
        with pytest.raises(WrongArity):
            build_selection_prompt("i", candidates() + [SelectionCandidate(3, "x", plan())])

    def test_out_of_order_indices_rejected(self):
        swapped = candidates()
        swapped[0], swapped[1] = (
            SelectionCandidate(1, swapped[1].action_list, plan()),
            SelectionCandidate(2, swapped[0].action_list, plan()),
        )
        # indices are still 1,2,3 in order here, so this builds fine; contents moved
        ok = build_selection_prompt("i", swapped)
        assert ok is not None
        bad = [candidates()[1], candidates()[0], candidates()[2]]
        with pytest.raises(WrongArity):
            build_selection_prompt("i", bad)

    def test_permuting_candidate_content_changes_digest(self):
        base = build_selection_prompt("i", candidates())
        permuted = build_selection_prompt("i", candidates(("Step 0:\n- c, d", "Step 0:\n- a, b", "Step 0:\n- e, f")))
        assert request_digest(base) != request_digest(permuted)

    def test_candidate_index_bounds(self):
        with pytest.raises(ValueError):
            SelectionCandidate(index=4, action_list="x", plan=plan())


class TestParseOutput:
    def test_contract_fixture(self):
        result = parse_selection_output(GOOD_OUTPUT)
        assert result.best == 2
        assert result.scores == {1: 7, 2: 9, 3: 4}
        assert result.analysis == GOOD_OUTPUT

    def test_best_pair_out_of_range(self):
        with pytest.raises(MalformedSelection, match="outside"):
            parse_selection_output(GOOD_OUTPUT.replace("Best Pair: 2", "Best Pair: 4"))

    def test_missing_scores(self):
        with pytest.raises(MalformedSelection, match="expected 3 scores"):
            parse_selection_output("Score: 7\nScore: 9\nBest Pair: 1")

    def test_missing_best_pair(self):
        with pytest.raises(MalformedSelection, match="Best Pair"):
            parse_selection_output("Score: 7\nScore: 9\nScore: 4")

    def test_score_out_of_range(self):
        with pytest.raises(MalformedSelection, match="out of range"):
            parse_selection_output(GOOD_OUTPUT.replace("Score: 9", "Score: 11"))

    def test_tie_scores_model_choice_wins(self):
        text = "Score: 5\nScore: 5\nScore: 5\nBest Pair: 1"
        assert parse_selection_output(text).best == 1


class TestSelectCompletion:
    def test_replay_fixture_returns_best(self):
        request = build_selection_prompt("Sort the table.", candidates())
        gateway = ReplayGateway.from_pairs([(request, GOOD_OUTPUT)])
        assert select_completion("Sort the table.", candidates(), gateway) == 2

    def test_corrective_reprompt_recovers(self):
        gateway = SequenceGateway(["no usable structure here", GOOD_OUTPUT])
        assert select_completion("i", candidates(), gateway) == 2
        assert len(gateway.requests) == 2
        assert "did not follow the output contract" in gateway.requests[1].messages[0].parts[0].text

    def test_malformed_twice_falls_back_to_seeded_random(self, caplog):
        gateway = SequenceGateway(["bad", "also bad"])
        with caplog.at_level("WARNING"):
            result = select_completion("i", candidates(), gateway, fallback_seed=0)
        assert result == select_random(3, 0) + 1
        assert "falling back" in caplog.text

    def test_identical_candidates_still_pick_within_range(self):
        same = candidates(("Step 0:\n- x, y",) * 3)
        request = build_selection_prompt("i", same)
        gateway = ReplayGateway.from_pairs([(request, "Score: 5\nScore: 5\nScore: 5\nBest Pair: 3")])
        assert select_completion("i", same, gateway) in (1, 2, 3)


class TestComputeSsr:
    def test_seventy_percent_fixture(self):
        records = [SsrRecord(selected_succeeded=i < 14, any_succeeded=True) for i in range(20)]
        result = compute_ssr(records)
        assert (result.n_succ, result.n_solv) == (14, 20)
        assert result.rate == Fraction(7, 10)

    def test_eighty_five_percent_fixture(self):
        records = [SsrRecord(selected_succeeded=i < 17, any_succeeded=True) for i in range(20)]
        assert compute_ssr(records).rate == Fraction(17, 20)

    def test_undefined_when_nothing_solvable(self):
        records = [SsrRecord(selected_succeeded=False, any_succeeded=False)] * 5
        result = compute_ssr(records)
        assert result.rate is None
        assert "undefined" in str(result)

    def test_invariant_selected_implies_any(self):
        with pytest.raises(ValueError):
            SsrRecord(selected_succeeded=True, any_succeeded=False)

    def test_perfect_selection_reaches_one(self):
        records = [
            SsrRecord(selected_succeeded=solvable, any_succeeded=solvable)
            for solvable in (True, False, True, True)
        ]
        assert compute_ssr(records).rate == Fraction(1, 1)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(
            st.tuples(st.booleans(), st.booleans()).map(
                lambda pair: SsrRecord(selected_succeeded=pair[0] and pair[1], any_succeeded=pair[1])
            ),
            max_size=40,
        ),
        st.randoms(),
    )
    def test_permutation_invariant_and_matches_brute_force(self, records, rng):
        result = compute_ssr(records)
        assert result.n_solv == sum(1 for record in records if record.any_succeeded)
        assert result.n_succ == sum(1 for record in records if record.selected_succeeded)
        shuffled = list(records)
        rng.shuffle(shuffled)
        assert compute_ssr(shuffled) == result
