from __future__ import annotations

import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from builders import make_record
from councilsim.core import TIE, EvaluationRecord, Ranking, WeightingMode
from councilsim.errors import PreconditionError, UndefinedMetricError
from councilsim.metrics import (
    TensionCategory,
    TensionPairMap,
    borda_margin,
    borda_scores,
    classify_tension,
    compute_metrics,
    effective_perspectives,
    first_choice_concentration,
    record_metrics,
    tension_rate,
    voice_authenticity,
    winner,
)

OPTS = ("A", "B", "C")


def evals(*rankings):
    return [EvaluationRecord(f"r{i}", "P", Ranking(tuple(r)), "why", "raw") for i, r in enumerate(rankings)]


FIVE_ONE_ONE = ["ABC"] * 5 + ["BCA", "CBA"]
FIVE_ONE_ONE_WEIGHTS = [0.5] * 5 + [1.0, 1.0]


# -- Borda --------------------------------------------------------------------


def test_borda_identical_rankings():
    assert borda_scores(evals(*["ABC"] * 7), OPTS) == {"A": 14, "B": 7, "C": 0}


def test_borda_linear_in_weights():
    assert borda_scores(evals(*["ABC"] * 7), OPTS, [0.5] * 7) == {"A": 7, "B": 3.5, "C": 0}


def test_borda_five_one_one_weighted():
    got = borda_scores(evals(*FIVE_ONE_ONE), OPTS, FIVE_ONE_ONE_WEIGHTS)
    want = oracles.borda_terms(FIVE_ONE_ONE, [Fraction(1, 2)] * 5 + [1, 1])
    # hand enumeration: A = 5 x 0.5 x 2 = 5, B = 5 x 0.5 x 1 + 2 + 1 = 5.5, C = 1 + 2 = 3
    assert want == {"A": 5, "B": Fraction(11, 2), "C": 3}
    assert got == {k: float(v) for k, v in want.items()}
    assert winner(got) == "B"
    assert winner(borda_scores(evals(*FIVE_ONE_ONE), OPTS)) == "A"


def test_borda_weight_count_mismatch():
    with pytest.raises(PreconditionError):
        borda_scores(evals("ABC", "ACB"), OPTS, [1.0])


def test_borda_rejects_foreign_ranking():
    with pytest.raises(PreconditionError):
        borda_scores(evals("ABD"), OPTS)


# -- FCC ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "tallies, expected",
    [
        ((3, 2, 2), 1 / 7),
        ((7, 0, 0), 1.0),
        ((4, 2, 1), 5 / 14),
        ((2.0, 1.0, 0.5), (2.0 - 7 / 6) / (3.5 - 7 / 6)),
    ],
)
def test_fcc_examples(tallies, expected):
    assert first_choice_concentration(tallies) == pytest.approx(expected, abs=1e-12)


def test_fcc_weighted_example_value():
    assert first_choice_concentration((2.0, 1.0, 0.5), 3.5, 3) == pytest.approx(0.357142857142857, abs=1e-12)


@given(st.integers(1, 60), st.integers(2, 8))
def test_fcc_unanimous_is_one(n, k):
    assert first_choice_concentration([n] + [0] * (k - 1)) == 1.0


@given(st.lists(st.integers(0, 9), min_size=2, max_size=6).filter(lambda t: sum(t) > 0))
def test_fcc_matches_rational_oracle(tallies):
    assert first_choice_concentration(tallies) == float(oracles.fcc_exact(tallies))


def test_fcc_integer_and_float_tallies_agree():
    assert first_choice_concentration([3, 2, 2]) == first_choice_concentration([3.0, 2.0, 2.0])


def test_fcc_zero_weight_undefined():
    with pytest.raises(UndefinedMetricError):
        first_choice_concentration([0, 0, 0])


def test_fcc_tallies_must_sum_to_n():
    with pytest.raises(PreconditionError):
        first_choice_concentration([3, 2, 2], n=8)


# -- margin, entropy, authenticity --------------------------------------------


def test_margin_identical_rankings():
    assert borda_margin({"A": 14, "B": 7, "C": 0}, 7) == 0.5


def test_margin_range_over_every_profile():
    # all 792 multisets of seven rankings; unanimous first choice with split seconds beats 1/2
    import itertools

    perms = ["ABC", "ACB", "BAC", "BCA", "CAB", "CBA"]
    top = Fraction(0)
    for profile in itertools.combinations_with_replacement(perms, 7):
        m = compute_metrics(evals(*profile), OPTS)
        s = sorted(oracles.borda_terms(profile, [1] * 7).values(), reverse=True)
        want = Fraction(s[0] - s[1]) / 14
        assert m.margin == pytest.approx(float(want), abs=1e-12)
        top = max(top, want)
    assert top == Fraction(5, 7)
    assert compute_metrics(evals(*(["ABC"] * 4 + ["ACB"] * 3)), OPTS).margin == pytest.approx(5 / 7)


def test_margin_top_tie():
    assert borda_margin({"A": 8, "B": 8, "C": 5}, 7) == 0.0


def test_margin_weighted_example():
    assert borda_margin({"A": 5, "B": 5.5, "C": 3.0}, 4.5) == pytest.approx(0.5 / 9, abs=1e-12)


def test_margin_zero_weight():
    with pytest.raises(UndefinedMetricError):
        borda_margin([0, 0, 0], 0)


@pytest.mark.parametrize(
    "shares, expected",
    [((1, 0, 0), 0.0), ((1 / 3,) * 3, math.log2(3)), ((0.25,) * 4, 2.0), ((3 / 7, 2 / 7, 2 / 7), 1.5566567074628228)],
)
def test_entropy_examples(shares, expected):
    assert effective_perspectives(shares) == pytest.approx(expected, abs=1e-12)
    assert effective_perspectives(shares) == pytest.approx(oracles.entropy_bits(shares), abs=1e-12)


def test_entropy_rejects_unnormalised():
    with pytest.raises(PreconditionError):
        effective_perspectives([0.5, 0.2])


@pytest.mark.parametrize("scores, expected", [((0.9, 0.5, 0.6), 2 / 3), ((1.0,) * 7, 1.0), ((0.59,), 0.0)])
def test_voice_authenticity(scores, expected):
    assert voice_authenticity(scores) == pytest.approx(expected)


def test_winner_reports_ties():
    assert winner({"A": 8, "B": 8, "C": 5}) == TIE
    assert winner({"A": 9, "B": 8, "C": 4}) == "A"


# -- bundles ------------------------------------------------------------------


def test_unit_weights_reproduce_unweighted_bit_for_bit():
    ev = evals(*FIVE_ONE_ONE)
    plain = compute_metrics(ev, OPTS)
    ones = compute_metrics(ev, OPTS, weights=[1.0] * 7)
    for field in ("votes", "fcc", "borda", "margin", "entropy", "winner", "n"):
        assert getattr(plain, field) == getattr(ones, field), field
    assert plain.mode is WeightingMode.UNWEIGHTED and ones.mode is WeightingMode.WEIGHTED
    assert ones.voice_authenticity == 1.0


def test_zero_weight_contributes_nothing():
    ev = evals("ABC", "BAC", "CAB")
    m = compute_metrics(ev, OPTS, weights=[1.0, 1.0, 0.0])
    assert m.borda == {"A": 3.0, "B": 3.0, "C": 0.0}
    assert m.votes["C"] == 0.0


def test_all_zero_weights_undefined():
    with pytest.raises(UndefinedMetricError):
        compute_metrics(evals("ABC"), OPTS, weights=[0.0])


def test_record_metrics_weighted_needs_assessments(config):
    with pytest.raises(UndefinedMetricError):
        record_metrics(make_record(config, ["ABC"] * 7), OPTS, weighted=True)


def test_record_metrics_weighted_five_one_one(config):
    rec = make_record(config, FIVE_ONE_ONE, state="C", scores=FIVE_ONE_ONE_WEIGHTS)
    m = record_metrics(rec, OPTS, weighted=True)
    assert m.winner == "B"
    assert m.n == 4.5
    assert m.margin == pytest.approx(0.5 / 9)
    assert m.fcc == float(oracles.fcc_exact([Fraction(5, 2), 1, 1]))
    assert record_metrics(rec, OPTS, weighted=False).winner == "A"


# -- tension ------------------------------------------------------------------


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (("A", 0.9), ("B", 0.8), TensionCategory.AUTHENTIC_DISAGREEMENT),
        (("A", 0.9), ("A", 0.3), TensionCategory.SUSPECT_AGREEMENT),
        (("A", 0.9), ("B", 0.3), TensionCategory.PARTIAL),
        (("A", 0.6), ("A", 0.6), TensionCategory.GENUINE_AGREEMENT),
    ],
)
def test_classify_tension(a, b, expected):
    assert classify_tension(a[0], a[1], b[0], b[1]) is expected


def test_tension_all_coherent_unanimous(config):
    rec = make_record(config, ["ABC"] * 7, state="C", scores=[1.0] * 7)
    summary = tension_rate([rec], config.tension_pairs, config.evaluators)
    assert summary.trustworthy_rate == 1.0
    assert summary.counts["genuine_agreement"] == summary.classified == summary.total > 0


def test_tension_missing_assessment_is_unclassifiable(config):
    rec = make_record(config, ["ABC"] * 7, state="C", scores=[1.0] * 6)  # Guardian unscored
    summary = tension_rate([rec], config.tension_pairs, config.evaluators)
    guardian_pairs = sum(1 for i in summary.instances if "Guardian" in i.roles)
    assert summary.unclassifiable == guardian_pairs > 0
    assert summary.classified == summary.total - guardian_pairs


def test_tension_pair_without_bearer_is_reported(config):
    pairs = TensionPairMap.from_list([["Security Focus", "Risk Tolerance"]])
    lone = [e for e in config.evaluators if e.name != "Innovator" and e.secondary != "Risk Tolerance"]
    summary = tension_rate([], pairs, lone)
    assert summary.uninstantiable == ["Security Focus--Risk Tolerance"]
