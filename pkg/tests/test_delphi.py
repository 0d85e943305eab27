from __future__ import annotations

import pytest

from builders import ROLES, make_record
from councilsim import delphi
from councilsim.core import State, ValuePerspective
from councilsim.errors import JudgeError, PreconditionError
from councilsim.metrics import record_metrics
from councilsim.providers import ScriptedProvider

SECURITY = ValuePerspective("Security Focus", "Prioritizes safety, stability, proven methods.", ("proven", "stable", "safe"))


def constant_judge(score):
    return ScriptedProvider([{"match": {}, "text": f"SCORE: {score}"}], provider_id="const")


# -- requests -----------------------------------------------------------------


def test_request_holds_only_restricted_fields():
    req = delphi.build_validation_request(SECURITY, "stability matters most here")
    assert SECURITY.name in req.user and SECURITY.definition in req.user
    assert "stability matters most here" in req.user
    assert set(req.__dataclass_fields__) == {"perspective", "definition", "reasoning", "anchors", "system", "user", "fingerprint"}


def test_request_fingerprint_stable():
    a = delphi.build_validation_request(SECURITY, "x y z")
    b = delphi.build_validation_request(SECURITY, "x y z")
    c = delphi.build_validation_request(SECURITY, "x y")
    assert a.fingerprint == b.fingerprint != c.fingerprint


def test_request_needs_reasoning():
    with pytest.raises(PreconditionError):
        delphi.build_validation_request(SECURITY, "   ")


# -- scoring ------------------------------------------------------------------


@pytest.mark.parametrize(
    "text, expected",
    [("SCORE: 0.85", 0.85), ("analysis...\n**SCORE:** 1.0", 1.0), ("score: .5", 0.5), ("SCORE: 0", 0.0)],
)
def test_parse_score(text, expected):
    assert delphi.parse_score(text) == expected


@pytest.mark.parametrize("text", ["SCORE: 1.7", "SCORE: -0.1", "SCORE: high", "no score here"])
def test_parse_score_rejects(text):
    with pytest.raises(ValueError):
        delphi.parse_score(text)


def test_scripted_judge_score():
    req = delphi.build_validation_request(SECURITY, "safe and proven")
    a = delphi.score_coherence(req, constant_judge(0.85), role="Guardian")
    assert a.score == 0.85 and a.role == "Guardian" and a.fingerprint == req.fingerprint


def test_out_of_range_on_every_attempt():
    judge = constant_judge(1.7)
    with pytest.raises(JudgeError) as info:
        delphi.score_coherence(delphi.build_validation_request(SECURITY, "safe"), judge, role="Guardian")
    assert info.value.attempts == 3 and judge.calls == 3


def test_keyword_stub_formula():
    judge = delphi.KeywordOverlapJudge([SECURITY])
    req = delphi.build_validation_request(SECURITY, "proven, stable, safe")
    assert delphi.score_coherence(req, judge, role="r").score == 1.0
    req = delphi.build_validation_request(SECURITY, "a stable plan")
    assert delphi.score_coherence(req, judge, role="r").score == pytest.approx(1 / 3)


# -- validation ---------------------------------------------------------------


def test_validate_run_pairs_with_parent(config):
    b = make_record(config, ["ABC"] * 7, index=4)
    c = delphi.validate_run(b, constant_judge(1.0), config.perspectives)
    assert c.state is State.C and c.run_id == "C-0004" and c.parent_run_id == "B-0004"
    assert c.transcript == b.transcript and c.evaluations == b.evaluations
    assert len(c.assessments) == 7 and c.fully_validated


def test_unit_scores_leave_metrics_unchanged(config):
    b = make_record(config, ["ABC", "BCA", "CAB", "ACB", "CBA", "BAC", "ABC"])
    c = delphi.validate_run(b, constant_judge(1.0), config.perspectives)
    mb = record_metrics(b, "ABC", weighted=False)
    mc = record_metrics(c, "ABC", weighted=True)
    for field in ("votes", "fcc", "borda", "margin", "entropy", "winner"):
        assert getattr(mb, field) == getattr(mc, field)


def test_zero_score_removes_a_voter(config):
    b = make_record(config, ["CBA"] + ["ABC"] * 6)
    judge = ScriptedProvider(
        [{"match": {"role": ROLES[0]}, "text": "SCORE: 0.0"}, {"match": {}, "text": "SCORE: 1.0"}]
    )
    c = delphi.validate_run(b, judge, config.perspectives)
    m = record_metrics(c, "ABC", weighted=True)
    assert m.borda == {"A": 12.0, "B": 6.0, "C": 0.0}


def test_judge_failure_is_recorded(config):
    b = make_record(config, ["ABC"] * 7)
    judge = ScriptedProvider([{"match": {"role": "Driver"}, "text": "no idea"}, {"match": {}, "text": "SCORE: 0.7"}])
    c = delphi.validate_run(b, judge, config.perspectives)
    assert c.validation_failures == ("Driver",)
    assert not c.fully_validated


def test_validation_rejects_non_b(config):
    with pytest.raises(PreconditionError):
        delphi.validate_run(make_record(config, ["ABC"] * 7, state="A"), constant_judge(1.0), config.perspectives)


def test_judge_never_sees_votes_or_debate(config):
    b = make_record(config, ["ACB", "BAC", "CAB", "ACB", "CAB", "BCA", "ACB"])
    judge = ScriptedProvider([{"match": {}, "text": "SCORE: 0.5"}])
    delphi.validate_run(b, judge, config.perspectives)
    forbidden = [e.text for e in b.transcript.entries] + [ev.raw_response for ev in b.evaluations]
    for req, ev in zip(judge.requests, b.evaluations):
        body = req.system + req.user
        assert not any(f in body for f in forbidden)
        assert "FIRST:" not in body
        others = [o.reasoning for o in b.evaluations if o.role != ev.role]
        assert not any(o in body for o in others)


# -- reliability --------------------------------------------------------------


def test_retest_with_deterministic_judge(config):
    texts = ["safe and proven", "bold change", "practical", "measurable results", "simple", "fast outcomes", "stable"]
    runs = [make_record(config, ["ABC"] * 7, index=i, reasonings=texts) for i in range(3)]
    judge = delphi.KeywordOverlapJudge(config.perspectives.values())
    rep = delphi.test_retest(runs, judge, config.perspectives)
    assert rep.n == 21
    assert rep.icc == pytest.approx(1.0)
    assert rep.mean_abs_diff == 0 and rep.stable_fraction == 1.0


def test_reliability_matches_closed_form():
    rows = [[0.9, 0.8], [0.6, 0.7], [0.3, 0.4], [0.5, 0.5], [0.8, 0.6]]
    rep = delphi.reliability_from_scores(rows, ["r"] * 5)
    assert rep.icc == pytest.approx(0.065 / 0.082, abs=1e-9)
    assert rep.mean_abs_diff == pytest.approx(0.1)
    assert rep.stable_fraction == 1.0


def test_retest_needs_two_repetitions(config):
    with pytest.raises(PreconditionError):
        delphi.test_retest([make_record(config, ["ABC"] * 7)], constant_judge(1), config.perspectives, repetitions=1)


def test_cross_judge_same_judge(config):
    runs = [make_record(config, ["ABC"] * 7, index=i) for i in range(2)]
    judge = ScriptedProvider(lambda r: f"SCORE: {0.1 + 0.1 * (len(r.user) % 7)}")
    rep = delphi.cross_model(runs, judge, judge, config.perspectives)
    assert rep.mean_difference == 0
    assert rep.pearson == pytest.approx(1.0)
    assert rep.same_ordering


def test_cross_judge_constant_offset():
    xs = [0.2, 0.35, 0.5, 0.62, 0.8, 0.95]
    pairs = [("P", x, max(0.0, x - 0.09)) for x in xs]
    rep = delphi.cross_report_from_scores(pairs)
    assert rep.mean_difference == pytest.approx(0.09, abs=1e-9)
    assert rep.spearman == pytest.approx(1.0)


def test_sample_records_is_seeded(config):
    runs = [make_record(config, ["ABC"] * 7, index=i) for i in range(10)]
    a = delphi.sample_records(runs, 4, seed=3)
    assert a == delphi.sample_records(runs, 4, seed=3)
    assert len(a) == 4 and len(delphi.sample_records(runs, 40, seed=3)) == 10
