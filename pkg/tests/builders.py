"""Hand-built deliberation records for metric and analysis tests."""

from __future__ import annotations

from councilsim.core import (
    CoherenceAssessment,
    DebateTranscript,
    DeliberationRecord,
    EvaluationRecord,
    ModelAssignment,
    ModelSpec,
    Ranking,
    State,
    TranscriptEntry,
)

ROLES = ("Conservative", "Innovator", "Pragmatist", "Perfectionist", "Minimalist", "Driver", "Guardian")


def tiny_transcript(options=("A", "B", "C")) -> DebateTranscript:
    champions = dict(zip(options, ("Conservative", "Innovator", "Pragmatist")))
    entries = [TranscriptEntry(champions[o], 1, o, f"position for {o}") for o in options]
    entries += [
        TranscriptEntry(champions[o], 2, o, f"critique of {t}", target=t) for o in options for t in options if t != o
    ]
    entries += [TranscriptEntry(champions[o], 3, o, f"defense of {o}") for o in options]
    return DebateTranscript(tuple(entries))


def make_record(
    config,
    rankings,
    *,
    state="B",
    index=0,
    scores=None,
    scenario_id="child_welfare",
    variant="baseline",
    roles=ROLES,
    reasonings=None,
):
    """A record whose i-th evaluator ranks ``rankings[i]`` (a string like "ACB").

    With ``scores`` the record is a state-C record carrying those coherence scores.
    """
    perspective = {e.name: e.primary for e in config.evaluators}
    evaluations = tuple(
        EvaluationRecord(
            role=role,
            perspective=perspective.get(role, "Security Focus"),
            ranking=Ranking(tuple(r)),
            reasoning=reasonings[i] if reasonings else f"{role} reasoning for {r}",
            raw_response=f"FIRST: {r[0]}",
        )
        for i, (role, r) in enumerate(zip(roles, rankings))
    )
    spec = ModelSpec("m", "local")
    kwargs = {}
    st = State(state)
    run_id = f"{st.value}-{index:04d}"
    if scores is not None:
        kwargs["assessments"] = tuple(
            CoherenceAssessment(role, float(s), "stub", f"SCORE: {s}", "fp") for role, s in zip(roles, scores)
        )
        if st is State.C:
            kwargs["parent_run_id"] = f"B-{index:04d}"
    return DeliberationRecord(
        scenario_id=scenario_id,
        variant=variant,
        state=st,
        run_id=run_id,
        run_index=index,
        master_seed=1,
        run_seed=index,
        assignment=ModelAssignment({r: spec for r in roles}),
        transcript=tiny_transcript(),
        evaluations=evaluations,
        config_hash="h",
        **kwargs,
    )
