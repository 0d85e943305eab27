"""Coherence validation under information restriction, plus judge reliability.

A judge sees only a perspective name, its definition and one evaluator's
reasoning (with fixed calibration anchors). Votes, option descriptions, the
debate and peer output never reach it: :func:`build_validation_request`
accepts nothing else.
"""

from __future__ import annotations

import logging
import random
import re
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

from councilsim import stats
from councilsim.core import (
    CoherenceAssessment,
    DeliberationRecord,
    RunStatus,
    State,
    ValuePerspective,
    content_hash,
    derive_seed,
)
from councilsim.deliberation import PromptTemplateSet
from councilsim.errors import DegenerateTestError, JudgeError, PreconditionError
from councilsim.providers import GenerationRequest, GenerationResponse, Provider

log = logging.getLogger(__name__)

REASONING_START = "=== REASONING START ==="
REASONING_END = "=== REASONING END ==="


@dataclass(frozen=True)
class CalibrationAnchor:
    text: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise PreconditionError(f"anchor score {self.score} outside [0, 1]")


DEFAULT_ANCHORS: tuple[CalibrationAnchor, ...] = (
    CalibrationAnchor(
        "Argues from popularity, cost or another value set entirely; the assigned perspective is "
        "named at most in passing and never drives the conclusion.",
        0.2,
    ),
    CalibrationAnchor(
        "Mentions the assigned perspective's concerns, but the decisive arguments come from "
        "elsewhere or the link between values and ranking is asserted rather than shown.",
        0.5,
    ),
    CalibrationAnchor(
        "Every step of the ranking is derived from the assigned perspective's priorities, "
        "weighing options explicitly by what that perspective values.",
        0.9,
    ),
)


@dataclass(frozen=True)
class ValidationRequest:
    perspective: str
    definition: str
    reasoning: str
    anchors: tuple[CalibrationAnchor, ...]
    system: str
    user: str
    fingerprint: str


def _anchor_block(anchors: Sequence[CalibrationAnchor]) -> str:
    return "\n".join(f"- score {a.score:.1f}: {a.text}" for a in anchors)


def build_validation_request(
    perspective: ValuePerspective,
    reasoning: str,
    anchors: Sequence[CalibrationAnchor] = DEFAULT_ANCHORS,
    templates: PromptTemplateSet | None = None,
) -> ValidationRequest:
    if not reasoning.strip():
        raise PreconditionError("reasoning must be non-empty")
    templates = templates or PromptTemplateSet.load()
    anchors = tuple(anchors)
    system = templates.render("judge_system")
    user = templates.render(
        "judge_user",
        perspective=perspective.name,
        definition=perspective.definition,
        reasoning=reasoning,
        anchors=_anchor_block(anchors),
    )
    return ValidationRequest(
        perspective=perspective.name,
        definition=perspective.definition,
        reasoning=reasoning,
        anchors=anchors,
        system=system,
        user=user,
        fingerprint=content_hash({"system": system, "user": user}),
    )


_SCORE_RE = re.compile(r"^[\s*#>_-]*SCORE[\s*_]*:[\s*_]*(\S+?)[\s*_.]*$", re.IGNORECASE | re.MULTILINE)
_DECIMAL_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")


def parse_score(text: str) -> float:
    """Read the ``SCORE: <decimal>`` line; out-of-range values are rejected."""
    m = _SCORE_RE.search(text)
    if m is None:
        raise ValueError("no SCORE line")
    token = m.group(1)
    if not _DECIMAL_RE.fullmatch(token):
        raise ValueError(f"SCORE {token!r} is not a decimal")
    value = float(token)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"SCORE {value} outside [0, 1]")
    return value


def score_coherence(
    request: ValidationRequest,
    judge: Provider,
    *,
    role: str,
    model: str = "judge",
    temperature: float = 0.0,
    max_attempts: int = 3,
    seed: int | None = None,
    context: Mapping[str, Any] | None = None,
    max_tokens: int = 512,
) -> CoherenceAssessment:
    text = ""
    reason = ""
    for attempt in range(1, max_attempts + 1):
        req = GenerationRequest(
            model=model,
            system=request.system,
            user=request.user,
            temperature=temperature,
            seed=None if seed is None else derive_seed(seed, attempt),
            max_tokens=max_tokens,
            context={**dict(context or {}), "phase": "validation", "role": role, "attempt": attempt},
        )
        text = judge.generate(req).text
        try:
            score = parse_score(text)
        except ValueError as exc:
            reason = str(exc)
            log.info("judge reply for %s unusable (attempt %d): %s", role, attempt, reason)
            continue
        return CoherenceAssessment(
            role=role,
            score=score,
            judge=f"{judge.provider_id}:{model}",
            raw_response=text,
            fingerprint=request.fingerprint,
        )
    raise JudgeError(role, text, max_attempts, reason)


class KeywordOverlapJudge:
    """Offline judge: score = share of the perspective's keywords found in the reasoning.

    Reads the perspective name and the delimited reasoning block out of the
    prompt, exactly as a remote judge would receive them.
    """

    def __init__(self, perspectives: Iterable[ValuePerspective], provider_id: str = "keyword-stub"):
        self.perspectives = {p.name: p for p in perspectives}
        self.provider_id = provider_id
        self.calls = 0

    @staticmethod
    def score(reasoning: str, keywords: Sequence[str]) -> float:
        if not keywords:
            raise PreconditionError("perspective has no keywords")
        low = reasoning.lower()
        hits = sum(1 for kw in keywords if re.search(rf"\b{re.escape(kw)}\b", low))
        return hits / len(keywords)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        self.calls += 1
        m = re.search(r"^Assigned value perspective:\s*(.+?)\s*$", request.user, re.MULTILINE)
        start, end = request.user.find(REASONING_START), request.user.find(REASONING_END)
        if m is None or start < 0 or end < start or m.group(1) not in self.perspectives:
            text = "Unable to locate perspective or reasoning."
        else:
            reasoning = request.user[start + len(REASONING_START) : end]
            keywords = self.perspectives[m.group(1)].keywords
            text = f"SCORE: {self.score(reasoning, keywords)!r}" if keywords else "No keywords configured."
        return GenerationResponse(text=text, provider_id=self.provider_id, model=request.model)


@dataclass(frozen=True)
class JudgeSettings:
    model: str = "judge"
    temperature: float = 0.0
    max_attempts: int = 3
    anchors: tuple[CalibrationAnchor, ...] = DEFAULT_ANCHORS


def _judge_one(
    record: DeliberationRecord,
    role: str,
    perspective: ValuePerspective,
    reasoning: str,
    judge: Provider,
    settings: JudgeSettings,
    templates: PromptTemplateSet | None,
    seed: int | None,
    extra: Mapping[str, Any] | None = None,
) -> CoherenceAssessment:
    request = build_validation_request(perspective, reasoning, settings.anchors, templates)
    ctx = {
        "scenario": record.scenario_id,
        "variant": record.variant,
        "run": record.run_index,
        "run_id": record.run_id,
        **dict(extra or {}),
    }
    return score_coherence(
        request,
        judge,
        role=role,
        model=settings.model,
        temperature=settings.temperature,
        max_attempts=settings.max_attempts,
        seed=seed,
        context=ctx,
    )


def state_c_run_id(parent_run_id: str) -> str:
    return "C-" + parent_run_id.split("-", 1)[-1] if "-" in parent_run_id else f"C-{parent_run_id}"


def validate_run(
    record: DeliberationRecord,
    judge: Provider,
    perspectives: Mapping[str, ValuePerspective],
    *,
    settings: JudgeSettings = JudgeSettings(),
    templates: PromptTemplateSet | None = None,
    created: str = "",
) -> DeliberationRecord:
    """Score every evaluator and return the paired state-C record.

    Transcript and evaluations are carried over untouched. Evaluators the
    judge could not score are listed in ``validation_failures``.
    """
    if record.state is not State.B or record.status is not RunStatus.COMPLETE:
        raise PreconditionError(f"run {record.run_id} is not a completed state-B run")
    assessments = []
    failures = []
    for ev in record.evaluations:
        try:
            assessments.append(
                _judge_one(
                    record,
                    ev.role,
                    perspectives[ev.perspective],
                    ev.reasoning,
                    judge,
                    settings,
                    templates,
                    seed=derive_seed(record.run_seed, "validation", ev.role),
                )
            )
        except JudgeError as exc:
            log.warning("run %s: %s", record.run_id, exc)
            failures.append(ev.role)
    return replace(
        record,
        state=State.C,
        run_id=state_c_run_id(record.run_id),
        parent_run_id=record.run_id,
        assessments=tuple(assessments),
        validation_failures=tuple(failures),
        created=created or record.created,
    )


# --------------------------------------------------------------------------
# reliability


def sample_records(records: Sequence[DeliberationRecord], k: int, seed: int) -> list[DeliberationRecord]:
    """Seeded sample of ``k`` runs (all of them if fewer), ordered by run id."""
    ordered = sorted(records, key=lambda r: (r.scenario_id, r.variant, r.run_id))
    if k >= len(ordered):
        return ordered
    picked = random.Random(seed).sample(range(len(ordered)), k)
    return [ordered[i] for i in sorted(picked)]


@dataclass
class ReliabilityReport:
    n: int
    icc: float | None
    pearson: float | None
    spearman: float | None
    mean_abs_diff: float | None
    mean_shift: float | None
    stable_fraction: float | None
    per_role: dict[str, dict[str, float]]
    excluded: int = 0
    notes: list[str] = field(default_factory=list)
    scores: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("icc", "pearson", "spearman"):
            v = getattr(self, name)
            if v is not None and name != "icc" and not -1.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [-1, 1]")
        if self.stable_fraction is not None and not 0.0 <= self.stable_fraction <= 1.0:
            raise ValueError("stable_fraction outside [0, 1]")


def _try(fn, *args, notes: list[str], label: str):
    try:
        return fn(*args)
    except (DegenerateTestError, PreconditionError) as exc:
        notes.append(f"{label}: {exc}")
        return None


def test_retest(
    records: Sequence[DeliberationRecord],
    judge: Provider,
    perspectives: Mapping[str, ValuePerspective],
    *,
    repetitions: int = 2,
    settings: JudgeSettings = JudgeSettings(),
    templates: PromptTemplateSet | None = None,
    tolerance: float = 0.2,
) -> ReliabilityReport:
    """Score every assessment ``repetitions`` times with independent requests."""
    if not records:
        raise PreconditionError("test-retest needs at least one run")
    if repetitions < 2:
        raise PreconditionError("test-retest needs at least two repetitions")
    rows: list[list[float]] = []
    roles: list[str] = []
    excluded = 0
    for record in records:
        for ev in record.evaluations:
            row = []
            for rep in range(repetitions):
                try:
                    a = _judge_one(
                        record,
                        ev.role,
                        perspectives[ev.perspective],
                        ev.reasoning,
                        judge,
                        settings,
                        templates,
                        seed=derive_seed(record.run_seed, "retest", ev.role, rep),
                        extra={"repetition": rep},
                    )
                except JudgeError:
                    row = None
                    break
                row.append(a.score)
            if row is None:
                excluded += 1
                continue
            rows.append(row)
            roles.append(ev.role)
    return reliability_from_scores(rows, roles, tolerance=tolerance, excluded=excluded)


test_retest.__test__ = False  # keep pytest from collecting it


def reliability_from_scores(
    rows: Sequence[Sequence[float]], roles: Sequence[str], *, tolerance: float = 0.2, excluded: int = 0
) -> ReliabilityReport:
    notes: list[str] = []
    n = len(rows)
    if n == 0:
        return ReliabilityReport(0, None, None, None, None, None, None, {}, excluded, ["no usable score pairs"])
    first = [r[0] for r in rows]
    second = [r[1] for r in rows]
    diffs = [b - a for a, b in zip(first, second)]
    within = [abs(d) <= tolerance + 1e-12 for d in diffs]
    per_role: dict[str, dict[str, float]] = {}
    grouped: dict[str, list[int]] = defaultdict(list)
    for i, role in enumerate(roles):
        grouped[role].append(i)
    for role, idx in sorted(grouped.items()):
        per_role[role] = {
            "n": len(idx),
            "mean_score": sum((first[i] + second[i]) / 2 for i in idx) / len(idx),
            "mean_abs_diff": sum(abs(diffs[i]) for i in idx) / len(idx),
            "stable_fraction": sum(within[i] for i in idx) / len(idx),
        }
    return ReliabilityReport(
        n=n,
        icc=_try(stats.icc_3_1, [list(r) for r in rows], notes=notes, label="ICC(3,1)") if n >= 2 else None,
        pearson=_try(stats.pearson, first, second, notes=notes, label="pearson"),
        spearman=_try(stats.spearman, first, second, notes=notes, label="spearman"),
        mean_abs_diff=sum(abs(d) for d in diffs) / n,
        mean_shift=sum(diffs) / n,
        stable_fraction=sum(within) / n,
        per_role=per_role,
        excluded=excluded,
        notes=notes,
        scores=[{"role": r, "scores": list(row)} for r, row in zip(roles, rows)],
    )


@dataclass
class CrossJudgeReport:
    n: int
    pearson: float | None
    spearman: float | None
    mean_difference: float | None
    per_perspective: dict[str, dict[str, float]]
    ranking_a: list[str]
    ranking_b: list[str]
    excluded: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def same_ordering(self) -> bool:
        return self.ranking_a == self.ranking_b


def cross_model(
    records: Sequence[DeliberationRecord],
    judge_a: Provider,
    judge_b: Provider,
    perspectives: Mapping[str, ValuePerspective],
    *,
    settings_a: JudgeSettings = JudgeSettings(),
    settings_b: JudgeSettings | None = None,
    templates: PromptTemplateSet | None = None,
) -> CrossJudgeReport:
    """Score every evaluator with two judges using the identical prompt and anchors."""
    if not records:
        raise PreconditionError("cross-judge comparison needs at least one run")
    settings_b = replace(settings_b or settings_a, anchors=settings_a.anchors)
    pairs: list[tuple[str, float, float]] = []
    excluded = 0
    for record in records:
        for ev in record.evaluations:
            persp = perspectives[ev.perspective]
            seed = derive_seed(record.run_seed, "crossjudge", ev.role)
            try:
                a = _judge_one(record, ev.role, persp, ev.reasoning, judge_a, settings_a, templates, seed)
                b = _judge_one(record, ev.role, persp, ev.reasoning, judge_b, settings_b, templates, seed)
            except JudgeError:
                excluded += 1
                continue
            pairs.append((ev.perspective, a.score, b.score))
    return cross_report_from_scores(pairs, excluded=excluded)


def cross_report_from_scores(pairs: Sequence[tuple[str, float, float]], *, excluded: int = 0) -> CrossJudgeReport:
    notes: list[str] = []
    xs = [p[1] for p in pairs]
    ys = [p[2] for p in pairs]
    grouped: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for persp, x, y in pairs:
        grouped[persp].append((x, y))
    per = {
        k: {
            "n": len(v),
            "mean_a": sum(x for x, _ in v) / len(v),
            "mean_b": sum(y for _, y in v) / len(v),
        }
        for k, v in sorted(grouped.items())
    }
    return CrossJudgeReport(
        n=len(pairs),
        pearson=_try(stats.pearson, xs, ys, notes=notes, label="pearson"),
        spearman=_try(stats.spearman, xs, ys, notes=notes, label="spearman"),
        mean_difference=(sum(x - y for x, y in zip(xs, ys)) / len(xs)) if xs else None,
        per_perspective=per,
        ranking_a=sorted(per, key=lambda k: (-per[k]["mean_a"], k)),
        ranking_b=sorted(per, key=lambda k: (-per[k]["mean_b"], k)),
        excluded=excluded,
        notes=notes,
    )


def _fmt(v: float | None, digits: int = 3) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def reliability_markdown(report: ReliabilityReport) -> str:
    lines = [
        "# Coherence test-retest reliability",
        "",
        f"- assessments scored twice: {report.n} (excluded after judge failures: {report.excluded})",
        f"- ICC(3,1): {_fmt(report.icc)}",
        f"- Pearson r: {_fmt(report.pearson)}",
        f"- Spearman rho: {_fmt(report.spearman)}",
        f"- mean |retest - test|: {_fmt(report.mean_abs_diff)}",
        f"- mean shift (retest - test): {_fmt(report.mean_shift)}",
        f"- stable within +/-0.2: {_fmt(None if report.stable_fraction is None else 100 * report.stable_fraction, 1)}%",
        "",
        "| Role | n | Mean score | Mean abs diff | Stable |",
        "|---|---|---|---|---|",
    ]
    for role, d in report.per_role.items():
        lines.append(
            f"| {role} | {d['n']} | {d['mean_score']:.3f} | {d['mean_abs_diff']:.3f} | {100 * d['stable_fraction']:.0f}% |"
        )
    for note in report.notes:
        lines.append(f"\nNote: {note}")
    return "\n".join(lines) + "\n"


def cross_markdown(report: CrossJudgeReport) -> str:
    lines = [
        "# Cross-judge agreement",
        "",
        f"- paired assessments: {report.n} (excluded: {report.excluded})",
        f"- Pearson r: {_fmt(report.pearson)}",
        f"- Spearman rho: {_fmt(report.spearman)}",
        f"- mean difference (judge A - judge B): {_fmt(report.mean_difference)}",
        f"- same perspective ordering: {'yes' if report.same_ordering else 'no'}",
        "",
        "| Perspective | n | Mean A | Mean B |",
        "|---|---|---|---|",
    ]
    for persp, d in report.per_perspective.items():
        lines.append(f"| {persp} | {d['n']} | {d['mean_a']:.3f} | {d['mean_b']:.3f} |")
    for note in report.notes:
        lines.append(f"\nNote: {note}")
    return "\n".join(lines) + "\n"
