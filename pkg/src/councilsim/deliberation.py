"""Structured debate between champions, then isolated evaluation."""

from __future__ import annotations

import logging
import re
import string
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, TypeVar

from councilsim.core import (
    AgentRole,
    DebateTranscript,
    EvaluationRecord,
    ModelAssignment,
    ModelSpec,
    PolicyOption,
    Ranking,
    RoleKind,
    Scenario,
    TranscriptEntry,
    ValuePerspective,
    content_hash,
    derive_seed,
)
from councilsim.errors import (
    ConfigError,
    EvaluationError,
    PreconditionError,
    ProviderError,
    RankingParseError,
    RunAborted,
)
from councilsim.providers import GenerationRequest, Provider

log = logging.getLogger(__name__)

ORDINALS = ("FIRST", "SECOND", "THIRD", "FOURTH", "FIFTH", "SIXTH", "SEVENTH", "EIGHTH", "NINTH", "TENTH")

TEMPLATE_VERSION = "1"

# placeholders each template must contain
REQUIRED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "champion_system": frozenset({"role", "perspective", "definition", "option_id"}),
    "champion_position": frozenset({"question", "options", "option_id"}),
    "champion_critique": frozenset({"question", "positions", "target_id", "perspective", "definition"}),
    "champion_defense": frozenset({"question", "positions", "critiques", "option_id"}),
    "evaluator_system": frozenset({"perspective", "definition"}),
    "evaluator_user": frozenset({"question", "options", "transcript", "format_lines"}),
    "format_reminder": frozenset({"format_lines"}),
    "judge_system": frozenset(),
    "judge_user": frozenset({"perspective", "definition", "reasoning", "anchors"}),
    "profiling_system": frozenset({"perspective", "definition"}),
}


def placeholders(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: dict[str, str]
    version: str = TEMPLATE_VERSION

    def __post_init__(self) -> None:
        for name, required in REQUIRED_PLACEHOLDERS.items():
            if name not in self.templates:
                raise ConfigError(f"template {name!r} is missing")
            absent = required - placeholders(self.templates[name])
            if absent:
                raise ConfigError(f"template {name!r} lacks placeholders {sorted(absent)}")

    @property
    def fingerprint(self) -> str:
        return content_hash({"version": self.version, "templates": self.templates})

    def render(self, name: str, **values: Any) -> str:
        try:
            return self.templates[name].format(**values)
        except KeyError as exc:
            raise ConfigError(f"template {name!r} uses unknown placeholder {exc}") from None

    @classmethod
    def load(cls, directory: str | Path | None = None) -> PromptTemplateSet:
        """Load ``*.txt`` templates; the packaged defaults fill any gaps."""
        texts: dict[str, str] = {}
        packaged = resources.files("councilsim") / "data" / "templates"
        for name in REQUIRED_PLACEHOLDERS:
            texts[name] = (packaged / f"{name}.txt").read_text(encoding="utf-8")
        if directory is not None:
            for path in sorted(Path(directory).glob("*.txt")):
                texts[path.stem] = path.read_text(encoding="utf-8")
        return cls(texts)


# --------------------------------------------------------------------------
# ranking format


def format_lines(k: int) -> str:
    if k > len(ORDINALS):
        raise PreconditionError(f"ranking format supports at most {len(ORDINALS)} options")
    return "\n".join(f"{ORDINALS[i]}: <option>" for i in range(k))


def render_ranking(ranking: Ranking, reasoning: str, options: Sequence[PolicyOption] | None = None) -> str:
    """Inverse of :func:`parse_ranking`; names options by full name when ``options`` given."""
    names = {o.id: o.name for o in options} if options else {}
    lines = [f"{ORDINALS[i]}: {names.get(opt, opt)}" for i, opt in enumerate(ranking.order)]
    lines.append(f"REASONING: {reasoning}")
    return "\n".join(lines)


_REASONING_RE = re.compile(r"^[\s*#>_-]*REASONING[\s*_]*:[\s*_]*(.*)", re.IGNORECASE | re.MULTILINE | re.DOTALL)


def _line_re(label: str) -> re.Pattern[str]:
    return re.compile(rf"^[\s*#>_-]*{label}[\s*_]*:[\s*_]*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


def _resolve_option(label: str, options: Sequence[PolicyOption]) -> str:
    token = label.strip().strip("*_`\"'").rstrip(".").strip()
    token = re.sub(r"^option\s+", "", token, flags=re.IGNORECASE).strip()
    folded = token.casefold()
    for o in options:
        if folded == o.id.casefold() or folded == o.name.casefold():
            return o.id
    raise RankingParseError(f"unknown option {label.strip()!r}")


def parse_ranking(text: str, options: Sequence[PolicyOption]) -> tuple[Ranking, str]:
    """Extract ``FIRST:``/``SECOND:``/.../``REASONING:`` lines from model output.

    Options match case-insensitively by id or full name. Raises
    :class:`RankingParseError` on a missing line, a duplicate, an unknown
    option, or empty reasoning.
    """
    if not options:
        raise PreconditionError("options must be non-empty")
    k = len(options)
    chosen: list[str] = []
    for i in range(k):
        m = _line_re(ORDINALS[i]).search(text)
        if m is None:
            raise RankingParseError(f"missing {ORDINALS[i]} line")
        chosen.append(_resolve_option(m.group(1), options))
    if len(set(chosen)) != k:
        raise RankingParseError(f"duplicate option in ranking {chosen}")
    m = _REASONING_RE.search(text)
    reasoning = m.group(1).strip() if m else ""
    if not reasoning:
        raise RankingParseError("missing REASONING")
    return Ranking(tuple(chosen)), reasoning


# --------------------------------------------------------------------------
# orchestration helpers

T = TypeVar("T")
R = TypeVar("R")


def _pmap(fn: Callable[[T], R], items: Sequence[T], parallelism: int) -> list[R]:
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def provider_for(provider: Any, spec: ModelSpec) -> Provider:
    return provider.for_endpoint(spec.endpoint) if hasattr(provider, "for_endpoint") else provider


def _request_seed(spec: ModelSpec, run_seed: int, *parts: Any) -> int | None:
    return derive_seed(run_seed, *parts) if spec.seed_policy == "derived" else None


def _options_block(scenario: Scenario) -> str:
    return "\n".join(f"{o.id}. {o.name}: {o.description}" for o in scenario.options)


def _entries_block(entries: Iterable[TranscriptEntry], scenario: Scenario, heading: Callable[[TranscriptEntry], str]) -> str:
    return "\n\n".join(f"### {heading(e)}\n{e.text}" for e in entries)


def _position_heading(scenario: Scenario) -> Callable[[TranscriptEntry], str]:
    return lambda e: f"{e.role}, champion of {e.option} ({scenario.option(e.option).name})"


def _critique_heading(scenario: Scenario) -> Callable[[TranscriptEntry], str]:
    return lambda e: f"{e.role} critiques {e.target} ({scenario.option(e.target or '').name})"


def render_transcript(transcript: DebateTranscript, scenario: Scenario) -> str:
    pos, crit = _position_heading(scenario), _critique_heading(scenario)
    return "\n\n".join(
        [
            "## Round 1: position papers",
            _entries_block(transcript.positions, scenario, pos),
            "## Round 2: critiques",
            _entries_block(transcript.critiques, scenario, crit),
            "## Round 3: defenses",
            _entries_block(transcript.defenses, scenario, pos),
        ]
    )


@dataclass(frozen=True)
class Sampling:
    max_tokens: int = 1024
    parallelism: int = 1


# --------------------------------------------------------------------------
# phase 1


def run_debate(
    scenario: Scenario,
    champions: Sequence[AgentRole],
    assignment: ModelAssignment,
    provider: Any,
    *,
    perspectives: Mapping[str, ValuePerspective],
    templates: PromptTemplateSet | None = None,
    run_seed: int = 0,
    context: Mapping[str, Any] | None = None,
    sampling: Sampling = Sampling(),
) -> DebateTranscript:
    """Three rounds: positions, critiques of every other option, defenses.

    Requests for round ``r`` are built only from rounds before ``r``; champions
    inside a round may run concurrently. On a provider failure the partial
    transcript travels on the raised :class:`RunAborted`.
    """
    templates = templates or PromptTemplateSet.load()
    by_option: dict[str, AgentRole] = {}
    for c in champions:
        if c.kind is not RoleKind.CHAMPION or c.option is None:
            raise PreconditionError(f"{c.name!r} is not a champion")
        if c.option in by_option:
            raise PreconditionError(f"option {c.option!r} has two champions")
        by_option[c.option] = c
    missing = [o for o in scenario.option_ids if o not in by_option]
    extra = [o for o in by_option if o not in scenario.option_ids]
    if missing or extra:
        raise PreconditionError(f"need exactly one champion per option; missing {missing}, unknown {extra}")
    assignment.check_covers(champions)
    ordered = [by_option[o] for o in scenario.option_ids]
    base_ctx = dict(context or {})
    options_text = _options_block(scenario)
    entries: list[TranscriptEntry] = []

    def ask(champion: AgentRole, phase: str, user: str, target: str | None = None) -> TranscriptEntry:
        spec = assignment.for_role(champion.name)
        persp = perspectives[champion.primary]
        option = scenario.option(champion.option or "")
        system = templates.render(
            "champion_system",
            role=champion.name,
            perspective=persp.name,
            definition=persp.definition,
            option_id=option.id,
            option_name=option.name,
        )
        ctx = {**base_ctx, "role": champion.name, "kind": "champion", "phase": phase, "option": option.id, "attempt": 1}
        if target is not None:
            ctx["target"] = target
        req = GenerationRequest(
            model=spec.model,
            system=system,
            user=user,
            temperature=spec.temperature,
            seed=_request_seed(spec, run_seed, champion.name, phase, target or ""),
            max_tokens=sampling.max_tokens,
            context=ctx,
        )
        resp = provider_for(provider, spec).generate(req)
        rnd = {"position": 1, "critique": 2, "defense": 3}[phase]
        return TranscriptEntry(champion.name, rnd, option.id, resp.text, target, spec.model)

    def run_round(jobs: list[tuple[AgentRole, str, str, str | None]]) -> None:
        try:
            entries.extend(_pmap(lambda j: ask(*j), jobs, sampling.parallelism))
        except ProviderError as exc:
            raise RunAborted(f"debate aborted: {exc}", DebateTranscript(tuple(entries)), exc) from exc

    # round 1
    jobs = []
    for c in ordered:
        opt = scenario.option(c.option or "")
        user = templates.render(
            "champion_position",
            question=scenario.question,
            options=options_text,
            option_id=opt.id,
            option_name=opt.name,
        )
        jobs.append((c, "position", user, None))
    run_round(jobs)
    positions_text = _entries_block(list(entries), scenario, _position_heading(scenario))

    # round 2
    jobs = []
    for c in ordered:
        persp = perspectives[c.primary]
        for target in scenario.options:
            if target.id == c.option:
                continue
            user = templates.render(
                "champion_critique",
                question=scenario.question,
                options=options_text,
                positions=positions_text,
                target_id=target.id,
                target_name=target.name,
                perspective=persp.name,
                definition=persp.definition,
            )
            jobs.append((c, "critique", user, target.id))
    run_round(jobs)
    critiques = [e for e in entries if e.round == 2]

    # round 3
    jobs = []
    for c in ordered:
        opt = scenario.option(c.option or "")
        against = [e for e in critiques if e.target == c.option]
        user = templates.render(
            "champion_defense",
            question=scenario.question,
            options=options_text,
            positions=positions_text,
            critiques=_entries_block(against, scenario, _critique_heading(scenario)),
            option_id=opt.id,
            option_name=opt.name,
        )
        jobs.append((c, "defense", user, None))
    run_round(jobs)
    return DebateTranscript(tuple(entries))


# --------------------------------------------------------------------------
# phase 2


def run_evaluation(
    scenario: Scenario,
    transcript: DebateTranscript,
    evaluators: Sequence[AgentRole],
    assignment: ModelAssignment,
    provider: Any,
    *,
    perspectives: Mapping[str, ValuePerspective],
    templates: PromptTemplateSet | None = None,
    run_seed: int = 0,
    context: Mapping[str, Any] | None = None,
    sampling: Sampling = Sampling(),
    max_attempts: int = 3,
) -> list[EvaluationRecord]:
    """Each evaluator reads the full debate and only its own perspective.

    Unparseable answers are retried with a format reminder up to
    ``max_attempts`` times, then raise :class:`EvaluationError`.
    """
    if not transcript.is_complete(scenario.k):
        raise PreconditionError("transcript is incomplete")
    templates = templates or PromptTemplateSet.load()
    assignment.check_covers(evaluators)
    base_ctx = dict(context or {})
    user_base = templates.render(
        "evaluator_user",
        question=scenario.question,
        options=_options_block(scenario),
        transcript=render_transcript(transcript, scenario),
        format_lines=format_lines(scenario.k),
    )

    def evaluate(role: AgentRole) -> EvaluationRecord:
        spec = assignment.for_role(role.name)
        persp = perspectives[role.primary]
        system = templates.render(
            "evaluator_system", role=role.name, perspective=persp.name, definition=persp.definition
        )
        backend = provider_for(provider, spec)
        user = user_base
        text = ""
        reason = ""
        for attempt in range(1, max_attempts + 1):
            req = GenerationRequest(
                model=spec.model,
                system=system,
                user=user,
                temperature=spec.temperature,
                seed=_request_seed(spec, run_seed, role.name, "evaluation", attempt),
                max_tokens=sampling.max_tokens,
                context={**base_ctx, "role": role.name, "kind": "evaluator", "phase": "evaluation", "attempt": attempt},
            )
            text = backend.generate(req).text
            try:
                ranking, reasoning = parse_ranking(text, scenario.options)
            except RankingParseError as exc:
                reason = str(exc)
                log.info("evaluator %s attempt %d unparseable: %s", role.name, attempt, reason)
                user = user_base + "\n\n" + templates.render(
                    "format_reminder", reason=reason, format_lines=format_lines(scenario.k)
                )
                continue
            return EvaluationRecord(
                role=role.name,
                perspective=persp.name,
                ranking=ranking,
                reasoning=reasoning,
                raw_response=text,
                attempts=attempt,
                model=spec.model,
            )
        raise EvaluationError(role.name, text, max_attempts, reason)

    return _pmap(evaluate, list(evaluators), sampling.parallelism)
