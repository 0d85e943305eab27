"""Three-state experiment runner, run store, model profiling and cross-state analysis."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import statistics
import tempfile
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from councilsim import stats
from councilsim.config import ExperimentConfig
from councilsim.core import (
    TIE,
    AgentRole,
    AnalysisConfig,
    DebateTranscript,
    DeliberationRecord,
    MetricsBundle,
    ModelAssignment,
    ModelSpec,
    RunStatus,
    Scenario,
    State,
    ValuePerspective,
    canonical_json,
    derive_seed,
    to_jsonable,
)
from councilsim.deliberation import PromptTemplateSet, Sampling, provider_for, run_debate, run_evaluation
from councilsim.delphi import JudgeSettings, state_c_run_id, validate_run
from councilsim.errors import (
    DegenerateTestError,
    EvaluationError,
    PreconditionError,
    ProviderError,
    RunAborted,
    StoreError,
    UndefinedMetricError,
)
from councilsim.metrics import TensionPairMap, record_metrics, tension_rate
from councilsim.providers import GenerationRequest, Provider

log = logging.getLogger(__name__)

Clock = Callable[[], str]


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def scenario_key(scenario_id: str, variant: str) -> str:
    return f"{scenario_id}:{variant}"


# --------------------------------------------------------------------------
# persistence


class RunStore:
    """Append-only JSON store laid out as ``<root>/<scenario>/<variant>/<state>/<run_id>.json``."""

    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)

    def path(self, scenario_id: str, variant: str, state: State | str, run_id: str) -> Path:
        return self.root / scenario_id / variant / State(state).value / f"{run_id}.json"

    def path_for(self, record: DeliberationRecord) -> Path:
        return self.path(record.scenario_id, record.variant, record.state, record.run_id)

    def has(self, scenario_id: str, variant: str, state: State | str, run_id: str) -> bool:
        return self.path(scenario_id, variant, state, run_id).exists()

    def write(self, record: DeliberationRecord) -> Path:
        """Persist ``record``; an existing file for the same run id is never replaced."""
        path = self.path_for(record)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(canonical_json(record, indent=2) + "\n")
            try:
                os.link(tmp, path)  # fails if the run id is already taken
            finally:
                os.unlink(tmp)
        except FileExistsError:
            raise StoreError(f"{path} already exists; the store is append-only") from None
        except OSError as exc:
            raise StoreError(f"cannot write {path}: {exc}") from exc
        return path

    def read(self, scenario_id: str, variant: str, state: State | str, run_id: str) -> DeliberationRecord:
        return read_record(self.path(scenario_id, variant, state, run_id))

    def archive(self, scenario_id: str, variant: str, state: State | str, run_id: str) -> Path:
        """Move a stored record aside (``<run_id>.failed-<k>``) so its run id can be reused."""
        path = self.path(scenario_id, variant, state, run_id)
        k = 1
        while (target := path.with_name(f"{run_id}.failed-{k}")).exists():
            k += 1
        try:
            os.rename(path, target)
        except OSError as exc:
            raise StoreError(f"cannot archive {path}: {exc}") from exc
        return target

    def records(
        self,
        scenario_id: str | None = None,
        variant: str | None = None,
        state: State | str | None = None,
    ) -> list[DeliberationRecord]:
        base = self.root
        for part in (scenario_id, variant, None if state is None else State(state).value):
            if part is None:
                break
            base = base / part
        out = load_records(base) if base.exists() else []
        return [
            r
            for r in out
            if (scenario_id is None or r.scenario_id == scenario_id)
            and (variant is None or r.variant == variant)
            and (state is None or r.state is State(state))
        ]


def read_record(path: str | os.PathLike[str]) -> DeliberationRecord:
    try:
        return DeliberationRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise StoreError(f"cannot read run record {path}: {exc}") from exc


def load_records(root: str | os.PathLike[str], state: State | str | None = None) -> list[DeliberationRecord]:
    """Every record below ``root`` (a store root or any sub-directory), in a stable order."""
    root = Path(root)
    if root.is_file():
        paths = [root]
    elif root.is_dir():
        paths = sorted(root.rglob("*.json"))
    else:
        raise StoreError(f"{root} does not exist")
    records = [read_record(p) for p in paths]
    if state is not None:
        records = [r for r in records if r.state is State(state)]
    return sorted(records, key=lambda r: (r.scenario_id, r.variant, r.state.value, r.run_index, r.run_id))


# --------------------------------------------------------------------------
# running states A and B


def run_id_for(state: State | str, index: int) -> str:
    return f"{State(state).value}-{index:04d}"


def run_seed_for(master_seed: int, scenario: Scenario, state: State | str, index: int) -> int:
    """Per-run seed: independent of how many runs are requested or in which order they execute."""
    return derive_seed(master_seed, scenario.id, scenario.variant, State(state).value, index)


PROVIDER_FAILURE = "provider error"
EVALUATION_FAILURE = "evaluation error"


def execute_run(
    config: ExperimentConfig,
    scenario: Scenario,
    state: State | str,
    index: int,
    provider: Any,
    *,
    templates: PromptTemplateSet | None = None,
    clock: Clock = utc_now,
) -> DeliberationRecord:
    """One deliberation: debate, then isolated evaluation.

    Failures do not raise. They come back as a record with ``status=failed``,
    a ``failure`` message prefixed by its kind, and whatever part of the
    transcript was produced.
    """
    state = State(state)
    if state is State.C:
        raise PreconditionError("state C is derived from state B, not run")
    assignment = config.models[state]
    run_id = run_id_for(state, index)
    seed = run_seed_for(config.master_seed, scenario, state, index)
    templates = templates or PromptTemplateSet.load(config.templates_dir)
    sampling = Sampling(max_tokens=config.max_tokens, parallelism=config.agent_parallelism)
    ctx = {"scenario": scenario.id, "variant": scenario.variant, "state": state.value, "run": index, "run_id": run_id}
    base = dict(
        scenario_id=scenario.id,
        variant=scenario.variant,
        state=state,
        run_id=run_id,
        run_index=index,
        master_seed=config.master_seed,
        run_seed=seed,
        assignment=assignment,
        config_hash=config.hash,
    )

    def failed(transcript: DebateTranscript, kind: str, exc: Exception) -> DeliberationRecord:
        log.warning("run %s failed: %s", run_id, exc)
        return DeliberationRecord(
            **base,
            transcript=transcript,
            evaluations=(),
            status=RunStatus.FAILED,
            failure=f"{kind}: {exc}",
            created=clock(),
        )

    try:
        transcript = run_debate(
            scenario,
            config.champions,
            assignment,
            provider,
            perspectives=config.perspectives,
            templates=templates,
            run_seed=seed,
            context=ctx,
            sampling=sampling,
        )
    except RunAborted as exc:
        return failed(exc.transcript or DebateTranscript(), PROVIDER_FAILURE, exc)
    try:
        evaluations = run_evaluation(
            scenario,
            transcript,
            config.evaluators,
            assignment,
            provider,
            perspectives=config.perspectives,
            templates=templates,
            run_seed=seed,
            context=ctx,
            sampling=sampling,
            max_attempts=config.max_attempts,
        )
    except ProviderError as exc:
        return failed(transcript, PROVIDER_FAILURE, exc)
    except EvaluationError as exc:
        return failed(transcript, EVALUATION_FAILURE, exc)
    return DeliberationRecord(**base, transcript=transcript, evaluations=tuple(evaluations), created=clock())


def provider_failed(record: DeliberationRecord) -> bool:
    return not record.complete and (record.failure or "").startswith(PROVIDER_FAILURE)


@dataclass
class RunBatch:
    """Outcome of :func:`run_state` for one scenario and state."""

    scenario: str
    state: State
    requested: int
    records: list[DeliberationRecord] = field(default_factory=list)
    failed: list[DeliberationRecord] = field(default_factory=list)
    new_ids: list[str] = field(default_factory=list)
    skipped_ids: list[str] = field(default_factory=list)

    @property
    def completed(self) -> int:
        return len(self.records)

    @property
    def attempted(self) -> int:
        return len(self.records) + len(self.failed)

    @property
    def ok(self) -> bool:
        return not self.failed and self.attempted == self.requested


def run_state(
    config: ExperimentConfig,
    scenario: Scenario,
    state: State | str,
    n_runs: int | None,
    provider: Any,
    store: RunStore,
    *,
    templates: PromptTemplateSet | None = None,
    clock: Clock = utc_now,
    on_run: Callable[[DeliberationRecord], None] | None = None,
    retry_failed: bool = False,
) -> RunBatch:
    """Run indices ``0..n_runs-1`` for one state, skipping run ids already in the store.

    Every run is persisted as soon as it finishes, failed or not, so an
    interrupted batch resumes where it stopped. A backend failure stops the
    batch (runs already in flight still finish) and is re-raised as
    :class:`ProviderError`. With ``retry_failed`` stored failures are archived
    and run again.
    """
    state = State(state)
    if state is State.C:
        raise PreconditionError("state C is derived from state B with derive_state_c, not run")
    n = config.runs.get(state, 0) if n_runs is None else n_runs
    if n < 0:
        raise PreconditionError("run count must be non-negative")
    templates = templates or PromptTemplateSet.load(config.templates_dir)
    batch = RunBatch(scenario_key(scenario.id, scenario.variant), state, n)
    todo = []
    for i in range(n):
        rid = run_id_for(state, i)
        if store.has(scenario.id, scenario.variant, state, rid):
            if retry_failed and not store.read(scenario.id, scenario.variant, state, rid).complete:
                store.archive(scenario.id, scenario.variant, state, rid)
                todo.append(i)
            else:
                batch.skipped_ids.append(rid)
        else:
            todo.append(i)

    def one(i: int) -> DeliberationRecord:
        record = execute_run(config, scenario, state, i, provider, templates=templates, clock=clock)
        store.write(record)
        if on_run is not None:
            on_run(record)
        return record

    stop: DeliberationRecord | None = None
    if config.run_parallelism <= 1:
        for i in todo:
            record = one(i)
            batch.new_ids.append(record.run_id)
            if provider_failed(record):
                stop = record
                break
    else:
        with ThreadPoolExecutor(max_workers=config.run_parallelism) as pool:
            futures = [pool.submit(one, i) for i in todo]
            for fut in futures:
                if stop is not None:
                    fut.cancel()
                    continue
                record = fut.result()
                batch.new_ids.append(record.run_id)
                if provider_failed(record):
                    stop = record
            for fut in futures:
                if not fut.cancelled() and fut.done() and fut.result().run_id not in batch.new_ids:
                    batch.new_ids.append(fut.result().run_id)
    for record in store.records(scenario.id, scenario.variant, state):
        if record.run_index >= n:
            continue
        (batch.records if record.complete else batch.failed).append(record)
    if stop is not None:
        raise ProviderError(f"{batch.scenario} {stop.run_id}: {stop.failure}")
    return batch


def derive_state_c(
    state_b_records: Sequence[DeliberationRecord],
    judge: Provider,
    perspectives: Mapping[str, ValuePerspective],
    *,
    settings: JudgeSettings = JudgeSettings(),
    templates: PromptTemplateSet | None = None,
    store: RunStore | None = None,
    clock: Clock = utc_now,
) -> list[DeliberationRecord]:
    """One coherence-validated state-C record per completed state-B record.

    With a store, already persisted C records are reused rather than rescored.
    Failed B runs are skipped.
    """
    out = []
    for b in sorted(state_b_records, key=lambda r: (r.scenario_id, r.variant, r.run_index)):
        if b.state is not State.B:
            raise PreconditionError(f"{b.run_id} is not a state-B record")
        if not b.complete:
            log.info("skipping failed run %s", b.run_id)
            continue
        probe = state_c_run_id(b.run_id)
        if store is not None and store.has(b.scenario_id, b.variant, State.C, probe):
            out.append(store.read(b.scenario_id, b.variant, State.C, probe))
            continue
        c = validate_run(b, judge, perspectives, settings=settings, templates=templates, created=clock())
        if c.validation_failures:
            log.warning("run %s: no coherence score for %s", c.run_id, ", ".join(c.validation_failures))
        if store is not None:
            store.write(c)
        out.append(c)
    return out


# --------------------------------------------------------------------------
# profiling and role assignment

_WORD_RE = re.compile(r"\w+(?:['-]\w+)*")


def keyword_alignment(text: str, keywords: Sequence[str]) -> float | None:
    """Keyword occurrences per response word; ``None`` for an empty response."""
    words = _WORD_RE.findall(text.lower())
    if not words:
        return None
    low = text.lower()
    hits = sum(len(re.findall(rf"\b{re.escape(kw.lower())}\b", low)) for kw in keywords)
    return hits / len(words)


@dataclass(frozen=True)
class AlignmentMatrix:
    scores: dict[str, dict[str, float]]
    excluded: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for model, row in self.scores.items():
            for persp, v in row.items():
                if not math.isfinite(v) or v < 0:
                    raise PreconditionError(f"alignment {model}/{persp}={v} must be finite and >= 0")

    @property
    def models(self) -> list[str]:
        return sorted(self.scores)

    def score(self, model: str, perspective: str) -> float | None:
        return self.scores.get(model, {}).get(perspective)

    def to_dict(self) -> dict[str, Any]:
        return {"scores": self.scores, "excluded": self.excluded}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AlignmentMatrix:
        return cls(
            scores={m: {p: float(v) for p, v in row.items()} for m, row in d["scores"].items()},
            excluded={m: int(v) for m, v in d.get("excluded", {}).items()},
        )


def profile_models(
    models: Sequence[ModelSpec],
    perspectives: Sequence[ValuePerspective],
    battery: Sequence[str],
    provider: Any,
    *,
    templates: PromptTemplateSet | None = None,
    seed: int = 0,
    max_tokens: int = 1024,
) -> AlignmentMatrix:
    """Prime each model with each perspective, ask every battery prompt, score keyword density.

    ``score(m, p)`` averages over prompts; empty responses are left out of the
    mean and counted in ``excluded``.
    """
    if not battery:
        raise PreconditionError("profiling battery is empty")
    for p in perspectives:
        if not p.keywords:
            raise PreconditionError(f"perspective {p.name!r} has no keywords")
    templates = templates or PromptTemplateSet.load()
    scores: dict[str, dict[str, float]] = {}
    excluded: dict[str, int] = {}
    for spec in models:
        row: dict[str, float] = {}
        dropped = 0
        backend = provider_for(provider, spec)
        for p in perspectives:
            system = templates.render("profiling_system", perspective=p.name, definition=p.definition)
            values = []
            for i, prompt in enumerate(battery):
                req = GenerationRequest(
                    model=spec.model,
                    system=system,
                    user=prompt,
                    temperature=spec.temperature,
                    seed=derive_seed(seed, spec.model, p.name, i) if spec.seed_policy == "derived" else None,
                    max_tokens=max_tokens,
                    context={"phase": "profiling", "model": spec.model, "perspective": p.name, "prompt": i},
                )
                value = keyword_alignment(backend.generate(req).text, p.keywords)
                if value is None:
                    dropped += 1
                else:
                    values.append(value)
            if values:
                row[p.name] = sum(values) / len(values)
        scores[spec.model] = row
        excluded[spec.model] = dropped
    return AlignmentMatrix(scores, excluded)


def assign_roles(
    matrix: AlignmentMatrix,
    roles: Iterable[AgentRole],
    specs: Mapping[str, ModelSpec] | None = None,
) -> ModelAssignment:
    """Give each role the model scoring highest on its primary perspective.

    Exact ties go to the lexicographically smallest model id. ``specs`` maps
    model ids to full specs (endpoint, temperature); otherwise a bare spec on
    the ``default`` endpoint is used.
    """
    entries = {}
    for role in roles:
        column = {m: row[role.primary] for m, row in matrix.scores.items() if role.primary in row}
        if not column:
            raise PreconditionError(f"no profiled model has a score for {role.primary!r}")
        best = max(column.values())
        tied = sorted(m for m, v in column.items() if v == best)
        if len(tied) > 1:
            log.info("role %s: models %s tie at %.6g; picking %s", role.name, tied, best, tied[0])
        model = tied[0]
        entries[role.name] = (specs or {}).get(model) or ModelSpec(model=model, endpoint="default")
    return ModelAssignment(entries)


def profiling_coherence_correlation(
    matrix: AlignmentMatrix,
    assignment: ModelAssignment,
    state_c_records: Sequence[DeliberationRecord],
    evaluators: Sequence[AgentRole],
) -> dict[str, dict[str, Any]]:
    """Per scenario: Pearson r between a perspective's profiling score and its mean coherence.

    A perspective's profiling score is the mean over its primary evaluators of
    the alignment of each evaluator's assigned model.
    """
    by_key: dict[str, list[DeliberationRecord]] = defaultdict(list)
    for r in state_c_records:
        by_key[scenario_key(r.scenario_id, r.variant)].append(r)
    out = {}
    for key, records in sorted(by_key.items()):
        points = []
        for persp in sorted({e.primary for e in evaluators}):
            holders = [e for e in evaluators if e.primary == persp]
            prof = [matrix.score(assignment.for_role(e.name).model, persp) for e in holders]
            coh = [
                a.score
                for r in records
                for e in holders
                if (a := r.assessment_for(e.name)) is not None
            ]
            if any(v is None for v in prof) or not coh:
                continue
            points.append((persp, sum(prof) / len(prof), sum(coh) / len(coh)))
        if len(points) < 3:
            raise PreconditionError(f"{key}: need at least 3 perspectives with both values, have {len(points)}")
        r_value, p_value = stats.pearson_test([p[1] for p in points], [p[2] for p in points])
        out[key] = {
            "r": r_value,
            "p": p_value,
            "n": len(points),
            "points": [{"perspective": p, "profiling": x, "coherence": y} for p, x, y in points],
        }
    return out


# --------------------------------------------------------------------------
# analysis

METRICS = ("fcc", "margin", "entropy")
METRIC_LABEL = {"fcc": "FCC", "margin": "Margin", "entropy": "Perspectives"}
# (comparison, test, metric, alternative for first-vs-second)
PLANNED_TESTS = (
    ("A vs B", "Mann-Whitney", "fcc", stats.GREATER),
    ("A vs B", "Mann-Whitney", "entropy", stats.LESS),
    ("B vs C", "Wilcoxon", "margin", stats.GREATER),
    ("B vs C", "Wilcoxon", "fcc", stats.GREATER),
    ("B vs C", "Wilcoxon", "entropy", stats.LESS),
)
_PAIR_DECIMALS = 12  # paired differences are rounded so float noise is not read as a change


@dataclass
class TestRow:
    comparison: str
    test: str
    metric: str
    alternative: str
    result: stats.StatResult | None = None
    gap: str | None = None
    seed: int | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "comparison": self.comparison,
            "test": self.test,
            "metric": METRIC_LABEL[self.metric],
            "alternative": self.alternative,
            "result": None if self.result is None else to_jsonable(self.result),
            "gap": self.gap,
        }
        if self.seed is not None:
            d["bootstrap_seed"] = self.seed
        return d


@dataclass
class StateSummary:
    state: State
    n: int
    attempted: int
    failed: int
    means: dict[str, float | None]
    sds: dict[str, float | None]
    winners: dict[str, int]
    voice_authenticity: float | None = None
    mean_coherence: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(self)


@dataclass
class ArchetypeRow:
    perspective: str
    roles: tuple[str, ...]
    most_common: str
    consistency: float
    mean_coherence: float | None
    observations: int


@dataclass
class ScenarioAnalysis:
    key: str
    scenario_id: str
    variant: str
    option_ids: tuple[str, ...]
    option_names: dict[str, str]
    summaries: dict[str, StateSummary]
    per_run: list[dict[str, Any]]
    tests: list[TestRow]
    ci: dict[str, dict[str, Any]]
    archetypes: list[ArchetypeRow]
    role_archetypes: list[ArchetypeRow]
    tension: dict[str, Any] | None
    pairs: dict[str, int]
    gaps: list[str]

    def test(self, comparison: str, metric: str) -> TestRow:
        for row in self.tests:
            if row.comparison == comparison and row.metric == metric:
                return row
        raise KeyError((comparison, metric))

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "scenario_id": self.scenario_id,
            "variant": self.variant,
            "options": [{"id": o, "name": self.option_names.get(o, o)} for o in self.option_ids],
            "summaries": {k: v.to_dict() for k, v in self.summaries.items()},
            "tests": [t.to_dict() for t in self.tests],
            "ci": self.ci,
            "archetypes": to_jsonable(self.archetypes),
            "role_archetypes": to_jsonable(self.role_archetypes),
            "tension": self.tension,
            "pairs": self.pairs,
            "gaps": self.gaps,
            "per_run": self.per_run,
        }


@dataclass
class AnalysisReport:
    config: AnalysisConfig
    scenarios: list[ScenarioAnalysis]

    def scenario(self, key: str) -> ScenarioAnalysis:
        for s in self.scenarios:
            if key in (s.key, s.scenario_id):
                return s
        raise KeyError(key)

    def to_dict(self) -> dict[str, Any]:
        return _finite({"analysis_config": to_jsonable(self.config), "scenarios": [s.to_dict() for s in self.scenarios]})


def _finite(obj: Any) -> Any:
    """Replace NaN/inf by ``None`` so reports stay valid JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def _mean(xs: Sequence[float]) -> float | None:
    return statistics.fmean(xs) if xs else None


def _sd(xs: Sequence[float]) -> float | None:
    return statistics.stdev(xs) if len(xs) >= 2 else None


def _option_ids(records: Sequence[DeliberationRecord], scenario: Scenario | None) -> tuple[str, ...]:
    if scenario is not None:
        return scenario.option_ids
    seen = sorted({o for r in records for ev in r.evaluations for o in ev.ranking.order})
    return tuple(seen)


def _summary(state: State, bundles: Sequence[MetricsBundle], attempted: int, failed: int, options, coh=None):
    winners = Counter(b.winner for b in bundles)
    return StateSummary(
        state=state,
        n=len(bundles),
        attempted=attempted,
        failed=failed,
        means={m: _mean([getattr(b, m) for b in bundles]) for m in METRICS},
        sds={m: _sd([getattr(b, m) for b in bundles]) for m in METRICS},
        winners={o: winners.get(o, 0) for o in (*options, TIE)},
        voice_authenticity=_mean([b.voice_authenticity for b in bundles if b.voice_authenticity is not None])
        if state is State.C
        else None,
        mean_coherence=_mean(coh) if coh else None,
    )


def _archetypes(
    records: Sequence[DeliberationRecord],
    c_by_parent: Mapping[str, DeliberationRecord],
    groups: Mapping[str, Sequence[str]],
) -> list[ArchetypeRow]:
    rows = []
    for label, role_names in groups.items():
        choices: Counter[str] = Counter()
        coh = []
        for r in records:
            c = c_by_parent.get(r.run_id)
            for ev in r.evaluations:
                if ev.role not in role_names:
                    continue
                choices[ev.ranking.first] += 1
                a = c.assessment_for(ev.role) if c is not None else None
                if a is not None:
                    coh.append(a.score)
        total = sum(choices.values())
        if not total:
            continue
        top = max(sorted(choices), key=lambda o: choices[o])  # ties: first option id
        rows.append(ArchetypeRow(label, tuple(role_names), top, choices[top] / total, _mean(coh), total))
    return rows


def _run_row(record: DeliberationRecord, bundle: MetricsBundle) -> dict[str, Any]:
    return {
        "run_id": record.run_id,
        "state": record.state.value,
        "parent_run_id": record.parent_run_id,
        "run_seed": record.run_seed,
        "metrics": to_jsonable(bundle),
    }


def analyze_scenario(
    key: str,
    a_records: Sequence[DeliberationRecord],
    b_records: Sequence[DeliberationRecord],
    c_records: Sequence[DeliberationRecord],
    config: AnalysisConfig,
    *,
    scenario: Scenario | None = None,
    evaluators: Sequence[AgentRole] | None = None,
    pair_map: TensionPairMap | None = None,
) -> ScenarioAnalysis:
    all_records = [*a_records, *b_records, *c_records]
    if not all_records:
        raise PreconditionError(f"no records for {key}")
    sid, variant = all_records[0].scenario_id, all_records[0].variant
    options = _option_ids(all_records, scenario)
    gaps: list[str] = []
    pts = config.borda_points
    thr = config.coherence_threshold

    def done(rs):
        return [r for r in rs if r.complete]

    a_ok, b_ok = done(a_records), done(b_records)
    b_by_id = {r.run_id: r for r in b_ok}
    c_ok, c_excluded = [], 0
    for c in done(c_records):
        if c.parent_run_id not in b_by_id:
            gaps.append(f"C record {c.run_id} has no completed B parent {c.parent_run_id}; excluded")
            c_excluded += 1
        elif not c.fully_validated:
            c_excluded += 1
        else:
            c_ok.append(c)
    if c_excluded:
        gaps.append(f"{c_excluded} state-C record(s) lack complete assessments and are excluded from paired tests")

    bundles = {
        State.A: [record_metrics(r, options, weighted=False, points=pts, threshold=thr) for r in a_ok],
        State.B: [record_metrics(r, options, weighted=False, points=pts, threshold=thr) for r in b_ok],
        State.C: [record_metrics(r, options, weighted=True, points=pts, threshold=thr) for r in c_ok],
    }
    b_bundle = dict(zip((r.run_id for r in b_ok), bundles[State.B]))
    per_run = [
        _run_row(r, bnd)
        for rs, st in ((a_ok, State.A), (b_ok, State.B), (c_ok, State.C))
        for r, bnd in zip(rs, bundles[st])
    ]
    coh = [a.score for c in c_ok for a in c.assessments or ()]
    raw = {State.A: a_records, State.B: b_records, State.C: c_records}
    summaries = {}
    for st in State:
        if raw[st]:
            failed = sum(1 for r in raw[st] if not r.complete)
            summaries[st.value] = _summary(st, bundles[st], len(raw[st]), failed, options, coh if st is State.C else None)

    # planned tests
    tests: list[TestRow] = []
    pairs = [(b_bundle[c.parent_run_id], cb) for c, cb in zip(c_ok, bundles[State.C])]
    for comparison, test, metric, alt in PLANNED_TESTS:
        row = TestRow(comparison, test, metric, alt)
        tests.append(row)
        try:
            if comparison == "A vs B":
                xa = [getattr(b, metric) for b in bundles[State.A]]
                xb = [getattr(b, metric) for b in bundles[State.B]]
                if len(xa) < 2 or len(xb) < 2:
                    row.gap = f"insufficient runs (A={len(xa)}, B={len(xb)}; need >= 2 each)"
                    continue
                res = stats.mann_whitney_u(xa, xb, alt, exact_max_n=config.exact_max_n, bands=config.effect_bands)
            else:
                if len(pairs) < 2:
                    row.gap = f"insufficient paired runs ({len(pairs)}; need >= 2)"
                    continue
                diffs = [round(getattr(b, metric) - getattr(c, metric), _PAIR_DECIMALS) for b, c in pairs]
                res = stats.wilcoxon_signed_rank(diffs, alt, exact_max_n=config.exact_max_n, bands=config.effect_bands)
            row.result = res.flagged(config.alpha, config.bonferroni_alpha)
        except DegenerateTestError as exc:
            row.gap = f"degenerate: {exc}"

    # bootstrap intervals for the primary comparison of each stage
    ci: dict[str, dict[str, Any]] = {}
    specs = (
        ("A-B fcc", "A vs B", "fcc", [b.fcc for b in bundles[State.A]], [b.fcc for b in bundles[State.B]], False),
        ("B-C margin", "B vs C", "margin", [b.margin for b, _ in pairs], [c.margin for _, c in pairs], True),
    )
    for label, comparison, metric, xa, xb, paired in specs:
        if not xa or not xb:
            gaps.append(f"no bootstrap interval for {label}: empty sample")
            continue
        seed = derive_seed(config.seed, key, label)
        lo, hi = stats.bootstrap_ci(xa, xb, paired=paired, resamples=config.bootstrap_resamples, seed=seed)
        ci[label] = {"lo": lo, "hi": hi, "seed": seed, "resamples": config.bootstrap_resamples, "paired": paired}
        row = next(t for t in tests if t.comparison == comparison and t.metric == metric)
        row.seed = seed
        if row.result is not None:
            row.result = row.result.with_ci((lo, hi))

    # archetype stability over state B, coherence from the paired C runs
    c_by_parent = {c.parent_run_id: c for c in c_ok if c.parent_run_id}
    archetypes: list[ArchetypeRow] = []
    role_rows: list[ArchetypeRow] = []
    if b_ok:
        role_persp = {ev.role: ev.perspective for r in b_ok for ev in r.evaluations}
        by_persp: dict[str, list[str]] = defaultdict(list)
        for role, persp in sorted(role_persp.items()):
            by_persp[persp].append(role)
        archetypes = _archetypes(b_ok, c_by_parent, dict(sorted(by_persp.items())))
        role_rows = _archetypes(b_ok, c_by_parent, {role: [role] for role in sorted(role_persp)})
        for row in role_rows:
            row.perspective = role_persp[row.roles[0]]

    tension = None
    if evaluators is None or pair_map is None:
        gaps.append("tension distribution skipped: no evaluator roles or tension pairs supplied")
    elif not c_ok:
        gaps.append("tension distribution skipped: no validated state-C runs")
    else:
        tension = tension_rate(c_ok, pair_map, evaluators, thr).to_dict()

    return ScenarioAnalysis(
        key=key,
        scenario_id=sid,
        variant=variant,
        option_ids=options,
        option_names={o.id: o.name for o in scenario.options} if scenario else {},
        summaries=summaries,
        per_run=per_run,
        tests=tests,
        ci=ci,
        archetypes=archetypes,
        role_archetypes=role_rows,
        tension=tension,
        pairs={"paired": len(pairs), "excluded": c_excluded},
        gaps=gaps,
    )


def analyze(
    state_a_records: Sequence[DeliberationRecord],
    state_b_records: Sequence[DeliberationRecord],
    state_c_records: Sequence[DeliberationRecord],
    config: AnalysisConfig = AnalysisConfig(),
    *,
    scenarios: Iterable[Scenario] = (),
    evaluators: Sequence[AgentRole] | None = None,
    pair_map: TensionPairMap | None = None,
) -> AnalysisReport:
    """Cross-state comparison per scenario, in scenario order of first appearance."""
    for expected, records in ((State.A, state_a_records), (State.B, state_b_records), (State.C, state_c_records)):
        wrong = [r.run_id for r in records if r.state is not expected]
        if wrong:
            raise PreconditionError(f"records {wrong[:3]} are not state {expected.value}")
    known = {scenario_key(s.id, s.variant): s for s in scenarios}
    grouped: dict[str, list[list[DeliberationRecord]]] = {}
    for idx, records in enumerate((state_a_records, state_b_records, state_c_records)):
        for r in records:
            grouped.setdefault(scenario_key(r.scenario_id, r.variant), [[], [], []])[idx].append(r)
    order = [k for k in known if k in grouped] + sorted(k for k in grouped if k not in known)
    sections = []
    for key in order:
        a, b, c = (sorted(rs, key=lambda r: r.run_index) for rs in grouped[key])
        try:
            sections.append(
                analyze_scenario(
                    key, a, b, c, config, scenario=known.get(key), evaluators=evaluators, pair_map=pair_map
                )
            )
        except UndefinedMetricError as exc:
            raise PreconditionError(f"{key}: {exc}") from exc
    return AnalysisReport(config, sections)
