"""Domain types shared by every stage of a deliberation.

All types are frozen dataclasses. Mapping-valued fields are plain dicts by
convention and must be treated as read-only once an object is built.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from councilsim.errors import ConfigError, PreconditionError

log = logging.getLogger(__name__)

TIE = "tie"


class RoleKind(str, Enum):
    CHAMPION = "champion"
    EVALUATOR = "evaluator"


class State(str, Enum):
    A = "A"
    B = "B"
    C = "C"


class RunStatus(str, Enum):
    COMPLETE = "complete"
    FAILED = "failed"


class WeightingMode(str, Enum):
    UNWEIGHTED = "unweighted"
    WEIGHTED = "coherence-weighted"


# --------------------------------------------------------------------------
# canonical serialization


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, enums and containers into plain JSON values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite float {obj!r} is not serializable")
    return obj


def canonical_json(obj: Any, *, indent: int | None = None) -> str:
    """Stable JSON text: sorted keys, UTF-8 characters kept verbatim."""
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(
        to_jsonable(obj), sort_keys=True, ensure_ascii=False, separators=separators, indent=indent
    )


def content_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def derive_seed(*parts: Any) -> int:
    """Split a seed deterministically: first 31 bits of sha256 over ``a|b|...``.

    Portable across processes and platforms; ``derive_seed(master, i)`` gives
    run ``i`` its own seed so it can be re-executed in isolation.
    """
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


# --------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class PolicyOption:
    id: str
    name: str
    description: str

    def __post_init__(self) -> None:
        if not self.id.strip():
            raise PreconditionError("option id must be non-empty")
        if not self.name.strip() or not self.description.strip():
            raise PreconditionError(f"option {self.id!r} needs a name and a description")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PolicyOption:
        return cls(id=d["id"], name=d["name"], description=d["description"])


@dataclass(frozen=True)
class Scenario:
    id: str
    question: str
    options: tuple[PolicyOption, ...]
    variant: str = "baseline"

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) < 2:
            raise PreconditionError("a scenario needs at least two options")
        ids = [o.id for o in self.options]
        if len(set(ids)) != len(ids):
            raise PreconditionError(f"duplicate option ids in scenario {self.id!r}: {ids}")
        folded = [o.id.casefold() for o in self.options] + [o.name.casefold() for o in self.options]
        if len(set(folded)) != len(folded):
            raise PreconditionError(f"option ids/names in {self.id!r} collide case-insensitively")

    @property
    def k(self) -> int:
        return len(self.options)

    @property
    def option_ids(self) -> tuple[str, ...]:
        return tuple(o.id for o in self.options)

    def option(self, option_id: str) -> PolicyOption:
        for o in self.options:
            if o.id == option_id:
                return o
        raise KeyError(option_id)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Scenario:
        return cls(
            id=d["id"],
            question=d["question"],
            options=tuple(PolicyOption.from_dict(o) for o in d["options"]),
            variant=d.get("variant", "baseline"),
        )


# --------------------------------------------------------------------------
# perspectives and roles


@dataclass(frozen=True)
class ValuePerspective:
    name: str
    definition: str
    keywords: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "keywords", tuple(k.lower() for k in self.keywords))
        if not self.name.strip():
            raise PreconditionError("perspective name must be non-empty")
        if not self.definition.strip():
            raise PreconditionError(f"perspective {self.name!r} has an empty definition")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ValuePerspective:
        return cls(name=d["name"], definition=d["definition"], keywords=tuple(d.get("keywords", ())))


def _ordered_by_weight(traits: Mapping[str, float], tie_break: Sequence[str]) -> list[str]:
    positive = {k: float(v) for k, v in traits.items() if float(v) > 0}
    if not positive:
        raise PreconditionError("a role needs at least one positive trait weight")
    for name, w in positive.items():
        if not 0.0 <= w <= 1.0:
            raise PreconditionError(f"trait weight {name}={w} outside [0, 1]")
    order = {name: i for i, name in enumerate(tie_break)}

    by_weight: dict[float, list[str]] = {}
    for name, w in positive.items():
        by_weight.setdefault(w, []).append(name)
    result: list[str] = []
    for w in sorted(by_weight, reverse=True):
        group = by_weight[w]
        if len(group) > 1:
            missing = [g for g in group if g not in order]
            if missing:
                raise ConfigError(f"tie_break does not rank tied perspectives {sorted(missing)}")
            group = sorted(group, key=order.__getitem__)
        result.extend(group)
    return result


def resolve_primary_perspective(traits: Mapping[str, float], tie_break: Sequence[str]) -> str:
    """Return the highest-weighted perspective, ties settled by ``tie_break`` order."""
    ranked = _ordered_by_weight(traits, tie_break)
    top = float(traits[ranked[0]])
    tied = [n for n in ranked if float(traits[n]) == top]
    if len(tied) > 1:
        log.info("trait tie %s at %.3f resolved to %s by tie_break", tied, top, ranked[0])
    return ranked[0]


def resolve_perspectives(traits: Mapping[str, float], tie_break: Sequence[str]) -> tuple[str, str | None]:
    ranked = _ordered_by_weight(traits, tie_break)
    primary = resolve_primary_perspective(traits, tie_break)
    return primary, (ranked[1] if len(ranked) > 1 else None)


@dataclass(frozen=True)
class AgentRole:
    name: str
    traits: dict[str, float]
    primary: str
    secondary: str | None
    kind: RoleKind
    option: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RoleKind(self.kind))
        if not any(float(w) > 0 for w in self.traits.values()):
            raise PreconditionError(f"role {self.name!r} needs at least one positive trait weight")
        if self.primary == self.secondary:
            raise PreconditionError(f"role {self.name!r}: primary equals secondary perspective")
        if (self.kind is RoleKind.CHAMPION) != (self.option is not None):
            raise PreconditionError(f"role {self.name!r}: champion option required iff kind is champion")

    @classmethod
    def build(
        cls,
        name: str,
        traits: Mapping[str, float],
        tie_break: Sequence[str],
        kind: RoleKind | str = RoleKind.EVALUATOR,
        option: str | None = None,
    ) -> AgentRole:
        primary, secondary = resolve_perspectives(traits, tie_break)
        return cls(
            name=name,
            traits=dict(traits),
            primary=primary,
            secondary=secondary,
            kind=RoleKind(kind),
            option=option,
        )


@dataclass(frozen=True)
class ModelSpec:
    model: str
    endpoint: str
    temperature: float = 0.7
    seed_policy: str = "derived"

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise PreconditionError("temperature must be >= 0")
        if self.seed_policy not in ("derived", "none"):
            raise PreconditionError(f"unknown seed policy {self.seed_policy!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelSpec:
        return cls(
            model=d["model"],
            endpoint=d.get("endpoint", "default"),
            temperature=float(d.get("temperature", 0.7)),
            seed_policy=d.get("seed_policy", "derived"),
        )


@dataclass(frozen=True)
class ModelAssignment:
    """Role name to model binding. Champions and evaluators sharing a name share a model."""

    entries: dict[str, ModelSpec]

    def for_role(self, role: str) -> ModelSpec:
        try:
            return self.entries[role]
        except KeyError:
            raise ConfigError(f"no model assigned to role {role!r}") from None

    def check_covers(self, roles: Iterable[AgentRole]) -> None:
        missing = sorted({r.name for r in roles} - set(self.entries))
        if missing:
            raise ConfigError(f"model assignment lacks roles {missing}")

    @classmethod
    def uniform(cls, roles: Iterable[AgentRole], spec: ModelSpec) -> ModelAssignment:
        return cls({r.name: spec for r in roles})

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelAssignment:
        return cls({k: ModelSpec.from_dict(v) for k, v in d["entries"].items()})


# --------------------------------------------------------------------------
# deliberation artefacts


@dataclass(frozen=True)
class TranscriptEntry:
    role: str
    round: int
    option: str
    text: str
    target: str | None = None
    model: str = ""

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TranscriptEntry:
        return cls(
            role=d["role"],
            round=int(d["round"]),
            option=d["option"],
            text=d["text"],
            target=d.get("target"),
            model=d.get("model", ""),
        )


@dataclass(frozen=True)
class DebateTranscript:
    entries: tuple[TranscriptEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    def round(self, index: int) -> tuple[TranscriptEntry, ...]:
        return tuple(e for e in self.entries if e.round == index)

    @property
    def positions(self) -> tuple[TranscriptEntry, ...]:
        return self.round(1)

    @property
    def critiques(self) -> tuple[TranscriptEntry, ...]:
        return self.round(2)

    @property
    def defenses(self) -> tuple[TranscriptEntry, ...]:
        return self.round(3)

    def is_complete(self, k: int) -> bool:
        return (
            len(self.positions) == k
            and len(self.critiques) == k * (k - 1)
            and len(self.defenses) == k
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DebateTranscript:
        return cls(tuple(TranscriptEntry.from_dict(e) for e in d["entries"]))


@dataclass(frozen=True)
class Ranking:
    order: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "order", tuple(self.order))
        if len(set(self.order)) != len(self.order):
            raise PreconditionError(f"ranking repeats an option: {self.order}")

    @property
    def first(self) -> str:
        return self.order[0]

    def position(self, option_id: str) -> int:
        return self.order.index(option_id)

    def check_against(self, option_ids: Iterable[str]) -> None:
        if sorted(self.order) != sorted(option_ids):
            raise PreconditionError(f"ranking {self.order} is not a permutation of {sorted(option_ids)}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Ranking:
        return cls(tuple(d["order"]))


@dataclass(frozen=True)
class EvaluationRecord:
    role: str
    perspective: str
    ranking: Ranking
    reasoning: str
    raw_response: str
    attempts: int = 1
    model: str = ""

    def __post_init__(self) -> None:
        if not self.reasoning.strip():
            raise PreconditionError(f"evaluation by {self.role!r} has empty reasoning")
        if self.attempts < 1:
            raise PreconditionError("parse attempt count must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvaluationRecord:
        return cls(
            role=d["role"],
            perspective=d["perspective"],
            ranking=Ranking.from_dict(d["ranking"]),
            reasoning=d["reasoning"],
            raw_response=d["raw_response"],
            attempts=int(d["attempts"]),
            model=d.get("model", ""),
        )


@dataclass(frozen=True)
class CoherenceAssessment:
    role: str
    score: float
    judge: str
    raw_response: str
    fingerprint: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise PreconditionError(f"coherence score {self.score} outside [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CoherenceAssessment:
        return cls(
            role=d["role"],
            score=float(d["score"]),
            judge=d["judge"],
            raw_response=d["raw_response"],
            fingerprint=d["fingerprint"],
        )


@dataclass(frozen=True)
class DeliberationRecord:
    scenario_id: str
    variant: str
    state: State
    run_id: str
    run_index: int
    master_seed: int
    run_seed: int
    assignment: ModelAssignment
    transcript: DebateTranscript
    evaluations: tuple[EvaluationRecord, ...]
    config_hash: str
    status: RunStatus = RunStatus.COMPLETE
    failure: str | None = None
    assessments: tuple[CoherenceAssessment, ...] | None = None
    validation_failures: tuple[str, ...] = ()
    parent_run_id: str | None = None
    created: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "state", State(self.state))
        object.__setattr__(self, "status", RunStatus(self.status))
        object.__setattr__(self, "evaluations", tuple(self.evaluations))
        object.__setattr__(self, "validation_failures", tuple(self.validation_failures))
        if self.assessments is not None:
            object.__setattr__(self, "assessments", tuple(self.assessments))
        if self.state is State.C and not self.parent_run_id:
            raise PreconditionError("state C records must reference their state B parent")

    @property
    def complete(self) -> bool:
        return self.status is RunStatus.COMPLETE

    @property
    def fully_validated(self) -> bool:
        return self.assessments is not None and not self.validation_failures

    def assessment_for(self, role: str) -> CoherenceAssessment | None:
        for a in self.assessments or ():
            if a.role == role:
                return a
        return None

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(self)

    def comparable(self) -> dict[str, Any]:
        """Serialized form without wall-clock fields, for replay comparisons."""
        d = self.to_dict()
        d.pop("created", None)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DeliberationRecord:
        assessments = d.get("assessments")
        return cls(
            scenario_id=d["scenario_id"],
            variant=d["variant"],
            state=State(d["state"]),
            run_id=d["run_id"],
            run_index=int(d["run_index"]),
            master_seed=int(d["master_seed"]),
            run_seed=int(d["run_seed"]),
            assignment=ModelAssignment.from_dict(d["assignment"]),
            transcript=DebateTranscript.from_dict(d["transcript"]),
            evaluations=tuple(EvaluationRecord.from_dict(e) for e in d["evaluations"]),
            config_hash=d["config_hash"],
            status=RunStatus(d.get("status", "complete")),
            failure=d.get("failure"),
            assessments=None
            if assessments is None
            else tuple(CoherenceAssessment.from_dict(a) for a in assessments),
            validation_failures=tuple(d.get("validation_failures", ())),
            parent_run_id=d.get("parent_run_id"),
            created=d.get("created", ""),
        )


# --------------------------------------------------------------------------
# metrics and analysis settings


@dataclass(frozen=True)
class MetricsBundle:
    votes: dict[str, float]
    fcc: float
    borda: dict[str, float]
    margin: float
    entropy: float
    winner: str
    mode: WeightingMode
    n: float
    voice_authenticity: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", WeightingMode(self.mode))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MetricsBundle:
        return cls(
            votes=dict(d["votes"]),
            fcc=d["fcc"],
            borda=dict(d["borda"]),
            margin=d["margin"],
            entropy=d["entropy"],
            winner=d["winner"],
            mode=WeightingMode(d["mode"]),
            n=d["n"],
            voice_authenticity=d.get("voice_authenticity"),
        )


@dataclass(frozen=True)
class EffectBands:
    small: float = 0.1
    medium: float = 0.3
    large: float = 0.5


@dataclass(frozen=True)
class AnalysisConfig:
    alpha: float = 0.05
    bonferroni_alpha: float = 0.0125
    bootstrap_resamples: int = 10_000
    coherence_threshold: float = 0.6
    borda_points: tuple[float, ...] = (2, 1, 0)
    effect_bands: EffectBands = field(default_factory=EffectBands)
    exact_max_n: int = 12
    seed: int = 20250101

    def __post_init__(self) -> None:
        object.__setattr__(self, "borda_points", tuple(self.borda_points))
        for name in ("alpha", "bonferroni_alpha", "coherence_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name}={v} must lie in (0, 1)")
        if self.bootstrap_resamples < 1:
            raise ConfigError("bootstrap_resamples must be positive")
        pts = self.borda_points
        if any(p < 0 for p in pts) or any(a <= b for a, b in zip(pts, pts[1:])):
            raise ConfigError(f"borda points {pts} must be strictly decreasing and non-negative")
        b = self.effect_bands
        if not 0 < b.small < b.medium < b.large <= 1:
            raise ConfigError("effect bands must satisfy 0 < small < medium < large <= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> AnalysisConfig:
        d = dict(d or {})
        if "effect_bands" in d:
            d["effect_bands"] = EffectBands(**d["effect_bands"])
        if "borda_points" in d:
            d["borda_points"] = tuple(d["borda_points"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad analysis config: {exc}") from None
