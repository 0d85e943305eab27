"""Vote-distribution metrics, Borda scoring and tension classification."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any

from councilsim.core import (
    TIE,
    AgentRole,
    CoherenceAssessment,
    DeliberationRecord,
    EvaluationRecord,
    MetricsBundle,
    WeightingMode,
)
from councilsim.errors import ConfigError, PreconditionError, UndefinedMetricError

_TOL = 1e-12


def _close(x: float, y: float) -> bool:
    return math.isclose(x, y, rel_tol=_TOL, abs_tol=_TOL)


def default_points(k: int) -> tuple[int, ...]:
    return tuple(range(k - 1, -1, -1))


# --------------------------------------------------------------------------
# Borda


def borda_scores(
    evaluations: Sequence[EvaluationRecord],
    option_ids: Sequence[str],
    weights: Sequence[float] | None = None,
    points: Sequence[float] | None = None,
) -> dict[str, float]:
    """Sum of weight times positional points for each option."""
    points = tuple(points) if points is not None else default_points(len(option_ids))
    if len(points) != len(option_ids):
        raise PreconditionError(f"{len(points)} Borda points for {len(option_ids)} options")
    if weights is None:
        weights = [1.0] * len(evaluations)
    if len(weights) != len(evaluations):
        raise PreconditionError(f"{len(weights)} weights for {len(evaluations)} evaluations")
    scores = {o: 0.0 for o in option_ids}
    for ev, w in zip(evaluations, weights):
        ev.ranking.check_against(option_ids)
        for pos, opt in enumerate(ev.ranking.order):
            scores[opt] += w * points[pos]
    return scores


def first_choice_tallies(
    evaluations: Sequence[EvaluationRecord], option_ids: Sequence[str], weights: Sequence[float] | None = None
) -> dict[str, float]:
    if weights is None:
        weights = [1.0] * len(evaluations)
    if len(weights) != len(evaluations):
        raise PreconditionError(f"{len(weights)} weights for {len(evaluations)} evaluations")
    tallies = {o: 0.0 for o in option_ids}
    for ev, w in zip(evaluations, weights):
        tallies[ev.ranking.first] += w
    return tallies


def first_choice_concentration(tallies: Sequence[float], n: float | None = None, k: int | None = None) -> float:
    """Normalized lead of the top option: (max - N/K) / (N - N/K).

    N/K is the exact even share, not its floor. Evaluated in exact rational
    arithmetic and rounded once, so integer tallies and the same tallies given
    as float weights produce identical results.
    """
    tallies = list(tallies)
    k = len(tallies) if k is None else k
    total = sum(tallies)
    n = total if n is None else n
    if k < 2:
        raise PreconditionError("K must be at least 2")
    if n <= 0:
        raise UndefinedMetricError("FCC is undefined when the total vote weight is zero")
    if not math.isclose(total, n, rel_tol=1e-9, abs_tol=1e-12):
        raise PreconditionError(f"tallies sum to {total}, expected N={n}")
    exact_n = Fraction(n)
    share = exact_n / k
    return float((Fraction(max(tallies)) - share) / (exact_n - share))


def borda_margin(scores: Mapping[str, float] | Sequence[float], n: float, points_max: float = 2) -> float:
    """Gap between the two highest Borda scores over the maximum attainable score."""
    values = sorted(scores.values() if isinstance(scores, Mapping) else scores, reverse=True)
    if len(values) < 2:
        raise PreconditionError("Borda margin needs at least two options")
    if n <= 0:
        raise UndefinedMetricError("Borda margin is undefined when the total vote weight is zero")
    gap = values[0] - values[1]
    if _close(values[0], values[1]):
        gap = 0.0
    return gap / (points_max * n)


def effective_perspectives(shares: Iterable[float]) -> float:
    """Shannon entropy of first-choice shares, in bits."""
    shares = list(shares)
    if any(p < 0 for p in shares):
        raise PreconditionError("shares must be non-negative")
    if not math.isclose(sum(shares), 1.0, abs_tol=1e-9):
        raise PreconditionError(f"shares sum to {sum(shares)}, not 1")
    h = -sum(p * math.log2(p) for p in shares if p > 0)
    return h if h > 0 else 0.0


def winner(scores: Mapping[str, float]) -> str:
    """Top Borda option, or ``TIE`` when the top score is shared."""
    best = max(scores.values())
    top = [o for o, s in scores.items() if _close(s, best)]
    return top[0] if len(top) == 1 else TIE


def voice_authenticity(scores: Iterable[float], threshold: float = 0.6) -> float:
    scores = list(scores)
    if not scores:
        raise PreconditionError("voice authenticity needs at least one assessment")
    return sum(1 for c in scores if c >= threshold) / len(scores)


def compute_metrics(
    evaluations: Sequence[EvaluationRecord],
    option_ids: Sequence[str],
    *,
    weights: Sequence[float] | None = None,
    points: Sequence[float] | None = None,
    threshold: float = 0.6,
) -> MetricsBundle:
    """Every vote metric for one run; coherence-weighted when ``weights`` is given."""
    points = tuple(points) if points is not None else default_points(len(option_ids))
    weighted = weights is not None
    w = list(weights) if weighted else [1] * len(evaluations)
    tallies = first_choice_tallies(evaluations, option_ids, w)
    n = sum(w)
    if n <= 0:
        raise UndefinedMetricError("all coherence weights are zero")
    scores = borda_scores(evaluations, option_ids, w, points)
    fcc = first_choice_concentration(list(tallies.values()), n, len(option_ids))
    return MetricsBundle(
        votes=tallies,
        fcc=fcc,
        borda=scores,
        margin=borda_margin(scores, n, points[0]),
        entropy=effective_perspectives(v / n for v in tallies.values()),
        winner=winner(scores),
        mode=WeightingMode.WEIGHTED if weighted else WeightingMode.UNWEIGHTED,
        n=float(n),
        voice_authenticity=voice_authenticity(w, threshold) if weighted else None,
    )


def record_metrics(
    record: DeliberationRecord,
    option_ids: Sequence[str],
    *,
    weighted: bool,
    points: Sequence[float] | None = None,
    threshold: float = 0.6,
) -> MetricsBundle:
    """Unweighted metrics, or coherence-weighted ones from the record's assessments."""
    weights = None
    if weighted:
        if not record.fully_validated:
            raise UndefinedMetricError(f"run {record.run_id} lacks complete coherence assessments")
        weights = []
        for ev in record.evaluations:
            a = record.assessment_for(ev.role)
            if a is None:
                raise UndefinedMetricError(f"run {record.run_id}: no assessment for {ev.role}")
            weights.append(a.score)
    return compute_metrics(record.evaluations, option_ids, weights=weights, points=points, threshold=threshold)


# --------------------------------------------------------------------------
# tension classification


class TensionCategory(str, Enum):
    AUTHENTIC_DISAGREEMENT = "authentic_disagreement"
    GENUINE_AGREEMENT = "genuine_agreement"
    SUSPECT_AGREEMENT = "suspect_agreement"
    PARTIAL = "partial"


TRUSTWORTHY = (TensionCategory.AUTHENTIC_DISAGREEMENT, TensionCategory.GENUINE_AGREEMENT)


@dataclass(frozen=True)
class TensionPair:
    first: str
    second: str

    def __post_init__(self) -> None:
        if self.first == self.second:
            raise ConfigError(f"tension pair needs two distinct perspectives, got {self.first!r} twice")

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.first, self.second))

    @property
    def label(self) -> str:
        return f"{self.first}--{self.second}"


@dataclass(frozen=True)
class TensionPairMap:
    pairs: tuple[TensionPair, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "pairs", tuple(self.pairs))
        keys = [p.key for p in self.pairs]
        if len(set(keys)) != len(keys):
            raise ConfigError("tension pairs must be distinct")

    def check_perspectives(self, names: Iterable[str]) -> None:
        known = set(names)
        for p in self.pairs:
            for side in (p.first, p.second):
                if side not in known:
                    raise ConfigError(f"tension pair {p.label} names unknown perspective {side!r}")

    @classmethod
    def from_list(cls, pairs: Iterable[Sequence[str]]) -> TensionPairMap:
        return cls(tuple(TensionPair(a, b) for a, b in pairs))


@dataclass(frozen=True)
class TensionInstance:
    pair: str
    roles: tuple[str, str]
    direct: bool
    category: TensionCategory | None
    coherence: tuple[float | None, float | None]
    choices: tuple[str, str]
    run_id: str = ""


def classify_tension(
    choice_a: str, coherence_a: float, choice_b: str, coherence_b: float, threshold: float = 0.6
) -> TensionCategory:
    coherent = coherence_a >= threshold and coherence_b >= threshold
    agree = choice_a == choice_b
    if coherent:
        return TensionCategory.GENUINE_AGREEMENT if agree else TensionCategory.AUTHENTIC_DISAGREEMENT
    return TensionCategory.SUSPECT_AGREEMENT if agree else TensionCategory.PARTIAL


def _bearers(perspective: str, evaluators: Sequence[AgentRole]) -> tuple[list[AgentRole], bool]:
    primary = [e for e in evaluators if e.primary == perspective]
    if primary:
        return primary, True
    return [e for e in evaluators if e.secondary == perspective], False


def instantiate_pairs(
    pair_map: TensionPairMap, evaluators: Sequence[AgentRole]
) -> tuple[list[tuple[TensionPair, AgentRole, AgentRole, bool]], list[str]]:
    """Expand each perspective pair into evaluator-role pairs.

    A perspective nobody holds as primary falls back to the evaluators holding
    it as secondary trait; such instances are marked indirect.
    """
    instances = []
    uninstantiable = []
    for pair in pair_map.pairs:
        left, direct_l = _bearers(pair.first, evaluators)
        right, direct_r = _bearers(pair.second, evaluators)
        found = False
        for e1 in left:
            for e2 in right:
                if e1.name == e2.name:
                    continue
                instances.append((pair, e1, e2, direct_l and direct_r))
                found = True
        if not found:
            uninstantiable.append(pair.label)
    return instances, uninstantiable


@dataclass
class TensionSummary:
    counts: dict[str, int] = field(default_factory=lambda: {c.value: 0 for c in TensionCategory})
    unclassifiable: int = 0
    total: int = 0
    direct: dict[str, int] = field(default_factory=lambda: {c.value: 0 for c in TensionCategory})
    indirect: dict[str, int] = field(default_factory=lambda: {c.value: 0 for c in TensionCategory})
    uninstantiable: list[str] = field(default_factory=list)
    instances: list[TensionInstance] = field(default_factory=list)

    @property
    def classified(self) -> int:
        return sum(self.counts.values())

    def fraction(self, category: TensionCategory | str) -> float:
        c = TensionCategory(category).value
        return self.counts[c] / self.classified if self.classified else float("nan")

    @property
    def trustworthy_rate(self) -> float:
        if not self.classified:
            return float("nan")
        return sum(self.counts[c.value] for c in TRUSTWORTHY) / self.classified

    def to_dict(self) -> dict[str, Any]:
        return {
            "counts": dict(self.counts),
            "fractions": {c.value: self.fraction(c) for c in TensionCategory} if self.classified else {},
            "trustworthy_rate": self.trustworthy_rate if self.classified else None,
            "unclassifiable": self.unclassifiable,
            "total": self.total,
            "direct": dict(self.direct),
            "indirect": dict(self.indirect),
            "uninstantiable": list(self.uninstantiable),
        }


def tension_rate(
    records: Iterable[DeliberationRecord],
    pair_map: TensionPairMap,
    evaluators: Sequence[AgentRole],
    threshold: float = 0.6,
) -> TensionSummary:
    """Classify every tension instance in every run and tally the categories.

    The trustworthy rate is (authentic + genuine) over classified instances;
    instances missing an assessment land in ``unclassifiable``.
    """
    summary = TensionSummary()
    expanded, summary.uninstantiable = instantiate_pairs(pair_map, evaluators)
    for record in records:
        by_role = {ev.role: ev for ev in record.evaluations}
        for pair, e1, e2, direct in expanded:
            summary.total += 1
            ev1, ev2 = by_role.get(e1.name), by_role.get(e2.name)
            a1: CoherenceAssessment | None = record.assessment_for(e1.name)
            a2: CoherenceAssessment | None = record.assessment_for(e2.name)
            choices = (ev1.ranking.first if ev1 else "", ev2.ranking.first if ev2 else "")
            if ev1 is None or ev2 is None or a1 is None or a2 is None:
                summary.unclassifiable += 1
                category = None
            else:
                category = classify_tension(choices[0], a1.score, choices[1], a2.score, threshold)
                summary.counts[category.value] += 1
                (summary.direct if direct else summary.indirect)[category.value] += 1
            summary.instances.append(
                TensionInstance(
                    pair=pair.label,
                    roles=(e1.name, e2.name),
                    direct=direct,
                    category=category,
                    coherence=(a1.score if a1 else None, a2.score if a2 else None),
                    choices=choices,
                    run_id=record.run_id,
                )
            )
    return summary


def first_choice_counts(records: Iterable[DeliberationRecord]) -> Counter[tuple[str, str]]:
    """(role, option) -> number of runs where the role put that option first."""
    counts: Counter[tuple[str, str]] = Counter()
    for r in records:
        for ev in r.evaluations:
            counts[(ev.role, ev.ranking.first)] += 1
    return counts
