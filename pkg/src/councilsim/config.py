"""Experiment configuration: loading, overrides and hashing."""

from __future__ import annotations

import copy
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from councilsim.core import (
    AgentRole,
    AnalysisConfig,
    ModelAssignment,
    ModelSpec,
    RoleKind,
    Scenario,
    State,
    ValuePerspective,
    content_hash,
)
from councilsim.delphi import CalibrationAnchor, JudgeSettings
from councilsim.errors import ConfigError, PreconditionError
from councilsim.metrics import TensionPairMap
from councilsim.providers import Endpoint

# sections whose keys are user-chosen names rather than a fixed schema
_OPEN_SECTIONS = ("endpoints", "judges", "models")
# mappings a config file replaces wholesale instead of merging into
_REPLACED = {("models", "A"), ("models", "B")}
# keys that change how runs are executed but never what they produce
_UNHASHED = ("cache_dir", "parallelism", "providers")


def _data_path(*parts: str) -> Path:
    node = resources.files("councilsim").joinpath("data")
    for part in parts:
        node = node.joinpath(part)
    return Path(str(node))


def default_document() -> dict[str, Any]:
    return json.loads(_data_path("default_config.json").read_text(encoding="utf-8"))


def demo_script_path() -> Path:
    return _data_path("scripts", "demo.json")


def toy_battery_path() -> Path:
    return _data_path("profiling", "battery.json")


def record_schema_path() -> Path:
    return _data_path("schema", "record.schema.json")


def builtin_scenarios() -> list[str]:
    return sorted(p.stem for p in _data_path("scenarios").glob("*.json"))


def load_scenario(ref: str | Mapping[str, Any], base_dir: Path | None = None) -> Scenario:
    """Resolve a scenario given inline, as a file path, or by built-in name."""
    if isinstance(ref, Mapping):
        return Scenario.from_dict(ref)
    candidates = []
    if base_dir is not None:
        candidates.append(base_dir / ref)
    candidates += [Path(ref), _data_path("scenarios", f"{ref}.json")]
    for path in candidates:
        if path.is_file():
            try:
                return Scenario.from_dict(json.loads(path.read_text(encoding="utf-8")))
            except (KeyError, PreconditionError, json.JSONDecodeError) as exc:
                raise ConfigError(f"scenario {path}: {exc}") from None
    raise ConfigError(f"unknown scenario {ref!r}; built-ins are {builtin_scenarios()}")


def _is_open(path: tuple[str, ...]) -> bool:
    return bool(path) and path[0] in _OPEN_SECTIONS


def _merge(base: dict[str, Any], update: Mapping[str, Any], path: tuple[str, ...] = ()) -> None:
    for key, value in update.items():
        here = path + (key,)
        if key not in base and not _is_open(path):
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(value, Mapping) and isinstance(base.get(key), dict) and here not in _REPLACED:
            _merge(base[key], value, here)
        else:
            base[key] = copy.deepcopy(value)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values are JSON when they parse as JSON."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        keys = tuple(k for k in dotted.strip().split(".") if k)
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key")
        node: Any = doc
        for i, key in enumerate(keys[:-1]):
            if not isinstance(node, dict) or (key not in node and not _is_open(keys[:i])):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node.setdefault(key, {})
        if not isinstance(node, dict) or (keys[-1] not in node and not _is_open(keys[:-1])):
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = _parse_value(raw)
    return doc


def config_hash(doc: Mapping[str, Any]) -> str:
    """Hash of everything that can change a run's outcome."""
    return content_hash({k: v for k, v in doc.items() if k not in _UNHASHED})


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: tuple[Scenario, ...]
    perspectives: dict[str, ValuePerspective]
    tie_break: tuple[str, ...]
    champions: tuple[AgentRole, ...]
    evaluators: tuple[AgentRole, ...]
    tension_pairs: TensionPairMap
    endpoints: dict[str, Endpoint]
    models: dict[State, ModelAssignment]
    judges: dict[str, dict[str, Any]]
    anchors: tuple[CalibrationAnchor, ...]
    runs: dict[State, int]
    analysis: AnalysisConfig
    master_seed: int
    max_tokens: int = 1024
    max_attempts: int = 3
    provider_settings: dict[str, Any] = field(default_factory=dict)
    run_parallelism: int = 1
    agent_parallelism: int = 1
    cache_dir: str | None = None
    templates_dir: str | None = None
    document: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.document)

    @property
    def roles(self) -> tuple[AgentRole, ...]:
        return self.champions + self.evaluators

    def scenario(self, ref: str) -> Scenario:
        """Look up ``id`` (baseline variant preferred) or ``id:variant``."""
        matches = [s for s in self.scenarios if ref == f"{s.id}:{s.variant}"]
        if not matches:
            matches = [s for s in self.scenarios if s.id == ref]
            if len(matches) > 1:
                matches = [s for s in matches if s.variant == "baseline"] or matches
        if not matches:
            # allow scenarios outside the configured list
            return load_scenario(ref)
        if len(matches) > 1:
            raise ConfigError(f"scenario {ref!r} is ambiguous; use id:variant")
        return matches[0]

    def judge_settings(self, name: str | None = None) -> JudgeSettings:
        spec = self.judges.get(name or "", {})
        return JudgeSettings(
            model=spec.get("model", "judge"),
            temperature=float(spec.get("temperature", 0.0)),
            max_attempts=self.max_attempts,
            anchors=self.anchors,
        )

    @classmethod
    def from_document(cls, doc: Mapping[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
        doc = copy.deepcopy(dict(doc))
        try:
            return cls._build(doc, base_dir)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid configuration: {exc!r}") from None

    @classmethod
    def _build(cls, doc: dict[str, Any], base_dir: Path | None) -> ExperimentConfig:
        perspectives = {}
        for p in doc["perspectives"]:
            vp = ValuePerspective.from_dict(p)
            if vp.name in perspectives:
                raise ConfigError(f"perspective {vp.name!r} defined twice")
            perspectives[vp.name] = vp
        tie_break = tuple(doc["tie_break"])
        unknown = [t for t in tie_break if t not in perspectives]
        if unknown:
            raise ConfigError(f"tie_break names unknown perspectives {unknown}")

        def roles(entries: Sequence[Mapping[str, Any]], kind: RoleKind) -> tuple[AgentRole, ...]:
            out = []
            for e in entries:
                bad = [t for t in e["traits"] if t not in perspectives]
                if bad:
                    raise ConfigError(f"role {e['name']!r} has unknown traits {bad}")
                out.append(AgentRole.build(e["name"], e["traits"], tie_break, kind, e.get("option")))
            names = [r.name for r in out]
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate {kind.value} names {names}")
            return tuple(out)

        champions = roles(doc["champions"], RoleKind.CHAMPION)
        evaluators = roles(doc["evaluators"], RoleKind.EVALUATOR)
        pair_map = TensionPairMap.from_list(doc.get("tension_pairs", ()))
        pair_map.check_perspectives(perspectives)

        endpoints = {k: Endpoint.from_dict(k, v) for k, v in doc.get("endpoints", {}).items()}
        all_names = sorted({r.name for r in champions + evaluators})
        models: dict[State, ModelAssignment] = {}
        for state_key, spec in doc["models"].items():
            state = State(state_key)
            if state is State.C:
                raise ConfigError("state C reuses state B's models and takes no model block")
            if "*" in spec:
                default = ModelSpec.from_dict(spec["*"])
                entries = {n: ModelSpec.from_dict(spec[n]) if n in spec else default for n in all_names}
            else:
                entries = {n: ModelSpec.from_dict(v) for n, v in spec.items()}
            assignment = ModelAssignment(entries)
            assignment.check_covers(champions + evaluators)
            if state is State.A and len({(s.model, s.endpoint) for s in entries.values()}) != 1:
                raise ConfigError("state A must bind every role to one and the same model")
            for s in entries.values():
                if endpoints and s.endpoint not in endpoints:
                    raise ConfigError(f"model {s.model!r} uses unknown endpoint {s.endpoint!r}")
            models[state] = assignment

        runs = {State(k): int(v) for k, v in doc.get("runs", {}).items()}
        if State.C in runs:
            raise ConfigError("state C has no run count; it is derived from state B")
        if any(v < 0 for v in runs.values()):
            raise ConfigError("run counts must be non-negative")

        anchors = tuple(CalibrationAnchor(a["text"], float(a["score"])) for a in doc.get("anchors", ()))
        sampling = doc.get("sampling", {})
        par = doc.get("parallelism", {})
        scenarios = tuple(load_scenario(s, base_dir) for s in doc.get("scenarios", ()))
        keys = [(s.id, s.variant) for s in scenarios]
        if len(set(keys)) != len(keys):
            raise ConfigError(f"duplicate scenarios {keys}")
        return cls(
            scenarios=scenarios,
            perspectives=perspectives,
            tie_break=tie_break,
            champions=champions,
            evaluators=evaluators,
            tension_pairs=pair_map,
            endpoints=endpoints,
            models=models,
            judges=dict(doc.get("judges", {})),
            anchors=anchors or JudgeSettings().anchors,
            runs=runs,
            analysis=AnalysisConfig.from_dict(doc.get("analysis")),
            master_seed=int(doc["master_seed"]),
            max_tokens=int(sampling.get("max_tokens", 1024)),
            max_attempts=int(sampling.get("max_attempts", 3)),
            provider_settings=dict(doc.get("providers", {})),
            run_parallelism=max(1, int(par.get("runs", 1))),
            agent_parallelism=max(1, int(par.get("agents", 1))),
            cache_dir=doc.get("cache_dir"),
            templates_dir=doc.get("templates_dir"),
            document=doc,
        )


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Built-in defaults, updated by the JSON file at ``path``, then by overrides."""
    doc = default_document()
    base_dir = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(doc, user)
        base_dir = path.parent
    doc = apply_overrides(doc, overrides)
    return ExperimentConfig.from_document(doc, base_dir)
