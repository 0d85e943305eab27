"""Command-line entry point: ``councilsim <command> [options]``.

Exit codes: 0 success, 1 some runs failed, 2 configuration or usage error,
3 provider failure, 4 data fault (unreadable or inconsistent records).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from councilsim import delphi, experiment, report
from councilsim.config import ExperimentConfig, demo_script_path, load_config, toy_battery_path
from councilsim.core import ModelSpec, State, ValuePerspective, canonical_json, derive_seed, to_jsonable
from councilsim.deliberation import PromptTemplateSet
from councilsim.errors import (
    ConfigError,
    CouncilError,
    EvaluationError,
    JudgeError,
    PreconditionError,
    ProviderError,
    StoreError,
    UndefinedMetricError,
)
from councilsim.providers import CachedProvider, Endpoint, HttpProvider, Provider, Router, ScriptedProvider

EXIT_OK = 0
EXIT_RUNS_FAILED = 1
EXIT_USAGE = 2
EXIT_PROVIDER = 3
EXIT_DATA = 4

DEFAULT_OUT = Path("councilsim-out")

log = logging.getLogger("councilsim")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# wiring helpers


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, args.overrides)


def _http(endpoint: Endpoint, cfg: ExperimentConfig) -> HttpProvider:
    settings = cfg.provider_settings
    return HttpProvider(
        endpoint,
        attempts=int(settings.get("attempts", 3)),
        backoff=float(settings.get("backoff", 1.0)),
        timeout=float(settings.get("timeout", 300.0)),
        max_in_flight=int(settings.get("max_in_flight", 2)),
    )


def _cached(provider: Provider, cfg: ExperimentConfig, cache_dir: str | None) -> Provider:
    directory = cache_dir or cfg.cache_dir
    return CachedProvider(provider, directory) if directory else provider


def build_provider(args: argparse.Namespace, cfg: ExperimentConfig) -> Any:
    if args.provider_mode == "scripted":
        return ScriptedProvider.from_file(args.script or demo_script_path())
    if not cfg.endpoints:
        raise ConfigError("live mode needs at least one endpoint in the config")
    router = Router({eid: _cached(_http(ep, cfg), cfg, args.cache_dir) for eid, ep in cfg.endpoints.items()})
    return router


def build_judge(name: str, args: argparse.Namespace, cfg: ExperimentConfig) -> tuple[Provider, delphi.JudgeSettings]:
    if name == "stub":
        return delphi.KeywordOverlapJudge(cfg.perspectives.values()), cfg.judge_settings()
    if name == "scripted":
        return ScriptedProvider.from_file(args.script or demo_script_path()), cfg.judge_settings()
    if name not in cfg.judges:
        raise ConfigError(f"unknown judge {name!r}; use stub, scripted or one of {sorted(cfg.judges)}")
    spec = cfg.judges[name]
    endpoint_id = spec.get("endpoint")
    if endpoint_id not in cfg.endpoints:
        raise ConfigError(f"judge {name!r} uses unknown endpoint {endpoint_id!r}")
    provider = _cached(_http(cfg.endpoints[endpoint_id], cfg), cfg, getattr(args, "cache_dir", None))
    return provider, cfg.judge_settings(name)


def _templates(cfg: ExperimentConfig) -> PromptTemplateSet:
    return PromptTemplateSet.load(cfg.templates_dir)


def _runs_dir(args: argparse.Namespace) -> Path:
    return Path(args.runs_dir) if args.runs_dir else DEFAULT_OUT / "runs"


def _reports_dir(args: argparse.Namespace, runs_dir: Path | None = None) -> Path:
    if getattr(args, "report_out", None):
        return Path(args.report_out)
    base = runs_dir.parent if runs_dir is not None else DEFAULT_OUT
    return base / "reports"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _by_scenario(records: Sequence[Any]) -> dict[str, list[Any]]:
    grouped: dict[str, list[Any]] = defaultdict(list)
    for r in records:
        grouped[experiment.scenario_key(r.scenario_id, r.variant)].append(r)
    return dict(sorted(grouped.items()))


def _evaluated_records(runs_dir: Path, scenario: str | None) -> list[Any]:
    """Completed state-B runs (state-A runs when no B exists) to feed the judge protocols."""
    records = [r for r in experiment.load_records(runs_dir) if r.complete and r.state is not State.C]
    if scenario:
        records = [r for r in records if r.scenario_id == scenario or experiment.scenario_key(r.scenario_id, r.variant) == scenario]
    b = [r for r in records if r.state is State.B]
    return b or records


# --------------------------------------------------------------------------
# commands


def cmd_run(args: argparse.Namespace) -> int:
    if args.state == "C":
        raise UsageError("state C is derived from state B; use `councilsim validate` instead of `run --state C`")
    cfg = _config(args)
    state = State(args.state)
    if state not in cfg.models:
        raise ConfigError(f"no model assignment for state {state.value}")
    scenarios = [cfg.scenario(s) for s in args.scenario] if args.scenario else list(cfg.scenarios)
    if not scenarios:
        raise ConfigError("no scenarios configured")
    provider = build_provider(args, cfg)
    store = experiment.RunStore(Path(args.out) / "runs")
    templates = _templates(cfg)

    def progress(record) -> None:
        status = record.status.value if record.complete else f"FAILED ({record.failure})"
        print(f"{record.scenario_id}:{record.variant} {record.run_id} {status}", flush=True)

    exit_code = EXIT_OK
    for scenario in scenarios:
        batch = experiment.run_state(
            cfg, scenario, state, args.runs, provider, store, templates=templates, on_run=progress,
            retry_failed=args.retry_failed,
        )
        print(
            f"{batch.scenario} state {state.value}: requested {batch.requested}, attempted {batch.attempted}, "
            f"completed {batch.completed}, failed {len(batch.failed)}, new {len(batch.new_ids)}, "
            f"already stored {len(batch.skipped_ids)}"
        )
        if not batch.ok:
            exit_code = EXIT_RUNS_FAILED
    return exit_code


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    runs_dir = _runs_dir(args)
    store = experiment.RunStore(runs_dir)
    judge, settings = build_judge(args.judge, args, cfg)
    b_records = [r for r in experiment.load_records(runs_dir, State.B)]
    if args.scenario:
        b_records = [r for r in b_records if r.scenario_id == args.scenario]
    if not b_records:
        raise PreconditionError(f"no state-B records under {runs_dir}")
    records = experiment.derive_state_c(
        b_records, judge, cfg.perspectives, settings=settings, templates=_templates(cfg), store=store
    )
    partial = [r.run_id for r in records if r.validation_failures]
    for key, rs in _by_scenario(records).items():
        print(f"{key}: {len(rs)} state-C records")
    if partial:
        print(f"{len(partial)} run(s) with missing assessments: {', '.join(partial)}")
        return EXIT_DATA
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _config(args)
    runs_dir = _runs_dir(args)
    sources = {"A": args.a, "B": args.b, "C": args.c}
    loaded = {}
    for st, src in sources.items():
        root = Path(src) if src else runs_dir
        loaded[st] = experiment.load_records(root, st) if root.exists() or src else []
    if not any(loaded.values()):
        raise PreconditionError(f"no run records found (looked in {runs_dir})")
    result = experiment.analyze(
        loaded["A"],
        loaded["B"],
        loaded["C"],
        cfg.analysis,
        scenarios=cfg.scenarios,
        evaluators=cfg.evaluators,
        pair_map=cfg.tension_pairs,
    )
    out = _reports_dir(args, runs_dir)
    paths = report.write_report(result, out)
    for section in result.scenarios:
        counts = ", ".join(f"{k}={v.n}" for k, v in section.summaries.items())
        print(f"{section.key}: {counts}; {len(section.gaps)} gap(s)")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _load_models(text: str | None, cfg: ExperimentConfig) -> list[ModelSpec]:
    if not text:
        seen: dict[str, ModelSpec] = {}
        for assignment in cfg.models.values():
            for spec in assignment.entries.values():
                seen.setdefault(spec.model, spec)
        return [seen[m] for m in sorted(seen)]
    path = Path(text)
    if path.is_file():
        data = json.loads(path.read_text(encoding="utf-8"))
        return [ModelSpec.from_dict(d) for d in data]
    specs = []
    default_endpoint = next(iter(cfg.endpoints), "default")
    for item in text.split(","):
        model, _, endpoint = item.strip().partition("@")
        specs.append(ModelSpec(model=model, endpoint=endpoint or default_endpoint))
    return specs


def _load_keywords(path: str | None, cfg: ExperimentConfig) -> list[ValuePerspective]:
    if not path:
        return list(cfg.perspectives.values())
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        unknown = [name for name in data if name not in cfg.perspectives]
        if unknown:
            raise ConfigError(f"keyword file names unknown perspectives {unknown}")
        return [
            ValuePerspective(name, cfg.perspectives[name].definition, tuple(words)) for name, words in data.items()
        ]
    return [ValuePerspective.from_dict(d) for d in data]


def cmd_profile(args: argparse.Namespace) -> int:
    cfg = _config(args)
    models = _load_models(args.models, cfg)
    battery_path = Path(args.battery) if args.battery else toy_battery_path()
    battery = json.loads(battery_path.read_text(encoding="utf-8"))
    prompts = battery["prompts"] if isinstance(battery, dict) else battery
    perspectives = _load_keywords(args.keywords, cfg)
    provider = build_provider(args, cfg)
    matrix = experiment.profile_models(
        models,
        perspectives,
        prompts,
        provider,
        templates=_templates(cfg),
        seed=derive_seed(cfg.master_seed, "profiling"),
        max_tokens=cfg.max_tokens,
    )
    roles = [r for r in cfg.evaluators] + [c for c in cfg.champions if c.name not in {e.name for e in cfg.evaluators}]
    assignment = experiment.assign_roles(matrix, roles, {m.model: m for m in models})
    out = Path(args.out)
    _write(out / "alignment.json", canonical_json(matrix.to_dict(), indent=2) + "\n")
    _write(out / "assignment.json", canonical_json(assignment, indent=2) + "\n")
    names = [p.name for p in perspectives]
    print("model".ljust(28) + "  ".join(n[:12].ljust(12) for n in names))
    for m in matrix.models:
        print(m[:27].ljust(28) + "  ".join(f"{matrix.score(m, n) or 0:.3f}".ljust(12) for n in names))
    for role, spec in sorted(assignment.entries.items()):
        print(f"{role}: {spec.model}")
    print(f"wrote {out / 'alignment.json'}, {out / 'assignment.json'}")
    return EXIT_OK


def cmd_retest(args: argparse.Namespace) -> int:
    cfg = _config(args)
    runs_dir = _runs_dir(args)
    judge, settings = build_judge(args.judge, args, cfg)
    out = _reports_dir(args, runs_dir)
    results = {}
    md = []
    for key, records in _by_scenario(_evaluated_records(runs_dir, args.scenario)).items():
        sample = delphi.sample_records(records, args.sample, derive_seed(cfg.analysis.seed, key, "retest"))
        rep = delphi.test_retest(
            sample, judge, cfg.perspectives, repetitions=args.repetitions, settings=settings, templates=_templates(cfg)
        )
        results[key] = {"runs": [r.run_id for r in sample], **to_jsonable(rep)}
        md += [f"## {key}", "", delphi.reliability_markdown(rep), ""]
        icc = "n/a" if rep.icc is None else f"{rep.icc:.3f}"
        print(f"{key}: {rep.n} assessments from {len(sample)} runs, ICC(3,1) = {icc}")
    if not results:
        raise PreconditionError(f"no evaluated runs under {runs_dir}")
    _write(out / "retest.json", json.dumps(results, indent=2, sort_keys=True, allow_nan=False) + "\n")
    _write(out / "retest.md", "# Test-retest reliability\n\n" + "\n".join(md))
    print(f"wrote {out / 'retest.json'}, {out / 'retest.md'}")
    return EXIT_OK


def cmd_crossjudge(args: argparse.Namespace) -> int:
    cfg = _config(args)
    runs_dir = _runs_dir(args)
    judge_a, settings_a = build_judge(args.judge_a, args, cfg)
    judge_b, settings_b = build_judge(args.judge_b, args, cfg)
    out = _reports_dir(args, runs_dir)
    results = {}
    md = []
    for key, records in _by_scenario(_evaluated_records(runs_dir, args.scenario)).items():
        sample = delphi.sample_records(records, args.sample, derive_seed(cfg.analysis.seed, key, "crossjudge"))
        rep = delphi.cross_model(
            sample, judge_a, judge_b, cfg.perspectives, settings_a=settings_a, settings_b=settings_b, templates=_templates(cfg)
        )
        results[key] = {"runs": [r.run_id for r in sample], **to_jsonable(rep), "same_ordering": rep.same_ordering}
        md += [f"## {key}", "", delphi.cross_markdown(rep), ""]
        r_txt = "n/a" if rep.pearson is None else f"{rep.pearson:.3f}"
        print(f"{key}: {rep.n} paired assessments, Pearson r = {r_txt}")
    if not results:
        raise PreconditionError(f"no evaluated runs under {runs_dir}")
    _write(out / "crossjudge.json", json.dumps(results, indent=2, sort_keys=True, allow_nan=False) + "\n")
    _write(out / "crossjudge.md", "# Cross-judge agreement\n\n" + "\n".join(md))
    print(f"wrote {out / 'crossjudge.json'}, {out / 'crossjudge.md'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file layered over the built-in defaults")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value by dotted key, e.g. analysis.alpha=0.01 (repeatable)",
    )
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeat for debug)")


def _provider_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider-mode", choices=("live", "scripted"), default="live",
                   help="live: HTTP endpoints from the config; scripted: deterministic offline script")
    p.add_argument("--script", help="scripted-provider rule file (default: the bundled demo script)")
    p.add_argument("--cache-dir", help="response cache directory for live mode")


def _judge_flags(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        p.add_argument(f"--{name}", default="stub",
                       help="stub (keyword overlap), scripted, or a judge name from the config (default: stub)")
    p.add_argument("--script", help="rule file for the scripted judge (default: the bundled demo script)")
    p.add_argument("--cache-dir", help="response cache directory for live judges")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="councilsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("run", help="execute deliberation runs for state A or B")
    _common(p)
    p.add_argument("--scenario", action="append", help="scenario id or id:variant (repeatable; default: all configured)")
    p.add_argument("--state", required=True, choices=("A", "B", "C"), help="A (homogeneous) or B (heterogeneous)")
    p.add_argument("--runs", type=int, help="runs per scenario (default: from config)")
    p.add_argument("--out", default=str(DEFAULT_OUT), help="output root; records go to <out>/runs")
    p.add_argument("--retry-failed", action="store_true",
                   help="archive stored failed runs (as <run_id>.failed-<k>) and run them again")
    _provider_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="derive coherence-weighted state C from stored state-B runs")
    _common(p)
    p.add_argument("--runs-dir", help=f"run store root (default: {DEFAULT_OUT / 'runs'})")
    p.add_argument("--scenario", help="restrict to one scenario id")
    _judge_flags(p, "judge")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("analyze", help="compare states and write JSON, Markdown and CSV reports")
    _common(p)
    p.add_argument("--runs-dir", help="run store root used for any state without an explicit source")
    p.add_argument("--a", help="directory or file with state-A records")
    p.add_argument("--b", help="directory or file with state-B records")
    p.add_argument("--c", help="directory or file with state-C records")
    p.add_argument("--report-out", help="report directory (default: <runs-dir>/../reports)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("profile", help="score model-perspective alignment and assign models to roles")
    _common(p)
    p.add_argument("--models", help="comma list of model[@endpoint], or a JSON file of model specs "
                   "(default: every model in the config)")
    p.add_argument("--battery", help="JSON prompt battery (default: the bundled toy battery)")
    p.add_argument("--keywords", help="JSON keyword lists per perspective (default: from the config)")
    p.add_argument("--out", default=str(DEFAULT_OUT / "reports" / "profile"), help="directory for matrix and assignment")
    _provider_flags(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("retest", help="test-retest reliability of a coherence judge")
    _common(p)
    p.add_argument("--runs-dir", help="run store root")
    p.add_argument("--scenario", help="restrict to one scenario id")
    p.add_argument("--sample", type=int, default=10, help="runs sampled per scenario (default: 10)")
    p.add_argument("--repetitions", type=int, default=2, help="scorings per assessment (default: 2)")
    p.add_argument("--report-out", help="report directory")
    _judge_flags(p, "judge")
    p.set_defaults(func=cmd_retest)

    p = sub.add_parser("crossjudge", help="agreement between two coherence judges")
    _common(p)
    p.add_argument("--runs-dir", help="run store root")
    p.add_argument("--scenario", help="restrict to one scenario id")
    p.add_argument("--sample", type=int, default=10, help="runs sampled per scenario (default: 10)")
    p.add_argument("--report-out", help="report directory")
    _judge_flags(p, "judge-a", "judge-b")
    p.set_defaults(func=cmd_crossjudge)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (StoreError, PreconditionError, UndefinedMetricError, EvaluationError, JudgeError, json.JSONDecodeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CouncilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
