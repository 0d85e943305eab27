"""Render an :class:`AnalysisReport` as JSON, Markdown tables and CSV files."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from councilsim.core import TIE
from councilsim.experiment import METRIC_LABEL, AnalysisReport, ScenarioAnalysis, TestRow
from councilsim.metrics import TRUSTWORTHY, TensionCategory
from councilsim.stats import BAND_LETTER

TENSION_LABEL = {
    TensionCategory.AUTHENTIC_DISAGREEMENT.value: "Authentic disagreement",
    TensionCategory.GENUINE_AGREEMENT.value: "Genuine agreement",
    TensionCategory.SUSPECT_AGREEMENT.value: "Suspect agreement",
    TensionCategory.PARTIAL.value: "Partial (one side low-coherence)",
}

SECTION_SUMMARY = "Summary statistics"
SECTION_ARCHETYPES = "Archetype stability"
SECTION_TENSION = "Tension quality"
SECTION_TESTS = "Statistical tests"


def _num(v: float | None, digits: int = 3) -> str:
    if v is None:
        return "n/a"
    return f"{v:.{digits}f}"


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}%"


def _p(p: float) -> str:
    return "<.001" if p < 0.001 else f"{p:.3f}"


def _md_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def significance_mark(row: TestRow) -> str:
    res = row.result
    if res is None:
        return "gap"
    mark = "Yes†" if res.significant_bonferroni else "Yes" if res.significant else "No"
    if res.r < 0:
        mark += "*"  # effect runs against the hypothesised direction
    return mark


def stat_rows(section: ScenarioAnalysis) -> list[list[str]]:
    rows = []
    for t in section.tests:
        if t.result is None:
            rows.append([section.key, t.test, t.comparison, METRIC_LABEL[t.metric], "-", "-", f"gap: {t.gap}"])
            continue
        r = t.result
        rows.append(
            [
                section.key,
                t.test,
                t.comparison,
                METRIC_LABEL[t.metric],
                _p(r.p),
                f"{r.r:.2f} ({BAND_LETTER[r.band]})",
                significance_mark(t),
            ]
        )
    return rows


def summary_rows(section: ScenarioAnalysis) -> list[list[str]]:
    s = section.summaries
    states = ("A", "B", "C")

    def cell(state: str, fn) -> str:
        return fn(s[state]) if state in s else "-"

    ci_ab = section.ci.get("A-B fcc")
    ci_bc = section.ci.get("B-C margin")
    rows = [
        ["N (runs completed / attempted)"]
        + [cell(st, lambda x: f"{x.n} / {x.attempted}") for st in states]
        + [""],
        ["FCC (mean ± SD)"]
        + [cell(st, lambda x: f"{_num(x.means['fcc'])} ± {_num(x.sds['fcc'])}") for st in states]
        + [f"A-B: [{_num(ci_ab['lo'])}, {_num(ci_ab['hi'])}]" if ci_ab else ""],
        ["Borda margin (mean ± SD)"]
        + [cell(st, lambda x: f"{_num(x.means['margin'])} ± {_num(x.sds['margin'])}") for st in states]
        + [f"B-C: [{_num(ci_bc['lo'])}, {_num(ci_bc['hi'])}]" if ci_bc else ""],
        ["Effective perspectives (mean)"] + [cell(st, lambda x: _num(x.means["entropy"], 2)) for st in states] + [""],
        ["Voice authenticity"] + ["-", "-", cell("C", lambda x: _pct(x.voice_authenticity))] + [""],
        ["Mean coherence"] + ["-", "-", cell("C", lambda x: _num(x.mean_coherence, 2))] + [""],
    ]
    for opt in (*section.option_ids, TIE):
        label = "Tie" if opt == TIE else section.option_names.get(opt, opt)
        rows.append([f"Winner: {label}"] + [cell(st, lambda x, o=opt: f"{x.winners.get(o, 0)}/{x.n}") for st in states] + [""])
    return rows


def archetype_rows(section: ScenarioAnalysis, per_role: bool = False) -> list[list[str]]:
    out = []
    for a in section.role_archetypes if per_role else section.archetypes:
        name = section.option_names.get(a.most_common, a.most_common)
        first = a.roles[0] if per_role else a.perspective
        out.append([first, a.perspective if per_role else ", ".join(a.roles), name, _pct(a.consistency), _num(a.mean_coherence, 2), a.observations])
    return out


def tension_rows(sections: Sequence[ScenarioAnalysis]) -> list[list[str]]:
    def share(t: dict[str, Any] | None, cats: Sequence[str]) -> str:
        if not t or not t["fractions"]:
            return "n/a"
        return _pct(sum(t["fractions"][c] for c in cats))

    order = [
        (TENSION_LABEL["authentic_disagreement"], ["authentic_disagreement"]),
        (TENSION_LABEL["genuine_agreement"], ["genuine_agreement"]),
        ("Trustworthy (total)", [c.value for c in TRUSTWORTHY]),
        (TENSION_LABEL["suspect_agreement"], ["suspect_agreement"]),
        (TENSION_LABEL["partial"], ["partial"]),
    ]
    rows = [[label] + [share(s.tension, cats) for s in sections] for label, cats in order]
    rows.append(["Classified / total instances"] + [
        f"{sum(s.tension['counts'].values())} / {s.tension['total']}" if s.tension else "n/a" for s in sections
    ])
    return rows


def to_markdown(report: AnalysisReport) -> str:
    parts = ["# Deliberation analysis", ""]
    cfg = report.config
    parts.append(
        f"alpha = {cfg.alpha}, Bonferroni alpha = {cfg.bonferroni_alpha}, bootstrap resamples = "
        f"{cfg.bootstrap_resamples}, coherence threshold = {cfg.coherence_threshold}, "
        f"exact enumeration up to n = {cfg.exact_max_n}."
    )
    for s in report.scenarios:
        parts += ["", f"## Scenario {s.key}", "", f"### {SECTION_SUMMARY}", ""]
        parts.append(_md_table(["Metric", "State A", "State B", "State C", "95% CI"], summary_rows(s)))
        parts += ["", f"### {SECTION_ARCHETYPES} (state B)", ""]
        parts.append(
            _md_table(["Perspective", "Evaluators", "Most common", "Consistency", "Mean coherence", "Votes"], archetype_rows(s))
        )
        parts += ["", "Per evaluator:", ""]
        parts.append(
            _md_table(["Evaluator", "Perspective", "Most common", "Consistency", "Mean coherence", "Votes"], archetype_rows(s, True))
        )
        if s.tension:
            t = s.tension
            parts += ["", f"### {SECTION_TENSION}", ""]
            rows = [
                [TENSION_LABEL[c], t["counts"][c], _pct(t["fractions"].get(c)), t["direct"][c], t["indirect"][c]]
                for c in TENSION_LABEL
            ]
            parts.append(_md_table(["Category", "Instances", "Share", "Direct", "Indirect"], rows))
            parts.append("")
            parts.append(f"Trustworthy tension rate: {_pct(t['trustworthy_rate'])}; unclassifiable: {t['unclassifiable']}.")
            if t["uninstantiable"]:
                parts.append(f"Pairs without bearers: {', '.join(t['uninstantiable'])}.")
        if s.gaps:
            parts += ["", "Gaps:", ""] + [f"- {g}" for g in s.gaps]
    parts += ["", f"## {SECTION_TENSION} across scenarios", ""]
    parts.append(_md_table(["Tension category"] + [s.key for s in report.scenarios], tension_rows(report.scenarios)))
    parts += ["", f"## {SECTION_TESTS} across scenarios", ""]
    rows = [row for s in report.scenarios for row in stat_rows(s)]
    parts.append(_md_table(["Scenario", "Test", "Comparison", "Metric", "p", "r", "Sig.?"], rows))
    parts += [
        "",
        "p values are one-tailed. L/M/S = large/medium/small effect. † significant at the Bonferroni alpha. "
        "* effect opposite to the hypothesised direction.",
        "",
    ]
    return "\n".join(parts)


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def csv_tables(report: AnalysisReport) -> dict[str, str]:
    tests, summary, arch, runs = [], [], [], []
    for s in report.scenarios:
        for t in s.tests:
            r = t.result
            tests.append(
                [s.key, t.test, t.comparison, METRIC_LABEL[t.metric], t.alternative]
                + ([r.statistic, r.p, r.r, r.band, r.method, r.significant, r.significant_bonferroni,
                    r.ci[0] if r.ci else "", r.ci[1] if r.ci else ""] if r else [""] * 9)
                + [t.gap or ""]
            )
        for st, x in s.summaries.items():
            summary.append(
                [s.key, st, x.n, x.attempted, x.failed]
                + [x.means[m] for m in ("fcc", "margin", "entropy")]
                + [x.sds[m] for m in ("fcc", "margin", "entropy")]
                + [x.voice_authenticity, x.mean_coherence]
            )
        for a in s.archetypes:
            arch.append([s.key, a.perspective, " ".join(a.roles), a.most_common, a.consistency, a.mean_coherence, a.observations])
        for row in s.per_run:
            m = row["metrics"]
            runs.append([s.key, row["state"], row["run_id"], row["parent_run_id"] or "", m["fcc"], m["margin"], m["entropy"], m["winner"]])
    return {
        "tests.csv": _csv(
            ["scenario", "test", "comparison", "metric", "alternative", "statistic", "p", "r", "band", "method",
             "significant", "significant_bonferroni", "ci_lo", "ci_hi", "gap"],
            tests,
        ),
        "summary.csv": _csv(
            ["scenario", "state", "n", "attempted", "failed", "fcc_mean", "margin_mean", "entropy_mean",
             "fcc_sd", "margin_sd", "entropy_sd", "voice_authenticity", "mean_coherence"],
            summary,
        ),
        "archetypes.csv": _csv(
            ["scenario", "perspective", "evaluators", "most_common", "consistency", "mean_coherence", "votes"], arch
        ),
        "tension.csv": _csv(["category"] + [s.key for s in report.scenarios], tension_rows(report.scenarios)),
        "runs.csv": _csv(["scenario", "state", "run_id", "parent_run_id", "fcc", "margin", "entropy", "winner"], runs),
    }


def to_json(report: AnalysisReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def write_report(report: AnalysisReport, directory: str | Path) -> list[Path]:
    """Write ``analysis.json``, ``analysis.md`` and one CSV per table; returns the paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = {"analysis.json": to_json(report), "analysis.md": to_markdown(report), **csv_tables(report)}
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
