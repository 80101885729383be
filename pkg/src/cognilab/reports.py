"""Comparison arithmetic and the CSV/SVG report built from analysis outputs.

Conventions: ``delta = b - a``, ``ratio = b / a``, ``pct_change = (b - a) / a * 100``
with ``a`` the reference (baseline) value. Division by zero yields ``None``,
written as ``n/a``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from cognilab import svg
from cognilab.geometry import METRICS, aggregate_groups
from cognilab.heads import format_ratio, speedup_pct
from cognilab.pipeline import (ARCHETYPES, PipelineError, RunInfo, Workspace, by_mode, emergence_table,
                               read_csv, select_runs)

NA = "n/a"


def delta(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    return b - a


def ratio(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or a == 0:
        return None
    return b / a


def pct_change(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or a == 0:
        return None
    return (b - a) / a * 100.0


def retention_pct(shared: int, source: int) -> float | None:
    return None if source == 0 else 100.0 * shared / source


def cell(v, digits: int = 4) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return NA
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.{digits}f}"
    return str(v)


def pct_cell(v: float | None, digits: int = 1) -> str:
    return NA if v is None else f"{v:+.{digits}f}"


def _write(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _mean(values: Sequence[float]) -> float | None:
    return float(np.mean(values)) if len(values) else None


# -- loaders ------------------------------------------------------------------------

def _head_counts(run: RunInfo) -> list[dict]:
    return read_csv(_need(run.path / "analysis" / "head_counts.csv", "analyze-heads"))


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {path}; run `{producer}` first")
    return path


def _final_attn(run: RunInfo) -> dict[str, np.ndarray]:
    rows = read_csv(_need(run.path / "analysis" / "attn_stats.csv", "analyze-attn"))
    last = max(int(r["step"]) for r in rows)
    out = {m: np.zeros((run.model.n_layers, run.model.n_heads)) for m in METRICS}
    for r in rows:
        if int(r["step"]) == last:
            for m in METRICS:
                out[m][int(r["layer"]), int(r["head"])] = float(r[m])
    return out


def _mode_runs(runs, mode) -> list[RunInfo]:
    seeds = by_mode(runs).get(mode, {})
    return [seeds[s] for s in sorted(seeds)]


# -- tables -------------------------------------------------------------------------

def table_components(runs) -> list[list[str]]:
    stats = {}
    for mode in ("baseline", "curriculum"):
        rs = _mode_runs(runs, mode)
        if not rs:
            stats[mode] = None
            continue
        avg, final, max_layer, early, late = [], [], [], 0, 0
        for r in rs:
            counts = [int(x["reasoning"]) for x in _head_counts(r)]
            avg.append(np.mean(counts))
            final.append(counts[-1])
            per_layer = [int(x["count"]) for x in read_csv(r.path / "analysis" / "layer_counts.csv")]
            max_layer.append(max(per_layer))
            e0, e1 = r.config.analysis.early_late["early"]
            l0, l1 = r.config.analysis.early_late["late"]
            early += sum(per_layer[e0:e1 + 1])
            late += sum(per_layer[l0:l1 + 1])
        stats[mode] = (float(np.mean(avg)), float(np.mean(final)), float(np.mean(max_layer)),
                       format_ratio(early, late))
    b, c = stats["baseline"], stats["curriculum"]
    get = lambda s, i: None if s is None else s[i]  # noqa: E731
    return [
        ["avg_specialized_heads", cell(get(b, 0), 1), cell(get(c, 0), 1)],
        ["improvement_pct", "-", pct_cell(pct_change(get(b, 0), get(c, 0)))],
        ["total_heads_final", cell(get(b, 1), 1), cell(get(c, 1), 1)],
        ["max_heads_per_layer", cell(get(b, 2), 1), cell(get(c, 2), 1)],
        ["early_late_ratio", get(b, 3) or NA, get(c, 3) or NA],
    ]


def table_sample_efficiency(ws: Workspace) -> list[list[str]]:
    rows = read_csv(_need(ws.analysis / "thresholds.csv", "eval"))
    out = []
    for r in rows:
        if r["mode"] != "curriculum":
            continue
        base = int(r["baseline_updates"]) if r["baseline_updates"] else None
        cur = int(r["mode_updates"]) if r["mode_updates"] else None
        sp = (base / cur) if base is not None and cur else None
        out.append([f"{float(r['threshold']):.2f}", cell(base), cell(cur), NA if sp is None else f"{sp:.1f}x"])
    return out


def table_attention_groups(runs) -> tuple[list[list[str]], list[list[str]]]:
    base_rs, cur_rs = _mode_runs(runs, "baseline"), _mode_runs(runs, "curriculum")
    if not base_rs or not cur_rs:
        return [], []
    avg = lambda rs: {m: np.mean([_final_attn(r)[m] for r in rs], axis=0) for m in METRICS}  # noqa: E731
    b, c = avg(base_rs), avg(cur_rs)
    layer_groups = cur_rs[0].config.analysis.layer_groups
    groups = {k: tuple(v) for k, v in sorted(layer_groups.items(), key=lambda kv: (kv[1][0], kv[0]))}
    grouped = [[g.group, g.metric, cell(g.baseline), cell(g.curriculum), cell(g.delta), cell(g.ratio)]
               for g in aggregate_groups(b, c, groups)]
    overall = []
    for m in METRICS:
        bm, cm = float(b[m].mean()), float(c[m].mean())
        overall.append([m, cell(bm, 3), cell(cm, 3), cell(delta(bm, cm), 3), pct_cell(pct_change(bm, cm), 2)])
    return grouped, overall


def table_final_performance(ws: Workspace) -> list[list[str]]:
    rows = read_csv(_need(ws.analysis / "eval_report.csv", "eval"))
    vals = {}
    for metric in ("final_success", "final_step_rate"):
        for mode in ("baseline", "curriculum"):
            v = [float(r[metric]) for r in rows if r["mode"] == mode and r[metric] not in ("", "nan")]
            vals[metric, mode] = _mean(v)
    out = []
    for metric, name in (("final_success", "success_rate"), ("final_step_rate", "step_rate")):
        a, b = vals[metric, "baseline"], vals[metric, "curriculum"]
        out.append([name, cell(a, 2), cell(b, 2), pct_cell(pct_change(a, b))])
    return out


def table_stage_counts(runs) -> list[list[str]]:
    out = []
    for r in _mode_runs(runs, "curriculum"):
        for i, row in enumerate(read_csv(r.path / "analysis" / "stage_counts.csv"), 1):
            out.append([str(r.seed), str(i), row["stage"], row["live_last"], row["unique_union"],
                        row["instance_count"]])
    return out


def table_retention(runs) -> list[list[str]]:
    out = []
    for r in _mode_runs(runs, "curriculum"):
        for row in read_csv(r.path / "analysis" / "retention.csv"):
            shared, source = int(row["shared"]), int(row["source"])
            p = retention_pct(shared, source)
            out.append([str(r.seed), row["from_stage"], row["to_stage"],
                        f"{shared} / {source} ({NA if p is None else f'{p:.1f}%'})"])
    return out


def table_emergence(runs) -> list[list[str]]:
    em = emergence_table(runs)
    b, c = em.get("baseline", {}), em.get("curriculum", {})
    out = []
    for a in ARCHETYPES:
        bf, ba = b.get(a, (None, None))
        cf, ca = c.get(a, (None, None))
        sp = speedup_pct(ba, ca) if ba is not None and ca is not None else None
        out.append([a, cell(bf, 1), cell(cf, 1), cell(ba, 1), cell(ca, 1), pct_cell(sp)])
    return out


def table_structure(ws: Workspace) -> list[list[str]]:
    rows = read_csv(_need(ws.analysis / "structure_phases.csv", "stats"))
    out = []
    for r in rows:
        f = lambda k: float(r[k]) if r[k] else None  # noqa: E731
        out.append([r["phase"], cell(f("baseline")), cell(f("curriculum")), pct_cell(f("delta_pp"), 2),
                    cell(f("t"), 2), cell(f("p_value"))])
    return out


# -- figures ------------------------------------------------------------------------

def _mean_by_step(rows_per_seed: list[list[tuple[int, float]]]) -> tuple[list[int], list[float]]:
    common = sorted(set.intersection(*(set(s for s, _ in rs) for rs in rows_per_seed)))
    maps = [dict(rs) for rs in rows_per_seed]
    return common, [float(np.mean([m[s] for m in maps])) for s in common]


def figures(ws: Workspace, runs) -> dict[str, str]:
    out = {}
    modes = [m for m in ("baseline", "curriculum", "shuffled", "reset_at_boundaries") if _mode_runs(runs, m)]
    heads, structure, layers = {}, {}, {}
    for m in modes:
        rs = _mode_runs(runs, m)
        heads[m] = _mean_by_step([[(int(x["step"]), float(x["reasoning"])) for x in _head_counts(r)] for r in rs])
        structure[m] = _mean_by_step([[(int(x["step"]), float(x["score"]))
                                       for x in read_csv(_need(r.path / "analysis" / "structure_score.csv",
                                                               "analyze-pca"))] for r in rs])
        layers[m] = list(np.mean([[int(x["count"]) for x in read_csv(r.path / "analysis" / "layer_counts.csv")]
                                  for r in rs], axis=0))
    out["fig_heads_over_training.svg"] = svg.line_chart(heads, "Specialized heads over training", "update",
                                                        "specialized heads")
    n_layers = runs[0].model.n_layers
    out["fig_layer_distribution.svg"] = svg.bar_chart([str(i) for i in range(n_layers)], layers,
                                                      "Specialized heads per layer (final)", "layer", "heads")
    curves = read_csv(_need(ws.analysis / "curves.csv", "eval"))
    for key, name, label in (("success", "fig_success_rate.svg", "success rate"),
                             ("step_rate", "fig_step_rate.svg", "step-by-step rate")):
        series = {m: ([int(r["step"]) for r in curves if r["mode"] == m],
                      [float(r[key]) for r in curves if r["mode"] == m]) for m in modes}
        out[name] = svg.line_chart(series, f"Validation {label}", "update", label)
    em = emergence_table(runs)
    out["fig_emergence_totals.svg"] = svg.bar_chart(
        list(ARCHETYPES), {m: [em[m][a][0] for a in ARCHETYPES] for m in modes if m in em},
        "Distinct specialized components (final)", "archetype", "count")
    if "baseline" in em and "curriculum" in em:
        pts = [(a, em["baseline"][a][1], em["curriculum"][a][1]) for a in ARCHETYPES]
        out["fig_emergence_area.svg"] = svg.scatter_chart(pts, "Emergence area", "baseline area",
                                                          "curriculum area")
    out["fig_structure_score.svg"] = svg.line_chart(structure, "PCA structure score", "update", "top-10 share")
    return out


# -- entry point ----------------------------------------------------------------------

def emit_report(ws: Workspace) -> list[Path]:
    """Write every table and chart under ``report/``; byte-identical on rerun."""
    runs = select_runs(ws)
    grouped, overall = table_attention_groups(runs)
    tables = {
        "table1_components.csv": (["metric", "baseline", "curriculum"], table_components(runs)),
        "table2_sample_efficiency.csv": (["threshold", "baseline", "curriculum", "speedup"],
                                         table_sample_efficiency(ws)),
        "table3_attention_groups.csv": (["group", "metric", "baseline", "curriculum", "delta", "ratio"], grouped),
        "table4_final_performance.csv": (["metric", "baseline", "curriculum", "delta_pct"],
                                         table_final_performance(ws)),
        "table5_stage_counts.csv": (["seed", "stage_index", "stage", "live_heads", "cumulative_unique",
                                     "cumulative_instances"], table_stage_counts(runs)),
        "table6_retention.csv": (["seed", "from_stage", "to_stage", "shared_over_source"], table_retention(runs)),
        "table7_structure_score.csv": (["phase", "baseline", "curriculum", "delta_pp", "t", "p_value"],
                                       table_structure(ws)),
        "table8_emergence.csv": (["archetype", "baseline_final", "curriculum_final", "baseline_auc",
                                  "curriculum_auc", "speedup_pct"], table_emergence(runs)),
        "table9_attention_overall.csv": (["metric", "baseline", "curriculum", "delta", "pct_change"], overall),
    }
    charts = figures(ws, runs)
    ws.report.mkdir(parents=True, exist_ok=True)
    written = []
    with ws.lock(ws.report):
        for name, (header, rows) in tables.items():
            _write(ws.report / name, header, rows)
            written.append(ws.report / name)
        for name, text in charts.items():
            (ws.report / name).write_text(text)
            written.append(ws.report / name)
    return written
