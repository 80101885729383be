"""Workspace layout and the steps behind each CLI subcommand.

Every step reads its inputs from the workspace, writes its outputs back and
returns a small summary dict. Steps that write a directory hold an advisory
lock on it for the duration.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from filelock import FileLock, Timeout

from cognilab import io
from cognilab.config import MODES, RunConfig
from cognilab.corpus import (STAGES, ComplexityModel, CorpusSplit, QAItem, Rejection, clean_item,
                             extract_features, generate_synthetic, read_jsonl, stratified_split,
                             train_complexity_classifier, write_jsonl, write_rejections)
from cognilab.evaluation import final_average, mean_curve, threshold_crossings
from cognilab.geometry import METRICS, average_stats, head_stats, pca_structure_score
from cognilab.heads import (SaliencyMap, SpecializationRecord, cumulative_distinct, detect, emergence_auc, head_saliency,
                            induction_score, layer_distribution, null_threshold, stage_counts,
                            stage_retention)
from cognilab.model import ModelConfig
from cognilab.stats import StatsError, paired_permutation_test, paired_t_test
from cognilab.tokenizer import Tokenizer, train_tokenizer
from cognilab.trainer import Example, build_plan, encode_example, round_robin, run_plan

log = logging.getLogger(__name__)

ARCHETYPES = ("induction", "reasoning", "pattern_matcher")


class PipelineError(RuntimeError):
    pass


def fmt(v) -> str:
    """Stable CSV cell: shortest round-trip repr for floats, blank for None."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def runs(self) -> Path:
        return self.root / "runs"

    @property
    def analysis(self) -> Path:
        return self.root / "analysis"

    @property
    def report(self) -> Path:
        return self.root / "report"

    def run_dir(self, mode: str, seed: int) -> Path:
        return self.runs / f"{mode}_s{seed}"

    def run_dirs(self) -> list[Path]:
        if not self.runs.exists():
            return []
        return sorted(p for p in self.runs.iterdir() if (p / "manifest.json").exists())

    def need(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise PipelineError(f"missing {path}; run `{producer}` first")
        return path

    @contextlib.contextmanager
    def lock(self, directory: Path) -> Iterator[None]:
        """Single-writer advisory lock on ``directory`` (lock file sits beside it)."""
        directory.parent.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(directory.parent / f".{directory.name}.lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout as exc:
            raise PipelineError(f"{directory} is locked by another writer") from exc
        try:
            yield
        finally:
            lock.release()

    # -- shared inputs
    def load_items(self, name: str, producer: str) -> list[QAItem]:
        rows = read_jsonl(self.need(self.data / name, producer))
        return [QAItem.from_dict(r) for r in rows]

    def load_split(self) -> CorpusSplit:
        return CorpusSplit.from_dict(json.loads(self.need(self.data / "split.json", "split").read_text()))

    def load_tokenizer(self) -> Tokenizer:
        return Tokenizer.load(self.need(self.data / "tokenizer.json", "split"))


# -- data steps ------------------------------------------------------------------

def gen_data(ws: Workspace, config: RunConfig) -> dict:
    """Unlabelled synthetic items for every tier, in tier order."""
    items = []
    for tier, n in zip(STAGES, config.data.items_per_tier):
        for it in generate_synthetic(tier, n, seed=config.seed):
            it.stage = None
            items.append(it)
    with ws.lock(ws.data):
        ws.data.mkdir(parents=True, exist_ok=True)
        write_jsonl(ws.data / "raw.jsonl", items)
    return {"items": len(items)}


def clean(ws: Workspace, config: RunConfig) -> dict:
    src = Path(config.data.input_jsonl) if config.data.input_jsonl else ws.data / "raw.jsonl"
    rows = read_jsonl(ws.need(src, "gen-data"))
    kept: list[QAItem] = []
    rejected: list[Rejection] = []
    for i, row in enumerate(rows):
        item_id = str(row.get("id") or f"item{i}")
        if "_error" in row:
            rejected.append(Rejection(item_id, "decode_error"))
            continue
        out = clean_item(row.get("question") or "", row.get("answer") or "", row.get("rationale"),
                         item_id=item_id, stage=row.get("stage"), max_tokens=config.data.max_tokens)
        (rejected if isinstance(out, Rejection) else kept).append(out)
    with ws.lock(ws.data):
        ws.data.mkdir(parents=True, exist_ok=True)
        write_jsonl(ws.data / "clean.jsonl", kept)
        write_rejections(ws.data / "rejections.csv", rejected)
    return {"kept": len(kept), "rejected": len(rejected)}


def classifier_training_set(config: RunConfig) -> list[QAItem]:
    """Tier-labelled synthetic items drawn with a seed disjoint from the corpus."""
    n = config.data.classifier_items_per_tier
    return [it for tier in STAGES for it in generate_synthetic(tier, n, seed=config.seed + 10_000)]


def label(ws: Workspace, config: RunConfig) -> dict:
    items = ws.load_items("clean.jsonl", "clean")
    model = train_complexity_classifier((extract_features(it), it.stage) for it in classifier_training_set(config))
    counts = {s: 0 for s in model.classes}
    for it in items:
        it.stage = model.label(it)
        counts[it.stage] += 1
    with ws.lock(ws.data):
        (ws.data / "classifier.json").write_text(json.dumps(model.to_dict(), sort_keys=True))
        write_jsonl(ws.data / "labeled.jsonl", items)
    return counts


def split(ws: Workspace, config: RunConfig) -> dict:
    items = ws.load_items("labeled.jsonl", "label")
    sp = stratified_split(items, config.data.val_frac, config.seed)
    texts = [it.question + "\n" + it.target_text() for it in sp.all_train()]
    tok = train_tokenizer(texts, config.data.target_vocab)
    with ws.lock(ws.data):
        (ws.data / "split.json").write_text(json.dumps(sp.to_dict(), sort_keys=True, ensure_ascii=False))
        tok.save(ws.data / "tokenizer.json")
    return {"train": len(sp.all_train()), "val": len(sp.all_val()), "vocab": tok.vocab_size}


def load_classifier(ws: Workspace) -> ComplexityModel:
    return ComplexityModel.from_dict(json.loads(ws.need(ws.data / "classifier.json", "label").read_text()))


# -- training ----------------------------------------------------------------------

def train(ws: Workspace, config: RunConfig, mode: str, seed: int | None = None) -> dict:
    if mode not in MODES:
        raise PipelineError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    seed = config.seed if seed is None else seed
    sp, tok = ws.load_split(), ws.load_tokenizer()
    plan = build_plan(config, sp, mode, seed)
    run_dir = ws.run_dir(mode, seed)
    with ws.lock(run_dir):
        if run_dir.exists():
            shutil.rmtree(run_dir)
        trainer = run_plan(config, plan, sp, tok, run_dir)
    return {"run": run_dir.name, "updates": trainer.step, "skipped": trainer.skipped}


# -- per-run loading -----------------------------------------------------------------

@dataclass
class RunInfo:
    path: Path
    mode: str
    seed: int
    config: RunConfig
    model: ModelConfig
    stage_order: list[str]

    @property
    def name(self) -> str:
        return self.path.name


def load_run(path: Path) -> RunInfo:
    m = json.loads((path / "manifest.json").read_text())
    return RunInfo(path, m["mode"], int(m["seed"]), RunConfig.from_dict(m["config"]),
                   ModelConfig(**m["model"]), list(m["stage_order"]))


def select_runs(ws: Workspace, run: str | None = None) -> list[RunInfo]:
    dirs = ws.run_dirs()
    if run is not None:
        dirs = [d for d in dirs if d.name == run]
    if not dirs:
        raise PipelineError("no trained runs found" + (f" named {run!r}" if run else "") + "; run `train` first")
    return [load_run(d) for d in dirs]


def checkpoint_stages(run: RunInfo) -> list[tuple[int, str]]:
    out = []
    for step in io.checkpoint_steps(run.path):
        m = json.loads((run.path / "checkpoints" / f"step_{step}" / "manifest.json").read_text())
        out.append((step, m["stage"]))
    if not out:
        raise PipelineError(f"{run.name} has no checkpoints")
    return out


# -- head analysis ---------------------------------------------------------------

def build_probes(run: RunInfo, sp: CorpusSplit, tok: Tokenizer) -> dict[str, list[Example]]:
    """Reasoning probe from multi-step tiers, pattern probe from the lexical tier."""
    n = run.config.analysis.probe_items
    groups = {"reasoning": {s: sp.val.get(s, []) for s in ("basic", "intermediate")},
              "pattern_matcher": {"simple": sp.val.get("simple", [])}}
    probes = {}
    for name, g in groups.items():
        items = round_robin(g, n)
        exs = [e for e in (encode_example(tok, it, run.model.max_seq_len) for it in items) if e is not None]
        if not exs:
            raise PipelineError(f"probe {name!r} is empty; the validation split lacks those tiers")
        probes[name] = exs
    return probes


def analyze_heads(ws: Workspace, run: RunInfo) -> dict:
    sp, tok = ws.load_split(), ws.load_tokenizer()
    probes = build_probes(run, sp, tok)
    acfg = run.config.analysis
    out_dir = run.path / "analysis"
    records: dict[str, list[SpecializationRecord]] = {a: [] for a in ARCHETYPES}
    stages = checkpoint_stages(run)
    with ws.lock(run.path):
        for step, stage in stages:
            params, _, _ = io.load_checkpoint(run.path / "checkpoints" / f"step_{step}")
            rows = []
            for name, exs in probes.items():
                sal = head_saliency(params, run.model, exs, name, step)
                tau = null_threshold(params, run.model, exs, acfg.n_null, seed=step)
                rec = detect(sal, tau)
                records[name].append(rec)
                rows += [(name, l, h, sal.values[l, h], tau, int((l, h) in rec.live))
                         for l in range(run.model.n_layers) for h in range(run.model.n_heads)]
            att, meta = io.load_dump(run.path / "dumps" / f"step_{step}" / "induction.atnd")
            score = induction_score(att, meta["tokens"])
            tau = acfg.induction_threshold
            rec = detect_scores(score, tau, step)
            records["induction"].append(rec)
            rows += [("induction", l, h, score[l, h], tau, int((l, h) in rec.live))
                     for l in range(run.model.n_layers) for h in range(run.model.n_heads)]
            write_csv(out_dir / f"heads_{step}.csv",
                      ["probe", "layer", "head", "saliency", "threshold", "specialized"], rows)
        summary = _head_tables(run, out_dir, stages, records)
    return summary


def detect_scores(score: np.ndarray, threshold: float, step: int) -> SpecializationRecord:
    return detect(SaliencyMap(np.asarray(score), "induction", step), threshold)


def _head_tables(run: RunInfo, out_dir: Path, stages, records) -> dict:
    steps = [s for s, _ in stages]
    reasoning = records["reasoning"]
    write_csv(out_dir / "head_counts.csv", ["step", "stage", *ARCHETYPES],
              [(s, st, *(len(records[a][i].live) for a in ARCHETYPES)) for i, (s, st) in enumerate(stages)])

    # stage bookkeeping over contiguous runs of the same stage label
    blocks: list[tuple[str, list[int]]] = []
    for i, (_, st) in enumerate(stages):
        if blocks and blocks[-1][0] == st:
            blocks[-1][1].append(i)
        else:
            blocks.append((st, [i]))
    rows = []
    for st, idx in blocks:
        c = stage_counts([reasoning[i] for i in idx])
        rows.append((st, steps[idx[0]], steps[idx[-1]], c.live_last, c.unique_union, c.instance_count))
    write_csv(out_dir / "stage_counts.csv",
              ["stage", "first_step", "last_step", "live_last", "unique_union", "instance_count"], rows)
    rows = []
    for (s0, i0), (s1, i1) in zip(blocks, blocks[1:]):
        r = stage_retention(reasoning[i0[-1]].live, reasoning[i1[0]].live)
        rows.append((s0, s1, r.shared, r.source_size, r.pct))
    write_csv(out_dir / "retention.csv", ["from_stage", "to_stage", "shared", "source", "pct"], rows)

    rows = []
    for a in ARCHETYPES:
        cum = cumulative_distinct([r.live for r in records[a]])
        rows += [(a, s, len(r.live), c) for s, r, c in zip(steps, records[a], cum)]
    write_csv(out_dir / "emergence.csv", ["archetype", "step", "active", "cumulative"], rows)

    acfg = run.config.analysis
    final = reasoning[-1]
    early, late = acfg.early_late["early"], acfg.early_late["late"]
    dist = layer_distribution(final.live, run.model.n_layers, tuple(early), tuple(late))
    write_csv(out_dir / "layer_counts.csv", ["layer", "count"], list(enumerate(dist.per_layer)))
    return {"checkpoints": len(steps), "final_reasoning_heads": len(final.live),
            "early_late": dist.ratio}


# -- attention geometry and PCA --------------------------------------------------------

def _prompt_files(step_dir: Path, pattern: str) -> list[Path]:
    return sorted(step_dir.glob(pattern))


def analyze_attn(ws: Workspace, run: RunInfo) -> dict:
    rows = []
    stages = checkpoint_stages(run)
    for step, _ in stages:
        per_prompt = []
        for f in _prompt_files(run.path / "dumps" / f"step_{step}", "prompt_*.atnd"):
            att, _ = io.load_dump(f)
            per_prompt.append(head_stats(att))
        if not per_prompt:
            raise PipelineError(f"{run.name}: no attention dumps at step {step}")
        st = average_stats(per_prompt)
        for l in range(run.model.n_layers):
            for h in range(run.model.n_heads):
                rows.append((step, l, h, *(st[m][l, h] for m in METRICS)))
    with ws.lock(run.path):
        write_csv(run.path / "analysis" / "attn_stats.csv", ["step", "layer", "head", *METRICS], rows)
    return {"checkpoints": len(stages)}


def analyze_pca(ws: Workspace, run: RunInfo) -> dict:
    acfg = run.config.analysis
    rows = []
    for step, stage in checkpoint_stages(run):
        hidden = [io.load_hidden(f) for f in _prompt_files(run.path / "dumps" / f"step_{step}", "hidden_*.npy")]
        if not hidden:
            raise PipelineError(f"{run.name}: no hidden-state dumps at step {step}")
        layers = [np.concatenate([h[l] for h in hidden]) for l in range(hidden[0].shape[0])]
        rows.append((step, stage, pca_structure_score(layers, acfg.pca_samples, acfg.pca_k, seed=run.seed)))
    with ws.lock(run.path):
        write_csv(run.path / "analysis" / "structure_score.csv", ["step", "stage", "score"], rows)
    return {"checkpoints": len(rows)}


# -- evaluation summaries --------------------------------------------------------------

def eval_curve(run: RunInfo) -> tuple[list[int], list[float], list[float]]:
    rows = read_csv(run.path / "logs" / "metrics.csv")
    ev = [r for r in rows if r["success"] != ""]
    return ([int(r["step"]) for r in ev], [float(r["success"]) for r in ev],
            [float(r["step_rate"]) for r in ev])


def by_mode(runs: Sequence[RunInfo]) -> dict[str, dict[int, RunInfo]]:
    out: dict[str, dict[int, RunInfo]] = {}
    for r in runs:
        out.setdefault(r.mode, {})[r.seed] = r
    return out


def evaluate(ws: Workspace) -> dict:
    runs = select_runs(ws)
    rows, curves = [], {}
    for r in runs:
        steps, succ, stepr = eval_curve(r)
        curves[r.name] = (steps, succ, stepr)
        s, n = final_average(succ)
        sr, _ = final_average(stepr)
        rows.append((r.name, r.mode, r.seed, s, sr, n, steps[-1] if steps else 0))
    modes = by_mode(runs)
    th_rows, curve_rows = [], []
    for mode, seeds in sorted(modes.items()):
        mc = mean_curve([curves[seeds[s].name][:2] for s in sorted(seeds)])
        mr = mean_curve([(curves[seeds[s].name][0], curves[seeds[s].name][2]) for s in sorted(seeds)])
        curve_rows += [(mode, st, v, w) for st, v, w in zip(mc[0], mc[1], mr[1])]
    cfg = runs[0].config.analysis
    if "baseline" in modes:
        bseeds = modes["baseline"]
        for mode, seeds in sorted(modes.items()):
            if mode == "baseline":
                continue
            common = sorted(set(bseeds) & set(seeds))
            if not common:
                continue
            base = mean_curve([curves[bseeds[s].name][:2] for s in common])
            other = mean_curve([curves[seeds[s].name][:2] for s in common])
            for t in threshold_crossings(base, other, cfg.thresholds, cfg.smoothing_window):
                th_rows.append((mode, t.threshold, t.baseline, t.curriculum, t.speedup))
    with ws.lock(ws.analysis):
        write_csv(ws.analysis / "eval_report.csv",
                  ["run", "mode", "seed", "final_success", "final_step_rate", "evals_averaged", "last_step"], rows)
        write_csv(ws.analysis / "curves.csv", ["mode", "step", "success", "step_rate"], curve_rows)
        write_csv(ws.analysis / "thresholds.csv",
                  ["mode", "threshold", "baseline_updates", "mode_updates", "speedup"], th_rows)
    return {"runs": len(rows)}


# -- statistics ------------------------------------------------------------------------

def crossing_step(run: RunInfo, threshold: float) -> int:
    """Updates to reach ``threshold`` on the smoothed success curve; unreached counts as total + 1."""
    steps, succ, _ = eval_curve(run)
    acfg = run.config.analysis
    crossing = threshold_crossings((steps, succ), (steps, succ), [threshold], acfg.smoothing_window)[0].baseline
    return crossing if crossing is not None else (steps[-1] + 1 if steps else 1)


def _safe(test, *args, **kw):
    try:
        return test(*args, **kw)
    except StatsError as exc:
        log.info("test skipped: %s", exc)
        return None


def phase_boundary(run: RunInfo) -> int:
    """First checkpoint step of the final curriculum stage."""
    stages = checkpoint_stages(run)
    last = run.stage_order[-1]
    return next(s for s, st in stages if st == last)


def run_stats(ws: Workspace) -> dict:
    runs = select_runs(ws)
    modes = by_mode(runs)
    rows = []
    resamples = runs[0].config.analysis.permutation_resamples
    finals = {r.name: (final_average(eval_curve(r)[1])[0], final_average(eval_curve(r)[2])[0]) for r in runs}

    def paired(a_mode, b_mode):
        common = sorted(set(modes.get(a_mode, {})) & set(modes.get(b_mode, {})))
        return common, modes.get(a_mode, {}), modes.get(b_mode, {})

    for other in ("curriculum", "shuffled", "reset_at_boundaries"):
        common, A, B = paired(other, "baseline")
        for k, metric in enumerate(("final_success", "final_step_rate")):
            a = [finals[A[s].name][k] for s in common]
            b = [finals[B[s].name][k] for s in common]
            res = _safe(paired_permutation_test, a, b, resamples=resamples) if len(common) >= 2 else None
            rows.append(("permutation", f"{other}-baseline", metric, len(common), res))
    common, A, B = paired("curriculum", "shuffled")
    th = 0.25
    a = [crossing_step(A[s], th) for s in common]
    b = [crossing_step(B[s], th) for s in common]
    res = _safe(paired_permutation_test, a, b, resamples=resamples) if len(common) >= 2 else None
    rows.append(("permutation", "curriculum-shuffled", f"updates_to_{th}", len(common), res))

    phase_rows = []
    common, C, B = paired("curriculum", "baseline")
    if common:
        pairs = {"early": ([], []), "late": ([], [])}
        for s in common:
            cs = {int(r["step"]): float(r["score"]) for r in read_csv(C[s].path / "analysis" / "structure_score.csv")}
            bs = {int(r["step"]): float(r["score"]) for r in read_csv(B[s].path / "analysis" / "structure_score.csv")}
            edge = phase_boundary(C[s])
            for step in sorted(set(cs) & set(bs)):
                ph = "early" if step < edge else "late"
                pairs[ph][0].append(cs[step])
                pairs[ph][1].append(bs[step])
        for ph, (c, b) in pairs.items():
            res = _safe(paired_t_test, c, b) if len(c) >= 2 else None
            rows.append(("paired_t", "curriculum-baseline", f"structure_score_{ph}", len(c), res))
            phase_rows.append((ph, float(np.mean(b)) if b else None, float(np.mean(c)) if c else None,
                               (float(np.mean(c)) - float(np.mean(b))) * 100 if c else None,
                               res.statistic if res else None, res.p_value if res else None))
    out = [(kind, comp, metric, n,
            res.statistic if res else None, res.p_value if res else None,
            res.method if res else "n/a", res.df if res else None) for kind, comp, metric, n, res in rows]
    with ws.lock(ws.analysis):
        write_csv(ws.analysis / "stats.csv",
                  ["test", "comparison", "metric", "n", "statistic", "p_value", "method", "df"], out)
        write_csv(ws.analysis / "structure_phases.csv",
                  ["phase", "baseline", "curriculum", "delta_pp", "t", "p_value"], phase_rows)
    return {"tests": len(out)}


def emergence_table(runs: Sequence[RunInfo]) -> dict[str, dict[str, tuple[float, float]]]:
    """Per mode and archetype: mean over seeds of (final distinct count, emergence area)."""
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for mode, seeds in by_mode(runs).items():
        acc: dict[str, list[tuple[int, float]]] = {a: [] for a in ARCHETYPES}
        for s in sorted(seeds):
            rows = read_csv(seeds[s].path / "analysis" / "emergence.csv")
            for a in ARCHETYPES:
                cum = [int(r["cumulative"]) for r in rows if r["archetype"] == a]
                acc[a].append((cum[-1] if cum else 0, emergence_auc(cum)))
        out[mode] = {a: (float(np.mean([x[0] for x in v])), float(np.mean([x[1] for x in v])))
                     for a, v in acc.items() if v}
    return out
