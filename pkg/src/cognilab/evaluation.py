"""Success rate, step-by-step rate and threshold-crossing sample efficiency."""

from __future__ import annotations

import math
import re
import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cognilab.corpus import QAItem, split_steps
from cognilab.model import ModelConfig, generate_greedy_batch
from cognilab.tokenizer import BOS, EOS, SEP, Tokenizer

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")
_WS = re.compile(r"\s+")


class EvalError(ValueError):
    pass


def normalize_answer(s: str) -> str:
    s = _PUNCT.sub("", s.lower())
    return _WS.sub(" ", s).strip()


def success_rate(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds):
        raise EvalError(f"{len(preds)} predictions vs {len(golds)} references")
    if not preds:
        raise EvalError("no items to score")
    return sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(preds, golds)) / len(preds)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def step_rate(pred_steps: Sequence[str], gold_steps: Sequence[str]) -> float:
    """Order-preserving matched steps (LCS of normalised steps) over gold length."""
    if not gold_steps:
        raise EvalError("gold step list is empty")
    p = [normalize_answer(s) for s in pred_steps]
    g = [normalize_answer(s) for s in gold_steps]
    return lcs_length(p, g) / len(g)


def parse_output(text: str) -> tuple[list[str], str]:
    """Split generated text into (steps, final answer); the answer follows the last delimiter."""
    parts = split_steps(text)
    if not parts:
        return [], ""
    return parts[:-1], parts[-1]


@dataclass
class EvalOutcome:
    predictions: list[str] = field(default_factory=list)
    pred_steps: list[list[str]] = field(default_factory=list)
    golds: list[str] = field(default_factory=list)
    gold_steps: list[list[str]] = field(default_factory=list)
    success: list[bool] = field(default_factory=list)
    step_scores: list[float | None] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if self.success else 0.0

    @property
    def step_rate(self) -> float:
        """Mean over items that have a gold rationale (0 when none do)."""
        scored = [s for s in self.step_scores if s is not None]
        return float(np.mean(scored)) if scored else 0.0


def encode_prompt(tok: Tokenizer, question: str) -> list[int]:
    return [BOS] + tok.encode(question) + [SEP]


def evaluate_items(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    tok: Tokenizer,
    items: Sequence[QAItem],
    max_new: int = 64,
    batch_size: int = 32,
) -> EvalOutcome:
    out = EvalOutcome()
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        prompts = [encode_prompt(tok, it.question)[-cfg.max_seq_len:] for it in chunk]
        gens = generate_greedy_batch(params, cfg, prompts, max_new, EOS)
        for it, ids in zip(chunk, gens):
            if ids and ids[-1] == EOS:
                ids = ids[:-1]
            steps, answer = parse_output(tok.decode(ids))
            out.predictions.append(answer)
            out.pred_steps.append(steps)
            out.golds.append(it.answer)
            out.gold_steps.append(list(it.rationale or []))
            out.success.append(normalize_answer(answer) == normalize_answer(it.answer))
            out.step_scores.append(step_rate(steps, it.rationale) if it.rationale else None)
    return out


# -- sample efficiency -----------------------------------------------------

def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing mean over the last ``window`` points (fewer at the start)."""
    if window < 1:
        raise EvalError("window must be >= 1")
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def first_crossing(steps: Sequence[int], values: Sequence[float], threshold: float) -> int | None:
    for s, v in zip(steps, values):
        if v >= threshold - 1e-12:
            return int(s)
    return None


@dataclass
class ThresholdRow:
    threshold: float
    baseline: int | None
    curriculum: int | None

    @property
    def speedup(self) -> float | None:
        if self.baseline is None or self.curriculum is None or self.curriculum == 0:
            return None
        return self.baseline / self.curriculum


def threshold_crossings(
    baseline: tuple[Sequence[int], Sequence[float]],
    curriculum: tuple[Sequence[int], Sequence[float]],
    thresholds: Sequence[float],
    window: int = 5,
) -> list[ThresholdRow]:
    """Updates each (smoothed) curve needs to reach every threshold."""
    rows = []
    bs, bv = baseline
    cs, cv = curriculum
    bsm, csm = moving_average(bv, window), moving_average(cv, window)
    for th in thresholds:
        rows.append(ThresholdRow(th, first_crossing(bs, bsm, th), first_crossing(cs, csm, th)))
    return rows


def mean_curve(curves: Sequence[tuple[Sequence[int], Sequence[float]]]) -> tuple[list[int], list[float]]:
    """Average several seeds' curves on the steps they all share."""
    common = sorted(set.intersection(*(set(int(s) for s in c[0]) for c in curves)))
    maps = [dict(zip((int(s) for s in c[0]), c[1])) for c in curves]
    return common, [float(np.mean([m[s] for m in maps])) for s in common]


def final_average(values: Sequence[float], k: int = 5) -> tuple[float, int]:
    """Mean of the last ``k`` available values and how many were used."""
    tail = [v for v in values if not (isinstance(v, float) and math.isnan(v))][-k:]
    if not tail:
        return float("nan"), 0
    return float(np.mean(tail)), len(tail)
