"""Specialised-head detection and bookkeeping.

A head is specialised at a checkpoint when its gradient saliency on a probe,
``mean_items |dL/dgate|``, exceeds the 95th percentile of saliencies pooled
from probes whose answer tokens were shuffled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from cognilab.autograd import Tape, Tensor
from cognilab.model import GATES, ModelConfig, forward_on_tape, wrap_params
from cognilab.trainer import Example, make_batch


class AnalysisError(ValueError):
    pass


class HeadId(NamedTuple):
    layer: int
    head: int


@dataclass
class SaliencyMap:
    values: np.ndarray  # [L, H]
    probe_id: str = ""
    step: int = 0


@dataclass(frozen=True)
class SpecializationRecord:
    step: int
    live: frozenset
    threshold: float


# -- saliency ------------------------------------------------------------------

def per_item_gate_grads(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    probe: Sequence[Example],
) -> np.ndarray:
    """``dL_i/dg[l, h]`` for every probe item i, shape [B, L, H].

    Each item gets its own copy of the (unit) gates, so one batched backward
    pass yields every per-item gradient.
    """
    if not probe:
        raise AnalysisError("empty probe")
    if not np.all(params[GATES] == 1.0):
        raise AnalysisError("saliency requires all gates at 1")
    batch = make_batch(probe, 1)
    b = len(probe)
    tape = Tape()
    gates = tape.watch(Tensor(np.ones((cfg.n_layers, b, cfg.n_heads))))
    logits, _ = forward_on_tape(tape, cfg, wrap_params(params), batch.tokens, gates=gates)
    loss = tape.weighted_nll(logits, batch.targets, batch.weights)
    tape.backward(loss)
    return gates.grad.transpose(1, 0, 2)


def head_saliency(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    probe: Sequence[Example],
    probe_id: str = "",
    step: int = 0,
) -> SaliencyMap:
    g = per_item_gate_grads(params, cfg, probe)
    return SaliencyMap(np.abs(g).mean(axis=0), probe_id, step)


def percentile(values: Iterable[float], q: float) -> float:
    """Linear-interpolation percentile: rank ``(n - 1) * q / 100`` into the sorted values."""
    v = sorted(float(x) for x in values)
    if not v:
        raise AnalysisError("percentile of empty pool")
    pos = (len(v) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def shuffle_answers(probe: Sequence[Example], rng: np.random.Generator) -> list[Example]:
    """Permute answer-token targets across the whole probe; inputs stay intact."""
    pooled = [t for ex in probe for t, m in zip(ex.targets, ex.mask) if m]
    perm = [pooled[i] for i in rng.permutation(len(pooled))]
    out, k = [], 0
    for ex in probe:
        targets = list(ex.targets)
        for i, m in enumerate(ex.mask):
            if m:
                targets[i] = perm[k]
                k += 1
        out.append(Example(ex.inputs, targets, ex.mask))
    return out


def null_pool(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    probe: Sequence[Example],
    n_null: int = 20,
    seed: int = 0,
) -> np.ndarray:
    if n_null < 20:
        raise AnalysisError("n_null must be >= 20")
    rng = np.random.default_rng(seed)
    maps = [head_saliency(params, cfg, shuffle_answers(probe, rng)).values for _ in range(n_null)]
    return np.concatenate([m.ravel() for m in maps])


def null_threshold(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    probe: Sequence[Example],
    n_null: int = 20,
    seed: int = 0,
) -> float:
    return percentile(null_pool(params, cfg, probe, n_null, seed), 95.0)


def detect(saliency: SaliencyMap, threshold: float) -> SpecializationRecord:
    live = frozenset(HeadId(int(l), int(h)) for l, h in zip(*np.nonzero(saliency.values > threshold)))
    return SpecializationRecord(saliency.step, live, threshold)


# -- layer distribution --------------------------------------------------------

def format_ratio(early: int, late: int) -> str:
    """``439:0`` style when either side is zero, else ``1:x`` normalised to the early count."""
    if early == 0 or late == 0:
        return f"{early}:{late}"
    r = f"{late / early:.1f}"
    return "1:" + (r[:-2] if r.endswith(".0") else r)


@dataclass
class LayerDistribution:
    per_layer: list[int]
    early: int
    late: int

    @property
    def ratio(self) -> str:
        return format_ratio(self.early, self.late)

    @property
    def max_per_layer(self) -> int:
        return max(self.per_layer) if self.per_layer else 0


def layer_distribution(
    live: Iterable[HeadId],
    n_layers: int,
    early_range: tuple[int, int],
    late_range: tuple[int, int],
) -> LayerDistribution:
    """Per-layer counts; ranges are inclusive ``(first, last)`` layer indices."""
    counts = [0] * n_layers
    for h in live:
        counts[h.layer] += 1
    e0, e1 = early_range
    l0, l1 = late_range
    early = sum(counts[i] for i in range(e0, min(e1, n_layers - 1) + 1))
    late = sum(counts[i] for i in range(l0, min(l1, n_layers - 1) + 1))
    return LayerDistribution(counts, early, late)


# -- stage bookkeeping ---------------------------------------------------------

@dataclass(frozen=True)
class Retention:
    shared: int
    source_size: int

    @property
    def pct(self) -> float | None:
        return None if self.source_size == 0 else 100.0 * self.shared / self.source_size

    def label(self) -> str:
        pct = self.pct
        return f"{self.shared} / {self.source_size} (n/a)" if pct is None else \
            f"{self.shared} / {self.source_size} ({pct:.1f}%)"


def stage_retention(source: Iterable, dest: Iterable) -> Retention:
    s, d = set(source), set(dest)
    return Retention(len(s & d), len(s))


@dataclass(frozen=True)
class StageCounts:
    live_last: int
    unique_union: int
    instance_count: int


def stage_counts(records: Sequence[SpecializationRecord]) -> StageCounts:
    """Live heads at the last record, distinct union, and (head, checkpoint) instances."""
    if not records:
        raise AnalysisError("stage_counts needs at least one record")
    union = set().union(*(r.live for r in records))
    return StageCounts(len(records[-1].live), len(union), sum(len(r.live) for r in records))


# -- archetypes and emergence ---------------------------------------------------

def check_induction_probe(tokens: Sequence[int]) -> int:
    """Validate ``[bos, x1..xk, x1..xk]`` with distinct x; returns k."""
    n = len(tokens) - 1
    if n < 2 or n % 2:
        raise AnalysisError("induction probe must be bos followed by two equal halves")
    k = n // 2
    first, second = list(tokens[1:k + 1]), list(tokens[k + 1:])
    if first != second or len(set(first)) != k:
        raise AnalysisError("induction probe halves differ or repeat tokens")
    return k


def induction_score(attention: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
    """Mean attention from each second-copy position to the token after its first occurrence.

    ``attention`` is [L, H, T, T] over the probe ``tokens``; returns [L, H].
    """
    k = check_induction_probe(tokens)
    att = np.asarray(attention, dtype=np.float64)
    if att.shape[-1] != len(tokens):
        raise AnalysisError("attention size does not match probe length")
    queries = np.arange(k + 1, 2 * k + 1)  # second copy of x_j sits at k + j
    keys = queries - k + 1  # token after first x_j sits at j + 1
    return att[..., queries, keys].mean(axis=-1)


def cumulative_distinct(active_sets: Sequence[Iterable]) -> list[int]:
    seen: set = set()
    out = []
    for s in active_sets:
        seen |= set(s)
        out.append(len(seen))
    return out


def emergence_auc(counts: Sequence[float]) -> float:
    """Left-sum area under a cumulative count curve over uniformly spaced checkpoints."""
    c = list(counts)
    if any(b < a for a, b in zip(c, c[1:])):
        raise AnalysisError("cumulative counts must be nondecreasing")
    return float(sum(c))


def speedup_pct(auc_base: float, auc_curric: float) -> float | None:
    """``(base - curric) / base * 100``; positive means earlier emergence under the curriculum."""
    if auc_base == 0:
        return None
    return (auc_base - auc_curric) / auc_base * 100.0


@dataclass
class EmergenceCurve:
    archetype: str
    steps: list[int]
    counts: list[int]

    @property
    def auc(self) -> float:
        return emergence_auc(self.counts)

    @property
    def final(self) -> int:
        return self.counts[-1] if self.counts else 0
