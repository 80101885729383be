"""AdamW training under the curriculum, baseline and ablation regimes."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cognilab import io
from cognilab.autograd import Tape
from cognilab.config import MODES, OptimConfig, RunConfig
from cognilab.corpus import STAGES, CorpusSplit, QAItem
from cognilab.evaluation import evaluate_items
from cognilab.model import (
    ModelConfig,
    forward,
    forward_on_tape,
    init_params,
    trainable_names,
    wrap_params,
)
from cognilab.tokenizer import BOS, EOS, SEP, Tokenizer

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "stage", "lr", "loss", "success", "step_rate"]


class TrainingError(RuntimeError):
    pass


# -- optimisation primitives -------------------------------------------------

def lr_at(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` steps, then cosine to 0 at ``total``."""
    if total <= warmup:
        raise TrainingError(f"schedule total ({total}) must exceed warmup ({warmup})")
    if not 0 <= step <= total:
        raise TrainingError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray], names: Sequence[str] | None = None) -> "OptimState":
        names = list(params) if names is None else list(names)
        return cls({k: np.zeros_like(params[k]) for k in names},
                   {k: np.zeros_like(params[k]) for k in names}, 0)

    def reset(self) -> None:
        for k in self.m:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0
        self.t = 0

    def to_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    cfg: OptimConfig,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam step with decoupled weight decay, in place."""
    if lr < 0:
        raise TrainingError("learning rate must be >= 0")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise TrainingError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for k, g in grads.items():
        m, v, p = state.m[k], state.v[k], params[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p -= lr * cfg.weight_decay * p + lr * update
    return params, state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], clip_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if norm > clip_norm:
        s = clip_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


# -- batching ------------------------------------------------------------------

@dataclass
class Example:
    inputs: list[int]
    targets: list[int]
    mask: list[bool]


def encode_example(tok: Tokenizer, item: QAItem, max_len: int) -> Example | None:
    """``[bos] question [sep] steps+answer [eos]``; loss only on the part after ``sep``."""
    q = tok.encode(item.question)
    a = tok.encode(item.target_text())
    seq = [BOS] + q + [SEP] + a + [EOS]
    if len(seq) - 1 > max_len:
        return None
    n_prompt = len(q) + 1
    inputs, targets = seq[:-1], seq[1:]
    return Example(inputs, targets, [i >= n_prompt for i in range(len(inputs))])


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    weights: np.ndarray


def make_batch(examples: Sequence[Example], denom: int) -> Batch:
    """Right-pad; each row's loss is its mean over answer tokens, divided by ``denom``."""
    width = max(len(e.inputs) for e in examples)
    b = len(examples)
    tokens = np.zeros((b, width), np.int64)
    targets = np.zeros((b, width), np.int64)
    weights = np.zeros((b, width))
    for r, e in enumerate(examples):
        n = len(e.inputs)
        tokens[r, :n] = e.inputs
        targets[r, :n] = e.targets
        mask = np.asarray(e.mask, float)
        weights[r, :n] = mask / (mask.sum() * denom)
    return Batch(tokens, targets, weights)


def loss_and_grads(params: dict[str, np.ndarray], cfg: ModelConfig, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    P = wrap_params(params, tape, trainable=True)
    logits, _ = forward_on_tape(tape, cfg, P, batch.tokens)
    loss = tape.weighted_nll(logits, batch.targets, batch.weights)
    tape.backward(loss)
    return loss.item(), {k: P[k].grad for k in trainable_names(params)}


def accumulate_grads(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    examples: Sequence[Example],
    micro_batch: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """Sum micro-batch gradients so the result equals one pass over ``examples``."""
    total_loss, acc = 0.0, None
    for i in range(0, len(examples), micro_batch):
        loss, g = loss_and_grads(params, cfg, make_batch(examples[i:i + micro_batch], len(examples)))
        total_loss += loss
        if acc is None:
            acc = g
        else:
            for k in acc:
                acc[k] = acc[k] + g[k]
    return total_loss, acc


# -- plans ---------------------------------------------------------------------

@dataclass
class StageSpec:
    stage: str
    items: list[QAItem]
    peak_lr: float
    epochs: int = 1

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise TrainingError("peak_lr must be positive")


@dataclass
class RunPlan:
    mode: str
    seed: int
    checkpoint_every: int
    eval_every: int
    stages: list[StageSpec]
    baseline_lr: float = 6e-5

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainingError(f"unknown mode {self.mode!r}")


def effective_batch(cfg: OptimConfig, stage: str) -> tuple[int, int]:
    """(micro_batch, updates' item count) for a stage; the final tier halves the micro-batch."""
    micro = cfg.micro_batch
    if stage == STAGES[-1]:
        micro = max(1, int(round(micro * cfg.final_stage_batch_factor)))
    return micro, micro * cfg.accum_steps


def stage_updates(cfg: OptimConfig, stage: str, n_items: int) -> int:
    return math.ceil(n_items / effective_batch(cfg, stage)[1])


def stage_order(mode: str, seed: int, n: int) -> list[int]:
    if mode != "shuffled" or n < 2:
        return list(range(n))
    rng = np.random.default_rng([seed, 7])
    while True:
        order = [int(i) for i in rng.permutation(n)]
        if order != list(range(n)):
            return order


def build_plan(config: RunConfig, split: CorpusSplit, mode: str, seed: int | None = None) -> RunPlan:
    seed = config.seed if seed is None else seed
    ratios = config.optim.stage_lr_ratios
    present = [s for s in STAGES if split.train.get(s)]
    specs = [StageSpec(s, list(split.train[s]), config.optim.base_lr * ratios[STAGES.index(s)]) for s in present]
    specs = [specs[i] for i in stage_order(mode, seed, len(specs))]
    return RunPlan(mode, seed, config.plan.checkpoint_every, config.plan.eval_every, specs,
                   config.optim.base_lr * config.optim.baseline_lr_ratio)


def total_updates(plan: RunPlan, cfg: OptimConfig) -> int:
    """Curriculum-equivalent update count; every mode runs exactly this many."""
    return sum(stage_updates(cfg, s.stage, len(s.items)) * s.epochs for s in plan.stages)


def round_robin(groups: dict[str, list[QAItem]], n: int) -> list[QAItem]:
    """Deterministic stage-balanced selection of up to ``n`` items."""
    pools = [list(groups[s]) for s in STAGES if groups.get(s)]
    out, i = [], 0
    while len(out) < n and any(pools):
        pool = pools[i % len(pools)]
        if pool:
            out.append(pool.pop(0))
        i += 1
    return out


def induction_probe(vocab_size: int, k: int, seed: int = 1234) -> list[int]:
    """``[bos, x1..xk, x1..xk]`` with distinct non-special token ids."""
    rng = np.random.default_rng(seed)
    pool = [i for i in range(vocab_size) if i not in (BOS, EOS, SEP)]
    xs = [int(pool[i]) for i in rng.choice(len(pool), size=k, replace=False)]
    return [BOS] + xs + xs


@dataclass
class Trainer:
    """Mutable training state plus the run-directory writer."""

    config: RunConfig
    model_cfg: ModelConfig
    tok: Tokenizer
    plan: RunPlan
    run_dir: Path | None
    params: dict[str, np.ndarray] = field(init=False)
    state: OptimState = field(init=False)
    step: int = 0
    rng: np.random.Generator = field(init=False)
    eval_set: list[QAItem] = field(default_factory=list)
    dump_set: list[QAItem] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        self.params = init_params(self.model_cfg)
        self.state = OptimState.zeros(self.params, trainable_names(self.params))
        self.rng = np.random.default_rng([self.plan.seed, 1])

    # -- data
    def encode(self, items: Sequence[QAItem]) -> list[Example]:
        out = []
        for it in items:
            ex = encode_example(self.tok, it, self.model_cfg.max_seq_len)
            if ex is None:
                self.skipped += 1
            else:
                out.append(ex)
        return out

    # -- one optimizer update
    def update(self, examples: Sequence[Example], micro: int, lr: float, stage: str, total: int) -> float:
        loss, grads = accumulate_grads(self.params, self.model_cfg, examples, micro)
        grads, _ = clip_global_norm(grads, self.config.optim.clip_norm)
        try:
            adamw_step(self.params, grads, self.state, lr, self.config.optim)
        except TrainingError:
            log.error("aborting run at update %d: %s", self.step + 1, "non-finite gradient")
            raise
        self.step += 1
        row = {"step": self.step, "stage": stage, "lr": lr, "loss": loss, "success": "", "step_rate": ""}
        if self.step % self.plan.eval_every == 0 or self.step == total:
            self.evaluate(row)
        self.metrics.append(row)
        return loss

    def evaluate(self, row: dict) -> None:
        if not self.eval_set:
            return
        out = evaluate_items(self.params, self.model_cfg, self.tok, self.eval_set,
                             max_new=self.config.plan.max_new_tokens)
        row["success"] = out.success_rate
        row["step_rate"] = out.step_rate

    # -- checkpoints
    def checkpoint(self, stage: str) -> None:
        if self.run_dir is None:
            return
        meta = {"step": self.step, "stage": stage, "mode": self.plan.mode, "seed": self.plan.seed,
                "config": self.config.to_dict(), "rng_state": self.rng.bit_generator.state,
                "tokenizer_hash": self.tok.digest()}
        io.save_checkpoint(self.run_dir / "checkpoints" / f"step_{self.step}", self.params,
                           self.state.to_dict(), meta)
        self.write_dumps(stage)

    def write_dumps(self, stage: str) -> None:
        d = self.run_dir / "dumps" / f"step_{self.step}"
        d.mkdir(parents=True, exist_ok=True)
        digest = self.tok.digest()
        for i, it in enumerate(self.dump_set):
            ids = ([BOS] + self.tok.encode(it.question) + [SEP] + self.tok.encode(it.target_text()))
            ids = ids[: self.model_cfg.max_seq_len]
            _, bundle = forward(self.params, self.model_cfg, ids, capture=True)
            meta = {"prompt_id": it.id, "step": self.step, "stage": stage,
                    "tokenizer_hash": digest, "tokens": ids}
            io.save_dump(d / f"prompt_{i:02d}.atnd", bundle.attention, meta)
            io.save_hidden(d / f"hidden_{i:02d}.npy", bundle.hidden_states)
        ids = induction_probe(self.model_cfg.vocab_size, self.config.plan.induction_len)
        _, bundle = forward(self.params, self.model_cfg, ids, capture=True)
        io.save_dump(d / "induction.atnd", bundle.attention,
                     {"prompt_id": "induction", "step": self.step, "stage": stage,
                      "tokenizer_hash": digest, "tokens": ids})

    def flush_metrics(self) -> None:
        if self.run_dir is None:
            return
        path = self.run_dir / "logs" / "metrics.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, METRIC_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.metrics:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_stage(trainer: Trainer, spec: StageSpec, total: int, boundary: bool) -> list[float]:
    """One epoch over ``spec.items`` with the stage's own warmup+cosine schedule."""
    if not spec.items:
        raise TrainingError(f"stage {spec.stage!r} has no items")
    if boundary and trainer.plan.mode == "reset_at_boundaries":
        trainer.state.reset()
    cfg = trainer.config.optim
    micro, eff = effective_batch(cfg, spec.stage)
    examples = trainer.encode(spec.items)
    losses = []
    for _ in range(spec.epochs):
        order = trainer.rng.permutation(len(examples))
        n_updates = math.ceil(len(examples) / eff)
        for u in range(n_updates):
            batch = [examples[i] for i in order[u * eff:(u + 1) * eff]]
            lr = lr_at(u + 1, cfg.warmup_steps, n_updates + 1, spec.peak_lr)
            losses.append(trainer.update(batch, micro, lr, spec.stage, total))
            if trainer.step % trainer.plan.checkpoint_every == 0 or u == n_updates - 1:
                trainer.checkpoint(spec.stage)
    return losses


def run_baseline(trainer: Trainer, total: int) -> list[float]:
    """Constant-LR training on two shuffled sweeps of the pooled corpus, cut at ``total`` updates."""
    cfg = trainer.config.optim
    pooled = [it for s in trainer.plan.stages for it in s.items]
    examples = trainer.encode(pooled)
    micro, eff = effective_batch(cfg, "all")
    stream: list[Example] = []
    while len(stream) < total * eff:
        for _ in range(2):
            stream.extend(examples[i] for i in trainer.rng.permutation(len(examples)))
    losses = []
    for u in range(total):
        batch = stream[u * eff:(u + 1) * eff]
        losses.append(trainer.update(batch, micro, trainer.plan.baseline_lr, "all", total))
        if trainer.step % trainer.plan.checkpoint_every == 0 or u == total - 1:
            trainer.checkpoint("all")
    return losses


def run_plan(
    config: RunConfig,
    plan: RunPlan,
    split: CorpusSplit,
    tok: Tokenizer,
    run_dir: str | Path | None,
) -> Trainer:
    """Execute a plan; writes manifest, checkpoints, dumps and metrics under ``run_dir``."""
    model_cfg = replace(config.model, seed=plan.seed, vocab_size=max(config.model.vocab_size, tok.vocab_size))
    run_dir = Path(run_dir) if run_dir is not None else None
    trainer = Trainer(config, model_cfg, tok, plan, run_dir)
    trainer.eval_set = round_robin(split.val, config.plan.eval_items)
    trainer.dump_set = round_robin(split.val, config.plan.dump_prompts)
    # drop items that do not fit the context before sizing stages, so every mode runs the same count
    for s in plan.stages:
        keep = [it for it in s.items if encode_example(tok, it, model_cfg.max_seq_len) is not None]
        trainer.skipped += len(s.items) - len(keep)
        s.items = keep
    total = total_updates(plan, config.optim)
    for s in plan.stages:
        n = stage_updates(config.optim, s.stage, len(s.items))
        if plan.mode != "baseline" and n + 1 <= config.optim.warmup_steps:
            raise TrainingError(f"stage {s.stage!r} has {n} updates, not more than warmup {config.optim.warmup_steps}")
    if run_dir is not None:
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            manifest = {"mode": plan.mode, "seed": plan.seed, "config": config.to_dict(),
                        "model": model_cfg.to_dict(), "stage_order": [s.stage for s in plan.stages],
                        "total_updates": total, "tokenizer_hash": tok.digest(),
                        "eval_items": [it.id for it in trainer.eval_set],
                        "dump_prompts": [it.id for it in trainer.dump_set]}
            (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        except OSError as exc:
            raise TrainingError(f"cannot write run directory {run_dir}: {exc}") from exc
    if plan.mode == "baseline":
        run_baseline(trainer, total)
    else:
        for i, spec in enumerate(plan.stages):
            run_stage(trainer, spec, total, boundary=i > 0)
    if run_dir is not None:
        trainer.flush_metrics()
        summary = {"total_updates": trainer.step, "skipped_items": trainer.skipped}
        (run_dir / "logs" / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return trainer
