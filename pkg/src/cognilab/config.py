"""Run configuration: nested dataclasses with a strict JSON round trip."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from cognilab.model import ModelConfig

MODES = ("curriculum", "baseline", "shuffled", "reset_at_boundaries")


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    accum_steps: int = 8
    micro_batch: int = 4
    warmup_steps: int = 200
    base_lr: float = 1e-4
    stage_lr_ratios: list[float] = field(default_factory=lambda: [1.0, 0.7, 0.5, 0.2])
    baseline_lr_ratio: float = 0.6
    final_stage_batch_factor: float = 0.5

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.accum_steps < 1 or self.micro_batch < 1:
            raise ConfigError("accum_steps and micro_batch must be >= 1")


@dataclass
class DataConfig:
    items_per_tier: list[int] = field(default_factory=lambda: [5000, 4700, 3800, 2900])
    val_frac: float = 0.10
    target_vocab: int = 512
    max_tokens: int = 128
    classifier_items_per_tier: int = 125
    input_jsonl: str = ""


@dataclass
class PlanConfig:
    checkpoint_every: int = 500
    eval_every: int = 200
    eval_items: int = 1000
    max_new_tokens: int = 64
    dump_prompts: int = 8
    induction_len: int = 16


@dataclass
class AnalysisConfig:
    n_null: int = 20
    probe_items: int = 16
    induction_threshold: float = 0.4
    layer_groups: dict[str, list[int]] = field(
        default_factory=lambda: {"early": [0, 3], "middle": [4, 11], "late": [12, 23]})
    early_late: dict[str, list[int]] = field(
        default_factory=lambda: {"early": [0, 11], "late": [12, 23]})
    pca_samples: int = 1000
    pca_k: int = 10
    thresholds: list[float] = field(default_factory=lambda: [0.10, 0.15, 0.20, 0.25, 0.30])
    smoothing_window: int = 5
    permutation_resamples: int = 10000


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def desk_config() -> RunConfig:
    """CPU-sized defaults: data, two runs and every analysis in a few minutes."""
    return RunConfig(
        model=ModelConfig(n_layers=4, n_heads=4, d_model=128, vocab_size=512, max_seq_len=128),
        optim=OptimConfig(warmup_steps=4, base_lr=3e-3, micro_batch=8, accum_steps=2),
        data=DataConfig(items_per_tier=[1000, 940, 760, 580]),
        plan=PlanConfig(checkpoint_every=20, eval_every=20, eval_items=48, max_new_tokens=48,
                        dump_prompts=6, induction_len=12),
        analysis=AnalysisConfig(
            probe_items=12,
            layer_groups={"early": [0, 0], "middle": [1, 2], "late": [3, 3]},
            early_late={"early": [0, 1], "late": [2, 3]},
        ),
    )
