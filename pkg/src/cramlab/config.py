"""Run configuration: line-oriented `section.key = value` text files.

Every field defaults to the crammed recipe, so an empty file is a
valid configuration. Ablation presets mirror the recipe-component
rows of the results table (original data / training / architecture
and the minimal-modification variants) plus a vocabulary sweep.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields

from .budget import Budget
from .corpus import PipelineConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .serde import dataclass_to_strs, parse_scalar, render_scalar
from .trainer import (
    BatchRampConfig, MaskingConfig, OptimizerConfig, ScheduleConfig,
)


@dataclass
class TokenizerSection:
    vocab_size: int = 32768
    input: str = ""
    max_chars_per_word: int = 100


@dataclass
class TrainSection:
    schedule_kind: str = "one_cycle"
    peak_lr: float = 1e-3
    peak_fraction: float = 0.5
    micro_batch: int = 128
    final_batch: int = 4096
    ramp_end_fraction: float = 0.6
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-12
    weight_decay: float = 0.01
    clip_norm: float | None = 0.5
    mask_rate: float = 0.15
    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1
    budget_steps: int | None = None
    budget_hours: float | None = None
    seed: int = 0

    def schedule(self, total_steps: int = 0) -> ScheduleConfig:
        return ScheduleConfig(kind=self.schedule_kind, peak_lr=self.peak_lr,
                              peak_fraction=self.peak_fraction,
                              total_steps=total_steps)

    def ramp(self) -> BatchRampConfig:
        return BatchRampConfig(micro_batch=self.micro_batch,
                               final_batch=self.final_batch,
                               ramp_end_fraction=self.ramp_end_fraction)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                               weight_decay=self.weight_decay,
                               clip_norm=self.clip_norm)

    def masking(self) -> MaskingConfig:
        return MaskingConfig(rate=self.mask_rate, p_mask=self.p_mask,
                             p_random=self.p_random, p_keep=self.p_keep)

    def budget(self) -> Budget:
        if (self.budget_steps is None) == (self.budget_hours is None):
            raise ConfigurationError(
                "exactly one of train.budget_steps / train.budget_hours required"
            )
        if self.budget_steps is not None:
            return Budget(kind="steps", amount=float(self.budget_steps))
        return Budget(kind="seconds", amount=self.budget_hours * 3600.0)


@dataclass
class ReportSection:
    curve_interval: int = 50
    device: str = "rtx2080ti"


@dataclass
class RunConfig:
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    report: ReportSection = field(default_factory=ReportSection)

    def sections(self) -> dict[str, object]:
        return {
            "tokenizer": self.tokenizer,
            "pipeline": self.pipeline,
            "model": self.model,
            "train": self.train,
            "report": self.report,
        }

    def set(self, dotted_key: str, value: str) -> None:
        section_name, _, key = dotted_key.partition(".")
        section = self.sections().get(section_name)
        if section is None or not key:
            raise ConfigurationError(f"unknown config key {dotted_key!r}")
        hints = typing.get_type_hints(type(section))
        names = {f.name for f in fields(section)}
        if key not in names:
            raise ConfigurationError(f"unknown config key {dotted_key!r}")
        setattr(section, key, parse_scalar(hints[key], value))

    def validate(self) -> None:
        self.pipeline.validate()
        self.model.validate()
        if self.report.curve_interval < 1:
            raise ConfigurationError("report.curve_interval must be positive")
        if self.tokenizer.vocab_size != self.model.vocab_size:
            raise ConfigurationError(
                "tokenizer.vocab_size and model.vocab_size disagree "
                f"({self.tokenizer.vocab_size} vs {self.model.vocab_size})"
            )
        if self.pipeline.seq_len != self.model.seq_len:
            raise ConfigurationError(
                "pipeline.seq_len and model.seq_len disagree "
                f"({self.pipeline.seq_len} vs {self.model.seq_len})"
            )


def parse_run_config(text: str) -> RunConfig:
    cfg = RunConfig()
    apply_config_text(cfg, text)
    return cfg


def apply_config_text(cfg: RunConfig, text: str) -> RunConfig:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        cfg.set(key.strip(), value.strip())
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    for key, value in overrides.items():
        cfg.set(key, str(value))
    return cfg


def load_run_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def render_run_config(cfg: RunConfig) -> str:
    """Full dump, one line per field, defaults included."""
    lines = []
    for name, section in cfg.sections().items():
        for key, value in dataclass_to_strs(section).items():
            lines.append(f"{name}.{key} = {value}")
    return "\n".join(lines) + "\n"


def render_sections(cfg: RunConfig, names: tuple[str, ...]) -> str:
    text = render_run_config(cfg)
    keep = [ln for ln in text.splitlines()
            if ln.partition(".")[0] in names]
    return "\n".join(keep) + "\n"


def config_diff(a: RunConfig, b: RunConfig) -> dict[str, tuple[str, str]]:
    """Dotted keys whose rendered values differ, key -> (a, b)."""
    out: dict[str, tuple[str, str]] = {}
    for name, section_a in a.sections().items():
        section_b = b.sections()[name]
        sa, sb = dataclass_to_strs(section_a), dataclass_to_strs(section_b)
        for key in sa:
            if sa[key] != sb[key]:
                out[f"{name}.{key}"] = (sa[key], sb[key])
    return out


# Recipe-component ablation presets. Each maps dotted keys to values
# layered on top of the crammed defaults.
PRESETS: dict[str, dict[str, str]] = {
    "crammed": {},
    "original_data": {
        "pipeline.t": "none",
        "pipeline.dedup_min_len": "none",
        "pipeline.sort": "false",
    },
    "original_train": {
        "train.peak_lr": "1e-4",
        "train.peak_fraction": "0.1",
        "train.final_batch": "256",
        "train.ramp_end_fraction": "0.0",
        "train.beta2": "0.999",
        "train.eps": "1e-6",
        "train.clip_norm": "none",
        "model.dropout_rate": "0.1",
    },
    "original_arch": {
        "model.norm_placement": "post",
        "model.embedding_kind": "learned",
        "model.ffn_kind": "gelu",
        "model.qkv_bias": "true",
        "model.linear_bias": "true",
        "model.decoder_bias": "true",
        "model.nonlinear_head": "true",
        "model.sparse_prediction": "false",
        "model.final_norm": "false",
    },
    "minimal_train": {
        "train.schedule_kind": "cosine_decay",
        "train.ramp_end_fraction": "0.0",
    },
    "minimal_arch": {
        "model.embedding_kind": "learned",
        "model.ffn_kind": "gelu",
        "model.qkv_bias": "true",
        "model.linear_bias": "true",
        "model.decoder_bias": "true",
        "model.nonlinear_head": "true",
        "model.final_norm": "false",
        "model.norm_placement": "pre",
        "model.sparse_prediction": "true",
        "model.layer_norm_eps": "1e-6",
    },
}

for _p in (12, 13, 14, 15, 16):
    PRESETS[f"vocab_{2 ** _p}"] = {
        "tokenizer.vocab_size": str(2 ** _p),
        "model.vocab_size": str(2 ** _p),
    }
