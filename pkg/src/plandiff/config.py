"""Run configuration: INI sections (corpus, model, train, generate, bench) plus CLI overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attention import MaskMode
from .bench import BenchConfig
from .corpus import default_mixture
from .diffusion import DenoisePolicy, UnmaskMode
from .engine import GenerationConfig
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class CorpusSection:
    seed: int = 0
    n_train: int = 3000
    n_heldout: int = 200
    span_min: int = 20
    span_max: int = 40
    sync_probability: float = 0.3
    out_dir: str = "runs/corpus"

    def specs(self):
        return default_mixture((self.span_min, self.span_max), self.sync_probability)


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 2048
    positional: str = "rotary"
    n_slots: int = 8


@dataclass(frozen=True)
class TrainSection:
    method: str = "pd"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 100
    weight_decay: float = 0.01
    clip: float = 1.0
    seed: int = 0
    clean_plan_pass: bool = False
    checkpoint_epochs: tuple[int, ...] = ()
    log_every: int = 50
    out_dir: str = "runs/train"


@dataclass(frozen=True)
class GenerateSection:
    method: str = "pd"
    temperature: float = 0.2
    top_p: float = 0.95
    plan_temperature: float = 0.2
    plan_top_p: float = 0.95
    steps_ratio: float = 1.0
    confidence: float = 0.0  # 0 selects entropy-ordered unmasking
    length_scale: float = 1.0
    mask_mode: str = ""  # empty: dense for pd-da, isolated otherwise
    max_total_len: int = 2048
    max_stages: int = 8
    seed: int = 0
    out_dir: str = "runs/generate"


@dataclass(frozen=True)
class BenchSection:
    methods: tuple[str, ...] = ("ar", "diffusion", "pd", "pd-da", "pd-tau")
    steps_ratios: tuple[float, ...] = (1.0,)
    confidences: tuple[float, ...] = (0.9,)
    length_scales: tuple[float, ...] = (1.0,)
    n_prompts: int = 100
    workers: int = 1
    out_dir: str = "runs/bench"


SECTIONS = {"corpus": CorpusSection, "model": ModelSection, "train": TrainSection,
            "generate": GenerateSection, "bench": BenchSection}


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict:
        return {name: _jsonable(asdict(getattr(self, name))) for name in SECTIONS}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def set(self, section: str, key: str, value) -> "RunConfig":
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        hints = typing.get_type_hints(type(sec))
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        return replace(self, **{section: replace(sec, **{key: _coerce(value, hints[key], f"{section}.{key}")})})

    # ------------------------------------------------------------ resolved objects

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **asdict(self.model))

    def train_config(self, method: str | None = None) -> TrainConfig:
        d = asdict(self.train)
        d.pop("out_dir")
        if method is not None:
            d["method"] = method
        return TrainConfig(**d)

    def generation_config(self) -> GenerationConfig:
        g = self.generate
        mode = UnmaskMode.CONFIDENCE if g.confidence > 0 else UnmaskMode.ENTROPY
        policy = DenoisePolicy(mode, g.steps_ratio, g.confidence if g.confidence > 0 else 0.9, g.temperature, g.top_p)
        mask_mode = g.mask_mode or ("dense" if g.method == "pd-da" else "isolated")
        return GenerationConfig(policy, g.length_scale, MaskMode(mask_mode), g.max_total_len, g.max_stages,
                                g.plan_temperature, g.plan_top_p, g.seed)

    def bench_config(self) -> BenchConfig:
        b = self.bench
        return BenchConfig(tuple(b.methods), tuple(b.steps_ratios), tuple(b.confidences), tuple(b.length_scales),
                           b.workers)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(value, typ, name: str):
    try:
        if typing.get_origin(typ) is tuple:
            (inner, *_) = typing.get_args(typ)
            if isinstance(value, str):
                items = [v.strip() for v in value.split(",") if v.strip()]
            else:
                items = list(value)
            return tuple(inner(v) for v in items)
        if typ is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return low in ("1", "true", "yes", "on")
            return bool(value)
        return typ(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value {value!r} for {name}: {e}") from None


def load_config(path: str | Path | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg = cfg.set(section, key, value)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            lines.append(f"{k} = {','.join(str(x) for x in v) if isinstance(v, list) else v}")
        lines.append("")
    return "\n".join(lines)


def section_fields(section: str) -> list[str]:
    return [f.name for f in fields(SECTIONS[section])]
