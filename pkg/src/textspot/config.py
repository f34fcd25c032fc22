"""Run configuration: flat ``section.key = value`` text files.

Every key has a default below; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

DEFAULT_VOCAB = "0123456789abcdefghijklmnopqrstuvwxyz"
STAGES = ("det-only", "recog-only", "joint")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    stem_width: int = 16
    widths: tuple = (32, 64, 96, 128)
    block_mid: int = 64
    fused: int = 128
    h_t: int = 8
    w_max: int = 64
    rec_conv_width: int = 128
    rec_conv_layers: int = 4
    enc_hidden: int = 128
    dec_hidden: int = 128
    embed: int = 64
    attn: int = 128
    bidirectional: bool = False
    vocab: str = DEFAULT_VOCAB
    max_steps: int = 32
    dtype: str = "float32"


@dataclass
class LossConfig:
    lam: float = 1.0
    beta: float = 1.0
    n_d: float = 128.0
    shrink: float = 0.3


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: str = "none"      # or "cosine": anneal to lr_min over the whole schedule
    lr_min: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    rois_per_batch: int = 32
    schedule: str = "det-only:2000,joint:18000"
    clip_norm: float = 5.0
    checkpoint_every: int = 500
    augment: bool = True
    seed: int = 0
    out: str = "runs/default"


@dataclass
class DataConfig:
    path: str = ""
    count: int = 32
    image_size: int = 256
    train_size: int = 256
    words_min: int = 1
    words_max: int = 3
    glyph_min: int = 16
    glyph_max: int = 24
    style_mix: str = "straight:0.25,rotated:0.25,perspective:0.25,curved:0.25"
    max_rotation: float = 60.0
    max_jitter: float = 0.25
    max_sweep: float = 120.0
    word_list: str = ""
    seed: int = 0


@dataclass
class InferConfig:
    score_thresh: float = 0.8
    nms_thresh: float = 0.2


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    # -------------------------------------------------------------- access
    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        if key == "loss.lambda":
            name = "lam"
        sect = getattr(self, section, None)
        if not dataclasses.is_dataclass(sect) or name not in {f.name for f in dataclasses.fields(sect)}:
            raise ConfigError(f"unknown config key {key!r}")
        hint = get_type_hints(type(sect))[name]
        setattr(sect, name, _coerce(key, value, hint))

    def items(self):
        for sname in ("model", "loss", "train", "data", "infer"):
            sect = getattr(self, sname)
            for f in dataclasses.fields(sect):
                key = "loss.lambda" if (sname, f.name) == ("loss", "lam") else f"{sname}.{f.name}"
                yield key, getattr(sect, f.name)

    def to_text(self) -> str:
        lines = []
        for key, val in self.items():
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"

    def validate(self) -> "RunConfig":
        if self.loss.lam <= 0 or self.loss.beta < 0:
            raise ConfigError("loss.lambda must be > 0 and loss.beta >= 0")
        if self.train.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.train.lr_decay not in ("none", "cosine"):
            raise ConfigError("train.lr_decay must be none or cosine")
        for stage, steps in parse_schedule(self.train.schedule):
            if stage not in STAGES:
                raise ConfigError(f"unknown training stage {stage!r}")
        if len(self.model.widths) != 4:
            raise ConfigError("model.widths needs exactly 4 entries")
        if self.data.image_size % 32 or self.data.train_size % 32:
            raise ConfigError("image sizes must be multiples of 32")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        return self

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self, model=dataclasses.replace(self.model), loss=dataclasses.replace(self.loss),
            train=dataclasses.replace(self.train), data=dataclasses.replace(self.data),
            infer=dataclasses.replace(self.infer))


def _coerce(key: str, value, hint):
    if not isinstance(value, str):
        if hint is tuple and isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        return value
    text = value.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return text


def parse_schedule(text: str) -> list[tuple[str, int]]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        stage, _, steps = part.partition(":")
        try:
            out.append((stage.strip(), int(steps)))
        except ValueError as exc:
            raise ConfigError(f"bad schedule entry {part!r}") from exc
    return out


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value)
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if not path:
        return RunConfig().validate()
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def desk_overfit_config() -> RunConfig:
    """Small configuration that overfits 32 generated 128 px images on one CPU core in about 35 minutes."""
    cfg = RunConfig()
    d, m, t = cfg.data, cfg.model, cfg.train
    d.image_size = d.train_size = 128
    d.glyph_min, d.glyph_max = 14, 18
    d.words_min, d.words_max = 1, 2
    m.stem_width, m.widths, m.block_mid, m.fused = 8, (16, 32, 48, 64), 32, 64
    m.rec_conv_width, m.rec_conv_layers = 64, 2
    m.enc_hidden = m.dec_hidden = m.attn = 64
    m.embed = 32
    # offsets scaled to the smaller image so corner errors of a few pixels still cost something
    cfg.loss.n_d = 32.0
    t.lr, t.lr_decay, t.lr_min = 1e-3, "cosine", 1e-5
    t.augment = False
    t.schedule = "det-only:1000,joint:7000"
    t.checkpoint_every = 1000
    t.out = "runs/desk"
    return cfg.validate()
