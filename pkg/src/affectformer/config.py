"""Run configuration and its flat ``section.key = value`` text form.

Files may use either fully qualified keys (``model.d_m = 64``) or ``[model]``
section headers followed by bare keys.  Sections: ``model``, ``train``,
``augment``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data.augment import AugmentPolicy
from .errors import ConfigError
from .model import ModelConfig

TASKS = ("va", "expr", "au", "multi")
SECTIONS = ("model", "train", "augment")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "expr"
    epochs: int = 30
    batch_size: int = 32
    eval_batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    win_len: int = 64
    stride: int = 32
    sampler: str = "auto"          # auto | balanced | shuffle
    class_weights: str = "inverse_freq"  # inverse_freq | uniform
    au_pos_weight: str = "none"    # none | balanced

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.win_len < 1 or self.stride < 1:
            raise ConfigError("win_len and stride must be positive")
        if self.sampler not in ("auto", "balanced", "shuffle"):
            raise ConfigError(f"sampler must be auto, balanced or shuffle, got {self.sampler!r}")
        if self.class_weights not in ("inverse_freq", "uniform"):
            raise ConfigError("class_weights must be inverse_freq or uniform")
        if self.au_pos_weight not in ("none", "balanced"):
            raise ConfigError("au_pos_weight must be none or balanced")

    @property
    def balanced(self) -> bool:
        if self.sampler == "auto":
            return self.task in ("expr", "multi")
        return self.sampler == "balanced"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    augment: AugmentPolicy

    def validate(self):
        if self.train.win_len > self.model.max_T:
            raise ConfigError(
                f"train.win_len={self.train.win_len} exceeds model.max_T={self.model.max_T}"
            )
        return self

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            for k, v in asdict(getattr(self, section)).items():
                lines.append(f"{section}.{k} = {_format_value(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return build_config(parse_config_text(text))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"config line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            if section is None:
                raise ConfigError(f"config line {lineno}: key {key!r} outside any section")
            key = f"{section}.{key}"
        values[key] = value
    return values


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text)


def _coerce(cls, name, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    t = ftype if isinstance(ftype, str) else ftype.__name__
    try:
        if t == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {cls.__name__}.{name}: {raw!r}") from None
    return raw


def build_config(values: dict[str, str], d_v: int | None = None) -> RunConfig:
    """Assemble a RunConfig from flat ``section.key`` strings.

    ``d_v`` fills ``model.d_v`` when the values do not set it (it normally
    comes from the data).
    """
    kwargs = {s: {} for s in SECTIONS}
    classes = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentPolicy}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in classes:
            raise ConfigError(f"unknown config section in {key!r}")
        if name not in {f.name for f in fields(classes[section])}:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[section][name] = _coerce(classes[section], name, raw)
    if "d_v" not in kwargs["model"]:
        if d_v is None:
            raise ConfigError("model.d_v is not set and no data was given to infer it")
        kwargs["model"]["d_v"] = d_v
    return RunConfig(
        ModelConfig(**kwargs["model"]),
        TrainConfig(**kwargs["train"]),
        AugmentPolicy(**kwargs["augment"]),
    ).validate()


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """``with_overrides(cfg, train={"epochs": 3})``."""
    parts = {s: getattr(cfg, s) for s in SECTIONS}
    for s, kw in sections.items():
        parts[s] = replace(parts[s], **kw)
    return RunConfig(**parts).validate()
