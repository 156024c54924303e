"""Experiment configuration: nested sections, strict keys, validated up front."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

PHASES = ("pretrain", "qat", "compress")
SCHEDULES = ("cosine", "step", "constant")


@dataclass
class ModelConfig:
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [128, 64])
    channels: list = field(default_factory=lambda: [16, 32])

    def validate(self, path):
        _choice(self.arch, ("mlp", "cnn"), f"{path}.arch")
        _positive_ints(self.hidden, f"{path}.hidden")
        _positive_ints(self.channels, f"{path}.channels", length=2)


@dataclass
class DataConfig:
    source: str = "synth"
    classes: int = 10
    dim: int = 784
    n_train: int = 12000
    n_test: int = 2000
    separation: float = 5.0
    noise: float = 0.5
    density: float = 0.2
    means_seed: int = 1234
    seed: int = 0
    clip: bool = True
    active: float = 0.72
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def validate(self, path):
        _choice(self.source, ("synth", "idx"), f"{path}.source")
        if self.source == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, key):
                    raise ConfigError(f"{path}.{key}", "required when source is 'idx'")
        else:
            if self.classes < 2:
                raise ConfigError(f"{path}.classes", "must be >= 2")
            for key in ("dim", "n_train", "n_test"):
                if getattr(self, key) < 1:
                    raise ConfigError(f"{path}.{key}", "must be >= 1")
            for key in ("separation", "noise", "density", "active"):
                if not getattr(self, key) > 0:
                    raise ConfigError(f"{path}.{key}", "must be positive")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    schedule: str = "cosine"
    step_every: int = 3
    step_gamma: float = 0.1

    def validate(self, path):
        _choice(self.phase, PHASES, f"{path}.phase")
        _choice(self.schedule, SCHEDULES, f"{path}.schedule")
        if not self.lr > 0:
            raise ConfigError(f"{path}.lr", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"{path}.momentum", "must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError(f"{path}.weight_decay", "must be non-negative")
        if self.epochs < 1:
            raise ConfigError(f"{path}.epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size", "must be >= 1")
        if self.step_every < 1:
            raise ConfigError(f"{path}.step_every", "must be >= 1")


@dataclass
class RegConfig:
    kind: str = "none"
    lam: float = 0.01
    alpha_init: float = 0.1
    margin_init_std: float = 2.0
    alpha_min: float = 1e-3

    def validate(self, path):
        _choice(self.kind, ("none", "linf", "margin", "smm"), f"{path}.kind")
        if self.lam < 0:
            raise ConfigError(f"{path}.lambda", "must be non-negative")
        if self.alpha_init < 0:
            raise ConfigError(f"{path}.alpha_init", "must be non-negative")
        if not self.alpha_min > 0:
            raise ConfigError(f"{path}.alpha_min", "must be positive")


@dataclass
class QuantConfig:
    method: str = "lsq"
    bits: int = 4
    act_bits: int | None = None
    ewgs_delta: float = 0.1
    act_clip_init: float = 6.0

    def validate(self, path):
        _choice(self.method, ("ste", "pact", "lsq", "ewgs"), f"{path}.method")
        if not 1 <= self.bits <= 8:
            raise ConfigError(f"{path}.bits", "must be in [1, 8]")
        if self.act_bits is not None and not 1 <= self.act_bits <= 8:
            raise ConfigError(f"{path}.act_bits", "must be in [1, 8] or null")
        if self.ewgs_delta < 0:
            raise ConfigError(f"{path}.ewgs_delta", "must be non-negative")
        if not self.act_clip_init > 0:
            raise ConfigError(f"{path}.act_clip_init", "must be positive")


@dataclass
class PaletteConfig:
    bits: int = 2
    dim: int = 1
    tau: float = 0.02
    kmeans_iter: int = 50
    layers: dict = field(default_factory=dict)

    def validate(self, path):
        if not 1 <= self.bits <= 8:
            raise ConfigError(f"{path}.bits", "must be in [1, 8]")
        if self.dim < 1:
            raise ConfigError(f"{path}.dim", "must be >= 1")
        if not self.tau > 0:
            raise ConfigError(f"{path}.tau", "must be positive")
        if self.kmeans_iter < 1:
            raise ConfigError(f"{path}.kmeans_iter", "must be >= 1")
        for name, spec in self.layers.items():
            p = f"{path}.layers.{name}"
            if spec is None:
                continue
            if not isinstance(spec, dict) or set(spec) - {"bits", "dim"}:
                raise ConfigError(p, "expected {bits, dim} or null")
            if not 1 <= spec.get("bits", self.bits) <= 8 or spec.get("dim", self.dim) < 1:
                raise ConfigError(p, "bits must be in [1, 8] and dim >= 1")

    def layer(self, name):
        """(bits, dim) for ``name``, or None if the layer is left unpalettized."""
        if name in self.layers and self.layers[name] is None:
            return None
        spec = self.layers.get(name) or {}
        return spec.get("bits", self.bits), spec.get("dim", self.dim)


@dataclass
class ReportConfig:
    hist_bins: int = 50

    def validate(self, path):
        if self.hist_bins < 1:
            raise ConfigError(f"{path}.hist_bins", "must be >= 1")


SECTIONS = {
    "model": ModelConfig, "data": DataConfig, "train": TrainConfig, "reg": RegConfig,
    "quant": QuantConfig, "palette": PaletteConfig, "report": ReportConfig,
}
# config-file spellings that differ from attribute names
ALIASES = {("reg", "lambda"): "lam"}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    palette: PaletteConfig = field(default_factory=PaletteConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("", "config must be a mapping")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        sections = {}
        for name, section_cls in SECTIONS.items():
            sections[name] = _load_section(section_cls, raw.get(name, {}), name)
        cfg = cls(**sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("", f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(raw)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate(name)

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            for (sec, key), attr in ALIASES.items():
                if sec == name:
                    d[key] = d.pop(attr)
            out[name] = d
        return out


def _load_section(section_cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(path, "section must be a mapping")
    defaults = section_cls()
    known = {f.name for f in fields(section_cls)}
    kwargs = {}
    for key, value in raw.items():
        attr = ALIASES.get((path, key))
        if attr is None:
            if key not in known or (path, key) in _aliased_attrs():
                raise ConfigError(f"{path}.{key}", "unknown key")
            attr = key
        kwargs[attr] = _coerce(value, getattr(defaults, attr), f"{path}.{key}")
    return section_cls(**kwargs)


def _aliased_attrs():
    return {(sec, attr) for (sec, _), attr in ALIASES.items()}


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        return value
    # optional fields (default None)
    if value is not None and isinstance(value, bool):
        raise ConfigError(path, f"unexpected boolean {value!r}")
    if value is not None and not isinstance(value, (int, str)):
        raise ConfigError(path, f"unexpected value {value!r}")
    return value


def _choice(value, options, path):
    if value not in options:
        raise ConfigError(path, f"must be one of {', '.join(options)}; got {value!r}")


def _positive_ints(values, path, length=None):
    if length is not None and len(values) != length:
        raise ConfigError(path, f"expected {length} entries")
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"{path}[{i}]", "must be a positive integer")
