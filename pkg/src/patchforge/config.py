"""INI run configuration with typed sections, validation and flag overrides."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunSection:
    seed: int = 2


@dataclass(frozen=True)
class DataSection:
    annotations: str = ""
    images: str = ""
    padding_fraction: float = 0.15
    train_size: int = 20000
    val_size: int = 2500
    test_size: int = 2500
    attack_subset_size: int = 5000
    attack_subset_source: str = "held-out"
    max_nonperson_per_image: int = 3
    workers: int = 1


@dataclass(frozen=True)
class FinetuneSection:
    backbone: str = "vit-base-224"
    pretrained: bool = True
    freeze_plan: str = "top4"
    batch_size: int = 128
    learning_rate: float = 1e-4
    epochs: int = 5
    hflip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1


@dataclass(frozen=True)
class CraftSection:
    steps: int = 0  # 0 = the per-model count from the full-scale runs
    learning_rate: float = 1e-3
    batch_size: int = 32
    patch_size: int = 128
    max_area: float = 0.6
    beta: float = 4.0
    gamma: float = 0.5
    loss_sign: str = "mean"
    angle_window_deg: float = 5.0
    crease_strength: float = 0.02
    crease_max_offset_frac: float = 0.1
    reference: str = ""


@dataclass(frozen=True)
class EvalSection:
    size_min: float = 0.30
    size_max: float = 0.60
    draws: int = 1
    batch_size: int = 64
    split: str = "test"
    exemplars: int = 0


SECTIONS = {"run": RunSection, "data": DataSection, "finetune": FinetuneSection, "craft": CraftSection,
            "eval": EvalSection}


def _nonneg(v):
    return v >= 0


def _pos(v):
    return v > 0


def _unit(v):
    return 0 < v <= 1


def _prob(v):
    return 0 <= v <= 1


def _even(v):
    return v >= 0 and v % 2 == 0


CHECKS = {
    "data.padding_fraction": (_nonneg, ">= 0"),
    "data.train_size": (_even, "a non-negative even number"),
    "data.val_size": (_even, "a non-negative even number"),
    "data.test_size": (_even, "a non-negative even number"),
    "data.attack_subset_size": (_nonneg, ">= 0"),
    "data.attack_subset_source": (lambda v: v in ("held-out", "train"), "'held-out' or 'train'"),
    "data.max_nonperson_per_image": (_pos, ">= 1"),
    "data.workers": (_pos, ">= 1"),
    "finetune.freeze_plan": (lambda v: v in ("top4", "none"), "'top4' or 'none'"),
    "finetune.batch_size": (_pos, ">= 1"),
    "finetune.learning_rate": (_nonneg, ">= 0"),
    "finetune.epochs": (_pos, ">= 1"),
    "finetune.hflip_prob": (_prob, "in [0, 1]"),
    "finetune.brightness": (lambda v: 0 <= v < 1, "in [0, 1)"),
    "finetune.contrast": (lambda v: 0 <= v < 1, "in [0, 1)"),
    "craft.steps": (_nonneg, ">= 0"),
    "craft.learning_rate": (_nonneg, ">= 0"),
    "craft.batch_size": (_pos, ">= 1"),
    "craft.patch_size": (lambda v: v >= 2, ">= 2"),
    "craft.max_area": (_unit, "in (0, 1]"),
    "craft.beta": (_nonneg, ">= 0"),
    "craft.gamma": (_nonneg, ">= 0"),
    "craft.loss_sign": (lambda v: v in ("mean", "negated"), "'mean' or 'negated'"),
    "craft.angle_window_deg": (_nonneg, ">= 0"),
    "craft.crease_strength": (_pos, "> 0"),
    "craft.crease_max_offset_frac": (_nonneg, ">= 0"),
    "eval.size_min": (_unit, "in (0, 1]"),
    "eval.size_max": (_unit, "in (0, 1]"),
    "eval.draws": (_pos, ">= 1"),
    "eval.batch_size": (_pos, ">= 1"),
    "eval.split": (lambda v: v in ("train", "val", "test"), "'train', 'val' or 'test'"),
    "eval.exemplars": (_nonneg, ">= 0"),
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    craft: CraftSection = field(default_factory=CraftSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            section = getattr(self, name)
            for f in fields(section):
                key = f"{name}.{f.name}"
                if key in CHECKS:
                    check, expect = CHECKS[key]
                    if not check(getattr(section, f.name)):
                        raise ConfigError(key, f"must be {expect}, got {getattr(section, f.name)!r}")
        if self.eval.size_min > self.eval.size_max:
            raise ConfigError("eval.size_min", f"exceeds eval.size_max ({self.eval.size_min} > {self.eval.size_max})")
        return self

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
            return raw
        raise ConfigError(key, f"expected {typ.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(key, f"expected {typ.__name__}, got {raw!r}") from None
    return text.strip('"').strip("'")


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _apply(config: RunConfig, key: str, raw) -> RunConfig:
    if "." not in key:
        raise ConfigError(key, "override keys look like 'section.key'")
    section_name, name = key.split(".", 1)
    if section_name not in SECTIONS:
        raise ConfigError(key, f"unknown section; expected one of {', '.join(SECTIONS)}")
    section = getattr(config, section_name)
    types = {f.name: f.type if isinstance(f.type, type) else _TYPES[f.type] for f in fields(section)}
    if name not in types:
        raise ConfigError(key, f"unknown key; [{section_name}] accepts {', '.join(types)}")
    value = _coerce(key, raw, types[name])
    return replace(config, **{section_name: replace(section, **{name: value})})


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults, then the INI file, then ``overrides`` ({"section.key": value}); validate."""
    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        text = Path(path).read_text()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as err:
            raise ConfigError(str(path), f"unparseable config: {err}") from err
        for section_name in parser.sections():
            if section_name not in SECTIONS:
                raise ConfigError(section_name, f"unknown section; expected one of {', '.join(SECTIONS)}")
            for name, raw in parser.items(section_name):
                config = _apply(config, f"{section_name}.{name}", raw)
    for key, raw in (overrides or {}).items():
        config = _apply(config, key, raw)
    return config.validate()
