"""Run configuration: flat ``key = value`` sections parsed with configparser."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, section and key."""


@dataclass
class DataConfig:
    labels: str = ""            # label CSV (Image Index, Finding Labels, Patient ID)
    images: str = ""            # directory holding the image files
    image_list: str = ""        # optional file restricting which ids are used


@dataclass
class SplitConfig:
    seed: int = 0
    train_frac: float = 0.8
    manifest: str = ""          # defaults to <output>/split.txt


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 3e-5
    epochs: int = 10
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    seed: int = 0               # weight init and batch order


@dataclass
class OutputConfig:
    dir: str = "runs/default"


SECTIONS = {
    "data": DataConfig,
    "split": SplitConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: str = field(default="<memory>", compare=False)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    @property
    def manifest_path(self) -> Path:
        return Path(self.split.manifest) if self.split.manifest else self.output_dir / "split.txt"

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> RunConfig:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        unknown = set(cp.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{source}: unknown section [{sorted(unknown)[0]}]")
        values = {name: dict(cp[name]) if cp.has_section(name) else {} for name in SECTIONS}
        return _build(values, source)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        return cls.from_text(text, str(path)).resolved(path.parent)

    def resolved(self, base) -> RunConfig:
        """Copy with relative paths anchored at ``base`` (the config file's directory)."""
        base = Path(base)

        def fix(value: str) -> str:
            return str(base / value) if value and not Path(value).is_absolute() else value

        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, labels=fix(self.data.labels), images=fix(self.data.images),
                                     image_list=fix(self.data.image_list)),
            split=dataclasses.replace(self.split, manifest=fix(self.split.manifest)),
            output=dataclasses.replace(self.output, dir=fix(self.output.dir)),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def with_overrides(self, overrides) -> RunConfig:
        """Apply ``section.key=value`` strings on top of this config."""
        values = {name: {f.name: _format(getattr(getattr(self, name), f.name))
                         for f in fields(getattr(self, name))} for name in SECTIONS}
        touched: set[str] = set()
        for item in overrides:
            key, eq, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not eq or not dot:
                raise ConfigError(f"override {item!r}: expected section.key=value")
            if section not in SECTIONS:
                raise ConfigError(f"override {item!r}: unknown section [{section}]")
            values[section][name] = value.strip()
            touched.add(key.strip())
        if "model.head_variant" in touched and "model.head_widths" not in touched:
            values["model"]["head_widths"] = "auto"
        return _build(values, self.source)

    # -- checks ------------------------------------------------------------

    def validate(self, need_data: bool = True) -> None:
        src = self.source

        def bad(section, key, why):
            raise ConfigError(f"{src}: [{section}] {key}: {why}")

        if need_data:
            if not self.data.labels:
                bad("data", "labels", "required")
            if not Path(self.data.labels).is_file():
                bad("data", "labels", f"no such file {self.data.labels!r}")
            if not self.data.images:
                bad("data", "images", "required")
            if not Path(self.data.images).is_dir():
                bad("data", "images", f"no such directory {self.data.images!r}")
            if self.data.image_list and not Path(self.data.image_list).is_file():
                bad("data", "image_list", f"no such file {self.data.image_list!r}")
        if not 0.0 < self.split.train_frac < 1.0:
            bad("split", "train_frac", f"must lie in (0, 1), got {self.split.train_frac}")
        if self.train.lr <= 0:
            bad("train", "lr", f"must be > 0, got {self.train.lr}")
        if self.train.batch_size < 1:
            bad("train", "batch_size", f"must be >= 1, got {self.train.batch_size}")
        if self.train.epochs < 0:
            bad("train", "epochs", f"must be >= 0, got {self.train.epochs}")
        if self.train.optimizer not in ("adamw", "sgd"):
            bad("train", "optimizer", f"expected adamw or sgd, got {self.train.optimizer!r}")
        if self.train.weight_decay < 0:
            bad("train", "weight_decay", "must be >= 0")
        if self.model.window_size < 1:
            bad("model", "window_size", f"must be >= 1, got {self.model.window_size}")
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"{src}: [model] {exc}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    if key == "head_widths":
        if raw in ("", "auto"):
            return None
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def _build(values: dict[str, dict[str, str]], source: str) -> RunConfig:
    parts = {}
    for name, klass in SECTIONS.items():
        defaults = klass()
        known = {f.name for f in fields(klass)}
        kwargs = {}
        for key, raw in values[name].items():
            if key not in known:
                raise ConfigError(f"{source}: [{name}] {key}: unknown key")
            try:
                kwargs[key] = _coerce(raw, getattr(defaults, key), key)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{name}] {key}: {exc}") from exc
        if name == "model" and "head_variant" in kwargs and "head_widths" not in kwargs:
            kwargs["head_widths"] = None
        try:
            parts[name] = klass(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
    return RunConfig(**parts, source=source)


def desk_run_config(**model_overrides) -> RunConfig:
    """Desk-scale defaults used by the scripts and tests."""
    model_overrides.setdefault("init_std", 0.1)
    cfg = RunConfig(model=ModelConfig.desk(**model_overrides))
    return dataclasses.replace(cfg, train=TrainConfig(lr=3e-4, epochs=30))
