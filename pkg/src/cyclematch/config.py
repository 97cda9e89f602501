"""Run configuration: INI-style "key = value" files with sections, merged with flag overrides.

Every key has a typed default; unknown sections or keys are errors so a typo
never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path

from .encoder import EncoderConfig
from .geometry import AugmentConfig
from .losses import LossWeights, SinkhornConfig
from .synthetic import SyntheticCategoryConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ApplyConfig:
    iterations: int = 3
    neighbors: int = 5
    threshold: float = 0.05
    keep_fraction: float = 0.75
    pairs: int = 50


_TRAIN_KEYS = (
    "steps", "batch", "lr_bias", "lr_rest", "beta1", "beta2", "adam_eps", "amsgrad", "tau",
    "stop_grad_sinkhorn", "points_per_shape", "rng_seed", "eval_every", "eval_pairs", "cc_radius",
    "checkpoint_every", "val_fraction",
)  # fmt: skip


def _defaults() -> dict:
    t, e, a = TrainConfig(), EncoderConfig(), ApplyConfig()
    d = SyntheticCategoryConfig()
    return {
        "train": {k: getattr(t, k) for k in _TRAIN_KEYS},
        "loss": {"cycle": t.weights.cycle, "rigid": t.weights.rigid, "sinkhorn": t.weights.sinkhorn},
        "sinkhorn": {"temperature": t.sinkhorn.temperature, "iterations": t.sinkhorn.iterations},
        "augment": {"rotation_deg": t.aug.rotation_deg, "translation": t.aug.translation, "scale": t.aug.scale},
        "encoder": {k: getattr(e, k) for k in e.to_dict()},
        "data": {"family": d.family, "instances": d.instances, "points_per_shape": d.points_per_shape, "seed": d.seed},
        "apply": {k: getattr(a, k) for k in ApplyConfig.__dataclass_fields__},
    }


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple) and default and isinstance(default[0], tuple):
            # stage widths: "32 64; 64 128"
            return tuple(tuple(int(v) for v in part.replace(",", " ").split()) for part in text.split(";") if part.strip())
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in text.replace(",", " ").split())
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} numbers, got {len(vals)}")
            return vals
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _format(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return "; ".join(" ".join(str(v) for v in part) for part in value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    sections: dict

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(_defaults())

    def set(self, dotted: str, text: str, where: str = "override") -> None:
        """Apply "section.key" = text, parsed against the key's default type."""
        if "." not in dotted:
            raise ConfigError(f"{where}: expected section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in self.sections:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in self.sections[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        self.sections[section][key] = _parse(text, self.sections[section][key], f"{where}: {dotted}")

    def set_value(self, dotted: str, value) -> None:
        section, key = dotted.split(".", 1)
        if section not in self.sections or key not in self.sections[section]:
            raise ConfigError(f"unknown setting {dotted!r}")
        self.sections[section][key] = value

    def update_from_text(self, text: str, source: str = "<config>") -> None:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                self.set(f"{section}.{key}", value, where=source)

    def to_text(self) -> str:
        buf = io.StringIO()
        for section, values in self.sections.items():
            buf.write(f"[{section}]\n")
            for k, v in values.items():
                buf.write(f"{k} = {_format(v)}\n")
            buf.write("\n")
        return buf.getvalue()

    def to_dict(self) -> dict:
        def plain(v):
            return [plain(x) for x in v] if isinstance(v, tuple) else v

        return {s: {k: plain(v) for k, v in vals.items()} for s, vals in self.sections.items()}

    # typed views -------------------------------------------------------------

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**self.sections["encoder"])

    def train(self) -> TrainConfig:
        s = self.sections
        try:
            return TrainConfig(
                **s["train"],
                weights=LossWeights(**s["loss"]),
                sinkhorn=self.sinkhorn(),
                aug=AugmentConfig(**s["augment"]),
                encoder=self.encoder(),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(**self.sections["sinkhorn"])

    def data(self) -> SyntheticCategoryConfig:
        try:
            return SyntheticCategoryConfig(**self.sections["data"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def apply(self) -> ApplyConfig:
        return ApplyConfig(**self.sections["apply"])


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at `path`, then "section.key=value" overrides."""
    cfg = RunConfig.default()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update_from_text(text, str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v, where="--set")
    return cfg

