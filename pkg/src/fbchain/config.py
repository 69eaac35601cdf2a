"""Run configuration files.

Plain ``key = value`` text in four sections::

    [encoder]
    num_levels = 3
    depth_per_level = 3, 3, 3
    channels_per_level = 8, 16, 32
    connection_mode = dense

    [model]
    gpa_mode = full
    fha_enabled = true
    input_size = 32, 32

    [train]
    learning_rate = 2e-05
    epochs = 300
    batch_size = 32

    [augment]
    p_rotate = 0.5

Lists are comma separated. Keys not listed in ``REQUIRED`` fall back to the
dataclass defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Tuple

from fbchain.errors import ConfigError
from fbchain.fafc import EncoderConfig
from fbchain.network import ModelConfig
from fbchain.training import AugmentConfig, TrainConfig

REQUIRED = {
    "encoder": ("num_levels", "depth_per_level", "channels_per_level", "connection_mode"),
    "model": ("gpa_mode", "fha_enabled", "input_size"),
    "train": ("learning_rate", "epochs", "batch_size"),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        t = asdict(self.train)
        t["betas"] = list(t["betas"])
        return {"model": self.model.to_dict(), "train": t}

    def digest(self) -> str:
        """sha256 of the canonical (key-sorted) JSON form."""
        return config_hash(self.to_dict())


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str):
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _parse_optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _parse_floats(text: str):
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


_ENCODER = {
    "num_levels": int,
    "depth_per_level": _parse_ints,
    "channels_per_level": _parse_ints,
    "connection_mode": str.strip,
    "in_channels": int,
}
_MODEL = {
    "gpa_mode": str.strip,
    "fha_enabled": _parse_bool,
    "decoder_channels": _parse_ints,
    "input_size": lambda t: tuple(_parse_ints(t)),
    "pyramid_scales": lambda t: tuple(_parse_ints(t)),
    "seed": int,
}
_TRAIN = {
    "learning_rate": float,
    "batch_size": int,
    "epochs": int,
    "optimizer": str.strip,
    "loss": str.strip,
    "seed": int,
    "checkpoint_dir": lambda t: None if t.strip().lower() in ("", "none") else t.strip(),
    "early_stop_patience": _parse_optional_int,
    "betas": _parse_floats,
    "adam_eps": float,
    "track_train_metrics": _parse_bool,
}
_AUGMENT = {f.name: (_parse_bool if f.type in (bool, "bool") else float) for f in fields(AugmentConfig)}

SECTIONS = {"encoder": _ENCODER, "model": _MODEL, "train": _TRAIN, "augment": _AUGMENT}


def _section_values(cp: configparser.ConfigParser, name: str) -> Dict[str, Any]:
    parsers = SECTIONS[name]
    out = {}
    if not cp.has_section(name):
        return out
    for key, raw in cp.items(name):
        if key not in parsers:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            out[key] = parsers[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from exc
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
    for section, keys in REQUIRED.items():
        for key in keys:
            if not cp.has_option(section, key):
                raise ConfigError(f"{source}: missing required key [{section}] {key}")

    enc_vals = _section_values(cp, "encoder")
    model_vals = _section_values(cp, "model")
    train_vals = _section_values(cp, "train")
    aug_vals = _section_values(cp, "augment")

    enc_vals.setdefault("feedback_enabled", model_vals["fha_enabled"])
    encoder = EncoderConfig(**enc_vals)
    if "decoder_channels" not in model_vals:
        model_vals["decoder_channels"] = list(encoder.channels_per_level[:-1][::-1])
    try:
        model = ModelConfig(encoder=encoder, **model_vals)
        model.validate()
        train = TrainConfig(augment=AugmentConfig(**aug_vals), **train_vals)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return RunConfig(model, train)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, source=str(p))


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    enc = asdict(cfg.model.encoder)
    enc.pop("feedback_enabled")
    model = {k: v for k, v in cfg.model.to_dict().items() if k != "encoder"}
    train = asdict(cfg.train)
    aug = train.pop("augment")
    lines = []
    for name, values in (("encoder", enc), ("model", model), ("train", train), ("augment", aug)):
        lines.append(f"[{name}]")
        for key in sorted(values):
            lines.append(f"{key} = {_fmt(values[key])}")
        lines.append("")
    return "\n".join(lines)


def default_config_text(**overrides) -> str:
    cfg = RunConfig()
    for k, v in overrides.items():
        section, key = k.split("__", 1)
        target = {"model": cfg.model, "encoder": cfg.model.encoder, "train": cfg.train,
                  "augment": cfg.train.augment}[section]
        setattr(target, key, v)
    return dump_config(cfg)
