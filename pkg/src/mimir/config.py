"""Strict flat key-value experiment configs.

Format: one ``key = value`` per line, ``#`` comments, section prefixes in
the key (``train.base_lr = 1.5e-4``). Unknown keys are rejected by name and
missing required keys for the selected command are listed together, so a
typo can never silently change an experiment. Parsing a serialized config
reproduces the identical structure.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .attacks import AttackSpec
from .model import ViTConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed experiment configuration."""


def _parse_bool(raw: str) -> bool:
    if raw in ("true", "false"):
        return raw == "true"
    raise ValueError(f"expected true/false, got {raw!r}")


COMMANDS = ("pretrain", "finetune", "attack", "eval", "bounds", "landscape", "mi-estimate")

# key -> parser; every accepted key appears here
KEY_TYPES: dict[str, type | object] = {
    "command": str,
    "seed": int,
    "out_dir": str,
    "checkpoint": str,
    "data.source": str,
    "data.dir": str,
    "data.split": str,
    "data.num_classes": int,
    "data.samples_per_class": int,
    "data.image_size": int,
    "data.channels": int,
    "data.noise": float,
    "model.image_size": int,
    "model.channels": int,
    "model.patch_size": int,
    "model.enc_layers": int,
    "model.enc_dim": int,
    "model.enc_heads": int,
    "model.enc_mlp_ratio": int,
    "model.dec_layers": int,
    "model.dec_dim": int,
    "model.dec_heads": int,
    "model.dec_mlp_ratio": int,
    "model.num_classes": int,
    "model.mask_ratio": float,
    "train.base_lr": float,
    "train.beta1": float,
    "train.beta2": float,
    "train.weight_decay": float,
    "train.warmup_epochs": int,
    "train.total_epochs": int,
    "train.batch_size": int,
    "train.lambda": float,
    "train.estimator": str,
    "train.layer_decay": float,
    "train.recon_masked_only": _parse_bool,
    "attack.epsilon": float,
    "attack.step_size": float,
    "attack.iters": int,
    "attack.init": str,
    "eval.attacks": str,
    "eval.pgd_iters": int,
    "eval.adaptive_iters": int,
    "eval.lambda": float,
    "eval.batch_size": int,
    "eval.subset": int,
    "bounds.num_classes": int,
    "bounds.step": float,
    "landscape.half_width": float,
    "landscape.resolution": int,
    "landscape.batch_size": int,
    "mi.alpha": float,
    "mi.batch_size": int,
}

_DATA_KEYS_SYNTH = ("data.num_classes", "data.samples_per_class", "data.image_size", "data.noise")
_DATA_KEYS_CIFAR = ("data.dir",)

REQUIRED: dict[str, tuple[str, ...]] = {
    "pretrain": ("out_dir", "data.source", "model.image_size", "model.patch_size",
                 "train.base_lr", "train.total_epochs", "train.batch_size"),
    "finetune": ("out_dir", "data.source", "model.image_size", "model.patch_size",
                 "train.base_lr", "train.total_epochs", "train.batch_size"),
    "attack": ("out_dir", "checkpoint", "data.source"),
    "eval": ("out_dir", "checkpoint", "data.source"),
    "bounds": ("out_dir", "bounds.num_classes", "bounds.step"),
    "landscape": ("out_dir", "checkpoint", "data.source",
                  "landscape.half_width", "landscape.resolution"),
    "mi-estimate": ("out_dir", "checkpoint", "data.source"),
}


@dataclass
class ExperimentConfig:
    command: str
    values: dict[str, object] = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    @property
    def out_dir(self) -> str:
        return str(self.values["out_dir"])

    def vit_config(self) -> ViTConfig:
        g = self.values.get
        return ViTConfig(
            image_size=g("model.image_size"),
            channels=g("model.channels", 3),
            patch_size=g("model.patch_size"),
            enc_layers=g("model.enc_layers", 12),
            enc_dim=g("model.enc_dim", 192),
            enc_heads=g("model.enc_heads", 3),
            enc_mlp_ratio=g("model.enc_mlp_ratio", 4),
            dec_layers=g("model.dec_layers", 2),
            dec_dim=g("model.dec_dim", 128),
            dec_heads=g("model.dec_heads", 16),
            dec_mlp_ratio=g("model.dec_mlp_ratio", 4),
            num_classes=g("model.num_classes", 10),
            mask_ratio=g("model.mask_ratio", 0.75),
        )

    def attack_spec(self, default: AttackSpec) -> AttackSpec:
        g = self.values.get
        return AttackSpec(
            epsilon=g("attack.epsilon", default.epsilon),
            step_size=g("attack.step_size", default.step_size),
            iters=g("attack.iters", default.iters),
            init=g("attack.init", default.init),
        )

    def train_config(self, attack: AttackSpec, default_betas: tuple[float, float]) -> TrainConfig:
        g = self.values.get
        return TrainConfig(
            base_lr=g("train.base_lr"),
            total_epochs=g("train.total_epochs"),
            batch_size=g("train.batch_size"),
            attack=attack,
            warmup_epochs=g("train.warmup_epochs", 0),
            betas=(g("train.beta1", default_betas[0]), g("train.beta2", default_betas[1])),
            weight_decay=g("train.weight_decay", 0.05),
            lam=g("train.lambda", 1e-5),
            estimator=g("train.estimator", "hsic"),
            layer_decay=g("train.layer_decay", 1.0),
            seed=self.seed,
            recon_masked_only=g("train.recon_masked_only", False),
        )


def parse_config_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key not in KEY_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        caster = KEY_TYPES[key]
        try:
            values[key] = caster(raw_value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return values


def _validate(values: dict[str, object], command: str) -> None:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    required = list(REQUIRED[command])
    source = values.get("data.source")
    if "data.source" in required and source is not None:
        if source == "synth":
            required += list(_DATA_KEYS_SYNTH)
        elif source == "cifar10":
            required += list(_DATA_KEYS_CIFAR)
        else:
            raise ConfigError(f"data.source must be 'synth' or 'cifar10', got {source!r}")
    missing = [key for key in required if key not in values]
    if missing:
        raise ConfigError(f"missing required keys for {command}: {', '.join(sorted(missing))}")
    for key in ("checkpoint", "data.dir"):
        if key in values and key in required and not os.path.exists(str(values[key])):
            raise ConfigError(f"{key} path does not exist: {values[key]}")


def load_config(path, command: str | None = None, seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    """Parse, apply CLI overrides, and validate a config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            values = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if command is None:
        command = values.get("command")
        if command is None:
            raise ConfigError("no command given and the config has no 'command' key")
    if seed is not None:
        values["seed"] = int(seed)
    if out_dir is not None:
        values["out_dir"] = str(out_dir)
    values["command"] = str(command)
    _validate(values, str(command))
    return ExperimentConfig(command=str(command), values=values)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parsing it back yields an identical structure."""
    lines = []
    for key in sorted(cfg.values):
        value = cfg.values[key]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"
