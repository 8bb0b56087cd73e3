"""Versioned ``key = value`` experiment configuration."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

__all__ = ["Config", "ConfigError", "SCHEMA", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


# key -> (parser, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    # toy world
    "seed": (int, 0),
    "num_speakers": (int, 16),
    "num_heldout": (int, 4),
    "phonemes": (int, 8),
    "channels": (int, 8),
    "embed_dim": (int, 16),
    "sigma_obs": (float, 0.1),
    "jitter": (float, 0.2),
    "utterances_per_speaker": (int, 20),
    # score network
    "hidden": (int, 128),
    "depth": (int, 4),
    # diffusion + sampler
    "beta0": (float, 0.05),
    "beta1": (float, 20.0),
    "steps": (int, 50),
    "temperature": (float, 1.5),
    "noise_at_every_step": (_bool, True),
    # guidance
    "gamma_s": (float, 1.0),
    "gamma_t": (float, 0.3),
    "guidance_mode": (str, "combined"),
    # training
    "stage": (str, "pretrain_conditional"),
    "lr": (float, 1e-3),
    "iterations": (int, 3000),
    "batch": (int, 16),
    "dropout_p": (float, 0.5),
    "reset_optimizer": (_bool, True),
    "crop_frames": (int, 32),
    "t_min": (float, 1e-4),
    "loss_weighting": (str, "lambda"),
    "cfg_lr": (float, 5e-4),
    "cfg_iterations": (int, 1500),
    "finetune_lr": (float, 2e-5),
    "finetune_iterations": (int, 500),
    "finetune_batch": (int, 8),
    "classifier_iterations": (int, 1500),
    "duration_iterations": (int, 1500),
    "encoder_iterations": (int, 1500),
    # synthesis / evaluation
    "reference_phonemes": (int, 16),
    "text_phonemes": (int, 10),
    "text": (_ints, ()),
    "runs": (int, 5),
    "experiment": (_strs, ("finetune_sweep", "gamma_sweep")),
    "grid_iterations": (_ints, (0, 50, 200, 500, 2000)),
    "grid_optimizer": (_strs, ("init", "load")),
    "grid_gamma_s": (_floats, (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)),
}


class ConfigError(ValueError):
    pass


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


@dataclass
class Config:
    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __getattr__(self, key: str) -> Any:
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def set(self, key: str, value: Any) -> "Config":
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        self.values[key] = parser(value) if isinstance(value, str) else value
        return self

    def with_overrides(self, **kw) -> "Config":
        out = Config(dict(self.values))
        for k, v in kw.items():
            if v is not None:
                out.set(k, v)
        return out

    @classmethod
    def parse(cls, text: str) -> "Config":
        cfg = cls()
        version = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "version":
                version = int(value)
                continue
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                cfg.values[key] = SCHEMA[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        if version is None:
            raise ConfigError("missing 'version' line")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config version {version} unsupported (expected {SCHEMA_VERSION})")
        return cfg

    def serialize(self) -> str:
        lines = [f"version = {SCHEMA_VERSION}"]
        lines += [f"{k} = {_format(self.values[k])}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "Config":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text(encoding="utf-8"))
