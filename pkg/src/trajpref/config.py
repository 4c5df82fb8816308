"""Run configuration: JSON file + ``key=value`` overrides, validated in one pass."""

from __future__ import annotations

import json
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .network import ConfigurationError
from .orchestrate import IterationConfig, config_record

OUT_DIR_ENV = "TRAJPREF_OUT_DIR"


class MissingArtifactError(FileNotFoundError):
    pass


class ConfigError(ConfigurationError):
    """Raised with every violation found, one per line."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunConfig(IterationConfig):
    # behaviour cloning
    demos_per_task: int = 20
    sft_epochs: int = 20
    sft_lr: float = 1e-3
    sft_batch_size: int = 256
    hidden: int = 64
    # artifacts; None means the bundled default or the file inside out_dir
    task_suite: str | None = None
    cost_spec: str | None = None
    demos: str | None = None
    model: str | None = None
    trajectories: str | None = None
    out_dir: str | None = None
    workers: int = 1

    def validate(self) -> list[str]:
        errs = super().validate()
        if self.demos_per_task < 0:
            errs.append("demos_per_task must be >= 0")
        if self.sft_epochs < 0:
            errs.append("sft_epochs must be >= 0")
        if self.sft_lr <= 0:
            errs.append("sft_lr must be > 0")
        if self.sft_batch_size < 1:
            errs.append("sft_batch_size must be >= 1")
        if self.hidden < 0:
            errs.append("hidden must be >= 0")
        if self.workers < 1:
            errs.append("workers must be >= 1")
        return errs


_HINTS = typing.get_type_hints(RunConfig)
PATH_FIELDS = ("task_suite", "cost_spec", "demos", "model", "trajectories")


def _coerce(name: str, raw, errs: list[str]):
    """Convert a JSON value or an override string to the field's declared type."""
    hint = _HINTS[name]
    text = hint if isinstance(hint, str) else repr(hint)
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            pass  # bare strings such as paths or preset names
    if raw is None:
        if "None" in text:
            return None
        errs.append(f"{name}: null is not allowed")
        return None
    try:
        if "tuple" in text:
            items = raw.split(",") if isinstance(raw, str) else list(raw)
            if "float" in text:
                return tuple(float(x) for x in items)
            return tuple(str(x).strip() for x in items)
        if hint is int or text.startswith("int"):
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError(raw)
            return int(raw)
        if hint is float or text.startswith("float"):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        errs.append(f"{name}: cannot interpret {raw!r} as {text}")
        return None


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        out[key.strip()] = value
    return out


def build_config(
    path: str | os.PathLike | None = None,
    overrides: dict | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    workers: int | None = None,
    env: dict | None = None,
) -> RunConfig:
    """File values, then ``overrides``, then explicit flags; the output directory
    may also come from the ``TRAJPREF_OUT_DIR`` environment variable when no flag
    sets it.  Every problem is collected before raising."""
    env = os.environ if env is None else env
    errs: list[str] = []
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{p}: not valid JSON ({exc})"]) from exc
        if not isinstance(raw, dict):
            raise ConfigError([f"{p}: top level must be a JSON object"])
    raw = {**raw, **(overrides or {})}
    if seed is not None:
        raw["seed"] = seed
    if workers is not None:
        raw["workers"] = workers
    if out_dir is not None:
        raw["out_dir"] = out_dir
    elif raw.get("out_dir") is None and env.get(OUT_DIR_ENV):
        raw["out_dir"] = env[OUT_DIR_ENV]

    known = {f.name for f in fields(RunConfig)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            errs.append(f"unknown setting {key!r}")
            continue
        coerced = _coerce(key, value, errs)
        if coerced is not None or value is None:
            values[key] = coerced
    cfg = RunConfig(**values)
    errs += cfg.validate()
    if errs:
        raise ConfigError(errs)
    missing = [f"{name}: {getattr(cfg, name)}" for name in PATH_FIELDS
               if getattr(cfg, name) is not None and not Path(getattr(cfg, name)).exists()]
    if missing:
        raise MissingArtifactError("referenced files do not exist: " + "; ".join(missing))
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    rec = config_record(cfg)
    Path(path).write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
