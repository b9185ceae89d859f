"""Run configuration: defaults, the flat key=value config file format, and
CLI override merging."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

__all__ = ["ConfigError", "RunConfig", "load_config_file"]

PAPER_SHOT_GRID = (1, 2, 3, 5, 10)


class ConfigError(ValueError):
    """A configuration value or file is unusable."""


@dataclass
class RunConfig:
    """Everything a run needs; every field maps to one config-file key."""

    seed: int = 0
    split: int = 1
    shots: int = 3
    s_dim: int = 32
    f_dim: int = 32
    sigma_noise: float = 0.3
    threshold: float = 0.5
    lr_base: float = 0.01
    lr_ft: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 8
    steps_base: int = 500
    steps_ft: int = 200
    skip: bool = True
    graph: str = "semantic"
    full_batch: bool = False
    rois_per_image: int = 20
    eval_images: int = 24
    ablation_seeds: int = 5
    embeddings: str = ""   # empty -> bundled table
    out_dir: str = "runs"
    voc_dir: str = ""

    def __post_init__(self):
        if self.split not in (1, 2, 3):
            raise ConfigError(f"split must be 1, 2 or 3, got {self.split}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.shots not in PAPER_SHOT_GRID:
            warnings.warn(f"shots={self.shots} is outside the usual grid {PAPER_SHOT_GRID}",
                          stacklevel=2)
        if self.lr_base <= 0 or self.lr_ft <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.graph not in ("semantic", "random"):
            raise ConfigError(f"graph must be 'semantic' or 'random', got '{self.graph}'")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.steps_base < 0 or self.steps_ft < 0:
            raise ConfigError("step counts must be >= 0")

    def to_text(self) -> str:
        """The resolved configuration, echoed in config-file syntax."""
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    def replaced(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "on", "yes"):
            return True
        if lowered in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"key '{name}': cannot read '{raw}' as a boolean")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"key '{name}': cannot read '{raw}' as {kind.__name__}") from None


def load_config_file(path: str) -> dict:
    """Parse a flat key=value file with '#' comments into override values."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    overrides: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            overrides[key] = _coerce(key, kinds[str(fields[key])], value)
    return overrides


def resolve_config(file_path: "str | None" = None, **cli_overrides) -> RunConfig:
    """Defaults, then config file, then CLI flags; later sources win."""
    values: dict = {}
    if file_path:
        values.update(load_config_file(file_path))
    values.update({k: v for k, v in cli_overrides.items() if v is not None})
    return RunConfig(**values)
