"""Experiment configuration.

Configs are TOML files (or JSON with the same nesting).  Top-level keys:

``kind``            collapse_sweep | depth_sweep | alpha_grid | train | grad_check
``experiment_id``   free-form label (defaults to ``kind``)
``seeds``           list of integers
``out_dir``         output directory
``checkpoint``      checkpoint path read by ``diagnose`` (optional)
``workers``         parallel cells for ``sweep`` (default 1)

Sections ``[model]`` (fields of :class:`~hopattn.models.ModelConfig`),
``[optim]`` (:class:`OptimConfig`), ``[data]`` (:class:`DataConfig`) and
``[sweep]`` (:class:`SweepConfig`).  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

from hopattn.errors import ConfigError
from hopattn.models import ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KINDS = ("collapse_sweep", "depth_sweep", "alpha_grid", "train", "grad_check")


@dataclass
class OptimConfig:
    steps: int = 300
    batch_size: int = 64  # 0 means full batch
    lr: float = 3e-3
    warmup_steps: int = 20
    min_lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # global-norm clip, 0 disables
    eval_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 0 or self.warmup_steps < 0 or self.eval_every <= 0:
            raise ConfigError("optimizer step counts must be non-negative")
        if self.lr < 0 or self.min_lr < 0 or self.min_lr > self.lr or self.weight_decay < 0:
            raise ConfigError("need 0 <= min_lr <= lr and weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass
class DataConfig:
    kind: str = "vision"  # vision | chars
    n_samples: int = 1200
    test_fraction: float = 0.25
    noise: float = 0.5
    path: str = ""
    val_fraction: float = 0.1
    seed: int = 1234

    def __post_init__(self):
        if self.kind not in ("vision", "chars"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.n_samples <= 0 or not 0 < self.test_fraction < 1 or not 0 < self.val_fraction < 1:
            raise ConfigError("bad dataset sizes")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


@dataclass
class SweepConfig:
    depths: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    kinds: list[str] = field(default_factory=lambda: ["baseline", "mha"])
    # (alpha, alpha_prime) cells of the alpha grid
    grid: list[list[float]] = field(
        default_factory=lambda: [[0.0, 0.5], [0.5, 0.5], [1.0, 0.5], [0.5, 0.0], [0.5, 1.0]]
    )
    n_tokens: int = 197
    input_scale: float = 2.5
    # collapse sweep: also run MHA layers with their internal skip at this alpha
    skip_alpha: float | None = None
    grad_check_stacks: int = 20

    def __post_init__(self):
        if not self.depths or min(self.depths) < 1:
            raise ConfigError("depths must be a non-empty list of positive integers")
        bad = set(self.kinds) - {"baseline", "mha"}
        if not self.kinds or bad:
            raise ConfigError(f"kinds must be drawn from baseline/mha, got {self.kinds}")
        for cell in self.grid:
            if len(cell) != 2 or not all(0.0 <= v <= 1.0 for v in cell):
                raise ConfigError(f"grid cells are [alpha, alpha_prime] in [0, 1], got {cell}")
        if self.n_tokens < 2 or self.input_scale <= 0:
            raise ConfigError("n_tokens >= 2 and input_scale > 0 required")
        if self.skip_alpha is not None and not 0.0 <= self.skip_alpha <= 1.0:
            raise ConfigError("skip_alpha must lie in [0, 1]")


@dataclass
class ExperimentConfig:
    kind: str = "train"
    experiment_id: str = ""
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"
    checkpoint: str = ""
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.experiment_id:
            self.experiment_id = self.kind

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, seed: int | None = None, kind: str | None = None,
                       alpha: float | None = None, alpha_prime: float | None = None,
                       out_dir: str | None = None) -> ExperimentConfig:
        """Apply the command-line overrides."""
        model = self.model
        changes = {}
        if kind is not None:
            changes["attention"] = kind
        if alpha is not None:
            changes["alpha"] = alpha
        if alpha_prime is not None:
            changes["alpha_prime"] = alpha_prime
        try:
            if changes:
                model = dataclasses.replace(model, **changes)
            sweep = self.sweep
            if kind is not None:
                sweep = dataclasses.replace(sweep, kinds=[kind])
            return dataclasses.replace(
                self, model=model, sweep=sweep,
                seeds=[seed] if seed is not None else list(self.seeds),
                out_dir=out_dir if out_dir is not None else self.out_dir,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "data": DataConfig, "sweep": SweepConfig}


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    raw = dict(raw)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _section(cls, raw.pop(name), name)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    try:
        return ExperimentConfig(**raw, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read a ``.toml`` or ``.json`` config; every failure is a :class:`ConfigError`."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        if path.endswith(".json"):
            raw = json.loads(blob.decode("utf-8"))
        else:
            raw = tomllib.loads(blob.decode("utf-8"))
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(raw)
