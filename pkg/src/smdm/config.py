"""Run configuration: JSON blocks validated into dataclasses that reject unknown keys."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .features import normalize_mode
from .phantom import CorruptionParams, PhantomSpec
from .registration import RegistrationParams

ENV_OUT = "SMDM_OUT"
ENV_THREADS = "SMDM_THREADS"


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class TemplateConfig:
    """``target_vertices`` is one count for every organ or a per-organ mapping;
    organs missing from the mapping use ``default_vertices``."""

    target_vertices: int | dict = field(default_factory=lambda: {"GTV": 200})
    default_vertices: int = 400
    seed_case: str | None = None
    affine_iters: int = 10

    def vertices_for(self, organ: str) -> int:
        if isinstance(self.target_vertices, dict):
            return int(self.target_vertices.get(organ, self.default_vertices))
        return int(self.target_vertices)


@dataclass(frozen=True)
class RegressionConfig:
    mode: str = "per_region"
    beta: float = 1e-3
    # serialized as "lambda"
    lam: float = 1e-3
    points_per_organ: int = 100
    organs: tuple = ("ST", "DU", "LI", "LK", "RK")
    seed: int = 0
    phases: tuple | None = None
    train_vertices: int | None = None
    voxel_mm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        object.__setattr__(self, "organs", tuple(self.organs))
        if self.phases is not None:
            object.__setattr__(self, "phases", tuple(int(t) for t in self.phases))
        if self.beta <= 0 or self.lam <= 0:
            raise ConfigError("beta and lambda must be positive")
        if self.points_per_organ < 1:
            raise ConfigError("points_per_organ must be >= 1")

    @classmethod
    def from_dict(cls, data, where="regression"):
        data = dict(data or {})
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return _build(cls, data, where)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["organs"] = list(self.organs)
        d["phases"] = None if self.phases is None else list(self.phases)
        return d


@dataclass(frozen=True)
class SweepConfig:
    counts: tuple = (1, 10, 50, 100, 200, 300, 400)
    trials: int = 10

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))


@dataclass(frozen=True)
class RunConfig:
    """Top-level config. Every command reads the blocks it needs and ignores the rest."""

    seed: int = 0
    threads: int = 1
    out: str = "out"
    log_level: str = "INFO"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    corruption: CorruptionParams = field(default_factory=CorruptionParams)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    template: TemplateConfig = field(default_factory=TemplateConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "threads": self.threads, "out": self.out,
            "log_level": self.log_level, "phantom": self.phantom.to_dict(),
            "corruption": asdict(self.corruption), "registration": self.registration.to_dict(),
            "template": asdict(self.template), "regression": self.regression.to_dict(),
            "sweep": {"counts": list(self.sweep.counts), "trials": self.sweep.trials},
        }


_BLOCKS = {"phantom", "corruption", "registration", "template", "regression", "sweep"}


def parse_config(data: dict | None, env=None) -> RunConfig:
    """Validate a config dict and apply ``SMDM_OUT`` / ``SMDM_THREADS`` overrides."""
    data = dict(data or {})
    env = os.environ if env is None else env
    top = {f.name for f in fields(RunConfig)} - _BLOCKS
    extra = sorted(set(data) - top - _BLOCKS)
    if extra:
        raise ConfigError(f"config: unknown keys {extra}")
    for block in sorted(_BLOCKS & set(data)):
        if data[block] is not None and not isinstance(data[block], dict):
            raise ConfigError(f"{block}: expected an object, got {type(data[block]).__name__}")
    scalars = {k: data[k] for k in top if k in data}
    if env.get(ENV_OUT):
        scalars["out"] = env[ENV_OUT]
    if env.get(ENV_THREADS):
        try:
            scalars["threads"] = int(env[ENV_THREADS])
        except ValueError as exc:
            raise ConfigError(f"{ENV_THREADS} must be an integer") from exc
    if int(scalars.get("threads", 1)) < 1:
        raise ConfigError("threads must be >= 1")
    seed = int(scalars.get("seed", 0))
    phantom = dict(data.get("phantom") or {})
    phantom.setdefault("seed", seed)
    try:
        spec = PhantomSpec.from_dict(phantom)
    except TypeError as exc:
        raise ConfigError(f"phantom: {exc}") from exc
    corruption = dict(data.get("corruption") or {})
    corruption.setdefault("seed", seed)
    registration = dict(data.get("registration") or {})
    registration.setdefault("seed", seed)
    regression = dict(data.get("regression") or {})
    regression.setdefault("seed", seed)
    return RunConfig(
        seed=seed,
        threads=int(scalars.get("threads", 1)),
        out=str(scalars.get("out", "out")),
        log_level=str(scalars.get("log_level", "INFO")),
        phantom=spec,
        corruption=_build(CorruptionParams, corruption, "corruption"),
        registration=_build(RegistrationParams, registration, "registration"),
        template=_build(TemplateConfig, data.get("template"), "template"),
        regression=RegressionConfig.from_dict(regression),
        sweep=_build(SweepConfig, data.get("sweep"), "sweep"),
    )


def load_config(path, env=None) -> RunConfig:
    if path is None:
        return parse_config({}, env)
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data, env)
