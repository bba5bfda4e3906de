"""JSON run configuration with defaults for every stage of the pipeline."""

from __future__ import annotations

import json
import os
from datetime import date
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .evaluation import LOOKAHEADS, TECHNIQUES, EvalSettings
from .ingest import ScenarioSplit
from .queueing import PROFILES
from .scaling import BEST_TECHNIQUE, DEFAULT_N, ScalingPolicy, best_forecaster
from .smoothing import SmoothingConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SmoothingSection(_Strict):
    alpha: float = 0.5
    beta: float = 0.001
    gamma: float = 0.001
    season_steps: int = Field(864, ge=2)
    seasonal_anchor: Literal["level", "trend"] = "level"

    @field_validator("alpha", "beta", "gamma")
    @classmethod
    def _unit(cls, v, info):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{info.field_name} out of [0,1]")
        return v

    def build(self) -> SmoothingConfig:
        return SmoothingConfig(self.alpha, self.beta, self.gamma, self.season_steps, self.seasonal_anchor)


class NeuralSection(_Strict):
    hidden_layers: Optional[int] = Field(None, ge=1)
    neurons: int = Field(100, ge=1)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(5, ge=1)
    history: Optional[int] = Field(None, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    inputs: Optional[Literal["all", "flow"]] = None
    online_window: int = Field(288, ge=1)
    online_stride: int = Field(1, ge=1)

    def net_options(self) -> dict:
        d = self.model_dump(exclude={"online_stride"})
        return {k: v for k, v in d.items() if v is not None}


class ScenarioSection(_Strict):
    name: str
    train: tuple[date, date]
    test: tuple[date, date]

    def build(self) -> ScenarioSplit:
        return ScenarioSplit(self.name, self.train, self.test)


class ExperimentSection(_Strict):
    techniques: list[Literal["hold", "des", "tes", "lstm", "gru", "tcn", "tcnlstm"]] = Field(
        default_factory=lambda: list(TECHNIQUES))
    modes: list[Literal["offline", "online"]] = Field(default_factory=lambda: ["offline", "online"])
    scenarios: list[str] = Field(default_factory=lambda: ["non-COVID-19", "COVID-19"])
    lookaheads: list[int] = Field(default_factory=lambda: list(LOOKAHEADS))
    radii: list[Union[float, str, None]] = Field(default_factory=lambda: [None])
    warmup: Optional[int] = Field(None, ge=0)

    @field_validator("lookaheads")
    @classmethod
    def _leads(cls, v):
        if not v or min(v) < 1:
            raise ValueError("lookaheads must be a non-empty list of k >= 1")
        return v


class PolicySection(_Strict):
    kind: Literal["n_min", "avg", "max"]
    n: Optional[int] = None
    forecaster: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        ScalingPolicy(self.kind, self.n, self.forecaster)
        return self


class ScalingSection(_Strict):
    scenario: str = "COVID-19"
    policies: Optional[list[PolicySection]] = None
    services: list[str] = Field(default_factory=lambda: list(PROFILES))
    rate_divisor: float = Field(3600.0, gt=0)
    cover_interval: bool = False
    radius: Union[float, str, None] = None

    @field_validator("services")
    @classmethod
    def _services(cls, v):
        unknown = [s for s in v if s not in PROFILES]
        if unknown:
            raise ValueError(f"unknown services {unknown}; expected {sorted(PROFILES)}")
        return v

    def build_policies(self) -> list[ScalingPolicy]:
        if self.policies is None:
            pols = [("max", None, None), ("avg", None, None)] + [("n_min", n, None) for n in DEFAULT_N]
        else:
            pols = [(p.kind, p.n, p.forecaster) for p in self.policies]
        out = []
        for kind, n, fc in pols:
            if kind == "n_min" and fc is None:
                fc = best_forecaster(n, self.scenario) if (n, self.scenario) in BEST_TECHNIQUE else "tes-online"
            out.append(ScalingPolicy(kind, n, fc, self.cover_interval))
        return out


class RunConfig(_Strict):
    dataset: Optional[str] = None  # CSV path, or "synthetic"
    target: Optional[str] = None
    scenarios: Optional[list[ScenarioSection]] = None
    smoothing: SmoothingSection = Field(default_factory=SmoothingSection)
    neural: NeuralSection = Field(default_factory=NeuralSection)
    experiments: ExperimentSection = Field(default_factory=ExperimentSection)
    scaling: ScalingSection = Field(default_factory=ScalingSection)
    output_dir: str = "v2n-out"
    seed: Optional[int] = None

    def eval_settings(self) -> EvalSettings:
        kw = {}
        if self.scenarios:
            kw["splits"] = tuple(s.build() for s in self.scenarios)
        return EvalSettings(
            target=self.target,
            smoothing=self.smoothing.build(),
            neural=self.neural.net_options(),
            warmup=self.experiments.warmup,
            online_stride=self.neural.online_stride,
            **kw,
        )

    def resolved_seed(self, override: int | None = None) -> int:
        return resolve_seed(override if override is not None else self.seed)


def resolve_seed(seed: int | None = None) -> int:
    """Explicit seed, else ``V2N_SEED``, else 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get("V2N_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"V2N_SEED must be an integer, got {env!r}") from None


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.dataset and cfg.dataset != "synthetic":
        path = Path(cfg.dataset)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"dataset: file not found: {path}")
        cfg = cfg.model_copy(update={"dataset": str(path)})
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(data, path.parent)
