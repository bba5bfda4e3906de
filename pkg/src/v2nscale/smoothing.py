"""Double and triple (additive Holt-Winters) exponential smoothing, plus sample-and-hold.

States are immutable values; every update returns a new state one step later.
Bulk replays go through the compiled kernels and agree bit-for-bit with the
per-step functions here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from ._backend import kernels

Model = Literal["des", "tes"]


@dataclass(frozen=True)
class SmoothingConfig:
    """Smoothing factors. ``season_len`` counts 5-minute steps (864 = 3 days).

    ``seasonal_anchor`` picks the residual the seasonal term tracks: ``"level"``
    is standard additive Holt-Winters (y - L); ``"trend"`` uses y - T.
    """

    alpha: float = 0.5
    beta: float = 0.001
    gamma: float = 0.001
    season_len: int = 864
    seasonal_anchor: Literal["level", "trend"] = "level"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0,1]: {v}")
        if self.season_len < 2:
            raise ValueError(f"season_len must be >= 2, got {self.season_len}")
        if self.seasonal_anchor not in ("level", "trend"):
            raise ValueError(f"seasonal_anchor must be 'level' or 'trend', got {self.seasonal_anchor!r}")


@dataclass(frozen=True)
class SmoothingState:
    """Level, trend and (TES only) the last ``s`` seasonal terms, oldest first.

    ``cursor`` is the index of the last absorbed observation.
    """

    level: float
    trend: float
    seasonal: tuple[float, ...] = field(default=())
    cursor: int = 0


def _clamp_obs(f_t: float) -> float:
    if f_t < 0:
        warnings.warn(f"negative flow {f_t} clamped to 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return float(f_t)


def _args(cfg: SmoothingConfig) -> tuple:
    return cfg.alpha, cfg.beta, cfg.gamma


def des_update(state: SmoothingState, f_t: float, cfg: SmoothingConfig) -> SmoothingState:
    y = _clamp_obs(f_t)
    level, trend, _ = kernels.smooth_step(state.level, state.trend, 0.0, y, *_args(cfg), False, True)
    return replace(state, level=level, trend=trend, cursor=state.cursor + 1)


def _check_lead(k: int) -> None:
    if k < 1:
        raise ValueError(f"look-ahead k must be >= 1, got {k}")


def des_predict(state: SmoothingState, k: int) -> float:
    _check_lead(k)
    f = state.level + k * state.trend
    return f if f > 0.0 else 0.0


def tes_update(state: SmoothingState, f_t: float, cfg: SmoothingConfig) -> SmoothingState:
    if not state.seasonal:
        raise ValueError("seasonal ring not initialised; use fit_offline or pass an explicit ring")
    if len(state.seasonal) != cfg.season_len:
        raise ValueError(f"ring has {len(state.seasonal)} terms, config says season_len={cfg.season_len}")
    y = _clamp_obs(f_t)
    s_old = state.seasonal[0]
    level, trend, s_new = kernels.smooth_step(
        state.level, state.trend, s_old, y, *_args(cfg), True, cfg.seasonal_anchor == "level"
    )
    return SmoothingState(level, trend, state.seasonal[1:] + (s_new,), state.cursor + 1)


def tes_predict(state: SmoothingState, k: int) -> float:
    """L + k T + S_{t+k-s}; leads beyond one season wrap around the ring."""
    _check_lead(k)
    if not state.seasonal:
        raise ValueError("seasonal ring not initialised")
    s = len(state.seasonal)
    f = state.level + k * state.trend
    f = f + state.seasonal[(k - 1) % s]
    return f if f > 0.0 else 0.0


def predict(state: SmoothingState, k: int, model: Model) -> float:
    return tes_predict(state, k) if model == "tes" else des_predict(state, k)


def update(state: SmoothingState, f_t: float, cfg: SmoothingConfig, model: Model) -> SmoothingState:
    return tes_update(state, f_t, cfg) if model == "tes" else des_update(state, f_t, cfg)


def sample_hold_predict(last_value: float, k: int) -> float:
    _check_lead(k)
    return last_value


def _values(series) -> np.ndarray:
    values = getattr(series, "values", series)
    arr = np.asarray(values, dtype=np.float64)
    if np.any(arr < 0):
        warnings.warn("negative flows clamped to 0", RuntimeWarning, stacklevel=3)
        arr = np.maximum(arr, 0.0)
    return arr


def initial_state(values: np.ndarray, cfg: SmoothingConfig, model: Model) -> SmoothingState:
    """Warm-start state at index 0 from the head of a training segment."""
    if model == "des":
        if len(values) < 2:
            raise ValueError(f"DES needs at least 2 points, got {len(values)}")
        return SmoothingState(float(values[0]), float(values[1] - values[0]), (), 0)
    if model != "tes":
        raise ValueError(f"unknown smoothing model {model!r}")
    s = cfg.season_len
    if len(values) < 2 * s:
        raise ValueError(f"TES needs at least 2 seasons ({2 * s} points), got {len(values)}")
    first = values[:s]
    trend = float(np.mean(np.diff(first)))
    phase = first - first.mean()
    # ring covers indices 1-s .. 0, i.e. phases 1, 2, ..., s-1, 0
    ring = tuple(float(v) for v in np.roll(phase, -1))
    return SmoothingState(float(values[0]), trend, ring, 0)


def fit_offline(series, cfg: SmoothingConfig, model: Model) -> SmoothingState:
    """Initialise from the first season, then replay the whole training segment."""
    values = _values(series)
    state = initial_state(values, cfg, model)
    tes = model == "tes"
    level, trend, ring = kernels.smooth_replay(
        values[1:], state.level, state.trend, np.asarray(state.seasonal, dtype=np.float64),
        *_args(cfg), tes, cfg.seasonal_anchor == "level",
    )
    seasonal = tuple(float(v) for v in ring) if tes else ()
    return SmoothingState(float(level), float(trend), seasonal, len(values) - 1)


def update_online(
    state: SmoothingState,
    window: Sequence[float],
    cfg: SmoothingConfig,
    model: Model,
    end_index: int | None = None,
) -> SmoothingState:
    """Absorb the part of ``window`` newer than the state's cursor.

    ``window`` holds contiguous observations ending at ``end_index``
    (default: directly after the cursor). Factors are never re-estimated.
    """
    values = np.asarray(window, dtype=np.float64)
    if values.size == 0:
        raise ValueError("online window is empty")
    if end_index is None:
        end_index = state.cursor + len(values)
    start = end_index - len(values) + 1
    if start > state.cursor + 1:
        raise ValueError(f"window starts at index {start}; state cursor is {state.cursor} (gap of {start - state.cursor - 1})")
    fresh = values[state.cursor + 1 - start:]
    if fresh.size == 0:
        return state
    if np.any(fresh < 0):
        warnings.warn("negative flows clamped to 0", RuntimeWarning, stacklevel=2)
        fresh = np.maximum(fresh, 0.0)
    tes = model == "tes"
    if tes and len(state.seasonal) != cfg.season_len:
        raise ValueError("seasonal ring not initialised")
    level, trend, ring = kernels.smooth_replay(
        fresh, state.level, state.trend, np.asarray(state.seasonal, dtype=np.float64),
        *_args(cfg), tes, cfg.seasonal_anchor == "level",
    )
    seasonal = tuple(float(v) for v in ring) if tes else ()
    return SmoothingState(float(level), float(trend), seasonal, end_index)


def forecast_series(
    state: SmoothingState,
    values: Sequence[float],
    cfg: SmoothingConfig,
    model: Model,
    k: int,
    online: bool,
) -> np.ndarray:
    """Lead-``k`` forecast of every entry of ``values`` (which follow the state's cursor).

    Online: forecast, then absorb the observation once it is ``k`` steps old.
    Offline: the state never moves, so the lead grows with distance from the
    end of training. The first ``k - 1`` targets share the end-of-training state.
    """
    _check_lead(k)
    arr = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    return kernels.smooth_forecasts(
        arr, state.level, state.trend, np.asarray(state.seasonal, dtype=np.float64),
        *_args(cfg), model == "tes", cfg.seasonal_anchor == "level", int(k), bool(online),
    )


class SmoothingForecaster:
    """Step-wise forecaster used by the scaling loop.

    Call :meth:`observe` with every realised value; :meth:`forecast` returns
    lead-``k`` predictions from the most recent observation.
    """

    def __init__(self, model: Model, cfg: SmoothingConfig, history, online: bool = True):
        self.model = model
        self.cfg = cfg
        self.online = online
        self.state = fit_offline(history, cfg, model)
        self._since_freeze = 0

    def observe(self, value: float) -> None:
        if self.online:
            self.state = update(self.state, value, self.cfg, self.model)
        else:
            self._since_freeze += 1

    def forecast(self, k: int) -> float:
        return predict(self.state, k + self._since_freeze, self.model)


class HoldForecaster:
    """Sample-and-hold: every lead returns the last observation (offline: the last training value)."""

    def __init__(self, history, online: bool = True):
        self.last = float(np.asarray(getattr(history, "values", history), dtype=np.float64)[-1])
        self.online = online

    def observe(self, value: float) -> None:
        if self.online:
            self.last = float(value)

    def forecast(self, k: int) -> float:
        return sample_hold_predict(self.last, k)
