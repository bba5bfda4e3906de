"""Forecast experiments: look-ahead RMSE grids over scenarios, modes and neighborhoods."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from typing import Literal, Sequence

import numpy as np

from .features import FeatureCube, neighborhood, neighborhood_quantiles
from .ingest import (
    DEFAULT_SPLITS,
    CleanDataset,
    ProbeInfo,
    ScenarioSplit,
    TrafficSeries,
    day_range,
    get_split,
)
from .neural.network import _DEFAULT_HISTORY, NetConfig, denormalise, predict_batch, predict_raw, train_arrays
from .smoothing import HoldForecaster, SmoothingConfig, SmoothingForecaster, fit_offline, forecast_series

TECHNIQUES = ("hold", "des", "tes", "lstm", "gru", "tcn", "tcnlstm")
NEURAL = ("lstm", "gru", "tcn", "tcnlstm")
LOOKAHEADS = (1, 3, 6, 9, 12)
QUANTILE_RADII = ("q1", "median", "q3", "w2")
STEP_MINUTES = 5

Mode = Literal["offline", "online"]


def rmse(actual, forecast) -> float:
    a = np.asarray(actual, dtype=np.float64)
    f = np.asarray(forecast, dtype=np.float64)
    if a.shape != f.shape:
        raise ValueError(f"length mismatch: {a.shape} actual vs {f.shape} forecast")
    if a.size == 0:
        raise ValueError("rmse of empty series")
    return float(np.sqrt(np.mean((a - f) ** 2)))


@dataclass(frozen=True)
class ExperimentSpec:
    """One cell of the grid. ``radius`` is km, a quantile name (q1/median/q3/w2), "all", or None (target only)."""

    technique: str
    mode: Mode = "online"
    scenario: str = "non-COVID-19"
    lookahead: int = 1
    radius: float | str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ValueError(f"unknown technique {self.technique!r}; expected one of {', '.join(TECHNIQUES)}")
        if self.mode not in ("offline", "online"):
            raise ValueError(f"mode must be offline or online, got {self.mode!r}")
        if int(self.lookahead) < 1:
            raise ValueError(f"look-ahead must be >= 1, got {self.lookahead}")
        object.__setattr__(self, "lookahead", int(self.lookahead))
        r = self.radius
        if isinstance(r, str) and r not in QUANTILE_RADII + ("all",):
            raise ValueError(f"radius must be km, one of {QUANTILE_RADII}, 'all' or null; got {r!r}")
        if isinstance(r, (int, float)) and not isinstance(r, bool) and r < 0:
            raise ValueError("radius must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if "k" in d:
            d["lookahead"] = d.pop("k")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EvalSettings:
    """Knobs shared by every experiment of a run."""

    target: str | None = None
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    neural: dict = field(default_factory=dict)
    warmup: int | None = None
    online_stride: int = 1
    splits: tuple[ScenarioSplit, ...] = DEFAULT_SPLITS

    @property
    def effective_warmup(self) -> int:
        if self.warmup is not None:
            return int(self.warmup)
        h = self.neural.get("history") or max(_DEFAULT_HISTORY.values())
        return max(int(h), self.smoothing.season_len)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rmse: float
    forecasts: np.ndarray
    actual: np.ndarray
    first_index: int
    seconds: float = 0.0
    error: str | None = None

    @property
    def n(self) -> int:
        return int(len(self.forecasts))

    def row(self) -> dict:
        s = self.spec
        return {
            "technique": s.technique,
            "mode": s.mode,
            "scenario": s.scenario,
            "lookahead": s.lookahead,
            "lookahead_min": s.lookahead * STEP_MINUTES,
            "radius": "" if s.radius is None else s.radius,
            "seed": s.seed,
            "rmse": "" if math.isnan(self.rmse) else repr(round(self.rmse, 6)),
            "n": self.n,
            "error": self.error or "",
        }


# ----------------------------------------------------------------- forecasters


def hold_forecasts(values: np.ndarray, n_train: int, k: int, online: bool) -> np.ndarray:
    """Sample-and-hold: the value at the origin ``i - k`` (never earlier than the end of training when offline)."""
    values = np.asarray(values, dtype=np.float64)
    idx = np.arange(n_train, len(values))
    origin = np.maximum(idx - k, n_train - 1) if online else np.full(idx.shape, n_train - 1)
    return values[origin].copy()


def smoothing_forecasts(model: str, values: np.ndarray, n_train: int, k: int, online: bool,
                        cfg: SmoothingConfig) -> np.ndarray:
    """Fit on ``values[:n_train]`` and forecast every later entry with lead ``k``."""
    values = np.asarray(values, dtype=np.float64)
    state = fit_offline(values[:n_train], cfg, model)
    return forecast_series(state, values[n_train:], cfg, model, k, online)


def series_forecasts(technique: str, values, n_train: int, k: int, mode: Mode = "online",
                     cfg: SmoothingConfig | None = None) -> np.ndarray:
    """Univariate techniques on a bare series; forecasts for indices ``n_train..``."""
    online = mode == "online"
    if technique == "hold":
        return hold_forecasts(values, n_train, k, online)
    if technique in ("des", "tes"):
        return smoothing_forecasts(technique, values, n_train, k, online, cfg or SmoothingConfig())
    raise ValueError(f"{technique} needs a dataset with probe features, not a bare series")


def window_batch(cube: np.ndarray, ts: np.ndarray, h: int) -> np.ndarray:
    """Raw chronological windows for indices ``ts``: (N, h, P*9)."""
    idx = ts[:, None] + np.arange(-h, 0)[None, :]
    block = cube[:, idx, :]  # (P, N, h, 9)
    n, p = len(ts), cube.shape[0]
    return block.transpose(1, 2, 0, 3).reshape(n, h, p * cube.shape[2])


def resolve_members(clean: CleanDataset, target: str, radius) -> tuple[str, ...]:
    if radius is None:
        return (target,)
    if radius == "all":
        return neighborhood(clean, target).members
    if isinstance(radius, str):
        radius = getattr(neighborhood_quantiles(clean, target), radius)
    return neighborhood(clean, target, float(radius)).members


def neural_forecasts(
    clean: CleanDataset,
    target: str,
    members: Sequence[str],
    train: slice,
    test: slice,
    k: int,
    online: bool,
    cfg: NetConfig,
    stride: int = 1,
) -> np.ndarray:
    """Direct lead-``k`` forecasts for every test index.

    The window for target ``i`` ends at the origin ``i - k``. Offline weights
    stay frozen; online, before forecasting, the weights take one gradient pass
    over the last ``cfg.online_window`` samples whose targets are already known.
    """
    cube = FeatureCube(clean, members, target).cube
    y = clean.flow[clean.row(target)].astype(np.float64)
    h = cfg.history
    members = tuple(members)
    ti = members.index(target)
    lo = train.start + h - 1  # first usable origin
    a, b = test.start, test.stop
    origins = np.arange(lo, a - k)
    if origins.size == 0:
        raise ValueError(f"training segment too short for history {h} and look-ahead {k}")
    params = train_arrays(cfg, window_batch(cube, origins + 1, h), y[origins + k][:, None], ti)
    test_origins = np.arange(a, b) - k
    if not online:
        return predict_batch(params, window_batch(cube, test_origins + 1, h), k)
    out = np.empty(b - a)
    W = cfg.online_window
    for j0 in range(0, b - a, stride):
        o = int(test_origins[j0])
        recent = np.arange(max(lo, o - k - W + 1), o - k + 1)
        if recent.size:
            params = train_arrays(cfg, window_batch(cube, recent + 1, h), y[recent + k][:, None], ti, "online", params)
        block = test_origins[j0:j0 + stride]
        out[j0:j0 + len(block)] = predict_batch(params, window_batch(cube, block + 1, h), k)
    return out


# ----------------------------------------------------------------- experiments


def _net_config(spec: ExperimentSpec, settings: EvalSettings) -> NetConfig:
    opts = dict(settings.neural)
    opts.pop("model", None)
    opts["seed"] = spec.seed
    opts["lookaheads"] = (spec.lookahead,)
    return NetConfig(model=spec.technique, **opts)


def experiment_forecasts(spec: ExperimentSpec, clean: CleanDataset, settings: EvalSettings) -> tuple[np.ndarray, int]:
    """All test-set forecasts (warmup included) and the first test index."""
    split = get_split(settings.splits, spec.scenario)
    train, test = day_range(clean, split.train), day_range(clean, split.test)
    target = settings.target or clean.default_target()
    online = spec.mode == "online"
    if spec.technique in NEURAL:
        members = resolve_members(clean, target, spec.radius)
        if target not in members:
            members = (target,) + tuple(members)
        cfg = _net_config(spec, settings)
        f = neural_forecasts(clean, target, members, train, test, spec.lookahead, online, cfg, settings.online_stride)
        return f, test.start
    # univariate: everything before the test segment is history
    values = clean.flow[clean.row(target), train.start:test.stop].astype(np.float64)
    n_train = test.start - train.start
    f = series_forecasts(spec.technique, values, n_train, spec.lookahead, spec.mode, settings.smoothing)
    return f, test.start


def run_experiment(spec: ExperimentSpec, clean: CleanDataset, settings: EvalSettings | None = None) -> ExperimentResult:
    settings = settings or EvalSettings()
    t0 = time.perf_counter()
    forecasts, first = experiment_forecasts(spec, clean, settings)
    target = settings.target or clean.default_target()
    warm = settings.effective_warmup
    if warm >= len(forecasts):
        raise ValueError(f"warmup of {warm} steps leaves nothing of a {len(forecasts)}-step test set")
    actual = clean.flow[clean.row(target), first + warm:first + len(forecasts)].astype(np.float64)
    kept = forecasts[warm:]
    return ExperimentResult(spec, rmse(actual, kept), kept, actual, first + warm, time.perf_counter() - t0)


def _run_safe(args) -> ExperimentResult:
    spec, clean, settings = args
    try:
        return run_experiment(spec, clean, settings)
    except Exception as exc:  # recorded per row, the grid carries on
        empty = np.empty(0)
        return ExperimentResult(spec, math.nan, empty, empty, -1, 0.0, f"{type(exc).__name__}: {exc}")


def run_grid(specs: Sequence[ExperimentSpec], clean: CleanDataset, settings: EvalSettings | None = None,
             jobs: int = 1) -> list[ExperimentResult]:
    """Results in spec order; ``jobs > 1`` spreads specs over worker processes."""
    specs = list(specs)
    if not specs:
        raise ValueError("experiment grid is empty")
    settings = settings or EvalSettings()
    work = [(s, clean, settings) for s in specs]
    if jobs <= 1 or len(specs) == 1:
        return [_run_safe(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_safe, work))


GRID_COLUMNS = ("technique", "mode", "scenario", "lookahead", "lookahead_min", "radius", "seed", "rmse", "n", "error")


def grid_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=GRID_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def expand_grid(techniques=TECHNIQUES, modes=("offline", "online"), scenarios=("non-COVID-19", "COVID-19"),
                lookaheads=LOOKAHEADS, radii=(None,), seeds=(0,)) -> list[ExperimentSpec]:
    return [
        ExperimentSpec(t, m, sc, k, r, s)
        for sc in scenarios for m in modes for t in techniques for k in lookaheads for r in radii for s in seeds
    ]


def best_by_lookahead(results: Sequence[ExperimentResult]) -> dict[tuple[str, str, int], str]:
    """(scenario, mode, k) -> technique with the lowest RMSE (ties: name order)."""
    best: dict[tuple[str, str, int], tuple[float, str]] = {}
    for r in results:
        if r.error or math.isnan(r.rmse):
            continue
        key = (r.spec.scenario, r.spec.mode, r.spec.lookahead)
        cand = (r.rmse, r.spec.technique)
        if key not in best or cand < best[key]:
            best[key] = cand
    return {k: v[1] for k, v in sorted(best.items())}


# ------------------------------------------------------------------ synthetics

SYNTH_START = datetime(2020, 1, 28, tzinfo=timezone.utc)
STEPS_PER_DAY = 288
TREND_BREAK_FACTOR = 0.42


def synth_series(
    profile: Literal["seasonal", "trend_break", "random_walk"],
    days: int,
    amplitude: float,
    noise_sd: float = 0.0,
    seed: int = 0,
    break_day: int | None = None,
    start: datetime = SYNTH_START,
    probe_id: str = "synthetic",
    phase: float = 0.0,
) -> TrafficSeries:
    """Desk-scale stand-in for a probe's flow on the 5-minute grid.

    seasonal: amplitude * (1 + sin(2 pi t / 288 + phase)) + noise.
    trend_break: the same, scaled by 0.42 from ``break_day`` on (default: two
    thirds of the way in). random_walk: starts at ``amplitude``, adds
    N(0, noise_sd) per step, clamped at 0.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    n = days * STEPS_PER_DAY
    t = np.arange(n)
    if profile == "random_walk":
        steps = rng.normal(0.0, noise_sd, size=n)
        values = np.empty(n)
        x = float(amplitude)
        for i in range(n):
            values[i] = x
            x = max(0.0, x + steps[i])
    elif profile in ("seasonal", "trend_break"):
        values = amplitude * (1.0 + np.sin(2 * np.pi * t / STEPS_PER_DAY + phase))
        if profile == "trend_break":
            bd = (2 * days) // 3 if break_day is None else int(break_day)
            if not 0 < bd < days:
                raise ValueError(f"break_day must be inside (0, {days}), got {bd}")
            values[bd * STEPS_PER_DAY:] *= TREND_BREAK_FACTOR
        if noise_sd > 0:
            values = values + rng.normal(0.0, noise_sd, size=n)
        values = np.maximum(values, 0.0)
    else:
        raise ValueError(f"unknown profile {profile!r}")
    return TrafficSeries(probe_id, int(start.timestamp()), values, 300)


def synthetic_dataset(
    days: int = 48,
    probes: int = 3,
    amplitude: float = 600.0,
    noise_sd: float = 20.0,
    seed: int = 0,
    break_date: date | None = date(2020, 3, 8),
    start: datetime = SYNTH_START,
) -> CleanDataset:
    """A small clean multi-probe dataset covering both default scenarios (28 Jan to 15 Mar 2020).

    Flows are daily sinusoids with per-probe phase and amplitude, dropping to
    42% from ``break_date``; speeds and accuracies are plausible fillers.
    """
    rng = np.random.default_rng(seed)
    break_day = None
    if break_date is not None:
        break_day = (break_date - start.date()).days
        if not 0 < break_day < days:
            break_day = None
    names = tuple(f"P{i:03d}" for i in range(probes))
    flows, speeds, acc, info = [], [], [], {}
    for i, name in enumerate(names):
        amp = amplitude * (1.0 + 0.25 * i)
        profile = "trend_break" if break_day is not None else "seasonal"
        s = synth_series(profile, days, amp, noise_sd, seed * 1000 + i, break_day=break_day, start=start,
                         probe_id=name, phase=0.3 * i)
        flows.append(np.round(s.values))
        speeds.append(np.round(np.clip(50.0 - s.values / amp * 10 + rng.normal(0, 2, s.values.size), 5, None), 1))
        acc.append(np.full(s.values.size, 100.0))
        info[name] = ProbeInfo(name, 45.05 + 0.01 * i, 7.65 + 0.013 * i, 0.0, f"Synthetic road {i}")
    return CleanDataset(names, info, int(start.timestamp()), 300, np.array(flows), np.array(speeds), np.array(acc))



# ------------------------------------------------------- step-wise forecasters


class NeuralForecaster:
    """Step-wise wrapper around a multi-head network for the scaling loop.

    Windows are read from the dataset, so :meth:`observe` only advances the
    origin; online mode retrains every ``stride`` observations.
    """

    def __init__(self, clean: CleanDataset, target: str, members: Sequence[str], train: slice, test_start: int,
                 cfg: NetConfig, online: bool = True, stride: int = 1):
        self.members = tuple(members)
        self.cube = FeatureCube(clean, self.members, target).cube
        self.y = clean.flow[clean.row(target)].astype(np.float64)
        self.cfg, self.online, self.stride = cfg, online, max(1, int(stride))
        self.ti = self.members.index(target)
        self.h = cfg.history
        self.kmax = max(cfg.lookaheads)
        self.lo = train.start + self.h - 1
        origins = np.arange(self.lo, test_start - self.kmax)
        if origins.size == 0:
            raise ValueError(f"training segment too short for history {self.h} and look-ahead {self.kmax}")
        self.params = train_arrays(cfg, window_batch(self.cube, origins + 1, self.h), self._targets(origins), self.ti)
        self.pos = test_start - 1
        self._since = 0
        self._cache: tuple[int, np.ndarray] | None = None

    def _targets(self, origins: np.ndarray) -> np.ndarray:
        return np.stack([self.y[origins + k] for k in self.cfg.lookaheads], axis=1)

    def observe(self, value: float) -> None:
        self.pos += 1
        self._since += 1
        if self.online and self._since >= self.stride:
            self._since = 0
            recent = np.arange(max(self.lo, self.pos - self.kmax - self.cfg.online_window + 1), self.pos - self.kmax + 1)
            if recent.size:
                self.params = train_arrays(self.cfg, window_batch(self.cube, recent + 1, self.h), self._targets(recent),
                                           self.ti, "online", self.params)

    def forecast(self, k: int) -> float:
        if k not in self.params.heads:
            raise ValueError(f"no head for look-ahead {k}; trained heads: {self.params.heads}")
        if self._cache is None or self._cache[0] != self.pos:
            if self.pos + 1 > self.cube.shape[1]:
                raise ValueError("forecast origin beyond the dataset")
            raw = predict_raw(self.params, window_batch(self.cube, np.array([self.pos + 1]), self.h))[0]
            self._cache = (self.pos, denormalise(self.params, raw))
        return float(self._cache[1][self.params.heads.index(k)])


class PerfectForecaster:
    """Oracle returning the realised value (the last one past the end of ``values``)."""

    def __init__(self, values, start: int = 0):
        self.values = np.asarray(values, dtype=np.float64)
        self.pos = start - 1

    def observe(self, value: float) -> None:
        self.pos += 1

    def forecast(self, k: int) -> float:
        return float(self.values[min(self.pos + k, len(self.values) - 1)])


def parse_forecaster(name: str) -> tuple[str, Mode]:
    """'tes-online' -> ('tes', 'online'); a bare technique means online."""
    tech, _, mode = name.lower().partition("-")
    mode = mode or "online"
    if tech not in TECHNIQUES + ("perfect",):
        raise ValueError(f"unknown forecaster {name!r}")
    if mode not in ("online", "offline"):
        raise ValueError(f"unknown forecaster mode in {name!r}")
    return tech, mode  # type: ignore[return-value]


def make_forecaster(name: str, clean: CleanDataset, target: str, train: slice, test_start: int,
                    lookaheads: Sequence[int], settings: EvalSettings | None = None, seed: int = 0,
                    radius=None):
    """Step-wise forecaster positioned at the end of the training history (origin ``test_start - 1``)."""
    settings = settings or EvalSettings()
    tech, mode = parse_forecaster(name)
    online = mode == "online"
    y = clean.flow[clean.row(target)].astype(np.float64)
    history = y[train.start:test_start]
    if tech == "perfect":
        return PerfectForecaster(y, test_start)
    if tech == "hold":
        return HoldForecaster(history, online)
    if tech in ("des", "tes"):
        return SmoothingForecaster(tech, settings.smoothing, history, online)
    members = resolve_members(clean, target, radius)
    if target not in members:
        members = (target,) + tuple(members)
    opts = dict(settings.neural)
    opts.pop("model", None)
    opts.update(seed=seed, lookaheads=tuple(lookaheads))
    cfg = NetConfig(model=tech, **opts)
    return NeuralForecaster(clean, target, members, train, test_start, cfg, online, settings.online_stride)
