"""Forecast-driven horizontal scaling (n-min policy) against static avg/max baselines.

Flows are vehicles/hour; arrival rates are flow / ``rate_divisor`` per second.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Protocol, Sequence

import numpy as np

from .ingest import TrafficSeries, format_timestamp
from .queueing import PROFILES, ServiceProfile, mean_system_time, min_servers

STEP_MINUTES = 5
SECONDS_PER_HOUR = 3600.0
DEFAULT_N = (30, 45, 60)

# lowest-RMSE technique per look-ahead (minutes) and scenario; all online
BEST_TECHNIQUE = {
    (5, "non-COVID-19"): "lstm",
    (5, "COVID-19"): "tes",
    (15, "non-COVID-19"): "tes",
    (15, "COVID-19"): "tes",
    (30, "non-COVID-19"): "tes",
    (30, "COVID-19"): "tes",
    (45, "non-COVID-19"): "tes",
    (45, "COVID-19"): "tes",
    (60, "non-COVID-19"): "tes",
    (60, "COVID-19"): "tcnlstm",
}


def best_forecaster(n: int, scenario: str = "COVID-19") -> str:
    try:
        return f"{BEST_TECHNIQUE[(n, scenario)]}-online"
    except KeyError:
        raise KeyError(f"no best-technique entry for {n} min in {scenario}") from None


class Forecaster(Protocol):
    def observe(self, value: float) -> None: ...

    def forecast(self, k: int) -> float: ...


@dataclass(frozen=True)
class ScalingPolicy:
    kind: Literal["n_min", "avg", "max"]
    n: int | None = None
    forecaster: str | None = None
    cover_interval: bool = False  # n_min: forecast leads 1..n/5 instead of 1..n/5 - 1

    def __post_init__(self):
        if self.kind not in ("n_min", "avg", "max"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "n_min":
            if self.n is None or self.n <= 0 or self.n % STEP_MINUTES:
                raise ValueError(f"n must be a positive multiple of {STEP_MINUTES} minutes, got {self.n}")
            if self.n == STEP_MINUTES and not self.cover_interval:
                raise ValueError("n = 5 leaves no look-ahead in max over k = 1..n/5 - 1; use cover_interval")

    @property
    def label(self) -> str:
        return f"n_min_{self.n}" if self.kind == "n_min" else self.kind

    @property
    def steps(self) -> int:
        return (self.n or STEP_MINUTES) // STEP_MINUTES

    @property
    def leads(self) -> tuple[int, ...]:
        m = self.steps
        return tuple(range(1, m + 1 if self.cover_interval else m))


@dataclass(frozen=True)
class Interval:
    t_start: int  # epoch seconds, inclusive
    t_end: int  # epoch seconds, exclusive
    c: int
    f_hat: float  # flow the servers were sized for (vehicles/hour)
    realized: tuple[float, ...]


@dataclass(frozen=True)
class Incident:
    t_start: int
    message: str


@dataclass(frozen=True)
class ScalingTrace:
    policy: str
    profile: ServiceProfile
    intervals: tuple[Interval, ...]
    step: int = 300
    rate_divisor: float = SECONDS_PER_HOUR
    incidents: tuple[Incident, ...] = ()

    def __post_init__(self):
        for a, b in zip(self.intervals, self.intervals[1:]):
            if a.t_end != b.t_start:
                raise ValueError("trace intervals must be contiguous")
        for iv in self.intervals:
            if iv.c < 1 or iv.t_end <= iv.t_start:
                raise ValueError(f"bad interval {iv}")

    @property
    def start(self) -> int:
        return self.intervals[0].t_start

    @property
    def n_steps(self) -> int:
        return sum((iv.t_end - iv.t_start) // self.step for iv in self.intervals)

    def servers(self) -> np.ndarray:
        """Deployed c per 5-minute step."""
        return np.concatenate([np.full((iv.t_end - iv.t_start) // self.step, iv.c) for iv in self.intervals])


@dataclass(frozen=True)
class ScalingReport:
    policy: str
    profile: str
    steps: int
    cost: int
    cost_ratio: float
    violations: int
    violation_ratio: float
    incidents: int = 0
    forecaster: str = ""
    error: str = ""

    def row(self) -> dict:
        return {
            "policy": self.policy,
            "service": self.profile,
            "forecaster": self.forecaster,
            "steps": self.steps,
            "cost": self.cost,
            "cost_ratio": _fmt(self.cost_ratio),
            "violations": self.violations,
            "violation_ratio": _fmt(self.violation_ratio),
            "incidents": self.incidents,
            "error": self.error,
        }


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".10g")


def _lam(flow: float, divisor: float) -> float:
    return max(float(flow), 0.0) / divisor


def size_for_flow(flow: float, profile: ServiceProfile, rate_divisor: float = SECONDS_PER_HOUR) -> int:
    return min_servers(_lam(flow, rate_divisor), profile.mu, profile.t0)


# ------------------------------------------------------------------ schedules


@dataclass(frozen=True)
class PeakPlan:
    """Forecast peaks per decision epoch, independent of the service profile."""

    bounds: tuple[tuple[int, int], ...]  # step index ranges [lo, hi) within the test segment
    peaks: tuple[float | None, ...]  # None: forecaster failed at that epoch
    incidents: tuple[Incident, ...]


def forecast_peaks(series: TrafficSeries, forecaster: Forecaster, policy: ScalingPolicy) -> PeakPlan:
    """Run the forecaster through the test segment, taking the max forecast at each epoch.

    At epoch ``e`` the forecaster has seen every value before ``e``. After the
    decision it observes the interval's realised values.
    """
    values = np.asarray(series.values, dtype=np.float64)
    m = policy.steps
    bounds, peaks, incidents = [], [], []
    for lo in range(0, len(values), m):
        hi = min(lo + m, len(values))
        try:
            fc = [max(float(forecaster.forecast(k)), 0.0) for k in policy.leads]
            if not fc or not all(math.isfinite(f) for f in fc):
                raise ValueError("non-finite forecast")
            peaks.append(max(fc))
        except Exception as exc:
            peaks.append(None)
            incidents.append(Incident(int(series.start + lo * series.step), f"{type(exc).__name__}: {exc}"))
        bounds.append((lo, hi))
        for v in values[lo:hi]:
            forecaster.observe(float(v))
    return PeakPlan(tuple(bounds), tuple(peaks), tuple(incidents))


def plan_trace(series: TrafficSeries, plan: PeakPlan, policy: ScalingPolicy, profile: ServiceProfile,
               rate_divisor: float = SECONDS_PER_HOUR) -> ScalingTrace:
    """Size every epoch of a peak plan; a failed epoch keeps the previous c (and its F-hat)."""
    values = np.asarray(series.values, dtype=np.float64)
    intervals = []
    c, f_hat = None, None
    for (lo, hi), peak in zip(plan.bounds, plan.peaks):
        if peak is not None:
            f_hat = peak
            c = size_for_flow(peak, profile, rate_divisor)
        elif c is None:
            raise RuntimeError(f"forecaster failed at the first epoch: {plan.incidents[0].message}")
        intervals.append(Interval(
            int(series.start + lo * series.step), int(series.start + hi * series.step), c, float(f_hat),
            tuple(float(v) for v in values[lo:hi]),
        ))
    return ScalingTrace(policy.label, profile, tuple(intervals), series.step, rate_divisor, plan.incidents)


def n_min_schedule(series: TrafficSeries, forecaster: Forecaster, n: int, profile: ServiceProfile | str,
                   rate_divisor: float = SECONDS_PER_HOUR, cover_interval: bool = False) -> ScalingTrace:
    """Algorithm 1 on a test segment: size for the forecast peak of the next ``n`` minutes."""
    profile = PROFILES[profile] if isinstance(profile, str) else profile
    size_for_flow(0.0, profile, rate_divisor)  # fail fast on an infeasible target
    policy = ScalingPolicy("n_min", n, cover_interval=cover_interval)
    return plan_trace(series, forecast_peaks(series, forecaster, policy), policy, profile, rate_divisor)


def static_schedule(train: TrafficSeries, kind: Literal["avg", "max"], profile: ServiceProfile | str,
                    horizon: TrafficSeries, rate_divisor: float = SECONDS_PER_HOUR) -> ScalingTrace:
    """One c for the whole ``horizon``, sized on the training peak (max) or mean (avg)."""
    profile = PROFILES[profile] if isinstance(profile, str) else profile
    values = np.asarray(train.values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("training segment is empty")
    if kind == "max":
        flow = float(values.max())
    elif kind == "avg":
        flow = float(values.mean())
    else:
        raise ValueError(f"static policy must be avg or max, got {kind!r}")
    c = size_for_flow(flow, profile, rate_divisor)
    iv = Interval(int(horizon.start), int(horizon.start + len(horizon) * horizon.step), c, flow,
                  tuple(float(v) for v in horizon.values))
    return ScalingTrace(kind, profile, (iv,), horizon.step, rate_divisor)


# --------------------------------------------------------------------- replay


def step_delays(trace: ScalingTrace, realized: TrafficSeries) -> np.ndarray:
    """Analytic mean system time per step (inf when unstable)."""
    _check_alignment(trace, realized)
    mu = trace.profile.mu
    out = np.empty(len(realized))
    for i, (flow, c) in enumerate(zip(np.asarray(realized.values, dtype=np.float64), trace.servers())):
        lam = _lam(flow, trace.rate_divisor)
        out[i] = math.inf if lam >= c * mu else mean_system_time(lam, mu, int(c))
    return out


def _check_alignment(trace: ScalingTrace, realized: TrafficSeries) -> None:
    if realized.step != trace.step or realized.start != trace.start or len(realized) != trace.n_steps:
        raise ValueError(
            f"realized series ({format_timestamp(realized.start)}, {len(realized)} steps) does not match "
            f"trace ({format_timestamp(trace.start)}, {trace.n_steps} steps)"
        )


def replay(trace: ScalingTrace, realized: TrafficSeries, max_cost: int | None = None,
           forecaster: str = "") -> ScalingReport:
    """Cost and violations of a trace against the realised flows.

    A step violates when the realised arrival rate makes the deployed servers
    unstable or pushes the mean system time over the target. ``max_cost`` is the
    max-policy cost on the same inputs (default: this trace's own cost).
    """
    delays = step_delays(trace, realized)
    violations = int(np.sum(delays > trace.profile.t0))
    cost = int(trace.servers().sum())
    ref = cost if max_cost is None else max_cost
    ratio = cost / ref if ref else math.nan
    return ScalingReport(trace.policy, trace.profile.name, len(delays), cost, ratio, violations,
                         violations / len(delays), len(trace.incidents), forecaster)


# ---------------------------------------------------------------- comparisons


def default_policies(scenario: str = "COVID-19", ns: Sequence[int] = DEFAULT_N) -> list[ScalingPolicy]:
    return [ScalingPolicy("max"), ScalingPolicy("avg")] + [
        ScalingPolicy("n_min", n, best_forecaster(n, scenario)) for n in ns
    ]


@dataclass
class Comparison:
    reports: list[ScalingReport]
    traces: dict[tuple[str, str], ScalingTrace] = field(default_factory=dict)

    def csv(self) -> str:
        return reports_csv(self.reports)


REPORT_COLUMNS = ("policy", "service", "forecaster", "steps", "cost", "cost_ratio", "violations",
                  "violation_ratio", "incidents", "error")


def reports_csv(reports: Sequence[ScalingReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


TRACE_COLUMNS = ("policy", "service", "timestamp", "c", "f_hat", "flow", "delay_s", "violation")


def trace_csv(traces: Sequence[ScalingTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for tr in traces:
        series = TrafficSeries("realized", tr.start, np.concatenate([iv.realized for iv in tr.intervals]), tr.step)
        delays = step_delays(tr, series)
        i = 0
        for iv in tr.intervals:
            for j, flow in enumerate(iv.realized):
                d = delays[i]
                w.writerow([tr.policy, tr.profile.name, format_timestamp(iv.t_start + j * tr.step), iv.c,
                            _fmt(iv.f_hat), _fmt(flow), "inf" if math.isinf(d) else _fmt(d),
                            int(d > tr.profile.t0)])
                i += 1
    return buf.getvalue()


def compare_policies(
    policies: Sequence[ScalingPolicy],
    train: TrafficSeries,
    test: TrafficSeries,
    profiles: Sequence[ServiceProfile | str],
    forecaster_factory: Callable[[ScalingPolicy], Forecaster] | None = None,
    rate_divisor: float = SECONDS_PER_HOUR,
) -> Comparison:
    """Every policy under every profile, profile-major, in the given policy order.

    Ratios are relative to the max policy on the same profile. n-min forecasts
    are computed once per policy and shared across profiles.
    """
    if not policies:
        raise ValueError("no policies to compare")
    profs = [PROFILES[p] if isinstance(p, str) else p for p in profiles]
    plans: dict[str, PeakPlan | Exception] = {}
    for pol in policies:
        if pol.kind == "n_min" and pol.label not in plans:
            try:
                if forecaster_factory is None:
                    raise ValueError("n_min policy needs a forecaster")
                plans[pol.label] = forecast_peaks(test, forecaster_factory(pol), pol)
            except Exception as exc:
                plans[pol.label] = exc
    out = Comparison([])
    for prof in profs:
        try:
            max_cost = int(static_schedule(train, "max", prof, test, rate_divisor).servers().sum())
        except Exception:
            max_cost = None
        for pol in policies:
            name = pol.forecaster or ""
            try:
                if pol.kind == "n_min":
                    plan = plans[pol.label]
                    if isinstance(plan, Exception):
                        raise plan
                    trace = plan_trace(test, plan, pol, prof, rate_divisor)
                else:
                    trace = static_schedule(train, pol.kind, prof, test, rate_divisor)
                out.traces[(pol.label, prof.name)] = trace
                out.reports.append(replay(trace, test, max_cost, name))
            except Exception as exc:
                out.reports.append(ScalingReport(pol.label, prof.name, len(test), 0, math.nan, 0, math.nan, 0, name,
                                                 f"{type(exc).__name__}: {exc}"))
    return out
