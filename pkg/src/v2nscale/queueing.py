"""M/M/c sizing: Erlang C waiting probability, mean sojourn time, minimal server count.

All rates are per second. Flows in vehicles/hour are converted by the caller
(see :mod:`v2nscale.scaling`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from ._backend import kernels

MU_EVS = 208.37  # vehicles/second served by one EVS instance


class UnstableQueueError(ValueError):
    """Arrival rate reaches or exceeds total service capacity."""


class InfeasibleTargetError(ValueError):
    """No server count can bring the mean sojourn time under the target."""


@dataclass(frozen=True)
class ServiceProfile:
    name: str
    mu: float
    t0: float


PROFILES = {
    "remote_driving": ServiceProfile("remote_driving", MU_EVS, 0.005),
    "cooperative_awareness": ServiceProfile("cooperative_awareness", MU_EVS / 20, 0.1),
    "hazard_warning": ServiceProfile("hazard_warning", MU_EVS / 2, 0.01),
}


def get_profile(name: str) -> ServiceProfile:
    try:
        return PROFILES[name.replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown service profile {name!r}; expected one of {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class QueueSizing:
    lam: float
    mu: float
    c: int
    rho: float
    p0: float
    pq: float
    T: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _check(lam: float, mu: float, c: int) -> None:
    if lam < 0:
        raise ValueError(f"arrival rate must be >= 0, got {lam}")
    if mu <= 0:
        raise ValueError(f"service rate must be > 0, got {mu}")
    if c < 1 or int(c) != c:
        raise ValueError(f"server count must be a positive integer, got {c}")
    if lam >= c * mu:
        raise UnstableQueueError(f"lambda={lam} >= c*mu={c * mu}; add servers")


def erlang_b(c: int, a: float) -> float:
    """Blocking probability with offered load ``a`` via the stable recurrence."""
    eb = 1.0
    for k in range(1, c + 1):
        eb = a * eb / (k + a * eb)
    return eb


def erlang_c(lam: float, mu: float, c: int) -> float:
    """Probability an arrival has to wait (P_Q)."""
    _check(lam, mu, c)
    a = lam / mu
    eb = erlang_b(c, a)
    return c * eb / (c - a * (1.0 - eb))


def erlang_c_factorial(lam: float, mu: float, c: int) -> float:
    """The textbook closed form p0 (c rho)^c / (c! (1 - rho)); overflows for large c."""
    _check(lam, mu, c)
    rho = lam / (c * mu)
    tail = (c * rho) ** c / (math.factorial(c) * (1.0 - rho))
    p0 = 1.0 / (sum((c * rho) ** n / math.factorial(n) for n in range(c)) + tail)
    return p0 * tail


def p_zero(lam: float, mu: float, c: int) -> float:
    """Probability of an empty system, evaluated in log space."""
    _check(lam, mu, c)
    a = lam / mu
    if a == 0.0:
        return 1.0
    rho = a / c
    logs = [n * math.log(a) - math.lgamma(n + 1) for n in range(c)]
    logs.append(c * math.log(a) - math.lgamma(c + 1) - math.log1p(-rho))
    top = max(logs)
    return math.exp(-top - math.log(sum(math.exp(v - top) for v in logs)))


def mean_system_time(lam: float, mu: float, c: int) -> float:
    """Mean time in system T = 1/mu + P_Q / (c mu - lambda)."""
    pq = erlang_c(lam, mu, c)
    return 1.0 / mu + pq / (c * mu - lam)


def size(lam: float, mu: float, c: int) -> QueueSizing:
    pq = erlang_c(lam, mu, c)
    return QueueSizing(
        lam=lam,
        mu=mu,
        c=c,
        rho=lam / (c * mu),
        p0=p_zero(lam, mu, c),
        pq=pq,
        T=1.0 / mu + pq / (c * mu - lam),
    )


def min_servers(lam: float, mu: float, t0: float) -> int:
    """Smallest c with a stable queue and mean sojourn time <= t0.

    Walks c upward one server at a time. Counts with lambda >= c mu are
    unstable and are skipped without evaluating the delay.
    """
    if lam < 0:
        raise ValueError(f"arrival rate must be >= 0, got {lam}")
    if mu <= 0:
        raise ValueError(f"service rate must be > 0, got {mu}")
    if t0 <= 1.0 / mu:
        raise InfeasibleTargetError(f"target {t0} s is not above the bare service time 1/mu = {1.0 / mu} s")
    c = max(1, math.floor(lam / mu))
    while lam >= c * mu:
        c += 1
    while mean_system_time(lam, mu, c) > t0:
        c += 1
    return c


@dataclass(frozen=True)
class SimulationResult:
    mean: float
    half_width: float
    customers: int

    @property
    def ci(self) -> tuple[float, float]:
        return self.mean - self.half_width, self.mean + self.half_width


def simulate_mmc(
    lam: float,
    mu: float,
    c: int,
    horizon_arrivals: int = 100_000,
    seed: int = 0,
    warmup: float = 0.1,
    batches: int = 20,
) -> SimulationResult:
    """Event-driven FIFO M/M/c run; mean sojourn time with a batch-means 95% CI.

    The first ``warmup`` fraction of customers is discarded.
    """
    _check(lam, mu, c)
    if lam == 0:
        raise ValueError("simulation needs a positive arrival rate")
    if batches < 2 or horizon_arrivals < 50 * batches:
        raise ValueError(f"need batches >= 2 and at least {50 * batches} arrivals")
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / lam, horizon_arrivals))
    services = rng.exponential(1.0 / mu, horizon_arrivals)
    sojourn = kernels.mmc_sojourn(arrivals, services, int(c))
    kept = sojourn[int(warmup * horizon_arrivals):]
    usable = len(kept) - len(kept) % batches
    means = kept[:usable].reshape(batches, -1).mean(axis=1)
    half = stats.t.ppf(0.975, batches - 1) * means.std(ddof=1) / math.sqrt(batches)
    return SimulationResult(float(kept.mean()), float(half), len(kept))
