"""Neural-model inputs: the 9-feature probe window and distance-based neighborhoods."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from .ingest import CleanDataset

EARTH_RADIUS_KM = 6371.0

FEATURES = ("flow", "accuracy", "speed", "distance_km", "day_of_week", "month", "day", "year", "hour_min")
N_FEATURES = len(FEATURES)


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance between two (lat, lon) points in degrees."""
    for lat, lon in (a, b):
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise ValueError(f"coordinate out of range: ({lat}, {lon})")
    phi1, phi2 = math.radians(a[0]), math.radians(b[0])
    dphi = phi2 - phi1
    dlmb = math.radians(b[1] - a[1])
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distances_to(clean: CleanDataset, target: str) -> dict[str, float]:
    t = clean.info[clean.probes[clean.row(target)]]
    return {p: haversine_km((t.latitude, t.longitude), (clean.info[p].latitude, clean.info[p].longitude))
            for p in clean.probes}


@dataclass(frozen=True)
class Neighborhood:
    target_probe: str
    radius_km: float
    members: tuple[str, ...]
    distances: tuple[float, ...]


def neighborhood(clean: CleanDataset, target: str, radius_km: float | None = None) -> Neighborhood:
    """Probes within ``radius_km`` of the target (all probes when None), nearest first."""
    dist = distances_to(clean, target)
    dist[target] = 0.0
    radius = math.inf if radius_km is None else float(radius_km)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    ranked = sorted((d, p) for p, d in dist.items() if d <= radius)
    return Neighborhood(target, radius, tuple(p for _, p in ranked), tuple(d for d, _ in ranked))


@dataclass(frozen=True)
class DistanceQuantiles:
    q1: float
    median: float
    q3: float
    w2: float

    def as_list(self) -> list[float]:
        return [self.q1, self.median, self.q3, self.w2]


def distance_quantiles(distances: Sequence[float]) -> DistanceQuantiles:
    """Quartiles (linear interpolation) and the upper whisker W2.

    W2 is the largest distance not beyond q3 + 1.5 (q3 - q1).
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no distances")
    q1, med, q3 = np.percentile(d, [25, 50, 75])
    fence = q3 + 1.5 * (q3 - q1)
    return DistanceQuantiles(float(q1), float(med), float(q3), float(d[d <= fence].max()))


def neighborhood_quantiles(clean: CleanDataset, target: str) -> DistanceQuantiles:
    """Quantile radii of the other probes' distances to the target."""
    if len(clean.probes) < 2:
        raise ValueError("need at least 2 probes for distance quantiles")
    dist = distances_to(clean, target)
    return distance_quantiles([d for p, d in dist.items() if p != target])


def calendar_features(epoch: int) -> tuple[float, float, float, float, float]:
    """(day_of_week Monday=1, month, day, year, hour + minute/60) in UTC."""
    ts = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    return float(ts.isoweekday()), float(ts.month), float(ts.day), float(ts.year), ts.hour + ts.minute / 60


class FeatureCube:
    """All nine features for a set of member probes over the whole grid: (P, G, 9)."""

    def __init__(self, clean: CleanDataset, members: Sequence[str], target: str):
        self.clean = clean
        self.members = tuple(members)
        self.target = target
        rows = [clean.row(p) for p in self.members]
        dist = distances_to(clean, target)
        cal = np.array([calendar_features(e) for e in clean.epochs])  # (G, 5)
        p, g = len(rows), clean.n_steps
        cube = np.empty((p, g, N_FEATURES))
        cube[:, :, 0] = clean.flow[rows]
        cube[:, :, 1] = clean.accuracy[rows]
        cube[:, :, 2] = clean.speed[rows]
        cube[:, :, 3] = np.array([0.0 if m == target else dist[m] for m in self.members])[:, None]
        cube[:, :, 4:] = cal[None, :, :]
        self.cube = cube

    def window(self, t: int, h: int) -> np.ndarray:
        """Raw rows for lags t-1 (first) .. t-h (last), probe-minor: shape (h*P, 9)."""
        if h < 1:
            raise ValueError("h must be >= 1")
        if t - h < 0:
            raise ValueError(f"insufficient history: need {h} steps before index {t}, have {max(t, 0)}")
        if t > self.cube.shape[1]:
            raise ValueError(f"index {t} beyond grid of {self.cube.shape[1]} steps")
        block = self.cube[:, t - h:t, :][:, ::-1, :]  # (P, h, 9) with lag 1 first
        return block.transpose(1, 0, 2).reshape(h * len(self.members), N_FEATURES)


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature min-max scaling learned on training data; out-of-range values clip to [0, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "FeatureScaler":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, rows.shape[-1])
        return cls(rows.min(axis=0), rows.max(axis=0))

    def transform(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        z = (np.asarray(x, dtype=np.float64) - self.lo) / span
        z = np.where(self.hi > self.lo, z, 0.0)
        clipped = bool(np.any((z < 0) | (z > 1)))
        return np.clip(z, 0.0, 1.0), clipped

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(z, dtype=np.float64) * (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(np.asarray(d["lo"], dtype=np.float64), np.asarray(d["hi"], dtype=np.float64))


@dataclass(frozen=True)
class FeatureMatrix:
    """The lagged window for one target at index ``t``: rows lag 1..h, each over probes s_1..s_P."""

    target_probe: str
    t: int
    h: int
    members: tuple[str, ...]
    values: np.ndarray
    clipped: bool = False

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    def sequence(self) -> np.ndarray:
        """Chronological (oldest first) input of shape (h, P*9) for sequence models."""
        p = len(self.members)
        return self.values.reshape(self.h, p * N_FEATURES)[::-1].copy()


def build_feature_matrix(
    clean: CleanDataset,
    target: str,
    t: datetime | int,
    h: int,
    members: Neighborhood | Sequence[str] | None = None,
    scaler: FeatureScaler | None = None,
) -> FeatureMatrix:
    """Window of the ``h`` steps before ``t`` (a timestamp or grid index) for every member probe.

    Uses only values strictly before ``t``. With a ``scaler``, values are
    min-max scaled and anything outside the training range is clipped and flagged.
    """
    if members is None:
        names = (target,)
    elif isinstance(members, Neighborhood):
        names = members.members
    else:
        names = tuple(members)
    unknown = [m for m in names if m not in clean.probes]
    if unknown:
        raise KeyError(f"members not in dataset: {unknown}")
    idx = t if isinstance(t, (int, np.integer)) else clean.index_of(t)
    rows = FeatureCube(clean, names, target).window(int(idx), h)
    clipped = False
    if scaler is not None:
        rows, clipped = scaler.transform(rows)
    return FeatureMatrix(target, int(idx), h, names, rows, clipped)
