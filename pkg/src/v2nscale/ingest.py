"""Probe-record ingestion: CSV/XML parsing, spurious-probe filter, two-sweep gap filling, scenario splits."""

from __future__ import annotations

import csv
import io
import os
import tempfile
import urllib.error
import urllib.request
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from typing import BinaryIO, Iterable, Sequence

import numpy as np

CSV_COLUMNS = (
    "probe_id",
    "timestamp",
    "latitude",
    "longitude",
    "offset_m",
    "road_name",
    "flow",
    "speed",
    "accuracy",
)

# attribute names seen in the 5T open-data feed, mapped onto our columns
XML_ALIASES = {
    "lcd1": "probe_id",
    "lat": "latitude",
    "lng": "longitude",
    "lon": "longitude",
    "offset": "offset_m",
    "Road_name": "road_name",
    "start_time": "timestamp",
}


class IngestError(ValueError):
    pass


class FormatError(IngestError):
    """The input cannot be read as the declared format at all."""


class TransportError(IngestError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class ProbeRecord:
    probe_id: str
    timestamp: datetime
    latitude: float
    longitude: float
    offset_m: float
    road_name: str
    flow: int
    speed: float
    accuracy: int

    def __post_init__(self):
        if self.flow < 0:
            raise ValueError("negative flow")
        if self.speed < 0:
            raise ValueError("negative speed")
        if not 0 <= self.accuracy <= 100:
            raise ValueError("accuracy out of [0,100]")
        if not -90 <= self.latitude <= 90:
            raise ValueError("latitude out of range")
        if not -180 <= self.longitude <= 180:
            raise ValueError("longitude out of range")

    @property
    def epoch(self) -> int:
        return int(self.timestamp.timestamp())


@dataclass
class ParseReport:
    rows: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    def error(self, line: int, message: str) -> None:
        self.errors.append((line, message))

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(msg for _, msg in self.errors).items()))

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "accepted": self.rows - len(self.errors),
            "row_errors": self.counts(),
            "first_errors": [{"line": ln, "error": msg} for ln, msg in self.errors[:20]],
        }


@dataclass(frozen=True)
class RawDataset:
    """Unsanitised records. ``probes`` lists every probe seen, even with no valid row."""

    records: tuple[ProbeRecord, ...]
    interval: int = 300
    probes: tuple[str, ...] = ()
    report: ParseReport | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("interval must be > 0")
        if not self.probes:
            object.__setattr__(self, "probes", tuple(dict.fromkeys(r.probe_id for r in self.records)))

    def grid_bounds(self) -> tuple[int, int]:
        if not self.records:
            raise IngestError("dataset has no records; grid is empty")
        epochs = [r.epoch for r in self.records]
        return min(epochs), max(epochs)

    def expected_grid(self) -> np.ndarray:
        lo, hi = self.grid_bounds()
        return np.arange(lo, hi + 1, self.interval, dtype=np.int64)


# --------------------------------------------------------------------- parsing


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _snap(ts: datetime, interval: int, max_snap: float) -> datetime:
    epoch = ts.timestamp()
    snapped = int((epoch + interval / 2) // interval) * interval
    if abs(snapped - epoch) > max_snap:
        raise ValueError("timestamp off grid")
    return datetime.fromtimestamp(snapped, tz=timezone.utc)


def _int_field(text: str, name: str) -> int:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ValueError(f"invalid {name}") from None
    if not v.is_integer():
        raise ValueError(f"non-integer {name}")
    return int(v)


def _float_field(text: str, name: str) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ValueError(f"invalid {name}") from None
    if not np.isfinite(v):
        raise ValueError(f"invalid {name}")
    return v


def _make_record(fields: dict, interval: int, max_snap: float) -> ProbeRecord:
    probe = (fields.get("probe_id") or "").strip()
    if not probe:
        raise ValueError("missing probe_id")
    raw_ts = fields.get("timestamp")
    if not raw_ts:
        raise ValueError("missing timestamp")
    try:
        ts = parse_timestamp(raw_ts)
    except ValueError:
        raise ValueError("unparseable timestamp") from None
    return ProbeRecord(
        probe_id=probe,
        timestamp=_snap(ts, interval, max_snap),
        latitude=_float_field(fields.get("latitude"), "latitude"),
        longitude=_float_field(fields.get("longitude"), "longitude"),
        offset_m=_float_field(fields.get("offset_m", 0) or 0, "offset_m"),
        road_name=(fields.get("road_name") or "").strip(),
        flow=_int_field(fields.get("flow"), "flow"),
        speed=_float_field(fields.get("speed"), "speed"),
        accuracy=_int_field(fields.get("accuracy", 100), "accuracy"),
    )


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _iter_csv(data: bytes) -> Iterable[tuple[int, dict]]:
    reader = csv.reader(io.StringIO(data.decode("utf-8-sig"), newline=""))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise FormatError(f"unparseable header {header!r}; expected {','.join(CSV_COLUMNS)}")
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            yield line, {"__error__": f"expected {len(CSV_COLUMNS)} columns"}
            continue
        yield line, dict(zip(CSV_COLUMNS, row))


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _iter_xml(data: bytes) -> Iterable[tuple[int, dict]]:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise FormatError(f"malformed XML: {exc}") from None
    index = 0
    for elem in root.iter():
        if _local(elem.tag) != "FDT_data":
            continue
        index += 1
        fields = {}
        for key, value in elem.attrib.items():
            key = XML_ALIASES.get(_local(key), _local(key))
            if key in CSV_COLUMNS:
                fields[key] = value
        for child in elem:
            if _local(child.tag) == "speedflow":
                fields.setdefault("flow", child.attrib.get("flow"))
                fields.setdefault("speed", child.attrib.get("speed"))
        yield index, fields


def parse_records(source: bytes | BinaryIO | str | os.PathLike, fmt: str = "csv", interval: int = 300,
                  max_snap: float | None = None) -> RawDataset:
    """Parse CSV or XML probe data.

    Timestamps are normalised to UTC and snapped to the ``interval`` grid.
    Bad rows are excluded and listed in ``dataset.report``; a bad header
    raises :class:`FormatError`.
    """
    if fmt not in ("csv", "xml"):
        raise FormatError(f"unknown format {fmt!r}")
    if max_snap is None:
        max_snap = interval / 2
    data = _read_bytes(source)
    rows = _iter_csv(data) if fmt == "csv" else _iter_xml(data)
    report = ParseReport()
    records = []
    probes: dict[str, None] = {}
    for line, fields in rows:
        report.rows += 1
        if "__error__" in fields:
            report.error(line, fields["__error__"])
            continue
        pid = (fields.get("probe_id") or "").strip()
        if pid:
            probes.setdefault(pid)
        try:
            records.append(_make_record(fields, interval, max_snap))
        except ValueError as exc:
            report.error(line, str(exc))
    return RawDataset(tuple(records), interval, tuple(probes), report)


# ------------------------------------------------------------------- filtering


def coverage(raw: RawDataset) -> dict[str, float]:
    """Fraction of grid points at which each probe reported at least once."""
    lo, hi = raw.grid_bounds()
    size = (hi - lo) // raw.interval + 1
    seen: dict[str, set[int]] = {p: set() for p in raw.probes}
    for r in raw.records:
        seen[r.probe_id].add(r.epoch)
    return {p: len(s) / size for p, s in seen.items()}


def filter_spurious(raw: RawDataset, min_coverage: float = 0.8) -> tuple[RawDataset, list[str]]:
    """Drop probes whose grid coverage is below ``min_coverage`` (the boundary is kept)."""
    if not 0.0 <= min_coverage <= 1.0:
        raise ValueError(f"min_coverage out of [0,1]: {min_coverage}")
    cov = coverage(raw)
    removed = sorted(p for p, c in cov.items() if c < min_coverage - 1e-12)
    gone = set(removed)
    kept = tuple(r for r in raw.records if r.probe_id not in gone)
    probes = tuple(p for p in raw.probes if p not in gone)
    return RawDataset(kept, raw.interval, probes, raw.report), removed


# ------------------------------------------------------------------ sanitation


@dataclass(frozen=True)
class ProbeInfo:
    probe_id: str
    latitude: float
    longitude: float
    offset_m: float
    road_name: str


@dataclass(frozen=True)
class TrafficSeries:
    """Gap-free flow series (vehicles/hour) on a fixed step."""

    probe_id: str
    start: int
    values: np.ndarray
    step: int = 300

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if np.any(np.asarray(self.values) < 0):
            raise ValueError("flows must be non-negative")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def epochs(self) -> np.ndarray:
        return self.start + self.step * np.arange(len(self.values), dtype=np.int64)

    def timestamps(self) -> list[datetime]:
        return [datetime.fromtimestamp(int(e), tz=timezone.utc) for e in self.epochs]

    def segment(self, lo: int, hi: int) -> "TrafficSeries":
        return TrafficSeries(self.probe_id, self.start + lo * self.step, self.values[lo:hi], self.step)


@dataclass(frozen=True, eq=False)
class CleanDataset:
    """Complete probe x grid matrices of flow, speed and accuracy."""

    probes: tuple[str, ...]
    info: dict[str, ProbeInfo]
    start: int
    interval: int
    flow: np.ndarray
    speed: np.ndarray
    accuracy: np.ndarray
    reported: tuple[int, ...] = ()
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("flow", "speed", "accuracy"):
            arr = getattr(self, name)
            if arr.shape != (len(self.probes), arr.shape[1]) or np.isnan(arr).any():
                raise ValueError(f"{name} matrix must be complete with one row per probe")
            arr.setflags(write=False)
        if not self.reported:
            object.__setattr__(self, "reported", (self.n_steps,) * len(self.probes))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CleanDataset):
            return NotImplemented
        return (
            self.probes == other.probes
            and self.info == other.info
            and self.start == other.start
            and self.interval == other.interval
            and np.array_equal(self.flow, other.flow)
            and np.array_equal(self.speed, other.speed)
            and np.array_equal(self.accuracy, other.accuracy)
        )

    @property
    def n_steps(self) -> int:
        return self.flow.shape[1]

    @property
    def epochs(self) -> np.ndarray:
        return self.start + self.interval * np.arange(self.n_steps, dtype=np.int64)

    @property
    def grid(self) -> np.ndarray:
        return self.epochs.astype("datetime64[s]")

    @property
    def end(self) -> int:
        return self.start + (self.n_steps - 1) * self.interval

    def row(self, probe: str) -> int:
        try:
            return self.probes.index(probe)
        except ValueError:
            raise KeyError(f"unknown probe {probe!r}") from None

    def index_of(self, when: datetime | int) -> int:
        epoch = int(when.timestamp()) if isinstance(when, datetime) else int(when)
        offset = epoch - self.start
        if offset % self.interval or not 0 <= offset // self.interval < self.n_steps:
            raise KeyError(f"{format_timestamp(epoch)} is not on the dataset grid")
        return offset // self.interval

    def series(self, probe: str) -> TrafficSeries:
        return TrafficSeries(probe, self.start, self.flow[self.row(probe)], self.interval)

    def default_target(self) -> str:
        """Probe with the most reported grid points before gap filling (ties: smallest id)."""
        return min(zip(self.probes, self.reported), key=lambda pr: (-pr[1], pr[0]))[0]

    def subset(self, probes: Sequence[str]) -> "CleanDataset":
        rows = [self.row(p) for p in probes]
        return CleanDataset(
            tuple(probes), {p: self.info[p] for p in probes}, self.start, self.interval,
            self.flow[rows].copy(), self.speed[rows].copy(), self.accuracy[rows].copy(),
            tuple(self.reported[r] for r in rows), dict(self.report),
        )

    def to_raw(self) -> RawDataset:
        records = []
        for p in self.probes:
            i = self.row(p)
            meta = self.info[p]
            for j, epoch in enumerate(self.epochs):
                records.append(ProbeRecord(
                    p, datetime.fromtimestamp(int(epoch), tz=timezone.utc), meta.latitude, meta.longitude,
                    meta.offset_m, meta.road_name, int(self.flow[i, j]), float(self.speed[i, j]),
                    int(self.accuracy[i, j]),
                ))
        return RawDataset(tuple(records), self.interval, self.probes)


def _fill(values: np.ndarray, reported: np.ndarray) -> np.ndarray:
    """Forward fill along axis 1; leading gaps take the first reported value."""
    g = values.shape[1]
    idx = np.where(reported, np.arange(g), -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    first = reported.argmax(axis=1)
    idx = np.where(idx < 0, first[:, None], idx)
    return np.take_along_axis(values, idx, axis=1)


def sanitize(raw: RawDataset) -> CleanDataset:
    """Fill every probe onto the complete uniform grid.

    Sweep 1 fills timestamps reported by any probe from the probe's last
    value; sweep 2 fills grid points nobody reported. Leading gaps are
    back-filled from the first value. Duplicate timestamps keep the last
    record in ingestion order. Counts per rule land in ``clean.report``.
    """
    lo, hi = raw.grid_bounds()
    step = raw.interval
    g = (hi - lo) // step + 1
    probes = raw.probes
    row = {p: i for i, p in enumerate(probes)}
    shape = (len(probes), g)
    flow = np.full(shape, np.nan)
    speed = np.full(shape, np.nan)
    acc = np.full(shape, np.nan)
    info: dict[str, ProbeInfo] = {}
    duplicates = 0
    for r in raw.records:
        i, j = row[r.probe_id], (r.epoch - lo) // step
        if not np.isnan(flow[i, j]):
            duplicates += 1
        flow[i, j], speed[i, j], acc[i, j] = r.flow, r.speed, r.accuracy
        info[r.probe_id] = ProbeInfo(r.probe_id, r.latitude, r.longitude, r.offset_m, r.road_name)
    missing = [p for p in probes if p not in info]
    if missing:
        raise IngestError(f"probe(s) without any record: {', '.join(missing)}")

    reported = ~np.isnan(flow)
    union = reported.any(axis=0)
    seen_before = np.maximum.accumulate(reported, axis=1)
    report = {
        "probes": len(probes),
        "grid_points": int(g),
        "duplicates_collapsed": duplicates,
        "grid_points_without_reports": int((~union).sum()),
        "sweep1_filled": int((union & ~reported & seen_before).sum()),
        "sweep2_filled": int((~union & seen_before).sum()),
        "leading_backfilled": int((~seen_before).sum()),
    }
    if raw.report is not None:
        report["parse"] = raw.report.to_dict()
    return CleanDataset(
        probes=probes,
        info=info,
        start=lo,
        interval=step,
        flow=_fill(flow, reported),
        speed=_fill(speed, reported),
        accuracy=_fill(acc, reported),
        reported=tuple(int(n) for n in reported.sum(axis=1)),
        report=report,
    )


def write_csv(clean: CleanDataset, target) -> None:
    """Persist in the canonical CSV layout (probe-major, chronological)."""
    own = isinstance(target, (str, os.PathLike))
    fh = open(target, "w", newline="", encoding="utf-8") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        stamps = [format_timestamp(e) for e in clean.epochs]
        for i, p in enumerate(clean.probes):
            m = clean.info[p]
            for j, ts in enumerate(stamps):
                w.writerow((p, ts, repr(m.latitude), repr(m.longitude), repr(m.offset_m), m.road_name,
                            int(clean.flow[i, j]), repr(float(clean.speed[i, j])), int(clean.accuracy[i, j])))
    finally:
        if own:
            fh.close()


def load_clean(path, interval: int = 300) -> CleanDataset:
    """Read a canonical CSV; sanitising an already complete file is a no-op."""
    raw = parse_records(path, "csv", interval)
    if raw.report is not None and raw.report.errors:
        line, msg = raw.report.errors[0]
        raise IngestError(f"{path}: line {line}: {msg}")
    return sanitize(raw)


# ------------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ScenarioSplit:
    name: str
    train: tuple[date, date]
    test: tuple[date, date]

    def __post_init__(self):
        if not self.train[0] <= self.train[1] < self.test[0] <= self.test[1]:
            raise ValueError(f"{self.name}: train must end before test starts")


DEFAULT_SPLITS = (
    ScenarioSplit("non-COVID-19", (date(2020, 1, 28), date(2020, 2, 28)), (date(2020, 2, 29), date(2020, 3, 7))),
    ScenarioSplit("COVID-19", (date(2020, 2, 6), date(2020, 3, 7)), (date(2020, 3, 8), date(2020, 3, 15))),
)


def normalise_scenario(name: str) -> str:
    key = name.lower().replace("_", "-").removesuffix("-19")
    aliases = {"non-covid": "non-COVID-19", "covid": "COVID-19"}
    if key not in aliases:
        raise ValueError(f"unknown scenario {name!r}; expected non-covid or covid")
    return aliases[key]


def _day_epoch(d: date) -> int:
    return int(datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp())


def day_range(clean: CleanDataset, days: tuple[date, date]) -> slice:
    """Grid indices from 00:00 of the first day to the last slot of the last day."""
    lo = _day_epoch(days[0])
    hi = _day_epoch(days[1] + timedelta(days=1)) - clean.interval
    if lo < clean.start or hi > clean.end:
        raise KeyError(f"{days[0]}..{days[1]} not covered")
    return slice((lo - clean.start) // clean.interval, (hi - clean.start) // clean.interval + 1)


def split_scenarios(clean: CleanDataset, overrides: Sequence[ScenarioSplit] | None = None) -> list[ScenarioSplit]:
    """The non-COVID-19 and COVID-19 train/test splits (or ``overrides``), checked against the grid."""
    splits = list(overrides) if overrides else list(DEFAULT_SPLITS)
    missing = []
    for sp in splits:
        for part in ("train", "test"):
            days = getattr(sp, part)
            try:
                day_range(clean, days)
            except KeyError:
                missing.append(f"{sp.name} {part} range missing ({days[0]}..{days[1]})")
    if missing:
        raise IngestError("; ".join(missing))
    return splits


def get_split(splits: Sequence[ScenarioSplit], name: str) -> ScenarioSplit:
    want = name if any(s.name == name for s in splits) else normalise_scenario(name)
    for s in splits:
        if s.name == want:
            return s
    raise KeyError(f"no scenario named {name!r}")


# ---------------------------------------------------------------------- fetch


@dataclass(frozen=True)
class Snapshot:
    data: bytes
    retrieved_at: datetime


def fetch_snapshot(endpoint: str, timeout: float = 30.0) -> Snapshot:
    """GET the open-data endpoint; any non-2xx status or network failure raises TransportError."""
    try:
        with urllib.request.urlopen(endpoint, timeout=timeout) as resp:
            status = resp.status
            body = resp.read()
    except urllib.error.HTTPError as exc:
        raise TransportError(f"HTTP {exc.code} from {endpoint}", status=exc.code) from None
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise TransportError(f"cannot reach {endpoint}: {exc}") from None
    if not 200 <= status < 300:
        raise TransportError(f"HTTP {status} from {endpoint}", status=status)
    return Snapshot(body, datetime.now(timezone.utc))


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".v2n-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
