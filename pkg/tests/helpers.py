"""Small builders shared by several test modules."""

from datetime import datetime, timedelta, timezone

from v2nscale.ingest import CSV_COLUMNS

T0 = datetime(2020, 2, 15, 4, 0, tzinfo=timezone.utc)


def stamp(minutes: int, base: datetime = T0) -> str:
    return (base + timedelta(minutes=minutes)).strftime("%Y-%m-%dT%H:%M:%SZ")


def csv_bytes(rows) -> bytes:
    """rows: (probe, minutes, flow[, speed, accuracy, lat, lon])."""
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        probe, minutes, flow = r[:3]
        speed = r[3] if len(r) > 3 else 40.0
        acc = r[4] if len(r) > 4 else 100
        lat = r[5] if len(r) > 5 else 45.0
        lon = r[6] if len(r) > 6 else 7.6
        when = minutes if isinstance(minutes, str) else stamp(minutes)
        lines.append(f"{probe},{when},{lat},{lon},0,Corso X,{flow},{speed},{acc}")
    return ("\n".join(lines) + "\n").encode()
