import http.server
import io
import socket
import threading
from datetime import date, datetime, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2nscale.ingest import (
    DEFAULT_SPLITS,
    FormatError,
    IngestError,
    ScenarioSplit,
    TransportError,
    atomic_write,
    day_range,
    fetch_snapshot,
    filter_spurious,
    load_clean,
    parse_records,
    sanitize,
    split_scenarios,
    write_csv,
)

from helpers import csv_bytes


# ---------------------------------------------------------------- parsing


def test_parse_minimal_csv():
    raw = parse_records(csv_bytes([("A", 0, 10), ("A", 5, 12)]))
    assert len(raw.records) == 2
    lo, hi = raw.grid_bounds()
    assert hi - lo == 300
    assert raw.expected_grid().tolist() == [lo, lo + 300]


def test_parse_xml_field_mapping():
    xml = b"""<?xml version="1.0"?>
    <traffic_data xmlns="https://example.org/5t">
      <FDT_data lcd1="P1" Road_name="Corso Orbassano" lat="45.05" lng="7.63" offset="120"
                accuracy="100" start_time="2020-02-15T04:00:00Z" period="5" extra="ignored">
        <speedflow flow="720" speed="41.5"/>
      </FDT_data>
    </traffic_data>"""
    raw = parse_records(xml, "xml")
    (rec,) = raw.records
    assert (rec.flow, rec.speed, rec.accuracy) == (720, 41.5, 100)
    assert rec.probe_id == "P1" and rec.road_name == "Corso Orbassano"
    assert rec.offset_m == 120.0


def test_negative_flow_is_row_error():
    raw = parse_records(csv_bytes([("A", 0, 10), ("A", 5, -3)]))
    assert len(raw.records) == 1
    assert raw.report.errors == [(3, "negative flow")]
    assert raw.report.to_dict()["row_errors"] == {"negative flow": 1}


def test_bad_timestamp_and_columns_collected():
    data = csv_bytes([("A", 0, 10), ("A", "yesterday", 4)]) + b"A,short,row\n"
    raw = parse_records(data)
    assert len(raw.records) == 1
    msgs = [m for _, m in raw.report.errors]
    assert "unparseable timestamp" in msgs and "expected 9 columns" in msgs


def test_bad_header_is_format_error():
    with pytest.raises(FormatError, match="header"):
        parse_records(b"probe,time,flow\nA,2020-01-01T00:00:00Z,3\n")
    with pytest.raises(FormatError, match="malformed XML"):
        parse_records(b"<open>", "xml")
    with pytest.raises(FormatError):
        parse_records(b"", "json")


def test_timestamps_snap_and_normalise():
    raw = parse_records(csv_bytes([("A", "2020-02-15T05:02:10+01:00", 1)]))
    assert raw.records[0].timestamp.strftime("%H:%M:%S") == "04:00:00"
    # a tight max_snap turns jitter into a row error
    raw = parse_records(csv_bytes([("A", "2020-02-15T04:01:00Z", 1)]), max_snap=30)
    assert raw.records == () and raw.report.errors[0][1] == "timestamp off grid"


def test_file_and_stream_sources(tmp_path):
    data = csv_bytes([("A", 0, 1)])
    path = tmp_path / "in.csv"
    path.write_bytes(data)
    assert parse_records(path).records == parse_records(io.BytesIO(data)).records


# --------------------------------------------------------------- coverage


def _coverage_raw():
    rows = []
    for i in range(20):
        rows.append(("A", 5 * i, 100 + i))
        if i % 20 not in (3, 7, 11):  # 17/20 = 85 %
            rows.append(("B", 5 * i, 200 + i))
        if i < 14:  # 70 %
            rows.append(("C", 5 * i, 300 + i))
    return parse_records(csv_bytes(rows))


def test_filter_threshold_straddle():
    kept, removed = filter_spurious(_coverage_raw(), 0.8)
    assert removed == ["C"]
    assert kept.probes == ("A", "B")


def test_filter_boundary_inclusive_and_degenerate():
    raw = _coverage_raw()
    assert filter_spurious(raw, 0.85)[1] == ["C"]
    assert filter_spurious(raw, 0.7)[1] == []
    assert filter_spurious(raw, 0.0)[1] == []
    assert filter_spurious(raw, 1.0)[1] == ["B", "C"]
    with pytest.raises(ValueError):
        filter_spurious(raw, 1.5)


def test_filter_probe_without_valid_rows_removed():
    raw = parse_records(csv_bytes([("A", 0, 1), ("A", 5, 1), ("Z", 0, -1)]))
    assert raw.probes == ("A", "Z")
    kept, removed = filter_spurious(raw)
    assert removed == ["Z"]


def test_duplicates_count_once_and_keep_last():
    raw = parse_records(csv_bytes([("A", 0, 1), ("A", 0, 9), ("A", 5, 2)]))
    assert filter_spurious(raw, 1.0)[1] == []
    clean = sanitize(raw)
    assert clean.flow[0].tolist() == [9, 2]
    assert clean.report["duplicates_collapsed"] == 1


def test_empty_grid_rejected():
    raw = parse_records(csv_bytes([]))
    with pytest.raises(IngestError, match="empty"):
        filter_spurious(raw)


# --------------------------------------------------------------- sanitize


def test_last_value_hold():
    clean = sanitize(parse_records(csv_bytes([("A", 0, 10), ("A", 10, 14)])))
    assert clean.flow[0].tolist() == [10, 10, 14]


def test_globally_missing_0425():
    rows = []
    for m in range(0, 40, 5):
        if m == 25:
            continue
        rows += [("A", m, 10 + m), ("B", m, 50 + m)]
    clean = sanitize(parse_records(csv_bytes(rows)))
    j = clean.index_of(datetime(2020, 2, 15, 4, 25, tzinfo=timezone.utc))
    assert clean.flow[:, j].tolist() == [30, 70]  # the 04:20 values
    assert clean.report["sweep2_filled"] == 2
    assert clean.report["grid_points_without_reports"] == 1


def test_sweep1_and_leading_backfill():
    rows = [("A", 0, 1), ("A", 5, 2), ("A", 10, 3), ("B", 5, 7)]
    clean = sanitize(parse_records(csv_bytes(rows)))
    assert clean.flow[1].tolist() == [7, 7, 7]
    assert clean.report["leading_backfilled"] == 1
    assert clean.report["sweep1_filled"] == 1
    assert clean.reported == (3, 1)
    assert clean.default_target() == "A"


def test_probe_without_records_is_error():
    raw = parse_records(csv_bytes([("A", 0, 1), ("Z", 0, -5)]))
    with pytest.raises(IngestError, match="Z"):
        sanitize(raw)


def test_sanitize_idempotent_and_csv_roundtrip(tmp_path):
    rows = [("A", 0, 1), ("A", 15, 3), ("B", 5, 7, 33.5, 80), ("B", 20, 8)]
    clean = sanitize(parse_records(csv_bytes(rows)))
    assert sanitize(clean.to_raw()) == clean
    path = tmp_path / "clean.csv"
    write_csv(clean, path)
    again = load_clean(path)
    assert again == clean
    assert (again.n_steps, len(again.probes)) == (5, 2)
    buf = io.StringIO()
    write_csv(again, buf)
    assert buf.getvalue() == path.read_text()


@given(st.lists(st.tuples(st.sampled_from("ABC"), st.integers(0, 30), st.integers(0, 500)), min_size=1, max_size=40))
def test_sanitize_properties(items):
    rows = [(p, 5 * m, f) for p, m, f in items]
    clean = sanitize(parse_records(csv_bytes(rows)))
    lo = min(m for _, m, _ in items)
    hi = max(m for _, m, _ in items)
    assert clean.n_steps == hi - lo + 1
    assert not np.isnan(clean.flow).any()
    assert sanitize(clean.to_raw()) == clean
    # probe ordering does not change per-grid-point totals
    rev = sanitize(parse_records(csv_bytes(sorted(rows, key=lambda r: r[0], reverse=True))))
    np.testing.assert_array_equal(clean.flow.sum(axis=0), rev.flow.sum(axis=0))


def test_clean_dataset_accessors():
    clean = sanitize(parse_records(csv_bytes([("A", 0, 1), ("A", 5, 2)])))
    s = clean.series("A")
    assert len(s) == 2 and s.segment(1, 2).values.tolist() == [2]
    assert s.segment(1, 2).start == clean.start + 300
    with pytest.raises(KeyError):
        clean.series("nope")
    with pytest.raises(KeyError):
        clean.index_of(clean.start + 17)
    assert not clean.flow.flags.writeable


# --------------------------------------------------------------- scenarios


def _daily(first: date, last: date):
    """One probe reporting at midnight and 23:55 of each boundary day."""
    def at(d, hh, mm):
        return datetime(d.year, d.month, d.day, hh, mm, tzinfo=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

    return sanitize(parse_records(csv_bytes([("A", at(first, 0, 0), 1), ("A", at(last, 23, 55), 2)])))


def test_default_splits():
    clean = _daily(date(2020, 1, 28), date(2020, 3, 25))
    splits = split_scenarios(clean)
    assert splits == list(DEFAULT_SPLITS)
    non, cov = splits
    assert non.test == (date(2020, 2, 29), date(2020, 3, 7))
    assert cov.train == (date(2020, 2, 6), date(2020, 3, 7)) and cov.test[0] == date(2020, 3, 8)
    sl = day_range(clean, cov.test)
    assert sl.stop - sl.start == 8 * 288


def test_short_dataset_reports_missing_range():
    clean = _daily(date(2020, 1, 28), date(2020, 3, 1))
    with pytest.raises(IngestError, match="COVID-19 test range missing"):
        split_scenarios(clean)


def test_custom_split_passthrough():
    clean = _daily(date(2020, 1, 1), date(2020, 1, 10))
    custom = [ScenarioSplit("mine", (date(2020, 1, 1), date(2020, 1, 5)), (date(2020, 1, 6), date(2020, 1, 10)))]
    assert split_scenarios(clean, custom) == custom
    with pytest.raises(ValueError):
        ScenarioSplit("bad", (date(2020, 1, 5), date(2020, 1, 6)), (date(2020, 1, 6), date(2020, 1, 7)))


# -------------------------------------------------------------------- fetch


class _Handler(http.server.BaseHTTPRequestHandler):
    def do_GET(self):
        if self.path == "/ok":
            body = b"<traffic_data/>"
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        else:
            self.send_error(500)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()


def test_fetch_ok(server):
    snap = fetch_snapshot(server + "/ok", timeout=5)
    assert len(snap.data) > 0 and snap.retrieved_at.tzinfo is not None


def test_fetch_http_500(server):
    with pytest.raises(TransportError) as err:
        fetch_snapshot(server + "/boom", timeout=5)
    assert err.value.status == 500


def test_fetch_unreachable():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(TransportError, match="cannot reach"):
        fetch_snapshot(f"http://127.0.0.1:{port}/", timeout=2)


def test_atomic_write_no_partial(tmp_path):
    target = tmp_path / "out.xml"
    atomic_write(target, b"abc")
    assert target.read_bytes() == b"abc"
    with pytest.raises(OSError):
        atomic_write(tmp_path / "missing" / "x", b"abc")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out.xml"]
