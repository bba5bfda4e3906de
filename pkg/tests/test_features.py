import math
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2nscale.features import (
    N_FEATURES,
    FeatureScaler,
    build_feature_matrix,
    calendar_features,
    distance_quantiles,
    haversine_km,
    neighborhood,
    neighborhood_quantiles,
)
from v2nscale.ingest import parse_records, sanitize

from helpers import csv_bytes

coords = st.tuples(st.floats(-90, 90), st.floats(-180, 180))


def test_haversine_examples():
    assert haversine_km((45.0, 7.6), (45.0, 7.6)) == 0.0
    assert haversine_km((0, 0), (0, 180)) == pytest.approx(math.pi * 6371.0)
    assert haversine_km((0, 0), (0, 180)) == pytest.approx(20015.1, abs=0.1)
    # independent oracle: 0.1 degree of latitude on a 6371 km sphere
    assert haversine_km((45.0, 7.6), (45.1, 7.6)) == pytest.approx(6371.0 * math.radians(0.1), rel=1e-9)
    assert haversine_km((45.0, 7.6), (45.1, 7.6)) == pytest.approx(11.12, abs=0.005)


def test_haversine_range_errors():
    with pytest.raises(ValueError):
        haversine_km((91, 0), (0, 0))
    with pytest.raises(ValueError):
        haversine_km((0, 0), (0, 181))


@given(coords, coords)
def test_haversine_symmetric_nonnegative(a, b):
    d = haversine_km(a, b)
    assert d >= 0 and d == pytest.approx(haversine_km(b, a), abs=1e-9)
    assert d <= math.pi * 6371.0 + 1e-6


def test_calendar_example():
    epoch = int(datetime(2020, 3, 2, 8, 30, tzinfo=timezone.utc).timestamp())
    assert calendar_features(epoch) == (1.0, 3.0, 2.0, 2020.0, 8.5)
    sunday = int(datetime(2020, 3, 8, 23, 55, tzinfo=timezone.utc).timestamp())
    dow, _, _, _, hm = calendar_features(sunday)
    assert dow == 7.0 and 0 <= hm < 24


def test_quantile_examples():
    q = distance_quantiles([1, 2, 3, 4])
    assert q.as_list() == [1.75, 2.5, 3.25, 4.0]
    assert distance_quantiles([0.0, 0.0, 0.0]).as_list() == [0.0] * 4
    q = distance_quantiles([1, 2, 3, 4, 100])
    assert q.w2 == 4.0
    with pytest.raises(ValueError):
        distance_quantiles([])


def _dataset(n_probes=4, steps=30, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for p in range(n_probes):
        lat = 45.0 + 0.01 * p
        for i in range(steps):
            rows.append((f"P{p}", 5 * i, int(rng.integers(0, 900)), float(rng.uniform(10, 60)),
                         int(rng.integers(50, 101)), lat, 7.6))
    return sanitize(parse_records(csv_bytes(rows)))


def test_neighborhood_quantiles_exclude_target():
    clean = _dataset(5)
    q = neighborhood_quantiles(clean, "P0")
    d = [haversine_km((45.0, 7.6), (45.0 + 0.01 * p, 7.6)) for p in range(1, 5)]
    np.testing.assert_allclose(q.as_list(), distance_quantiles(d).as_list())
    with pytest.raises(ValueError):
        neighborhood_quantiles(clean.subset(["P0"]), "P0")


def test_neighborhood_membership_and_order():
    clean = _dataset(4)
    nb = neighborhood(clean, "P2", 1.2)
    assert nb.members[0] == "P2" and nb.distances[0] == 0.0
    assert set(nb.members) == {"P1", "P2", "P3"}
    assert list(nb.distances) == sorted(nb.distances)
    assert neighborhood(clean, "P2").members[-1] == "P0"
    with pytest.raises(ValueError):
        neighborhood(clean, "P2", -1)


@given(st.floats(0, 5), st.floats(0, 5))
def test_neighborhood_monotone(r1, r2):
    clean = _dataset(4, steps=3)
    small, big = sorted((r1, r2))
    assert set(neighborhood(clean, "P1", small).members) <= set(neighborhood(clean, "P1", big).members)


def test_feature_matrix_shape_and_layout():
    clean = _dataset(3)
    fm = build_feature_matrix(clean, "P0", 10, 1)
    assert fm.values.shape == (1, N_FEATURES)
    assert fm.values[0, 0] == clean.flow[0, 9]
    fm = build_feature_matrix(clean, "P0", 10, 4, ["P0", "P1", "P2"])
    assert fm.rows == 12
    # row (lag l, probe p) sits at index (l-1)*P + p
    for lag in (1, 4):
        for p in range(3):
            row = fm.values[(lag - 1) * 3 + p]
            assert row[0] == clean.flow[p, 10 - lag]
            assert row[1] == clean.accuracy[p, 10 - lag]
            assert row[2] == clean.speed[p, 10 - lag]
    assert fm.values[0, 3] == 0.0 and fm.values[1, 3] > 0.0
    seq = fm.sequence()
    assert seq.shape == (4, 27) and seq[-1, 0] == clean.flow[0, 9]


def test_feature_matrix_by_timestamp_and_calendar():
    clean = _dataset(1)
    when = datetime(2020, 2, 15, 5, 0, tzinfo=timezone.utc)
    fm = build_feature_matrix(clean, "P0", when, 2)
    assert fm.t == 12
    assert fm.values[0, 8] == pytest.approx(4 + 55 / 60)
    assert fm.values[0, 4] == 6.0  # Saturday


def test_many_probes_row_count():
    clean = _dataset(92, steps=14)
    fm = build_feature_matrix(clean, "P0", 13, 12, list(clean.probes))
    assert fm.values.shape == (1104, 9)


def test_insufficient_history():
    clean = _dataset(1)
    with pytest.raises(ValueError, match="need 12 steps before index 5, have 5"):
        build_feature_matrix(clean, "P0", 5, 12)
    with pytest.raises(KeyError):
        build_feature_matrix(clean, "P0", 20, 2, ["P0", "ghost"])


def test_no_leakage():
    clean = _dataset(3)
    before = build_feature_matrix(clean, "P0", 15, 6, ["P0", "P1", "P2"])
    flow = clean.flow.copy()
    flow[:, 15:] = 99999
    changed = type(clean)(clean.probes, clean.info, clean.start, clean.interval, flow,
                          clean.speed.copy(), clean.accuracy.copy())
    after = build_feature_matrix(changed, "P0", 15, 6, ["P0", "P1", "P2"])
    np.testing.assert_array_equal(before.values, after.values)


def test_scaler_roundtrip_and_clip():
    clean = _dataset(2)
    train = build_feature_matrix(clean, "P0", 29, 28, ["P0", "P1"]).values
    sc = FeatureScaler.fit(train)
    z, clipped = sc.transform(train)
    assert not clipped and z.min() >= 0 and z.max() <= 1
    varying = sc.hi > sc.lo
    np.testing.assert_allclose(sc.inverse(z)[:, varying], train[:, varying])
    z2, clipped2 = sc.transform(train * 3 + 1000)
    assert clipped2 and z2.max() == 1.0
    assert FeatureScaler.from_dict(sc.to_dict()).to_dict() == sc.to_dict()
    fm = build_feature_matrix(clean, "P0", 20, 3, ["P0", "P1"], scaler=sc)
    assert fm.values.min() >= 0 and fm.values.max() <= 1
