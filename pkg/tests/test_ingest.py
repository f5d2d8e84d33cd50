import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sigmap import ingest, synth
from sigmap.datamodel import Dataset, FeatureSet, Kpi
from sigmap.ingest import IngestError, OutOfBoundsError, SplitSpec
from conftest import LISTING_RECORD, make_record


def collection(*features):
    return json.dumps({"type": "FeatureCollection", "features": list(features)}).encode()


def test_listing_record_fields():
    d, rep = ingest.read_geojson(LISTING_RECORD.encode())
    assert rep.n_parsed == 1 and rep.n_skipped == 0
    m = d.records[0]
    assert (m.rsrp, m.rsrq, m.cqi) == (-89.0, -20.0, 9)
    assert (m.cell.mcc, m.cell.mnc, m.cell.tac, m.cell.ci) == (310, 410, 22, 710)
    assert m.dl_freq == 9820 and m.device_model == "SM-G935P"
    assert (m.lat, m.lng) == (40.7, -73.9)
    # 17:54:35 EDT is 21:54:35 UTC on a Monday
    assert m.timestamp_utc == 1505166875.0
    assert (m.day_of_week, m.hour_of_day) == (0, 21)
    assert m.extras["locationMetaData"]["city"] == "New York"


def test_timestamps():
    assert ingest.parse_timestamp("2017-09-11T21:54:35+00:00") == 1505166875.0
    assert ingest.parse_timestamp("2017-09-11T21:54:35UTC") == 1505166875.0
    with pytest.raises(ValueError):
        ingest.parse_timestamp("2017-09-11T21:54:35")
    with pytest.raises(ValueError):
        ingest.parse_timestamp("2017-09-11T21:54:35XYZ")


def test_empty_collection():
    d, rep = ingest.read_geojson(collection())
    assert len(d) == 0 and rep.n_skipped == 0


def test_missing_cqi_is_kept():
    f = json.loads(LISTING_RECORD)
    del f["properties"]["lteMeasurement"]["cqi"]
    d, rep = ingest.read_geojson(collection(f))
    assert len(d) == 1 and d.records[0].cqi is None and rep.n_skipped == 0


def test_skips_are_counted():
    good = json.loads(LISTING_RECORD)
    no_rsrp = json.loads(LISTING_RECORD)
    del no_rsrp["properties"]["lteMeasurement"]["rsrp"]
    no_geom = json.loads(LISTING_RECORD)
    del no_geom["geometry"]
    wild = json.loads(LISTING_RECORD)
    wild["properties"]["lteMeasurement"]["rsrp"] = 20  # dB instead of dBm
    d, rep = ingest.read_geojson(collection(good, no_rsrp, no_geom, wild))
    assert len(d) == 1
    assert rep.skipped == {"missing_rsrp": 1, "missing_geometry": 1, "rsrp_out_of_envelope": 1}
    assert [i for i, _, _ in rep.issues] == [1, 2, 3]


def test_label_kpi_missing_skips():
    f = json.loads(LISTING_RECORD)
    del f["properties"]["lteMeasurement"]["cqi"]
    d, rep = ingest.read_geojson(collection(f, json.loads(LISTING_RECORD)), label_kpi=Kpi.CQI)
    assert len(d) == 1 and rep.skipped == {"missing_label": 1}
    assert d.labels.tolist() == [9.0]


def test_malformed_json_reports_byte_offset():
    data = b'{"type": "FeatureCollection", "features": [ {"a": }]}'
    with pytest.raises(IngestError) as e:
        ingest.read_geojson(data)
    assert e.value.offset == data.index(b"}")


def test_newline_delimited_features():
    d = ingest.parse_geojson((LISTING_RECORD + "\n" + LISTING_RECORD + "\n").encode())
    assert len(d) == 2


def test_round_trip_preserves_mapped_fields(truth):
    d = synth.sample_measurements(truth, synth.Uniform((-300, -300, 300, 300)), 50, seed=3)
    text = ingest.write_geojson(d)
    back = ingest.parse_geojson(text)
    assert back.records == d.records
    assert ingest.write_geojson(back) == text


def test_listing_reserialization_is_stable():
    d = ingest.parse_geojson(LISTING_RECORD.encode())
    f = ingest.measurement_to_feature(d.records[0])
    assert json.dumps(f["properties"]["lteMeasurement"]) == '{"rsrp": -89, "rsrq": -20, "cqi": 9, "earfcn": 9820}'
    assert ingest.parse_geojson(ingest.feature_collection([f])).records == d.records


def grid_csv(rows):
    return ("lat,lng,density\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows)).encode()


def test_population_grid():
    g = ingest.load_population_grid(grid_csv([(40.0, -74.0, 5), (40.0, -73.99, 5), (40.01, -74.0, 5),
                                              (40.01, -73.99, 5)]))
    assert g.densities.shape == (2, 2)
    assert g.density_at(40.004, -73.996) == 5.0
    with pytest.raises(OutOfBoundsError):
        g.density_at(41.0, -74.0)
    v, inside = g.lookup([40.0, 50.0], [-74.0, -74.0])
    assert inside.tolist() == [True, False] and np.isnan(v[1])
    assert ingest.load_population_grid(g.to_csv()).densities.tolist() == g.densities.tolist()


def test_population_grid_errors():
    with pytest.raises(IngestError):
        ingest.load_population_grid(grid_csv([(40.0, -74.0, 5)]))
    with pytest.raises(IngestError):
        ingest.load_population_grid(grid_csv([(40.0, -74.0, 5), (40.0, -73.99, 5)]))  # one lat only
    with pytest.raises(IngestError):
        ingest.load_population_grid(grid_csv([(40.0, -74.0, 1), (40.01, -74.0, 1), (40.03, -74.0, 1),
                                              (40.0, -73.9, 1), (40.01, -73.9, 1), (40.03, -73.9, 1)]))
    with pytest.raises(IngestError):
        ingest.load_population_grid(b"a,b,c\n1,2,3\n")


def small(n):
    return Dataset([make_record(rsrp=-60.0 - i) for i in range(n)])


def test_split_sizes_and_determinism():
    d = small(10)
    (a, ia), (b, ib) = ingest.split(d, SplitSpec((0.7, 0.3), 4))
    assert (len(a), len(b)) == (7, 3)
    (a2, ia2), _ = ingest.split(d, SplitSpec((0.7, 0.3), 4))
    assert np.array_equal(ia, ia2)
    assert [len(p) for p, _ in ingest.split(small(100), SplitSpec((0.6, 0.2, 0.2), 0))] == [60, 20, 20]
    assert ingest.split_sizes(10, (0.25, 0.25, 0.5)) == [3, 3, 4]


def test_split_errors():
    with pytest.raises(ValueError):
        ingest.split(small(2), SplitSpec((0.9, 0.1)))
    with pytest.raises(ValueError):
        SplitSpec((0.5, 0.4))
    with pytest.raises(ValueError):
        ingest.split(Dataset([]), SplitSpec((0.5, 0.5)))


def test_fisher_yates_is_documented_algorithm():
    n, seed = 7, 11
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = list(range(n))
    for i, j in zip(range(n - 1, 0, -1), rng.integers(0, np.arange(n, 1, -1))):
        perm[i], perm[j] = perm[j], perm[i]
    assert ingest.fisher_yates(n, seed).tolist() == perm


@given(st.integers(2, 60), st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.95))
def test_split_is_a_partition(n, seed, f):
    d = small(n)
    sizes = ingest.split_sizes(n, (f, 1 - f))
    if min(sizes) <= 0:
        return
    parts = ingest.split(d, SplitSpec((f, 1 - f), seed))
    idx = np.concatenate([ix for _, ix in parts])
    assert sorted(idx.tolist()) == list(range(n))
    for p, ix in parts:
        assert np.array_equal(p.labels, d.labels[ix])
