import numpy as np
import pytest

from sigmap import synth
from sigmap.datamodel import CellId, Dataset, FeatureSet, Kpi, Measurement
from sigmap.geo import LocalFrame

CELL = CellId(310, 410, 22, 710)
T0 = 1505088000  # Monday 2017-09-11 00:00 UTC


def make_record(lat=40.0, lng=-74.0, rsrp=-90.0, t=T0, cell=CELL, device="SM-G935P", **kw):
    return Measurement.at(lat, lng, t, cell, device, rsrp, **kw)


def xy_dataset(xy, y, frame=None, feature_set=FeatureSet.XY):
    """Dataset whose records sit at local-frame ``xy`` with RSRP labels ``y``."""
    frame = frame or LocalFrame(40.0, -74.0)
    ll = frame.from_local(np.asarray(xy, dtype=float))
    recs = [make_record(float(a), float(b), float(v)) for (a, b), v in zip(ll, y)]
    return Dataset(recs, Kpi.RSRP, feature_set)


@pytest.fixture
def frame():
    return LocalFrame(40.0, -74.0)


@pytest.fixture
def truth(frame):
    bs = frame.from_local(np.array([-700.0, 0.0]))
    st = synth.Station(CELL, float(bs[0]), float(bs[1]), -25.0, 9820)
    return synth.GroundTruth((st,), frame, shadow_sigma_db=4.0)


@pytest.fixture
def small_dataset(truth):
    proc = synth.Uniform((-500, -500, 500, 500))
    return synth.sample_measurements(truth, proc, 300, seed=1)


# Listing-style record with the obfuscated digits filled in
LISTING_RECORD = (
    '{"type": "Feature", "properties": {"timestamp": "2017-09-11T17:54:35EDT", '
    '"lteMeasurement": {"rsrp": -89, "rsrq": -20, "cqi": 9, "pci": 169, "earfcn": 9820}, '
    '"cell": { "ci": 710, "mnc": 410, "mcc": 310, "tac": 22, "networkType": 4}, '
    '"device" : {"manufacturer":"samsung","model":"SM-G935P", "os":"android70"}, '
    '"locationMetaData": {"city": "New York","accuracy": "x","velocity":"x"}}, '
    '"geometry": {"type": "Point","coords": [-73.9,40.7]}}'
)


ACCEPTANCE = {}


def record_criterion(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
