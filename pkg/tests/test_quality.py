import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sigmap import quality as q
from sigmap.datamodel import Kpi
from sigmap.quality import QualityFn

CDP = QualityFn.cdp()


def test_coverage_and_bars_values():
    assert q.coverage(-120) == 0 and q.coverage(-80) == 1 and q.coverage(-115) == 0
    assert [q.bars(v) for v in (-124, -90, -50)] == [0, 3, 4]
    assert q.bars([-124.0, -123.9, -115.0, -114.9, -105.0, -85.0, -84.9]).tolist() == [0, 1, 1, 2, 2, 3, 4]


def test_coverage_is_a_threshold_of_bars():
    y = np.linspace(-150, -30, 120001)
    assert np.array_equal(q.coverage(y) == 0, np.isin(q.bars(y), (0, 1)))


def test_default_cdp_anchors():
    assert q.apply(CDP, -120.0) == pytest.approx(0.50, abs=1e-12)
    assert q.apply(CDP, -90.0) == pytest.approx(0.02, abs=1e-12)
    a, b, c = q.DEFAULT_CDP_RSRP
    assert c == 0.01 and b == pytest.approx(math.log(49) / 30)
    assert q.apply(QualityFn.cdp(Kpi.CQI), 1.0, Kpi.CQI) == pytest.approx(0.5)


def test_cdp_monotone_and_bounded():
    y = np.linspace(-150, -30, 1001)
    p = q.apply(CDP, y)
    assert np.all((p >= 0) & (p <= 1))
    inside = p < 1
    assert np.all(np.diff(p[inside]) < 0)


def test_invert_round_trip():
    lo, hi = q.cdp_invertible_range(CDP)
    p = np.linspace(lo, hi, 102)[1:-1]
    assert np.max(np.abs(q.apply(CDP, q.invert_cdp(CDP, p)) - p)) < 1e-9
    y = np.linspace(-124, -40, 100)  # CDP saturates at 1 just below -125 dBm
    assert np.max(np.abs(q.invert_cdp(CDP, q.apply(CDP, y)) - y)) < 1e-9
    # a is ~2e-9 for the RSRP defaults, so (c + a) - c keeps only ~7 digits
    assert q.invert_cdp(CDP, CDP.c + CDP.a) == pytest.approx(0.0, abs=1e-9)
    wide = QualityFn.cdp(a=0.5, b=0.1, c=0.1)
    assert q.invert_cdp(wide, 0.6) == pytest.approx(0.0, abs=1e-15)


def test_invert_domain_errors():
    with pytest.raises(ValueError):
        q.invert_cdp(CDP, CDP.c - 0.001)
    with pytest.raises(ValueError):
        q.invert_cdp(CDP, CDP.c)
    with pytest.raises(ValueError):
        q.invert_cdp(CDP, 1.0)
    with pytest.raises(ValueError):
        q.invert_cdp(QualityFn("coverage"), 0.5)
    assert np.isfinite(q.invert_cdp_clipped(CDP, [0.0, 1.0])).all()


def test_kpi_checks():
    with pytest.raises(ValueError, match="cqi"):
        q.apply(CDP, 5.0, Kpi.CQI)
    with pytest.raises(ValueError, match="rsrq"):
        QualityFn.cdp(Kpi.RSRQ)
    with pytest.raises(ValueError):
        q.apply(QualityFn("bars"), 5.0, Kpi.CQI)
    with pytest.raises(ValueError):
        QualityFn("loudness")
    with pytest.raises(ValueError):
        QualityFn.cdp(a=-1.0, b=0.1, c=0.0)


def test_two_point_fit():
    a, b, c = q.fit_cdp_two_point(0.0, 0.9, 10.0, 0.1, 0.0)
    assert a == pytest.approx(0.9) and a * math.exp(-b * 10) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        q.fit_cdp_two_point(0.0, 0.1, 1.0, 0.05, 0.2)


def test_transform_dataset(small_dataset):
    d = small_dataset
    ident = q.transform_dataset(d, QualityFn())
    assert np.array_equal(ident.labels, d.labels) and ident.task == "regression"
    cov = q.transform_dataset(d, QualityFn("coverage"))
    assert cov.task == "classification" and set(np.unique(cov.labels)) <= {0.0, 1.0}
    cd = q.transform_dataset(d, CDP)
    assert np.all((cd.labels >= 0) & (cd.labels <= 1)) and cd.records == d.records
    strong = d.subset(np.flatnonzero(d.labels > -115))
    with pytest.warns(UserWarning, match="single class"):
        out = q.transform_dataset(strong, QualityFn("coverage"))
    assert np.all(out.labels == 1)


@given(st.floats(-150, -30), st.floats(-150, -30))
def test_quality_functions_are_monotone(y1, y2):
    lo, hi = sorted((y1, y2))
    assert q.bars(lo) <= q.bars(hi)
    assert q.coverage(lo) <= q.coverage(hi)
    assert q.apply(CDP, lo) >= q.apply(CDP, hi)
