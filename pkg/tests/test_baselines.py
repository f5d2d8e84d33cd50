import math

import numpy as np
import pytest

from sigmap import baselines as bl, synth
from sigmap.geo import LocalFrame, distance_m

BS = (40.0, -74.0)
FRAME = LocalFrame(*BS)


def ring(rng, n, lo=20.0, hi=600.0):
    r = rng.uniform(lo, hi, n)
    a = rng.uniform(0, 2 * np.pi, n)
    xy = np.column_stack([r * np.cos(a), r * np.sin(a)])
    return xy, FRAME.from_local(xy)


def ldpl(ll, p0, n, d0=1.0):
    return p0 - 10 * n * np.log10(np.maximum(distance_m(np.asarray(BS), ll), d0) / d0)


@pytest.mark.parametrize("n", [2.0, 3.5, 5.0])
def test_hom_recovers_exponent(n):
    _, ll = ring(np.random.default_rng(0), 200)
    m = bl.fit_ldpl_hom(ll, ldpl(ll, -30.0, n), BS, -30.0)
    assert abs(m.n - n) <= 1e-9
    assert m.predict(np.array([BS]))[0] == -30.0


def test_single_point_algebra():
    d = 10.0
    ll = FRAME.from_local(np.array([[d, 0.0]]))
    dist = distance_m(np.asarray(BS), ll[0])
    y = -30.0 - 10 * 3 * math.log10(dist)  # y = p0 - 30 at exactly 10 d0
    assert bl.fit_ldpl_hom(ll, [y], BS, -30.0).n == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(ValueError):
        bl.fit_ldpl_hom(np.array([BS]), [-30.0], BS, -30.0)


def test_residual_orthogonality():
    rng = np.random.default_rng(1)
    _, ll = ring(rng, 300)
    y = ldpl(ll, -30.0, 3.2) + rng.normal(0, 6, 300)
    m = bl.fit_ldpl_hom(ll, y, BS, -30.0)
    x = 10 * np.log10(distance_m(np.asarray(BS), ll))
    r = y - m.predict(ll)
    assert abs(np.dot(r, x)) <= 1e-6 * np.dot(np.abs(y), x)


def test_friis_and_earfcn():
    f = bl.earfcn_to_hz(9820)
    assert f == pytest.approx(2355e6)  # band 30: 2350 MHz + 0.1 * (9820 - 9770)
    fspl = 20 * math.log10(4 * math.pi * f / bl.SPEED_OF_LIGHT)
    assert bl.friis_p0(f) == pytest.approx(15.0 - fspl)
    assert bl.friis_p0(None) == -30.0
    with pytest.raises(ValueError):
        bl.earfcn_to_hz(10 ** 7)


def test_knn_reproduces_training_labels_and_reduces_to_mean():
    rng = np.random.default_rng(2)
    xy, ll = ring(rng, 80)
    true_n = np.where(xy[:, 0] > 0, 2.0, 4.0)
    y = -30.0 - 10 * true_n * np.log10(distance_m(np.asarray(BS), ll))
    m = bl.fit_ldpl_knn(ll, y, BS, -30.0, k=5)
    assert np.max(np.abs(m.predict(ll) - y)) <= 1e-9
    full = bl.fit_ldpl_knn(ll, ldpl(ll, -30.0, 3.0), BS, -30.0, k=80)
    q = FRAME.from_local(rng.uniform(-500, 500, (20, 2)))
    hom = bl.fit_ldpl_hom(ll, ldpl(ll, -30.0, 3.0), BS, -30.0)
    assert np.allclose(full.predict(q), hom.predict(q), atol=1e-9)
    with pytest.raises(ValueError):
        bl.fit_ldpl_knn(ll, y, BS, -30.0, k=81)


def test_knn_beats_hom_on_two_regions():
    rng = np.random.default_rng(3)
    xy, ll = ring(rng, 600)
    n = np.where(xy[:, 0] > 0, 2.0, 4.0)
    y = -30.0 - 10 * n * np.log10(distance_m(np.asarray(BS), ll)) + rng.normal(0, 2, 600)
    tr, te = slice(0, 420), slice(420, None)
    hom = bl.fit_ldpl_hom(ll[tr], y[tr], BS, -30.0)
    knn = bl.fit_ldpl_knn(ll[tr], y[tr], BS, -30.0, k=bl.default_knn_k(420, False))
    e = lambda m: np.sqrt(np.mean((m.predict(ll[te]) - y[te]) ** 2))
    assert e(knn) < e(hom)
    assert bl.default_knn_k(5000, True) == 100 and bl.default_knn_k(420, False) == 42


def test_semivariogram_constant_and_iid():
    rng = np.random.default_rng(4)
    xy = rng.uniform(0, 300, (1000, 2))
    flat = bl.fit_semivariogram(xy=xy, y=np.full(1000, -90.0))
    assert flat.nugget == 0 and flat.sill <= 1e-12
    assert np.all(flat.gamma == 0)
    y = rng.normal(0, 3.0, 1000)
    lags, g, cnt, total = bl.empirical_semivariogram(xy, y)
    assert np.all(np.abs(g - 9.0) < 1.5)
    assert abs(np.average(g, weights=cnt) - np.var(y)) < 0.3
    pairs = sum(1 for i in range(200) for j in range(i + 1, 200) if np.hypot(*(xy[i] - xy[j])) <= 200)
    assert bl.empirical_semivariogram(xy[:200], y[:200])[3] == pairs
    assert cnt.sum() == total


def test_semivariogram_fit_recovers_exponential_model():
    h = np.linspace(5, 195, 20)
    g = 1.0 + 8.0 * (1 - np.exp(-h / 40.0))
    t = bl._lm_exponential(h, g, (g[0], g.max() - g[0], 200 / 3), False, np.array([0.0, 1e-12, 0.01]))
    assert np.allclose(t, [1.0, 8.0, 40.0], rtol=1e-5)
    v = bl.Semivariogram(1.0, 8.0, 40.0)
    assert v(0.0) == 1.0
    with pytest.raises(ValueError):
        bl.fit_semivariogram(xy=np.array([[0.0, 0], [500, 0], [0, 700]]), y=np.arange(3.0))


def field(seed, n):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-300, 300, (n, 2))
    y = 5 * np.sin(xy[:, 0] / 60) + 3 * np.cos(xy[:, 1] / 45) + rng.normal(0, 0.1, n)
    return xy, FRAME.from_local(xy), y


def test_kriging_interpolates_and_weights_sum_to_one():
    xy, ll, y = field(5, 50)
    m = bl.fit_kriging(ll, y, k=10, frame=FRAME, nugget=0.0)
    pred, var = bl.ok_predict(m, ll)
    assert np.max(np.abs(pred - y)) <= 1e-6
    assert np.all(var >= -1e-9)
    q = np.random.default_rng(6).uniform(-300, 300, (1000, 2))
    _, _, lam, _ = m.solve(q)
    assert np.max(np.abs(lam.sum(axis=1) - 1)) <= 1e-9


def test_equidistant_neighbors():
    xy = np.array([[-10.0, 0.0], [10.0, 0.0], [500.0, 500.0], [-500.0, 400.0]])
    vario = bl.Semivariogram(0.0, 4.0, 50.0)
    m = bl.KrigingModel(FRAME, xy, np.array([7.0, 7.0, 1.0, 2.0]), vario, k=2)
    pred, _, lam, _ = m.solve(np.array([[0.0, 0.0]]))
    assert pred[0] == pytest.approx(7.0) and np.allclose(lam, 0.5)


def test_duplicate_locations_are_averaged():
    xy, ll, y = field(7, 40)
    ll2 = np.vstack([ll, ll[:1]])
    y2 = np.append(y, y[0] + 2.0)
    m = bl.fit_kriging(ll2, y2, frame=FRAME, nugget=0.0)
    assert len(m.y) == 40
    assert bl.ok_predict(m, ll[:1])[0][0] == pytest.approx(y[0] + 1.0, abs=1e-6)


def test_okd_reduces_to_ldpl_without_residuals():
    _, ll = ring(np.random.default_rng(8), 150)
    y = ldpl(ll, -30.0, 3.3)
    okd = bl.okd_fit(ll, y, BS, -30.0, frame=FRAME)
    hom = bl.fit_ldpl_hom(ll, y, BS, -30.0)
    q = FRAME.from_local(np.random.default_rng(9).uniform(-500, 500, (100, 2)))
    assert abs(okd.n - hom.n) <= 1e-9
    assert np.max(np.abs(bl.okd_predict(okd, q)[0] - hom.predict(q))) <= 1e-9


def test_okd_interpolates_training_points():
    rng = np.random.default_rng(10)
    _, ll = ring(rng, 120)
    y = ldpl(ll, -30.0, 3.0) + rng.normal(0, 3, 120)
    okd = bl.okd_fit(ll, y, BS, -30.0, frame=FRAME, nugget=0.0)
    assert np.max(np.abs(okd.predict(ll)[0] - y)) <= 1e-6


def test_method_ordering_on_residual_field():
    st = synth.Station(synth.CellId(310, 410, 22, 1), BS[0], BS[1], -30.0)
    res = synth.SmoothField(6.0, 60.0, seed=1)
    gt = synth.GroundTruth((st,), FRAME, default_ple=3.0, shadow_sigma_db=1.0, residual_field=res)
    errs = []
    for seed in range(10):
        d = synth.sample_measurements(gt, synth.Uniform((-400, -400, 400, 400)), 600, seed=seed)
        ll, y = d.locations(), d.labels
        tr, te = slice(0, 420), slice(420, None)
        e = lambda p: np.sqrt(np.mean((p - y[te]) ** 2))
        hom = bl.fit_ldpl_hom(ll[tr], y[tr], BS, -30.0).predict(ll[te])
        ok = bl.ok_predict(bl.fit_kriging(ll[tr], y[tr], frame=FRAME), ll[te])[0]
        okd = bl.okd_predict(bl.okd_fit(ll[tr], y[tr], BS, -30.0, frame=FRAME), ll[te])[0]
        errs.append((e(okd), e(ok), e(hom)))
    med = np.median(errs, axis=0)
    assert med[0] < med[1] < med[2]
