import math

import numpy as np
import pytest
from scipy import stats

from sigmap import synth
from sigmap.datamodel import CellId
from sigmap.geo import distance_m
from conftest import CELL


def station_at(frame, xy, p0=-30.0, cell=CELL):
    ll = frame.from_local(np.asarray(xy, dtype=float))
    return synth.Station(cell, float(ll[0]), float(ll[1]), p0, 9820)


def test_ldpl_hand_values(frame):
    st = station_at(frame, (0.0, 0.0))
    gt = synth.GroundTruth((st,), frame, default_ple=2.0, shadow_sigma_db=0.0)
    north = lambda d: (st.lat + d / 111194.93, st.lng)
    loc = np.array(north(100.0))
    d = distance_m((st.lat, st.lng), loc)
    assert synth.true_rsrp(gt, CELL, loc) == pytest.approx(-30.0 - 20.0 * math.log10(d), abs=1e-12)
    assert abs(synth.true_rsrp(gt, CELL, loc) - -70.0) < 1e-3
    assert synth.true_rsrp(gt, CELL, np.array([st.lat, st.lng])) == -30.0  # clamped to d0
    a = synth.true_rsrp(gt, CELL, np.array(north(200.0)))
    b = synth.true_rsrp(gt, CELL, np.array(north(400.0)))
    assert a - b == pytest.approx(20 * math.log10(2), abs=1e-6)


def test_noise_free_labels_are_exact(truth):
    gt = synth.GroundTruth(truth.stations, truth.frame, shadow_sigma_db=0.0)
    d = synth.sample_measurements(gt, synth.Uniform((-400, -400, 400, 400)), 200, seed=2)
    exact = [synth.true_rsrp(gt, m.cell, np.array([m.lat, m.lng])) for m in d.records]
    assert np.array_equal(d.labels, exact)


def test_reproducible_and_thread_independent(truth):
    proc = synth.Uniform((-400, -400, 400, 400))
    a = synth.sample_measurements(truth, proc, 9000, seed=5)
    b = synth.sample_measurements(truth, proc, 9000, seed=5, threads=3)
    assert a.records == b.records
    c = synth.sample_measurements(truth, proc, 9000, seed=6)
    assert c.records != a.records


def test_uniform_locations_pass_chi_square():
    rng = np.random.default_rng(0)
    xy = synth.Uniform((0, 0, 100, 100)).sample(rng, 20000)
    counts, _, _ = np.histogram2d(xy[:, 0], xy[:, 1], bins=(4, 5), range=((0, 100), (0, 100)))
    assert stats.chisquare(counts.ravel()).pvalue > 0.01


def test_hotspots_concentrate_mass():
    # two hotspots, each 3-sigma disc ~5% of the 1 km^2 box, 80% of the mass
    s = 1000 * math.sqrt(0.05 / math.pi) / 3
    proc = synth.Hotspots((0, 0, 1000, 1000), ((250, 250), (700, 650)), (s, s), (0.4, 0.4))
    xy = proc.sample(np.random.default_rng(1), 10000)
    inside = np.zeros(len(xy), bool)
    for c in proc.centers:
        inside |= np.hypot(*(xy - c).T) <= 3 * s
    assert inside.mean() >= 0.75
    assert np.all((xy >= 0) & (xy <= 1000))


def test_road_biased_stays_near_roads():
    proc = synth.RoadBiased((0, 0, 1000, 1000), (((0, 500), (1000, 500)),), 10.0, 0.9)
    xy = proc.sample(np.random.default_rng(2), 5000)
    assert np.mean(np.abs(xy[:, 1] - 500) < 30) > 0.85


def test_mass_validation():
    with pytest.raises(ValueError):
        synth.Hotspots((0, 0, 1, 1), ((0, 0), (1, 1)), (1, 1), (0.7, 0.7))
    with pytest.raises(ValueError):
        synth.RoadBiased((0, 0, 1, 1), (((0, 0), (1, 1)),), 1.0, 0.0)


def test_serving_cell_is_strongest(frame):
    st1 = station_at(frame, (-400, 0), -25.0, CellId(310, 410, 22, 1))
    st2 = station_at(frame, (400, 100), -30.0, CellId(310, 410, 22, 2))
    gt = synth.GroundTruth((st1, st2), frame, [synth.PleRegion(-300, 0, 2.8), synth.PleRegion(300, 0, 3.6)],
                           shadow_sigma_db=5.0)
    d = synth.sample_measurements(gt, synth.Uniform((-500, -500, 500, 500)), 1000, seed=4)
    ll = d.locations()
    means = gt.all_means(ll)
    served = np.array([0 if m.cell == st1.cell else 1 for m in d.records])
    assert np.all(means[np.arange(len(d)), served] >= means.max(axis=1))
    assert len(set(served)) == 2
    dist = np.array([m.bs_distance_m for m in d.records])
    ref = [distance_m((gt.stations[s].lat, gt.stations[s].lng), p) for s, p in zip(served, ll)]
    assert np.allclose(dist, ref)


def test_ple_regions_equal_distance_equal_mean(frame):
    st = station_at(frame, (0, 0))
    gt = synth.GroundTruth((st,), frame, [synth.PleRegion(-100, 0, 2.0), synth.PleRegion(100, 0, 4.0)])
    pts = frame.from_local(np.array([[200.0, 0.0], [0.0, 200.0 - 1e-9], [-200.0, 0.0]]))
    m = gt.mean_rsrp(st, pts)[0]
    assert gt.ple_at(np.array([[200.0, 0.0]]))[0] == 4.0
    assert m[0] < m[2]
    assert m[0] == pytest.approx(-30 - 40 * math.log10(distance_m((st.lat, st.lng), pts[0])))


def test_ground_truth_validation(frame):
    st = station_at(frame, (0, 0))
    with pytest.raises(ValueError):
        synth.GroundTruth((st,), frame, default_ple=1.5)
    with pytest.raises(ValueError):
        synth.GroundTruth((st, st), frame)
    with pytest.raises(ValueError):
        synth.GroundTruth((st,), frame, indoor_loss_db=-1.0)


def test_indoor_loss_shifts_indoor_labels_only(truth):
    proc = synth.Uniform((-400, -400, 400, 400))
    lossy = synth.GroundTruth(truth.stations, truth.frame, shadow_sigma_db=truth.shadow_sigma_db,
                              indoor_loss_db=12.0)
    a = synth.sample_measurements(truth, proc, 500, seed=9)
    b = synth.sample_measurements(lossy, proc, 500, seed=9)
    indoor = np.array([not m.outdoor for m in a.records])
    assert np.allclose((a.labels - b.labels)[indoor], 12.0)
    assert np.array_equal(a.labels[~indoor], b.labels[~indoor])


def test_label_corruption(small_dataset):
    d = small_dataset.subset(range(100))
    same, idx = synth.inject_label_corruption(d, 0.0, 40.0)
    assert same is d and idx.size == 0
    bad, idx = synth.inject_label_corruption(d, 0.1, 40.0, seed=1)
    assert idx.size == 10 and len(set(idx.tolist())) == 10
    diff = bad.labels - d.labels
    assert np.allclose(np.abs(diff[idx]), 40.0)
    assert np.all(np.delete(diff, idx) == 0)
    with pytest.raises(ValueError):
        synth.inject_label_corruption(d, 1.0, 40.0)


def test_time_model_respects_calendar():
    tm = synth.TimeModel(weekdays=(1, 3), hours=(8, 9))
    ts = tm.sample(np.random.default_rng(0), 500)
    import datetime as dt
    days = {dt.datetime.fromtimestamp(int(t), dt.timezone.utc).weekday() for t in ts}
    hours = {dt.datetime.fromtimestamp(int(t), dt.timezone.utc).hour for t in ts}
    assert days == {1, 3} and hours == {8, 9}


def test_smooth_field_is_deterministic():
    f = synth.SmoothField(3.0, 80.0, seed=2)
    g = synth.SmoothField(3.0, 80.0, seed=2)
    xy = np.random.default_rng(0).uniform(-500, 500, (100, 2))
    assert np.array_equal(f(xy), g(xy))
    assert 1.0 < np.std(f(xy)) < 6.0


def test_population_grid_blob(frame):
    g = synth.synthetic_population_grid(frame, (-500, -500, 500, 500), [(0, 0)], [100.0], [1000.0])
    centre = frame.from_local(np.array([25.0, 25.0]))
    corner = frame.from_local(np.array([475.0, 475.0]))
    assert g.density_at(*centre) > 900 and g.density_at(*corner) < 2
