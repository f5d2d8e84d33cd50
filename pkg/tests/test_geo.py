import numpy as np
from hypothesis import given, settings, strategies as st

from sigmap.geo import LocalFrame, distance_m

lat = st.floats(-80, 80)
lng = st.floats(-179, 179)


def test_one_degree_of_latitude():
    assert abs(distance_m((0.0, 0.0), (0.0, 1.0)) - 111194.93) < 0.5
    assert abs(distance_m((0.0, 0.0), (1.0, 0.0)) - 111194.93) < 0.5


def test_small_longitude_step_at_equator():
    assert abs(distance_m((0.0, 0.0), (0.0, 0.001)) - 111.19) < 0.01


def test_distance_is_vectorized():
    a = np.array([[0.0, 0.0], [10.0, 10.0]])
    d = distance_m(a, np.array([0.0, 0.0]))
    assert d.shape == (2,)
    assert d[0] == 0.0


@given(lat, lng, lat, lng, lat, lng)
def test_triangle_inequality(a1, o1, a2, o2, a3, o3):
    p, q, r = (a1, o1), (a2, o2), (a3, o3)
    assert distance_m(p, r) <= distance_m(p, q) + distance_m(q, r) + 1e-6


@given(lat, lng, lat, lng)
def test_symmetric_and_nonnegative(a1, o1, a2, o2):
    d = distance_m((a1, o1), (a2, o2))
    assert d >= 0
    assert abs(d - distance_m((a2, o2), (a1, o1))) < 1e-6


@given(st.floats(-70, 70), lng, st.floats(-2000, 2000), st.floats(-2000, 2000))
def test_local_frame_round_trip(a, o, x, y):
    fr = LocalFrame(a, o)
    xy = np.array([[x, y]])
    back = fr.to_local(fr.from_local(xy))
    assert np.max(np.abs(back - xy)) < 1e-6
    ll = fr.from_local(xy)
    again = fr.from_local(fr.to_local(ll))
    assert np.max(np.abs(again - ll)) < 1e-9


@settings(max_examples=50)
@given(st.floats(-60, 60), lng, st.floats(-1500, 1500), st.floats(-1500, 1500))
def test_projection_agrees_with_haversine(a, o, x, y):
    fr = LocalFrame(a, o)
    r = np.hypot(x, y)
    if r < 10:
        return
    ll = fr.from_local(np.array([x, y]))
    d = distance_m((a, o), ll)
    assert abs(d - r) <= 0.005 * r
