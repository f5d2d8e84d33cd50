"""Synthetic LDPL ground truth and biased sampling processes.

Locations inside the generator live in a :class:`~sigmap.geo.LocalFrame`
(meters east/north of the frame origin); emitted measurements carry lat/lng.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import CellId, Dataset, FeatureSet, Kpi, Measurement
from .geo import LocalFrame, distance_m
from .ingest import PopulationGrid

# Monday 2017-09-11 00:00:00 UTC
DEFAULT_WEEK_START = 1505088000
DEFAULT_DEVICES = ("SM-G935P", "Pixel 2", "iPhone 8", "LG-H870", "Moto G5")
CHUNK = 4096


@dataclass(frozen=True)
class Station:
    cell: CellId
    lat: float
    lng: float
    p0: float  # dBm at d0
    earfcn: int | None = None


@dataclass(frozen=True)
class PleRegion:
    """Voronoi seed (local meters) with its path-loss exponent."""

    x: float
    y: float
    n: float


@dataclass(frozen=True)
class SmoothField:
    """Deterministic smooth dB offset built from random Fourier features.

    Off by default; used to give kriging a spatially correlated residual to find.
    """

    amplitude_db: float
    length_scale_m: float
    n_components: int = 64
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 0x5EED])
        object.__setattr__(self, "_omega", rng.normal(0.0, 1.0 / self.length_scale_m, (self.n_components, 2)))
        object.__setattr__(self, "_phase", rng.uniform(0.0, 2 * np.pi, self.n_components))

    def __call__(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        z = np.cos(xy @ self._omega.T + self._phase)
        return self.amplitude_db * np.sqrt(2.0 / self.n_components) * z.sum(axis=1)


@dataclass(frozen=True)
class GroundTruth:
    stations: tuple
    frame: LocalFrame
    ple_regions: tuple = ()
    default_ple: float = 3.0
    shadow_sigma_db: float = 6.0
    d0: float = 1.0
    residual_field: SmoothField | None = None
    indoor_loss_db: float = 0.0  # extra attenuation for indoor (outdoor=False) samples; 0 disables

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        object.__setattr__(self, "ple_regions", tuple(self.ple_regions))
        if not self.stations:
            raise ValueError("ground truth needs at least one station")
        for n in [self.default_ple] + [r.n for r in self.ple_regions]:
            if not 2.0 <= n <= 6.0:
                raise ValueError(f"path-loss exponent {n} outside [2, 6]")
        if self.shadow_sigma_db < 0 or self.d0 <= 0:
            raise ValueError("need shadow_sigma_db >= 0 and d0 > 0")
        if self.indoor_loss_db < 0:
            raise ValueError("indoor_loss_db must be >= 0")
        cells = [s.cell for s in self.stations]
        if len(set(cells)) != len(cells):
            raise ValueError("duplicate station cell ids")

    def station(self, cell: CellId) -> Station:
        for s in self.stations:
            if s.cell == cell:
                return s
        raise KeyError(f"no station for cell {cell}")

    def ple_at(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        if not self.ple_regions:
            return np.full(len(xy), float(self.default_ple))
        seeds = np.array([(r.x, r.y) for r in self.ple_regions])
        ns = np.array([r.n for r in self.ple_regions])
        d2 = ((xy[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        return ns[np.argmin(d2, axis=1)]

    def mean_rsrp(self, station: Station, latlng) -> tuple[np.ndarray, np.ndarray]:
        """Noise-free mean RSRP at ``latlng`` (N, 2) and a near-field clamp flag."""
        latlng = np.atleast_2d(np.asarray(latlng, dtype=float))
        dist = np.atleast_1d(distance_m(np.array([station.lat, station.lng]), latlng))
        clamped = dist < self.d0
        dist = np.maximum(dist, self.d0)
        xy = self.frame.to_local(latlng)
        mean = station.p0 - 10.0 * self.ple_at(xy) * np.log10(dist / self.d0)
        if self.residual_field is not None:
            mean = mean + self.residual_field(xy)
        return mean, clamped

    def all_means(self, latlng) -> np.ndarray:
        """(N, n_stations) noise-free means."""
        return np.column_stack([self.mean_rsrp(s, latlng)[0] for s in self.stations])


def true_rsrp(gt: GroundTruth, cell: CellId, loc) -> float:
    """Noise-free LDPL mean at ``loc = (lat, lng)``; distances below d0 are clamped to d0."""
    mean, _ = gt.mean_rsrp(gt.station(cell), np.asarray(loc, dtype=float)[None, :])
    return float(mean[0])


def _bbox_uniform(rng, bbox, n):
    x0, y0, x1, y1 = bbox
    return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])


def _inside(bbox, xy):
    x0, y0, x1, y1 = bbox
    return (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)


def _check_masses(masses):
    m = np.asarray(masses, dtype=float)
    if np.any(m <= 0) or np.any(m > 1) or m.sum() > 1 + 1e-12:
        raise ValueError("mass fractions must be in (0, 1] and sum to at most 1")
    return m


@dataclass(frozen=True)
class Uniform:
    bbox: tuple  # (x0, y0, x1, y1) local meters

    def sample(self, rng, n: int) -> np.ndarray:
        return _bbox_uniform(rng, self.bbox, n)


@dataclass(frozen=True)
class Hotspots:
    """Gaussian hotspots; the mass left over is spread uniformly over ``bbox``.

    Draws falling outside ``bbox`` are redrawn from the same hotspot.
    """

    bbox: tuple
    centers: tuple
    sigmas: tuple
    masses: tuple

    def __post_init__(self):
        if not len(self.centers) == len(self.sigmas) == len(self.masses):
            raise ValueError("centers, sigmas and masses must align")
        _check_masses(self.masses)

    def sample(self, rng, n: int) -> np.ndarray:
        m = np.asarray(self.masses, dtype=float)
        probs = np.append(m, max(0.0, 1.0 - m.sum()))
        comp = rng.choice(len(probs), size=n, p=probs / probs.sum())
        out = _bbox_uniform(rng, self.bbox, n)
        for k, (c, s) in enumerate(zip(self.centers, self.sigmas)):
            idx = np.flatnonzero(comp == k)
            while idx.size:
                pts = np.asarray(c, dtype=float) + s * rng.standard_normal((idx.size, 2))
                ok = _inside(self.bbox, pts)
                out[idx[ok]] = pts[ok]
                idx = idx[~ok]
        return out


@dataclass(frozen=True)
class RoadBiased:
    """Mass ``mass`` placed within a Gaussian cross-section around polylines."""

    bbox: tuple
    polylines: tuple
    sigma_m: float
    mass: float

    def __post_init__(self):
        _check_masses([self.mass])

    def _segments(self):
        segs = []
        for line in self.polylines:
            pts = np.asarray(line, dtype=float)
            for a, b in zip(pts[:-1], pts[1:]):
                segs.append((a, b))
        return segs

    def sample(self, rng, n: int) -> np.ndarray:
        segs = self._segments()
        a = np.array([s[0] for s in segs])
        b = np.array([s[1] for s in segs])
        lengths = np.linalg.norm(b - a, axis=1)
        on_road = rng.uniform(size=n) < self.mass
        out = _bbox_uniform(rng, self.bbox, n)
        idx = np.flatnonzero(on_road)
        while idx.size:
            k = rng.choice(len(segs), size=idx.size, p=lengths / lengths.sum())
            t = rng.uniform(size=idx.size)
            base = a[k] + t[:, None] * (b[k] - a[k])
            direction = (b[k] - a[k]) / lengths[k][:, None]
            normal = np.column_stack([-direction[:, 1], direction[:, 0]])
            pts = base + normal * (self.sigma_m * rng.standard_normal(idx.size))[:, None]
            ok = _inside(self.bbox, pts)
            out[idx[ok]] = pts[ok]
            idx = idx[~ok]
        return out


@dataclass(frozen=True)
class TimeModel:
    """Uniform over the configured UTC weekdays and hours of one week.

    Transmit power does not vary with time; a load-dependent offset would hook in here.
    """

    weekdays: tuple = tuple(range(7))
    hours: tuple = tuple(range(24))
    week_start: int = DEFAULT_WEEK_START

    def sample(self, rng, n: int) -> np.ndarray:
        day = rng.choice(np.asarray(self.weekdays), size=n)
        hour = rng.choice(np.asarray(self.hours), size=n)
        sec = rng.integers(0, 3600, size=n)
        return self.week_start + day * 86400 + hour * 3600 + sec


def _sample_chunk(gt, proc, start, size, time_model, seed, devices, outdoor_prob):
    rng = np.random.default_rng(np.random.SeedSequence([seed, start]))
    xy = proc.sample(rng, size)
    ts = time_model.sample(rng, size)
    dev = rng.integers(0, len(devices), size=size)
    outdoor = rng.uniform(size=size) < outdoor_prob
    noise = gt.shadow_sigma_db * rng.standard_normal(size)
    if gt.indoor_loss_db:
        noise -= gt.indoor_loss_db * ~outdoor
    ll = gt.frame.from_local(xy)
    means = gt.all_means(ll)
    serving = np.argmax(means, axis=1)  # ties -> first station
    st_ll = np.array([(s.lat, s.lng) for s in gt.stations])[serving]
    dist = distance_m(st_ll, ll)
    out = []
    for k in range(size):
        st = gt.stations[serving[k]]
        out.append(Measurement.at(
            lat=float(ll[k, 0]), lng=float(ll[k, 1]), timestamp_utc=float(int(ts[k])), cell=st.cell,
            device_model=devices[dev[k]], rsrp=float(means[k, serving[k]] + noise[k]),
            outdoor=bool(outdoor[k]), bs_distance_m=float(dist[k]), dl_freq=st.earfcn,
        ))
    return out


def sample_measurements(gt: GroundTruth, proc, n: int, time_model: TimeModel | None = None, seed: int = 0,
                        devices=DEFAULT_DEVICES, outdoor_prob: float = 0.5, threads: int = 1,
                        feature_set=FeatureSet.ALL) -> Dataset:
    """Draw ``n`` labelled measurements.

    Index ranges of ``CHUNK`` records each use the seed stream ``(seed, range_start)``,
    so the output does not depend on ``threads``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    tm = time_model or TimeModel()
    starts = list(range(0, n, CHUNK))
    args = [(gt, proc, s, min(CHUNK, n - s), tm, seed, tuple(devices), outdoor_prob) for s in starts]
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda a: _sample_chunk(*a), args))
    else:
        parts = [_sample_chunk(*a) for a in args]
    return Dataset([m for p in parts for m in p], Kpi.RSRP, feature_set)


def inject_label_corruption(d: Dataset, fraction: float, magnitude_db: float, seed: int = 0
                            ) -> tuple[Dataset, np.ndarray]:
    """Shift ``ceil(fraction * N)`` KPI labels by +-``magnitude_db``; returns sorted corrupted indices."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    n = len(d)
    k = math.ceil(fraction * n - 1e-9)
    if k == 0:
        return d, np.array([], dtype=int)
    rng = np.random.default_rng([seed, 0xBAD])
    idx = np.sort(rng.choice(n, size=k, replace=False))
    signs = rng.choice([-1.0, 1.0], size=k)
    recs = list(d.records)
    attr = d.label_kpi.value
    for i, s in zip(idx, signs):
        recs[i] = replace(recs[i], **{attr: getattr(recs[i], attr) + s * magnitude_db})
    return d.with_records(recs), idx


def synthetic_population_grid(frame: LocalFrame, bbox, centers, sigmas, weights, base: float = 1.0,
                              cell_m: float = 50.0) -> PopulationGrid:
    """Population density grid: ``base`` plus Gaussian blobs (persons / km^2)."""
    x0, y0, x1, y1 = bbox
    xs = np.arange(x0 + cell_m / 2, x1, cell_m)
    ys = np.arange(y0 + cell_m / 2, y1, cell_m)
    gx, gy = np.meshgrid(xs, ys)
    dens = np.full(gx.shape, float(base))
    for c, s, w in zip(centers, sigmas, weights):
        dens += w * np.exp(-((gx - c[0]) ** 2 + (gy - c[1]) ** 2) / (2 * s * s))
    lat_step = cell_m / frame.meters_per_deg_lat
    lng_step = cell_m / frame.meters_per_deg_lng
    origin = frame.from_local(np.array([xs[0], ys[0]]))
    return PopulationGrid(float(origin[0]), float(origin[1]), lat_step, lng_step, dens)


@dataclass(frozen=True)
class Scenario:
    """Everything needed to regenerate one synthetic dataset."""

    truth: GroundTruth
    process: object
    n_samples: int
    time_model: TimeModel = field(default_factory=TimeModel)
    seed: int = 0
    devices: tuple = DEFAULT_DEVICES
    outdoor_prob: float = 0.5

    def sample(self, threads: int = 1, seed: int | None = None, n: int | None = None,
               feature_set=FeatureSet.ALL) -> Dataset:
        return sample_measurements(self.truth, self.process, n or self.n_samples, self.time_model,
                                   self.seed if seed is None else seed, self.devices, self.outdoor_prob,
                                   threads, feature_set)
