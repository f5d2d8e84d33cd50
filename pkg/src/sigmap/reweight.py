"""Sampling-density estimation and importance weights for operator targets.

Densities are per square meter in a local frame (or per m^2 * hour for the
space-time product kernel).
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .datamodel import Dataset, WeightVector
from .geo import LocalFrame
from .ingest import PopulationGrid



class DensityFloorError(ValueError):
    def __init__(self, indices, floor):
        self.indices = np.asarray(indices)
        super().__init__(
            f"sampling density below floor {floor:.3g} at {self.indices.size} point(s) "
            f"(first: {self.indices[:10].tolist()}); increase the KDE bandwidth")


@dataclass(frozen=True)
class KdeMode:
    kind: str = "adaptive"        # "fixed" or "adaptive"
    bandwidth_m: float = 50.0     # fixed h, or the pilot h for adaptive
    alpha: float = 0.5            # adaptive sensitivity
    time_bandwidth_h: float | None = None  # enables the space-time product kernel (fixed only)

    def __post_init__(self):
        if self.kind not in ("fixed", "adaptive"):
            raise ValueError(f"unknown KDE mode {self.kind!r}")
        if self.bandwidth_m <= 0 or self.alpha < 0:
            raise ValueError("bandwidth must be > 0 and alpha >= 0")
        if self.time_bandwidth_h is not None:
            if self.time_bandwidth_h <= 0:
                raise ValueError("time bandwidth must be > 0")
            if self.kind != "fixed":
                raise ValueError("the space-time kernel uses fixed bandwidths")


@dataclass(frozen=True)
class DensityModel:
    points: np.ndarray        # (N, 2) local meters
    bandwidths: np.ndarray    # (N,) meters
    mode: KdeMode
    times: np.ndarray | None = None  # (N,) hours, space-time mode only
    peak: float = field(default=0.0, compare=False)

    @property
    def model_id(self) -> str:
        h = hashlib.sha256(self.points.tobytes() + self.bandwidths.tobytes())
        if self.times is not None:
            h.update(self.times.tobytes())
        return h.hexdigest()[:12]

    def __call__(self, xy, hours=None) -> np.ndarray:
        return density(self, xy, hours)


@njit(cache=True)
def _kernel_rows(points, inv2h2, norm, q, times, hq, inv2ht2):
    n = points.shape[0]
    out = np.empty(q.shape[0])
    timed = times.shape[0] > 0
    for r in range(q.shape[0]):
        qx = q[r, 0]
        qy = q[r, 1]
        acc = 0.0
        for i in range(n):
            dx = qx - points[i, 0]
            dy = qy - points[i, 1]
            e = (dx * dx + dy * dy) * inv2h2[i]
            if timed:
                dt = hq[r] - times[i]
                e += dt * dt * inv2ht2
            acc += norm[i] * np.exp(-e)
        out[r] = acc / n
    return out


def _kernel_sum(points, bw, q, times=None, hq=None, h_t=None) -> np.ndarray:
    bw = np.asarray(bw, dtype=float)
    inv2h2 = 1.0 / (2.0 * bw * bw)
    norm = 1.0 / (2.0 * np.pi * bw * bw)
    if times is None:
        times = hq = np.empty(0)
        inv2ht2 = 0.0
    else:
        norm = norm / (np.sqrt(2.0 * np.pi) * h_t)
        inv2ht2 = 1.0 / (2.0 * h_t * h_t)
    return _kernel_rows(np.ascontiguousarray(points, dtype=float), inv2h2, norm,
                        np.ascontiguousarray(q, dtype=float), np.asarray(times, dtype=float),
                        np.asarray(hq, dtype=float), inv2ht2)


def density(m: DensityModel, xy, hours=None) -> np.ndarray:
    """Kernel-sum density at local-frame points ``xy`` (M, 2)."""
    q = np.atleast_2d(np.asarray(xy, dtype=float))
    if m.times is not None:
        if hours is None:
            raise ValueError("space-time density needs query hours")
        return _kernel_sum(m.points, m.bandwidths, q, m.times, np.asarray(hours, dtype=float),
                           m.mode.time_bandwidth_h)
    return _kernel_sum(m.points, m.bandwidths, q)


def fit_kde(locations, mode: KdeMode = KdeMode(), hours=None) -> DensityModel:
    """Gaussian KDE over local-frame ``locations`` (N, 2).

    Adaptive mode uses Abramson-style per-point bandwidths
    ``h_i = h_pilot * (pilot(x_i) / g) ** -alpha``, ``g`` the geometric mean of the
    fixed-bandwidth pilot estimate over the training points.
    """
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(locations, dtype=float)))
    if len(pts) < 2 or len(np.unique(pts, axis=0)) < 2:
        raise ValueError("KDE needs at least two distinct locations")
    n = len(pts)
    h = np.full(n, float(mode.bandwidth_m))
    times = None
    if mode.time_bandwidth_h is not None:
        if hours is None:
            raise ValueError("space-time KDE needs training hours")
        times = np.asarray(hours, dtype=float)
    if mode.kind == "adaptive":
        pilot = _kernel_sum(pts, h, pts)
        g = np.exp(np.mean(np.log(pilot)))
        h = mode.bandwidth_m * (pilot / g) ** (-mode.alpha)
    m = DensityModel(pts, h, mode, times)
    peak = float(np.max(density(m, pts, times)))
    object.__setattr__(m, "peak", peak)
    for a in (m.points, m.bandwidths) + (() if times is None else (m.times,)):
        a.setflags(write=False)
    return m


def density_floor(m: DensityModel) -> float:
    return max(1e-12, 1e-6 * m.peak)


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "uniform"  # uniform | population | custom
    grid: PopulationGrid | None = None
    fn: object = None      # custom: fn(lat, lng) -> non-negative array

    def __post_init__(self):
        if self.kind not in ("uniform", "population", "custom"):
            raise ValueError(f"unknown target {self.kind!r}")
        if self.kind == "population" and self.grid is None:
            raise ValueError("population target needs a grid")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom target needs a function")

    def mass(self, latlng) -> np.ndarray:
        latlng = np.atleast_2d(np.asarray(latlng, dtype=float))
        if self.kind == "uniform":
            return np.ones(len(latlng))
        if self.kind == "population":
            v, inside = self.grid.lookup(latlng[:, 0], latlng[:, 1])
            if not inside.all():
                bad = np.flatnonzero(~inside)
                raise ValueError(f"{bad.size} point(s) outside the population grid (first: {bad[:10].tolist()})")
            return v
        v = np.asarray(self.fn(latlng[:, 0], latlng[:, 1]), dtype=float)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("custom target must be finite and non-negative")
        return v


@dataclass(frozen=True)
class ImportanceWeights:
    weights: WeightVector
    density: np.ndarray
    target_mass: np.ndarray
    target_kind: str
    density_id: str
    normalization: float  # mean of the raw ratios

    @property
    def values(self) -> np.ndarray:
        return self.weights.values

    def __len__(self):
        return len(self.weights)

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        buf.write("index,weight,density,target_mass\n")
        for i, (w, s, t) in enumerate(zip(self.values, self.density, self.target_mass)):
            buf.write(f"{i},{float(w)!r},{float(s)!r},{float(t)!r}\n")
        return buf.getvalue().encode("utf-8")


def importance_ratios_at(latlng, xy, target: TargetSpec, s: DensityModel, hours=None) -> ImportanceWeights:
    dens = density(s, xy, hours)
    floor = density_floor(s)
    low = np.flatnonzero(dens < floor)
    if low.size:
        raise DensityFloorError(low, floor)
    mass = target.mass(latlng)
    raw = mass / dens
    norm = float(np.mean(raw))
    if not norm > 0:
        raise ValueError("target mass is zero at every point")
    return ImportanceWeights(WeightVector(raw / norm), dens, mass, target.kind, s.model_id, norm)


def importance_ratios(d: Dataset, target: TargetSpec, s: DensityModel, frame: LocalFrame) -> ImportanceWeights:
    """Target mass over sampling density per record, normalized to mean 1."""
    ll = d.locations()
    hours = d.hours() if s.times is not None else None
    return importance_ratios_at(ll, frame.to_local(ll), target, s, hours)


def _weights_array(w) -> np.ndarray:
    if isinstance(w, (ImportanceWeights, WeightVector)):
        return np.asarray(w.values)
    return np.asarray(w, dtype=float)


def reweighted_error(pred, truth, w) -> float:
    """``(1/N) * sum w_i (pred_i - truth_i)^2``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    wv = _weights_array(w)
    if not pred.shape == truth.shape == wv.shape:
        raise ValueError("pred, truth and weights must align")
    return float(np.mean(wv * (pred - truth) ** 2))


def reweighted_rmse(pred, truth, w) -> float:
    return float(np.sqrt(reweighted_error(pred, truth, w)))
