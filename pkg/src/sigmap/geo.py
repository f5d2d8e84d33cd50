"""Haversine distances and a small-area equirectangular projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEG = EARTH_RADIUS_M * np.pi / 180.0


def distance_m(a, b):
    """Great-circle distance in meters between ``(lat, lng)`` points.

    Broadcasts over leading dimensions: ``a`` and ``b`` may be ``(2,)`` or ``(N, 2)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lat1, lng1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lat2, lng2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    s = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lng2 - lng1) / 2.0) ** 2)
    d = 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


@dataclass(frozen=True)
class LocalFrame:
    origin_lat: float
    origin_lng: float

    def __post_init__(self):
        if not abs(self.origin_lat) < 90.0:
            raise ValueError("local frame origin must satisfy |lat| < 90")

    @property
    def meters_per_deg_lat(self) -> float:
        return METERS_PER_DEG

    @property
    def meters_per_deg_lng(self) -> float:
        return METERS_PER_DEG * np.cos(np.radians(self.origin_lat))

    def to_local(self, p) -> np.ndarray:
        """``(lat, lng)`` -> ``(x east, y north)`` meters."""
        p = np.asarray(p, dtype=float)
        x = (p[..., 1] - self.origin_lng) * self.meters_per_deg_lng
        y = (p[..., 0] - self.origin_lat) * self.meters_per_deg_lat
        return np.stack([x, y], axis=-1)

    def from_local(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        lat = self.origin_lat + xy[..., 1] / self.meters_per_deg_lat
        lng = self.origin_lng + xy[..., 0] / self.meters_per_deg_lng
        return np.stack([lat, lng], axis=-1)
