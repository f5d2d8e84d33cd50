"""Quality-of-service transforms of KPI values and Q-domain datasets."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .datamodel import Dataset, Kpi, RSRP_ENVELOPE

COVERAGE_THRESHOLD_DBM = -115.0
# bar k covers (BAR_EDGES[k-1], BAR_EDGES[k]]; above the last edge is 4 bars
BAR_EDGES = (-124.0, -115.0, -105.0, -85.0)


def fit_cdp_two_point(y1: float, p1: float, y2: float, p2: float, c: float) -> tuple[float, float, float]:
    """Solve ``a * exp(-b * y) + c`` through ``(y1, p1)`` and ``(y2, p2)``."""
    if not (p1 > c and p2 > c):
        raise ValueError("anchor probabilities must exceed c")
    b = math.log((p1 - c) / (p2 - c)) / (y2 - y1)
    a = (p1 - c) * math.exp(b * y1)
    return a, b, c


# anchors: CDP(-120 dBm) = 0.50, CDP(-90 dBm) = 0.02 with floor c = 0.01
DEFAULT_CDP_RSRP = fit_cdp_two_point(-120.0, 0.50, -90.0, 0.02, 0.01)
# anchors: CDP(CQI 1) = 0.5, CDP(CQI 10) = 0.02, c = 0.01
DEFAULT_CDP_CQI = fit_cdp_two_point(1.0, 0.50, 10.0, 0.02, 0.01)


@dataclass(frozen=True)
class QualityFn:
    kind: str = "identity"  # identity | coverage | bars | cdp
    a: float | None = None
    b: float | None = None
    c: float | None = None
    kpi: Kpi = Kpi.RSRP

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "kpi", Kpi(self.kpi))
        if kind not in ("identity", "coverage", "bars", "cdp"):
            raise ValueError(f"unknown quality function {self.kind!r}")
        if kind == "cdp":
            if self.a is None:
                if self.kpi == Kpi.RSRP:
                    a, b, c = DEFAULT_CDP_RSRP
                elif self.kpi == Kpi.CQI:
                    a, b, c = DEFAULT_CDP_CQI
                else:
                    raise ValueError(f"no default CDP parameters for {self.kpi.value}")
                object.__setattr__(self, "a", a)
                object.__setattr__(self, "b", b)
                object.__setattr__(self, "c", c)
            if not (self.a > 0 and self.b > 0 and 0 <= self.c < 1):
                raise ValueError("cdp needs a > 0, b > 0, 0 <= c < 1")

    @classmethod
    def cdp(cls, kpi=Kpi.RSRP, a=None, b=None, c=None) -> "QualityFn":
        return cls("cdp", a, b, c, kpi)

    @property
    def task(self) -> str:
        return "classification" if self.kind in ("coverage", "bars") else "regression"

    @property
    def classes(self):
        return {"coverage": (0.0, 1.0), "bars": (0.0, 1.0, 2.0, 3.0, 4.0)}.get(self.kind)

    def describe(self) -> str:
        if self.kind == "cdp":
            return f"cdp[{self.kpi.value}](a={float(self.a)!r}, b={float(self.b)!r}, c={float(self.c)!r})"
        return self.kind


def coverage(y) -> np.ndarray:
    return np.where(np.asarray(y, dtype=float) <= COVERAGE_THRESHOLD_DBM, 0.0, 1.0)


def bars(y) -> np.ndarray:
    # right=True: each edge belongs to the bar below it
    return np.digitize(np.asarray(y, dtype=float), BAR_EDGES, right=True).astype(float)


def apply(q: QualityFn, y, kpi: Kpi = Kpi.RSRP):
    """Q(y) elementwise. ``kpi`` names what ``y`` measures."""
    kpi = Kpi(kpi)
    arr = np.asarray(y, dtype=float)
    if q.kind == "identity":
        out = arr.copy()
    elif q.kind in ("coverage", "bars"):
        if kpi != Kpi.RSRP:
            raise ValueError(f"{q.kind} is defined on RSRP, not {kpi.value}")
        out = coverage(arr) if q.kind == "coverage" else bars(arr)
    else:
        if kpi != q.kpi:
            raise ValueError(f"cdp parameters were fitted for {q.kpi.value}, not {kpi.value}")
        out = np.clip(q.a * np.exp(-q.b * arr) + q.c, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def cdp_invertible_range(q: QualityFn) -> tuple[float, float]:
    """Open interval of probabilities that :func:`invert_cdp` accepts."""
    y_min = RSRP_ENVELOPE[0] if q.kpi == Kpi.RSRP else 0.0
    return q.c, min(1.0, q.a * math.exp(-q.b * y_min) + q.c)


def invert_cdp(q: QualityFn, p):
    """KPI value whose CDP is ``p``: ``-ln((p - c) / a) / b``."""
    if q.kind != "cdp":
        raise ValueError("invert_cdp needs a cdp quality function")
    arr = np.asarray(p, dtype=float)
    lo, hi = cdp_invertible_range(q)
    bad = ~((arr > lo) & (arr < hi))
    if np.any(bad):
        raise ValueError(f"probability outside the invertible range ({lo}, {hi})")
    out = -np.log((arr - q.c) / q.a) / q.b
    return float(out) if out.ndim == 0 else out


def invert_cdp_clipped(q: QualityFn, p, margin: float = 1e-9):
    """:func:`invert_cdp` after clipping ``p`` into the invertible range (for predictions)."""
    lo, hi = cdp_invertible_range(q)
    return invert_cdp(q, np.clip(np.asarray(p, dtype=float), lo + margin, hi - margin))


def transform_dataset(d: Dataset, q: QualityFn) -> Dataset:
    """Replace labels by ``Q(label)``; coverage/bars produce classification labels."""
    labels = apply(q, d.labels, d.label_kpi)
    labels = np.atleast_1d(labels)
    if q.task == "classification" and len(labels) and np.unique(labels).size == 1:
        warnings.warn(f"{q.kind} labels contain a single class", stacklevel=2)
    return d.with_labels(labels, q.kind if q.kind != "identity" else d.label_domain, q.task)
