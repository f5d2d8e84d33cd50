"""Core records: measurements, feature encoding, datasets and weight vectors."""
from __future__ import annotations

import datetime as _dt
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

RSRP_ENVELOPE = (-150.0, -30.0)
CQI_RANGE = (0, 15)


class Kpi(str, Enum):
    RSRP = "rsrp"  # dBm
    RSRQ = "rsrq"  # dB
    CQI = "cqi"  # unitless, 0..15


class MissingFeatureError(ValueError):
    def __init__(self, name: str, index: int | None = None):
        self.feature = name
        self.index = index
        where = "" if index is None else f" (record {index})"
        super().__init__(f"missing feature {name!r}{where}")


@dataclass(frozen=True, order=True)
class CellId:
    """Cell global identifier. ``(mcc, mnc, tac)`` identifies the tracking area."""

    mcc: int
    mnc: int
    tac: int
    ci: int

    def __post_init__(self):
        for name in ("mcc", "mnc", "tac", "ci"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"CellId.{name} must be a non-negative integer, got {v!r}")

    @property
    def ta(self) -> tuple[int, int, int]:
        return (self.mcc, self.mnc, self.tac)

    def __str__(self) -> str:
        return f"{self.mcc}-{self.mnc}-{self.tac}-{self.ci}"

    @classmethod
    def parse(cls, text: str) -> "CellId":
        parts = text.split("-")
        if len(parts) != 4:
            raise ValueError(f"cell id must look like mcc-mnc-tac-ci, got {text!r}")
        return cls(*(int(p) for p in parts))


def utc_day_hour(timestamp_utc: float) -> tuple[int, int]:
    t = _dt.datetime.fromtimestamp(float(timestamp_utc), tz=_dt.timezone.utc)
    return t.weekday(), t.hour


@dataclass(frozen=True)
class Measurement:
    """One crowdsourced KPI observation.

    ``day_of_week`` (Monday = 0) and ``hour_of_day`` are taken in UTC so they
    can be checked against ``timestamp_utc``.
    """

    lat: float
    lng: float
    timestamp_utc: float
    day_of_week: int
    hour_of_day: int
    cell: CellId
    device_model: str
    rsrp: float
    outdoor: bool | None = None
    bs_distance_m: float | None = None
    dl_freq: int | None = None
    rsrq: float | None = None
    cqi: int | None = None
    extras: Mapping = field(default_factory=dict, compare=False, hash=False, repr=False)

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat out of range: {self.lat}")
        if not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"lng out of range: {self.lng}")
        if not (0 <= self.day_of_week <= 6 and 0 <= self.hour_of_day <= 23):
            raise ValueError(f"bad day/hour: {self.day_of_week}/{self.hour_of_day}")
        if (self.day_of_week, self.hour_of_day) != utc_day_hour(self.timestamp_utc):
            raise ValueError("day_of_week/hour_of_day inconsistent with timestamp_utc")
        if self.cqi is not None and (int(self.cqi) != self.cqi or not CQI_RANGE[0] <= self.cqi <= CQI_RANGE[1]):
            raise ValueError(f"cqi must be an integer in 0..15, got {self.cqi!r}")

    @classmethod
    def at(cls, lat, lng, timestamp_utc, cell, device_model, rsrp, **kw) -> "Measurement":
        """Build a measurement, deriving day/hour from the timestamp."""
        day, hour = utc_day_hour(timestamp_utc)
        return cls(lat, lng, timestamp_utc, day, hour, cell, device_model, rsrp, **kw)

    def kpi(self, kind: Kpi):
        return getattr(self, Kpi(kind).value)


def in_envelope(rsrp: float) -> bool:
    return RSRP_ENVELOPE[0] <= rsrp <= RSRP_ENVELOPE[1]


class FeatureSet(str, Enum):
    XY = "XY"
    XYT = "XYT"
    ALL = "ALL"
    ALL_MINUS_CID = "ALL_MINUS_CID"

    @property
    def columns(self) -> tuple[str, ...]:
        return _COLUMNS[self]

    @property
    def categorical(self) -> np.ndarray:
        return np.array([c in CATEGORICAL_COLUMNS for c in self.columns], dtype=bool)


_ALL = ("lat", "lng", "day_of_week", "hour_of_day", "cell", "device_model",
        "outdoor", "bs_distance_m", "dl_freq")
_COLUMNS = {
    FeatureSet.XY: _ALL[:2],
    FeatureSet.XYT: _ALL[:4],
    FeatureSet.ALL: _ALL,
    FeatureSet.ALL_MINUS_CID: tuple(c for c in _ALL if c != "cell"),
}
CATEGORICAL_COLUMNS = frozenset({"cell", "device_model"})


class CategoryEncoder:
    """Stable integer codes for cell ids and device models.

    Codes follow first appearance in the records the encoder was built from.
    Values never seen map to -1.
    """

    UNSEEN = -1

    def __init__(self, cells: Sequence[CellId] = (), devices: Sequence[str] = ()):
        self.cells = {c: i for i, c in enumerate(dict.fromkeys(cells))}
        self.devices = {d: i for i, d in enumerate(dict.fromkeys(devices))}

    @classmethod
    def from_records(cls, records: Iterable[Measurement]) -> "CategoryEncoder":
        records = list(records)
        return cls([m.cell for m in records], [m.device_model for m in records])

    def code(self, column: str, value) -> int:
        table = self.cells if column == "cell" else self.devices
        return table.get(value, self.UNSEEN)

    def to_dict(self) -> dict:
        return {"cells": [str(c) for c in self.cells], "devices": list(self.devices)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategoryEncoder":
        return cls([CellId.parse(c) for c in d["cells"]], list(d["devices"]))

    def __eq__(self, other):
        return isinstance(other, CategoryEncoder) and self.to_dict() == other.to_dict()


def encode_features(m: Measurement, fs: FeatureSet, encoder: CategoryEncoder,
                    index: int | None = None) -> tuple:
    out = []
    for col in FeatureSet(fs).columns:
        if col in CATEGORICAL_COLUMNS:
            out.append(encoder.code(col, getattr(m, col)))
            continue
        v = getattr(m, col)
        if v is None:
            raise MissingFeatureError(col, index)
        out.append(float(v))
    return tuple(out)


@dataclass(frozen=True)
class Dataset:
    """Ordered measurements plus the label column used for learning.

    Record order is the identity used by weights and valuation results.
    ``labels`` defaults to the ``label_kpi`` column; quality transforms
    replace it while keeping records and the encoder untouched.
    """

    records: tuple
    label_kpi: Kpi = Kpi.RSRP
    feature_set: FeatureSet = FeatureSet.ALL
    labels: np.ndarray | None = None
    encoder: CategoryEncoder | None = field(default=None, compare=False)
    label_domain: str = "kpi"
    task: str = "regression"

    def __post_init__(self):
        recs = tuple(self.records)
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "label_kpi", Kpi(self.label_kpi))
        object.__setattr__(self, "feature_set", FeatureSet(self.feature_set))
        if self.labels is None:
            vals = []
            for i, m in enumerate(recs):
                v = m.kpi(self.label_kpi)
                if v is None:
                    raise ValueError(f"record {i} has no {self.label_kpi.value} label")
                vals.append(float(v))
            labels = np.asarray(vals, dtype=float)
        else:
            labels = np.array(self.labels, dtype=float)
            if labels.shape != (len(recs),):
                raise ValueError("labels must align with records")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.encoder is None:
            object.__setattr__(self, "encoder", CategoryEncoder.from_records(recs))

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return replace(self, records=tuple(self.records[i] for i in idx), labels=self.labels[idx])

    def with_labels(self, labels, label_domain: str, task: str) -> "Dataset":
        return replace(self, labels=np.asarray(labels, dtype=float), label_domain=label_domain, task=task)

    def with_feature_set(self, fs: FeatureSet) -> "Dataset":
        return replace(self, feature_set=FeatureSet(fs))

    def with_records(self, records) -> "Dataset":
        """Same dataset over new records; labels are re-read from the records."""
        return replace(self, records=tuple(records), labels=None, label_domain="kpi", task="regression")

    def feature_matrix(self, encoder: CategoryEncoder | None = None) -> np.ndarray:
        enc = self.encoder if encoder is None else encoder
        fs = self.feature_set
        if not self.records:
            return np.empty((0, len(fs.columns)))
        return np.array([encode_features(m, fs, enc, i) for i, m in enumerate(self.records)], dtype=float)

    def locations(self) -> np.ndarray:
        """(N, 2) array of (lat, lng)."""
        return np.array([(m.lat, m.lng) for m in self.records], dtype=float).reshape(-1, 2)

    def hours(self) -> np.ndarray:
        return np.array([m.hour_of_day for m in self.records], dtype=float)


def group_by(d: Dataset, key) -> list[tuple[object, Dataset, np.ndarray]]:
    groups: dict = {}
    for i, m in enumerate(d.records):
        groups.setdefault(key(m), []).append(i)
    return [(k, d.subset(ix), np.asarray(ix)) for k, ix in groups.items()]


def group_by_cell(d: Dataset) -> list[tuple[CellId, Dataset, np.ndarray]]:
    """Partition by serving cell, in order of first appearance.

    Each entry is ``(cell, sub_dataset, parent_indices)``.
    """
    return group_by(d, lambda m: m.cell)


def group_by_ta(d: Dataset) -> list[tuple[tuple[int, int, int], Dataset, np.ndarray]]:
    return group_by(d, lambda m: m.cell.ta)


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size == 0:
            raise ValueError("weight vector is empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("weights must be finite")
        neg = np.flatnonzero(v < 0)
        if neg.size:
            raise ValueError(f"negative weights at indices {neg[:10].tolist()}")
        if not np.any(v > 0):
            raise ValueError("weights are all zero")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @classmethod
    def uniform(cls, n: int) -> "WeightVector":
        return cls(np.ones(n))


def as_weights(w, n: int) -> np.ndarray:
    """Validate ``w`` (None, array or WeightVector) against length ``n``."""
    if w is None:
        return np.ones(n)
    vec = w if isinstance(w, WeightVector) else WeightVector(w)
    if len(vec) != n:
        raise ValueError(f"weight vector length {len(vec)} != dataset length {n}")
    return np.asarray(vec.values)
