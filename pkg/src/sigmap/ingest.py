"""GeoJSON measurement files, population grids and seeded dataset splits.

GeoJSON field mapping (per Feature)::

    properties.timestamp                 ISO-8601; trailing US zone abbreviation (EDT, PST, ...)
                                         or an explicit offset is required
    properties.lteMeasurement.rsrp       required; rejected outside [-150, -30] dBm
    properties.lteMeasurement.rsrq       optional
    properties.lteMeasurement.cqi        optional
    properties.lteMeasurement.earfcn     optional -> dl_freq
    properties.cell.{mcc,mnc,tac,ci}     required
    properties.device.model              optional (defaults to "unknown")
    properties.outdoor                   optional boolean (extension)
    properties.bsDistanceM               optional meters (extension)
    geometry.coordinates                 [lng, lat]; ``coords`` accepted as alias

Axis order cannot be validated: a file that stores [lat, lng] parses without error
whenever both values are within +-90.
"""
from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .datamodel import CellId, Dataset, FeatureSet, Kpi, Measurement, in_envelope, RSRP_ENVELOPE
from .geo import METERS_PER_DEG

# Fixed abbreviation table; anything else needs an explicit numeric offset.
ZONE_OFFSETS_H = {
    "UTC": 0, "GMT": 0, "Z": 0,
    "EST": -5, "EDT": -4, "CST": -6, "CDT": -5, "MST": -7, "MDT": -6,
    "PST": -8, "PDT": -7, "AKST": -9, "AKDT": -8, "HST": -10,
}


class IngestError(ValueError):
    def __init__(self, message: str, *, offset: int | None = None, index: int | None = None,
                 field_path: str | None = None):
        self.offset = offset
        self.index = index
        self.field_path = field_path
        bits = [message]
        if offset is not None:
            bits.append(f"byte offset {offset}")
        if index is not None:
            bits.append(f"record {index}")
        if field_path is not None:
            bits.append(f"field {field_path}")
        super().__init__("; ".join(bits))


class OutOfBoundsError(LookupError):
    pass


@dataclass
class IngestReport:
    n_features: int = 0
    n_parsed: int = 0
    skipped: dict = field(default_factory=dict)
    issues: list = field(default_factory=list)  # (record index, field path, message)

    def skip(self, index: int, path: str, reason: str, message: str = ""):
        self.skipped[reason] = self.skipped.get(reason, 0) + 1
        self.issues.append((index, path, message or reason))

    @property
    def n_skipped(self) -> int:
        return sum(self.skipped.values())

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "n_parsed": self.n_parsed,
                "skipped": dict(sorted(self.skipped.items())),
                "issues": [list(i) for i in self.issues]}


_TS_ABBREV = re.compile(r"^(.*\d)([A-Za-z]{1,5})$")


def parse_timestamp(text: str) -> float:
    """ISO-8601 -> UTC epoch seconds."""
    text = text.strip()
    m = _TS_ABBREV.match(text)
    if m:
        abbrev = m.group(2).upper()
        if abbrev not in ZONE_OFFSETS_H:
            raise ValueError(f"unknown time zone abbreviation {abbrev!r}")
        t = _dt.datetime.fromisoformat(m.group(1))
        if t.tzinfo is not None:
            raise ValueError("both offset and zone abbreviation given")
        t = t.replace(tzinfo=_dt.timezone(_dt.timedelta(hours=ZONE_OFFSETS_H[abbrev])))
    else:
        t = _dt.datetime.fromisoformat(text)
        if t.tzinfo is None:
            raise ValueError("timestamp has no zone offset")
    return t.timestamp()


def format_timestamp(ts: float) -> str:
    t = _dt.datetime.fromtimestamp(ts, tz=_dt.timezone.utc)
    return t.isoformat()


def _load_features(data: bytes) -> list:
    text = data.decode("utf-8-sig") if isinstance(data, (bytes, bytearray)) else str(data)
    if not text.strip():
        return []

    def byte_offset(char_pos: int, base_chars: int = 0) -> int:
        return len(text[: base_chars + char_pos].encode("utf-8"))

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        if not e.msg.startswith("Extra data"):
            raise IngestError(f"malformed JSON: {e.msg}", offset=byte_offset(e.pos)) from None
        doc = None
    if doc is not None:
        if isinstance(doc, dict) and doc.get("type") == "FeatureCollection":
            feats = doc.get("features")
            if not isinstance(feats, list):
                raise IngestError("FeatureCollection.features must be a list", field_path="features")
            return feats
        if isinstance(doc, dict) and doc.get("type") == "Feature":
            return [doc]
        raise IngestError("expected a GeoJSON FeatureCollection or Feature", offset=0)
    # newline-delimited Features
    feats = []
    start = 0
    for line in text.splitlines(keepends=True):
        if line.strip():
            try:
                feats.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise IngestError(f"malformed JSON: {e.msg}", offset=byte_offset(e.pos, start)) from None
        start += len(line)
    return feats


def _get(d, path: str):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return None
        cur = cur[part]
    return cur


def _feature_to_measurement(feat, i: int, report: IngestReport) -> Measurement | None:
    if not isinstance(feat, dict):
        report.skip(i, "", "not_a_feature")
        return None
    props = feat.get("properties") or {}
    geom = feat.get("geometry") or {}
    rsrp = _get(props, "lteMeasurement.rsrp")
    if rsrp is None:
        report.skip(i, "properties.lteMeasurement.rsrp", "missing_rsrp")
        return None
    coords = geom.get("coordinates", geom.get("coords")) if isinstance(geom, dict) else None
    if not isinstance(coords, (list, tuple)) or len(coords) < 2:
        report.skip(i, "geometry.coordinates", "missing_geometry")
        return None
    if not in_envelope(float(rsrp)):
        report.skip(i, "properties.lteMeasurement.rsrp", "rsrp_out_of_envelope",
                    f"rsrp {rsrp} outside {RSRP_ENVELOPE}")
        return None
    ts = props.get("timestamp")
    if ts is None:
        report.skip(i, "properties.timestamp", "missing_timestamp")
        return None
    try:
        t = parse_timestamp(str(ts))
    except ValueError as e:
        report.skip(i, "properties.timestamp", "bad_timestamp", str(e))
        return None
    cell = props.get("cell") or {}
    try:
        cid = CellId(int(cell["mcc"]), int(cell["mnc"]), int(cell["tac"]), int(cell["ci"]))
    except (KeyError, TypeError, ValueError) as e:
        report.skip(i, "properties.cell", "bad_cell", str(e))
        return None
    lte = props["lteMeasurement"]
    extras = {k: props[k] for k in ("locationMetaData",) if k in props}
    try:
        return Measurement.at(
            lat=float(coords[1]), lng=float(coords[0]), timestamp_utc=t, cell=cid,
            device_model=str(_get(props, "device.model") or "unknown"),
            rsrp=float(rsrp),
            outdoor=None if props.get("outdoor") is None else bool(props["outdoor"]),
            bs_distance_m=None if props.get("bsDistanceM") is None else float(props["bsDistanceM"]),
            dl_freq=None if lte.get("earfcn") is None else int(lte["earfcn"]),
            rsrq=None if lte.get("rsrq") is None else float(lte["rsrq"]),
            cqi=None if lte.get("cqi") is None else lte["cqi"],
            extras=extras,
        )
    except (TypeError, ValueError) as e:
        report.skip(i, "properties", "invalid_record", str(e))
        return None


def read_geojson(data: bytes, label_kpi=Kpi.RSRP, feature_set=FeatureSet.ALL) -> tuple[Dataset, IngestReport]:
    feats = _load_features(data)
    report = IngestReport(n_features=len(feats))
    records = []
    for i, f in enumerate(feats):
        m = _feature_to_measurement(f, i, report)
        if m is None:
            continue
        if m.kpi(label_kpi) is None:
            report.skip(i, f"properties.lteMeasurement.{Kpi(label_kpi).value}", "missing_label")
            continue
        records.append(m)
    report.n_parsed = len(records)
    return Dataset(records, label_kpi, feature_set), report


def parse_geojson(data: bytes, label_kpi=Kpi.RSRP, feature_set=FeatureSet.ALL) -> Dataset:
    return read_geojson(data, label_kpi, feature_set)[0]


def _num(v):
    # integral floats are written as ints so "-89" survives a round trip
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def measurement_to_feature(m: Measurement) -> dict:
    lte = {"rsrp": _num(m.rsrp)}
    if m.rsrq is not None:
        lte["rsrq"] = _num(m.rsrq)
    if m.cqi is not None:
        lte["cqi"] = int(m.cqi)
    if m.dl_freq is not None:
        lte["earfcn"] = int(m.dl_freq)
    props = {
        "timestamp": format_timestamp(m.timestamp_utc),
        "lteMeasurement": lte,
        "cell": {"ci": m.cell.ci, "mnc": m.cell.mnc, "mcc": m.cell.mcc, "tac": m.cell.tac},
        "device": {"model": m.device_model},
    }
    if m.outdoor is not None:
        props["outdoor"] = bool(m.outdoor)
    if m.bs_distance_m is not None:
        props["bsDistanceM"] = m.bs_distance_m
    props.update(m.extras)
    return {"type": "Feature", "properties": props,
            "geometry": {"type": "Point", "coordinates": [m.lng, m.lat]}}


def feature_collection(features) -> bytes:
    """Deterministic FeatureCollection text, one Feature per line."""
    body = ",\n".join(json.dumps(f, separators=(",", ":")) for f in features)
    return ('{"type":"FeatureCollection","features":[\n' + body + "\n]}\n").encode("utf-8")


def write_geojson(d: Dataset) -> bytes:
    return feature_collection(measurement_to_feature(m) for m in d.records)


@dataclass(frozen=True)
class PopulationGrid:
    """Regular lat/lng grid of population densities (persons / km^2).

    ``origin`` is the center of cell ``[0, 0]`` (smallest lat and lng);
    each cell covers +-half a step around its center.
    """

    origin_lat: float
    origin_lng: float
    lat_step: float
    lng_step: float
    densities: np.ndarray

    def __post_init__(self):
        d = np.array(self.densities, dtype=float)
        if d.ndim != 2 or np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("densities must be a finite non-negative 2-D array")
        d.setflags(write=False)
        object.__setattr__(self, "densities", d)

    @property
    def cell_size_m(self) -> float:
        return self.lat_step * METERS_PER_DEG

    def lookup(self, lat, lng) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-cell densities and an inside-grid mask (outside cells read as NaN)."""
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lng = np.atleast_1d(np.asarray(lng, dtype=float))
        i = np.floor((lat - self.origin_lat) / self.lat_step + 0.5).astype(int)
        j = np.floor((lng - self.origin_lng) / self.lng_step + 0.5).astype(int)
        n_lat, n_lng = self.densities.shape
        inside = (i >= 0) & (i < n_lat) & (j >= 0) & (j < n_lng)
        out = np.full(lat.shape, np.nan)
        out[inside] = self.densities[i[inside], j[inside]]
        return out, inside

    def density_at(self, lat: float, lng: float) -> float:
        v, inside = self.lookup(lat, lng)
        if not inside[0]:
            raise OutOfBoundsError(f"({lat}, {lng}) is outside the population grid")
        return float(v[0])

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        buf.write("lat,lng,density\n")
        n_lat, n_lng = self.densities.shape
        for i in range(n_lat):
            for j in range(n_lng):
                buf.write(f"{float(self.origin_lat + i * self.lat_step)!r},{float(self.origin_lng + j * self.lng_step)!r},"
                          f"{float(self.densities[i, j])!r}\n")
        return buf.getvalue().encode("utf-8")


def _regular_axis(values: np.ndarray, name: str) -> tuple[float, float, np.ndarray]:
    u = np.unique(values)
    if u.size < 2:
        raise IngestError(f"cannot infer grid spacing along {name}: a single {name} value")
    steps = np.diff(u)
    step = float(np.median(steps))
    if np.any(np.abs(steps - step) > 0.01 * step):
        raise IngestError(f"irregular grid spacing along {name}")
    idx = np.floor((values - u[0]) / step + 0.5).astype(int)
    return float(u[0]), step, idx


def load_population_grid(data: bytes) -> PopulationGrid:
    text = data.decode("utf-8-sig") if isinstance(data, (bytes, bytearray)) else str(data)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["lat", "lng", "density"]:
        raise IngestError("population CSV header must be lat,lng,density", offset=0)
    rows = []
    for k, row in enumerate(reader, start=1):
        if not row:
            continue
        try:
            rows.append([float(x) for x in row])
        except ValueError:
            raise IngestError("non-numeric value", index=k, field_path="row") from None
        if len(row) != 3:
            raise IngestError("expected 3 columns", index=k)
    if len(rows) < 2:
        raise IngestError("population grid needs at least two rows to infer spacing")
    arr = np.array(rows)
    lat0, dlat, i = _regular_axis(arr[:, 0], "lat")
    lng0, dlng, j = _regular_axis(arr[:, 1], "lng")
    shape = (i.max() + 1, j.max() + 1)
    grid = np.full(shape, np.nan)
    grid[i, j] = arr[:, 2]
    if np.isnan(grid).any() or len(rows) != shape[0] * shape[1]:
        raise IngestError("population grid is not a complete regular lattice")
    if np.any(grid < 0):
        raise IngestError("negative population density")
    return PopulationGrid(lat0, lng0, dlat, dlng, grid)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if not fr or any(f <= 0 for f in fr):
            raise ValueError("split fractions must all be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")
        object.__setattr__(self, "fractions", fr)


def fisher_yates(n: int, seed: int) -> np.ndarray:
    """Seeded shuffle of ``range(n)``.

    PRNG: numpy ``Generator(PCG64(seed))``. The swap partners are drawn in one
    call ``integers(0, [n, n-1, ..., 2])`` and applied for i = n-1 down to 1.
    """
    perm = np.arange(n)
    if n < 2:
        return perm
    rng = np.random.Generator(np.random.PCG64(seed))
    js = rng.integers(0, np.arange(n, 1, -1))
    for i, j in zip(range(n - 1, 0, -1), js):
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def split_sizes(n: int, fractions) -> list[int]:
    sizes = [int(np.floor(f * n + 0.5)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def split(d: Dataset, spec: SplitSpec) -> list[tuple[Dataset, np.ndarray]]:
    """Disjoint random partition; each part comes with its parent indices."""
    n = len(d)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    sizes = split_sizes(n, spec.fractions)
    if any(s <= 0 for s in sizes):
        raise ValueError(f"split of {n} records by {spec.fractions} leaves an empty part: {sizes}")
    perm = fisher_yates(n, spec.seed)
    out = []
    start = 0
    for s in sizes:
        idx = perm[start:start + s]
        out.append((d.subset(idx), idx))
        start += s
    return out
