"""Scenario configuration: nested dataclasses loaded from TOML or JSON.

Precedence is flags > config file > defaults. Unknown keys and invalid values are
collected and reported together.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class StationCfg:
    x_m: float = -700.0          # local-frame position (ignored when lat/lng are given)
    y_m: float = 0.0
    lat: float | None = None
    lng: float | None = None
    p0_dbm: float | None = None  # None -> free-space value from earfcn
    earfcn: int | None = 9820
    mcc: int = 310
    mnc: int = 410
    tac: int = 22
    ci: int = 710


@dataclass
class PleRegionCfg:
    x_m: float = 0.0
    y_m: float = 0.0
    n: float = 3.0


@dataclass
class BlobCfg:
    x_m: float = 0.0
    y_m: float = 0.0
    sigma_m: float = 40.0
    mass: float = 0.4


@dataclass
class SynthCfg:
    origin_lat: float = 40.0
    origin_lng: float = -74.0
    extent_m: list = field(default_factory=lambda: [-500.0, -500.0, 500.0, 500.0])
    n_samples: int = 4000
    stations: list[StationCfg] = field(default_factory=lambda: [StationCfg()])
    default_ple: float = 3.0
    ple_regions: list[PleRegionCfg] = field(default_factory=list)
    shadow_sigma_db: float = 3.0
    d0_m: float = 1.0
    residual_amplitude_db: float = 0.0
    residual_length_m: float = 80.0
    sampler: str = "hotspots"    # uniform | hotspots | roads
    hotspots: list[BlobCfg] = field(default_factory=lambda: [BlobCfg(-250.0, 150.0, 40.0, 0.45),
                                                             BlobCfg(200.0, -200.0, 40.0, 0.45)])
    roads: list = field(default_factory=list)  # polylines of [x, y] points
    road_sigma_m: float = 15.0
    road_mass: float = 0.8
    weekdays: list = field(default_factory=lambda: list(range(7)))
    hours: list = field(default_factory=lambda: list(range(24)))
    outdoor_prob: float = 0.5
    indoor_loss_db: float = 0.0  # penetration loss added to indoor samples
    tx_power_dbm: float = 15.0
    population: list[BlobCfg] = field(default_factory=list)  # blobs of the synthetic census grid
    population_base: float = 100.0
    population_cell_m: float = 50.0


@dataclass
class DataCfg:
    source: str = "synth"        # synth | file
    path: str = ""
    population_grid: str = ""    # CSV lat,lng,density
    kpi: str = "rsrp"


@dataclass
class ForestCfg:
    n_trees: int = 20
    max_depth: int = 20
    min_samples_leaf: int = 1
    max_features: str | int | None = None
    grid_n_trees: list = field(default_factory=list)
    grid_max_depth: list = field(default_factory=list)


@dataclass
class QualityCfg:
    kind: str = "identity"       # identity | coverage | bars | cdp
    a: float | None = None
    b: float | None = None
    c: float | None = None
    kpi: str = "rsrp"


@dataclass
class TargetCfg:
    kind: str = "uniform"        # uniform | population | custom
    custom: list[BlobCfg] = field(default_factory=list)  # custom target: base + Gaussian blobs
    custom_base: float = 1.0
    kde_mode: str = "adaptive"
    bandwidth_m: float = 50.0
    alpha: float = 0.5
    time_bandwidth_h: float | None = None
    bandwidth_grid: list = field(default_factory=list)  # pilot bandwidths to select from


@dataclass
class ShapleyCfg:
    convergence_tol: float = 0.05
    convergence_window: int = 100
    max_iter_factor: float = 2.0
    relaxed_tol: float = 0.30
    truncation_tol: float | None = None
    n_permutations: int | None = None
    learner: str = "knn"         # knn | forest
    knn_k: int = 5
    metric: str = "recall0"      # neg_mse | neg_reweighted | recall0 | accuracy
    batch_frac: float = 0.05
    max_fraction: float = 0.9
    corruption_fraction: float = 0.0  # label corruption injected by the cleaning experiment
    corruption_db: float = 40.0
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    n_seeds: int = 5
    methods: list = field(default_factory=lambda: ["tmc", "loo", "random"])


@dataclass
class BaselineCfg:
    methods: list = field(default_factory=lambda: ["ldpl_hom", "ldpl_knn", "ok", "okd"])
    max_lag_m: float = 200.0
    bin_width_m: float = 10.0
    kriging_k: int = 10
    knn_k: int | None = None     # None -> 100 if dense else 10% of train
    dense: bool = True
    d0_m: float = 1.0
    tx_power_dbm: float = 15.0


@dataclass
class EvalCfg:
    n_splits: int = 10
    test_fraction: float = 0.3
    validation_fraction: float = 0.2  # carved from train for grid / bandwidth selection
    min_cell_records: int = 20


@dataclass
class ScenarioConfig:
    name: str = "default"
    seed: int = 0
    threads: int = 0             # 0 -> all available cores
    granularity: str = "cell"    # cell | ta
    feature_set: str = "ALL"
    out: str = "out"
    data: DataCfg = field(default_factory=DataCfg)
    synth: SynthCfg = field(default_factory=SynthCfg)
    forest: ForestCfg = field(default_factory=ForestCfg)
    quality: QualityCfg = field(default_factory=QualityCfg)
    target: TargetCfg = field(default_factory=TargetCfg)
    shapley: ShapleyCfg = field(default_factory=ShapleyCfg)
    baselines: BaselineCfg = field(default_factory=BaselineCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        """Hash of the experiment definition; execution settings (threads, out) are excluded."""
        d = self.to_dict()
        d.pop("threads")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# loading

def _type_ok(tp, v) -> bool:
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        return any(_type_ok(a, v) for a in typing.get_args(tp))
    if tp is type(None):
        return v is None
    if tp is float:
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if tp is int:
        return isinstance(v, int) and not isinstance(v, bool)
    if tp is bool:
        return isinstance(v, bool)
    if tp is str:
        return isinstance(v, str)
    if tp is list or origin is list:
        return isinstance(v, (list, tuple))
    return True


def _build(cls, data, path, problems):
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected a table")
        return cls()
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in fields:
            problems.append(f"{path + '.' if path else ''}{k}: unknown key")
    kw = {}
    for name, f in fields.items():
        if name not in data:
            continue
        v = data[name]
        tp = hints[name]
        where = f"{path + '.' if path else ''}{name}"
        if dataclasses.is_dataclass(tp):
            kw[name] = _build(tp, v, where, problems)
            continue
        args = typing.get_args(tp)
        if typing.get_origin(tp) is list and args and dataclasses.is_dataclass(args[0]):
            if not isinstance(v, list):
                problems.append(f"{where}: expected a list of tables")
                continue
            kw[name] = [_build(args[0], item, f"{where}[{i}]", problems) for i, item in enumerate(v)]
            continue
        if not _type_ok(tp, v):
            problems.append(f"{where}: bad value {v!r} for type {getattr(tp, '__name__', tp)}")
            continue
        if tp is float or float in typing.get_args(tp):
            if isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
        kw[name] = list(v) if isinstance(v, tuple) else v
    return cls(**kw)


def _choice(problems, where, v, allowed):
    if v not in allowed:
        problems.append(f"{where}: {v!r} not one of {sorted(allowed)}")


def effective_threads(n: int | None) -> int:
    """Worker count for a ``threads`` setting; 0 or None means all available cores."""
    return int(n) if n else max(1, os.cpu_count() or 1)


def validate(cfg: ScenarioConfig) -> list[str]:
    p = []
    _choice(p, "granularity", cfg.granularity, {"cell", "ta"})
    _choice(p, "feature_set", cfg.feature_set, {"XY", "XYT", "ALL", "ALL_MINUS_CID"})
    if cfg.threads < 0:
        p.append("threads: must be >= 0 (0 = all cores)")
    d = cfg.data
    _choice(p, "data.source", d.source, {"synth", "file"})
    _choice(p, "data.kpi", d.kpi, {"rsrp", "rsrq", "cqi"})
    if d.source == "file" and not d.path:
        p.append("data.path: required when data.source = 'file'")
    s = cfg.synth
    if len(s.extent_m) != 4 or not (s.extent_m[0] < s.extent_m[2] and s.extent_m[1] < s.extent_m[3]):
        p.append("synth.extent_m: expected [x0, y0, x1, y1] with x0 < x1, y0 < y1")
    if s.n_samples < 1:
        p.append("synth.n_samples: must be >= 1")
    if not s.stations:
        p.append("synth.stations: need at least one station")
    for i, r in enumerate(s.ple_regions):
        if not 2.0 <= r.n <= 6.0:
            p.append(f"synth.ple_regions[{i}].n: {r.n} outside [2, 6]")
    if not 2.0 <= s.default_ple <= 6.0:
        p.append(f"synth.default_ple: {s.default_ple} outside [2, 6]")
    if s.shadow_sigma_db < 0:
        p.append("synth.shadow_sigma_db: must be >= 0")
    _choice(p, "synth.sampler", s.sampler, {"uniform", "hotspots", "roads"})
    if s.sampler == "hotspots":
        if not s.hotspots:
            p.append("synth.hotspots: required for the hotspots sampler")
        tot = sum(h.mass for h in s.hotspots)
        if any(h.mass <= 0 for h in s.hotspots) or tot > 1 + 1e-9:
            p.append("synth.hotspots: masses must be > 0 and sum to at most 1")
        if any(h.sigma_m <= 0 for h in s.hotspots):
            p.append("synth.hotspots: sigma_m must be > 0")
    if s.sampler == "roads" and not s.roads:
        p.append("synth.roads: required for the roads sampler")
    if not 0 <= s.outdoor_prob <= 1:
        p.append("synth.outdoor_prob: must be in [0, 1]")
    f = cfg.forest
    if f.n_trees < 1 or f.max_depth < 1 or f.min_samples_leaf < 1:
        p.append("forest: n_trees, max_depth and min_samples_leaf must be >= 1")
    if isinstance(f.max_features, str) and f.max_features not in ("all", "sqrt"):
        p.append("forest.max_features: expected 'all', 'sqrt' or an integer")
    q = cfg.quality
    _choice(p, "quality.kind", q.kind, {"identity", "coverage", "bars", "cdp"})
    _choice(p, "quality.kpi", q.kpi, {"rsrp", "rsrq", "cqi"})
    t = cfg.target
    _choice(p, "target.kind", t.kind, {"uniform", "population", "custom"})
    _choice(p, "target.kde_mode", t.kde_mode, {"fixed", "adaptive"})
    if t.bandwidth_m <= 0 or any(b <= 0 for b in t.bandwidth_grid):
        p.append("target: bandwidths must be > 0")
    if t.kind == "custom" and t.custom_base <= 0 and not t.custom:
        p.append("target.custom: custom target is identically zero")
    sh = cfg.shapley
    if sh.convergence_tol <= 0 or sh.relaxed_tol <= 0 or sh.convergence_window < 1:
        p.append("shapley: tolerances must be > 0 and window >= 1")
    _choice(p, "shapley.learner", sh.learner, {"knn", "forest"})
    _choice(p, "shapley.metric", sh.metric, {"neg_mse", "neg_reweighted", "recall0", "accuracy"})
    if not 0 < sh.batch_frac < 1:
        p.append("shapley.batch_frac: must be in (0, 1)")
    if len(sh.split) != 3 or abs(sum(sh.split) - 1) > 1e-9 or min(sh.split) <= 0:
        p.append("shapley.split: expected three positive fractions summing to 1")
    for m in sh.methods:
        _choice(p, "shapley.methods", m, {"tmc", "loo", "random"})
    b = cfg.baselines
    for m in b.methods:
        _choice(p, "baselines.methods", m, {"ldpl_hom", "ldpl_knn", "ok", "okd"})
    if b.max_lag_m <= 0 or b.bin_width_m <= 0 or b.kriging_k < 1:
        p.append("baselines: max_lag_m, bin_width_m must be > 0 and kriging_k >= 1")
    e = cfg.eval
    if e.n_splits < 1:
        p.append("eval.n_splits: must be >= 1")
    if not 0 < e.test_fraction < 1 or not 0 < e.validation_fraction < 1:
        p.append("eval: fractions must be in (0, 1)")
    return p


def from_dict(data: dict) -> ScenarioConfig:
    problems = []
    cfg = _build(ScenarioConfig, data, "", problems)
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path) -> ScenarioConfig:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".json":
        data = json.loads(raw)
    else:
        data = _toml.loads(raw.decode("utf-8"))
    return from_dict(data)


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    """Apply flag overrides; dotted names address nested sections (``quality.kind``)."""
    data = cfg.to_dict()
    for key, v in kw.items():
        if v is None:
            continue
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = v
    return from_dict(data)
