"""Experiment pipelines over a scenario: base predictors, quality transforms,
importance reweighting, the (Q, W) grid, and Shapley removal curves.

Every pipeline returns an :class:`ExperimentReport` whose rows are in long form
(seed, group, method, metric, value); the summary holds median, IQR and mean per
(group, method, metric). Seeds are processed independently and reassembled in
seed order, so reports do not depend on the thread count.
"""
from __future__ import annotations

import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import forest
from . import ingest
from . import quality as qm
from . import reweight as rw
from . import shapley as sh
from . import synth
from .config import ScenarioConfig, effective_threads
from .datamodel import CellId, Dataset, FeatureSet, Kpi, group_by_cell, group_by_ta
from .geo import LocalFrame
from .metrics import classification_metrics, hyper_grid, grid_search, rmse

log = logging.getLogger(__name__)

PIPELINES = ("base", "quality", "reweight", "qw", "shapley")


# scenario context

@dataclass
class Context:
    cfg: ScenarioConfig
    data: Dataset
    frame: LocalFrame
    stations: dict          # CellId -> (lat, lng, p0)
    truth: synth.GroundTruth | None = None
    population: ingest.PopulationGrid | None = None
    ingest_report: ingest.IngestReport | None = None


def _station_latlng(frame, st):
    if st.lat is not None and st.lng is not None:
        return float(st.lat), float(st.lng)
    ll = frame.from_local(np.array([st.x_m, st.y_m], dtype=float))
    return float(ll[0]), float(ll[1])


def station_p0(st, d0, tx_power):
    if st.p0_dbm is not None:
        return float(st.p0_dbm)
    return bl.friis_p0(None if st.earfcn is None else bl.earfcn_to_hz(st.earfcn), d0, tx_power)


def build_scenario(cfg: ScenarioConfig) -> synth.Scenario:
    s = cfg.synth
    frame = LocalFrame(s.origin_lat, s.origin_lng)
    stations = []
    for st in s.stations:
        lat, lng = _station_latlng(frame, st)
        stations.append(synth.Station(CellId(st.mcc, st.mnc, st.tac, st.ci), lat, lng,
                                      station_p0(st, s.d0_m, s.tx_power_dbm), st.earfcn))
    field_ = None
    if s.residual_amplitude_db > 0:
        field_ = synth.SmoothField(s.residual_amplitude_db, s.residual_length_m, seed=cfg.seed)
    truth = synth.GroundTruth(tuple(stations), frame, tuple(synth.PleRegion(r.x_m, r.y_m, r.n) for r in s.ple_regions),
                              s.default_ple, s.shadow_sigma_db, s.d0_m, field_, s.indoor_loss_db)
    bbox = tuple(float(v) for v in s.extent_m)
    if s.sampler == "uniform":
        proc = synth.Uniform(bbox)
    elif s.sampler == "hotspots":
        proc = synth.Hotspots(bbox, tuple((h.x_m, h.y_m) for h in s.hotspots),
                              tuple(h.sigma_m for h in s.hotspots), tuple(h.mass for h in s.hotspots))
    else:
        proc = synth.RoadBiased(bbox, tuple(tuple(map(tuple, r)) for r in s.roads), s.road_sigma_m, s.road_mass)
    tm = synth.TimeModel(tuple(s.weekdays), tuple(s.hours))
    return synth.Scenario(truth, proc, s.n_samples, tm, cfg.seed, synth.DEFAULT_DEVICES, s.outdoor_prob)


def _population(cfg: ScenarioConfig, frame):
    if cfg.data.population_grid:
        return ingest.load_population_grid(Path(cfg.data.population_grid).read_bytes())
    s = cfg.synth
    if s.population:
        return synth.synthetic_population_grid(
            frame, tuple(s.extent_m), [(b.x_m, b.y_m) for b in s.population], [b.sigma_m for b in s.population],
            [b.mass for b in s.population], s.population_base, s.population_cell_m)
    return None


def load_context(cfg: ScenarioConfig, threads: int | None = None) -> Context:
    fs = FeatureSet(cfg.feature_set)
    kpi = Kpi(cfg.data.kpi)
    threads = effective_threads(threads or cfg.threads)
    s = cfg.synth
    frame = LocalFrame(s.origin_lat, s.origin_lng)
    stations = {}
    for st in s.stations:
        lat, lng = _station_latlng(frame, st)
        stations[CellId(st.mcc, st.mnc, st.tac, st.ci)] = (lat, lng, station_p0(st, s.d0_m, s.tx_power_dbm))
    if cfg.data.source == "synth":
        sc = build_scenario(cfg)
        data = sc.sample(threads=threads, feature_set=fs)
        if kpi != Kpi.RSRP:
            raise ValueError("the synthetic generator produces RSRP labels only")
        return Context(cfg, data, frame, stations, sc.truth, _population(cfg, frame))
    data, report = ingest.read_geojson(Path(cfg.data.path).read_bytes(), kpi, fs)
    if len(data) == 0:
        raise ValueError(f"no usable records in {cfg.data.path}")
    ll = data.locations()
    frame = LocalFrame(float(ll[:, 0].mean()), float(ll[:, 1].mean()))
    return Context(cfg, data, frame, stations, None, _population(cfg, frame), report)


def groups(ctx: Context):
    """(key string, dataset, station) per modeling unit with enough records."""
    g = group_by_cell(ctx.data) if ctx.cfg.granularity == "cell" else group_by_ta(ctx.data)
    out = []
    for key, d, _ in g:
        if len(d) < ctx.cfg.eval.min_cell_records:
            log.info("skipping %s: %d records", key, len(d))
            continue
        st = ctx.stations.get(key) if isinstance(key, CellId) else None
        name = str(key) if isinstance(key, CellId) else "-".join(map(str, key))
        out.append((name, d, st))
    if not out:
        raise ValueError("no modeling unit has enough records")
    return out


# report

@dataclass
class ExperimentReport:
    pipeline: str
    rows: list = field(default_factory=list)       # dicts: seed, group, method, metric, value
    meta: dict = field(default_factory=dict)
    layers: dict = field(default_factory=dict)     # file name -> bytes

    def add(self, seed, group, method, metric, value):
        self.rows.append({"seed": int(seed), "group": group, "method": method, "metric": metric,
                          "value": float(value)})

    def values(self, method, metric, group=None) -> np.ndarray:
        return np.array([r["value"] for r in self.rows if r["method"] == method and r["metric"] == metric
                         and (group is None or r["group"] == group)])

    def summary(self) -> list:
        keys = []
        for r in self.rows:
            k = (r["group"], r["method"], r["metric"])
            if k not in keys:
                keys.append(k)
        out = []
        for g, m, met in keys:
            v = self.values(m, met, g)
            v = v[np.isfinite(v)]
            if v.size == 0:
                continue
            q25, med, q75 = np.percentile(v, [25, 50, 75])
            out.append({"group": g, "method": m, "metric": met, "n": int(v.size), "median": float(med),
                        "q25": float(q25), "q75": float(q75), "iqr": float(q75 - q25), "mean": float(v.mean())})
        return out

    def rows_csv(self) -> bytes:
        buf = io.StringIO()
        buf.write("seed,group,method,metric,value\n")
        for r in self.rows:
            buf.write(f"{r['seed']},{r['group']},{r['method']},{r['metric']},{float(r['value'])!r}\n")
        return buf.getvalue().encode("utf-8")

    def summary_csv(self) -> bytes:
        buf = io.StringIO()
        cols = ["group", "method", "metric", "n", "median", "q25", "q75", "iqr", "mean"]
        buf.write(",".join(cols) + "\n")
        for r in self.summary():
            buf.write(",".join(str(r[c]) if isinstance(r[c], (str, int)) else repr(r[c]) for c in cols) + "\n")
        return buf.getvalue().encode("utf-8")

    def artifacts(self) -> dict:
        out = {f"{self.pipeline}_rows.csv": self.rows_csv(), f"{self.pipeline}_summary.csv": self.summary_csv(),
               f"{self.pipeline}_meta.json": json.dumps(self.meta, sort_keys=True, indent=2).encode()}
        out.update(self.layers)
        return out


# shared pieces

def split_seed(master: int, s: int) -> int:
    return int(np.random.SeedSequence([int(master), int(s)]).generate_state(1)[0])


def hyper(cfg: ScenarioConfig, seed: int, task="regression") -> forest.ForestHyper:
    f = cfg.forest
    return forest.ForestHyper(f.n_trees, f.max_depth, f.min_samples_leaf, f.max_features, task, seed)


def _map_seeds(fn, seeds, threads):
    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, seeds))
    return [fn(s) for s in seeds]


def _train_test(d: Dataset, cfg, seed):
    t = cfg.eval.test_fraction
    (tr, _), (te, _) = ingest.split(d, ingest.SplitSpec((1.0 - t, t), seed))
    return tr, te


def select_hyper(tr: Dataset, cfg, seed, task="regression", w=None, classes=None) -> forest.ForestHyper:
    """Grid search on a validation slice of ``tr`` when a grid is configured."""
    hp = hyper(cfg, seed, task)
    f = cfg.forest
    if not f.grid_n_trees and not f.grid_max_depth:
        return hp
    v = cfg.eval.validation_fraction
    (fit_part, idx), (val, vidx) = ingest.split(tr, ingest.SplitSpec((1.0 - v, v), seed))
    grid = hyper_grid(hp, f.grid_n_trees or [f.n_trees], f.grid_max_depth or [f.max_depth])
    wf = None if w is None else np.asarray(w)[idx]
    return grid_search(fit_part, val, grid, wf, classes=classes).best


def rf_predict(tr: Dataset, te: Dataset, cfg, seed, w=None, task="regression", classes=None):
    hp = select_hyper(tr, cfg, seed, task, w, classes)
    m = forest.fit_dataset(tr, hp, w, classes)
    return m.predict_dataset(te), m


def _points_layer(d: Dataset, props: dict) -> bytes:
    feats = []
    ll = d.locations()
    for i in range(len(d)):
        p = {k: (float(v[i]) if np.isfinite(v[i]) else None) for k, v in props.items()}
        feats.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": [float(ll[i, 1]), float(ll[i, 0])]},
                      "properties": p})
    return json.dumps({"type": "FeatureCollection", "features": feats}, separators=(",", ":")).encode()


def _meta(ctx: Context, name, seeds):
    m = {"pipeline": name, "scenario": ctx.cfg.name, "master_seed": ctx.cfg.seed, "split_seeds": seeds,
         "config_sha256": ctx.cfg.digest(), "n_records": len(ctx.data), "granularity": ctx.cfg.granularity,
         "feature_set": ctx.cfg.feature_set}
    if ctx.ingest_report is not None:
        m["ingest"] = ctx.ingest_report.to_dict()
    return m


# pipelines

def _baseline_predictions(tr, te, st, cfg):
    """LDPL / kriging predictions on ``te``; methods that fail are reported as NaN."""
    b = cfg.baselines
    out = {}
    if st is None:
        return out
    lat, lng, p0 = st
    bs = (lat, lng)
    ltr, lte = tr.locations(), te.locations()
    ytr = tr.labels
    for m in b.methods:
        try:
            if m == "ldpl_hom":
                out[m] = bl.fit_ldpl_hom(ltr, ytr, bs, p0, b.d0_m).predict(lte)
            elif m == "ldpl_knn":
                k = b.knn_k or bl.default_knn_k(len(tr), b.dense)
                out[m] = bl.fit_ldpl_knn(ltr, ytr, bs, p0, b.d0_m, min(k, len(tr))).predict(lte)
            elif m == "ok":
                out[m] = bl.fit_kriging(ltr, ytr, b.max_lag_m, b.bin_width_m, b.kriging_k).predict(lte)[0]
            elif m == "okd":
                out[m] = bl.okd_fit(ltr, ytr, bs, p0, b.d0_m, b.max_lag_m, b.bin_width_m, b.kriging_k).predict(lte)[0]
        except (ValueError, np.linalg.LinAlgError) as e:
            log.warning("%s failed: %s", m, e)
            out[m] = np.full(len(te), np.nan)
    return out


def pipeline_base(ctx: Context, threads: int = 1) -> ExperimentReport:
    """RMSE of the propagation / geostatistical baselines and the forest, per modeling unit."""
    cfg = ctx.cfg
    seeds = [split_seed(cfg.seed, s) for s in range(cfg.eval.n_splits)]
    units = groups(ctx)
    rep = ExperimentReport("base", meta=_meta(ctx, "base", seeds))

    def one(seed):
        rows, layer = [], None
        for name, d, st in units:
            tr, te = _train_test(d, cfg, seed)
            pred, _ = rf_predict(tr, te, cfg, seed)
            preds = {"rf": pred}
            if cfg.granularity == "cell":
                preds.update(_baseline_predictions(tr, te, st, cfg))
            for m, p in preds.items():
                rows.append((seed, name, m, "rmse", rmse(p, te.labels) if np.all(np.isfinite(p)) else np.nan))
            if seed == seeds[0] and layer is None:
                layer = _points_layer(te, {"truth": te.labels, **preds})
        return rows, layer

    for rows, layer in _map_seeds(one, seeds, threads):
        for r in rows:
            rep.add(*r)
        if layer is not None and "base_predictions.geojson" not in rep.layers:
            rep.layers["base_predictions.geojson"] = layer
    return rep


def _cdp_fn(cfg):
    q = cfg.quality
    if q.kind == "cdp":
        return qm.QualityFn("cdp", q.a, q.b, q.c, Kpi(q.kpi))
    return qm.QualityFn.cdp(Kpi(cfg.data.kpi))


STRATA = {"bars01": (0.0, 1.0), "bars2": (2.0,), "bars3": (3.0,), "bars4": (4.0,)}


def pipeline_quality(ctx: Context, threads: int = 1) -> ExperimentReport:
    """Proxy ``Q(y_hat)`` versus direct ``Q_hat(y)`` for coverage, bars and CDP."""
    cfg = ctx.cfg
    seeds = [split_seed(cfg.seed, s) for s in range(cfg.eval.n_splits)]
    units = groups(ctx)
    cdp = _cdp_fn(cfg)
    kpi = Kpi(cfg.data.kpi)
    rep = ExperimentReport("quality", meta=_meta(ctx, "quality", seeds) | {"cdp": cdp.describe()})
    cov = qm.QualityFn("coverage")
    bar = qm.QualityFn("bars")

    def one(seed):
        rows = []
        for name, d, _ in units:
            tr, te = _train_test(d, cfg, seed)
            yhat, _ = rf_predict(tr, te, cfg, seed)
            y = te.labels
            rows.append((seed, name, "rf", "rmse", rmse(yhat, y)))
            if kpi == Kpi.RSRP:
                for qf, label in ((cov, "coverage"), (bar, "bars")):
                    truth = qm.apply(qf, y)
                    proxy = qm.apply(qf, yhat)
                    direct, _ = rf_predict(qm.transform_dataset(tr, qf), te, cfg, seed, None, "classification",
                                           qf.classes)
                    for m, p in (("proxy", proxy), ("direct", direct)):
                        r = classification_metrics(p, truth, qf.classes)
                        rows.append((seed, name, f"{label}_{m}", "accuracy", r.accuracy))
                        rows.append((seed, name, f"{label}_{m}", "balanced_accuracy", r.balanced_accuracy))
                        for c in qf.classes:
                            rows.append((seed, name, f"{label}_{m}", f"recall_{c:g}", r.recall[c]))
                            rows.append((seed, name, f"{label}_{m}", f"precision_{c:g}", r.precision[c]))
                            rows.append((seed, name, f"{label}_{m}", f"f1_{c:g}", r.f1[c]))
            # CDP: proxy Q(y_hat) vs direct regression on Q(y)
            truth = qm.apply(cdp, y, kpi)
            proxy = qm.apply(cdp, yhat, kpi)
            direct, _ = rf_predict(qm.transform_dataset(tr, cdp), te, cfg, seed)
            direct = np.clip(direct, 0.0, 1.0)
            strata = qm.bars(y) if kpi == Kpi.RSRP else None
            for m, p in (("proxy", proxy), ("direct", direct)):
                rows.append((seed, name, f"cdp_{m}", "rmse", rmse(p, truth)))
                if strata is not None:
                    for sname, bars_ in STRATA.items():
                        mask = np.isin(strata, bars_)
                        rows.append((seed, name, f"cdp_{m}", f"rmse_{sname}",
                                     rmse(p[mask], truth[mask]) if mask.any() else np.nan))
                        rows.append((seed, name, f"cdp_{m}", f"n_{sname}", float(mask.sum())))
            back = qm.invert_cdp_clipped(cdp, direct)
            rows.append((seed, name, "cdp_direct_inverted", "rmse", rmse(back, y)))
        return rows

    for rows in _map_seeds(one, seeds, threads):
        for r in rows:
            rep.add(*r)
    return rep


def target_spec(ctx: Context, kind: str) -> rw.TargetSpec:
    if kind == "uniform":
        return rw.TargetSpec()
    if kind == "population":
        if ctx.population is None:
            raise ValueError("population target needs data.population_grid or synth.population blobs")
        return rw.TargetSpec("population", ctx.population)
    t = ctx.cfg.target
    frame = ctx.frame
    blobs = [(np.array([b.x_m, b.y_m]), b.sigma_m, b.mass) for b in t.custom]

    def fn(lat, lng):
        xy = frame.to_local(np.column_stack([lat, lng]))
        v = np.full(len(xy), float(t.custom_base))
        for c, s, m in blobs:
            v += m * np.exp(-((xy - c) ** 2).sum(axis=1) / (2 * s * s))
        return v

    return rw.TargetSpec("custom", fn=fn)


def kde_mode(cfg, bandwidth=None) -> rw.KdeMode:
    t = cfg.target
    return rw.KdeMode(t.kde_mode, float(bandwidth or t.bandwidth_m), t.alpha, t.time_bandwidth_h)


def _fit_density(ctx, tr: Dataset, mode):
    return rw.fit_kde(ctx.frame.to_local(tr.locations()), mode,
                      tr.hours() if mode.time_bandwidth_h is not None else None)


def select_bandwidth(ctx, tr: Dataset, target: rw.TargetSpec, seed) -> float:
    """Pilot bandwidth minimizing the validation reweighted error of the weighted forest."""
    cfg = ctx.cfg
    grid = cfg.target.bandwidth_grid
    if not grid:
        return cfg.target.bandwidth_m
    v = cfg.eval.validation_fraction
    (fit_part, _), (val, _) = ingest.split(tr, ingest.SplitSpec((1.0 - v, v), seed))
    best, best_err = None, np.inf
    for h in sorted(grid):
        try:
            s = _fit_density(ctx, fit_part, kde_mode(cfg, h))
            w = rw.importance_ratios(fit_part, target, s, ctx.frame)
            wv = rw.importance_ratios(val, target, s, ctx.frame)
        except rw.DensityFloorError:
            continue
        m = forest.fit_dataset(fit_part, hyper(cfg, seed), w.values)
        err = rw.reweighted_error(m.predict_dataset(val), val.labels, wv)
        if err < best_err:
            best, best_err = h, err
    if best is None:
        raise ValueError("every candidate bandwidth violates the density floor")
    return float(best)


def _targets(ctx):
    kinds = [ctx.cfg.target.kind]
    if "uniform" not in kinds:
        kinds.insert(0, "uniform")
    if ctx.population is not None and "population" not in kinds:
        kinds.append("population")
    return kinds


def pipeline_reweight(ctx: Context, threads: int = 1) -> ExperimentReport:
    """Default forest versus importance-weighted forests, scored by sqrt(eps_p) per target."""
    cfg = ctx.cfg
    seeds = [split_seed(cfg.seed, s) for s in range(cfg.eval.n_splits)]
    units = groups(ctx)
    kinds = _targets(ctx)
    rep = ExperimentReport("reweight", meta=_meta(ctx, "reweight", seeds) | {"targets": kinds})

    def one(seed):
        rows, layer = [], None
        for name, d, _ in units:
            tr, te = _train_test(d, cfg, seed)
            specs = {k: target_spec(ctx, k) for k in kinds}
            wtr, wte = {}, {}
            for k, spec in specs.items():
                h = select_bandwidth(ctx, tr, spec, seed)
                rows.append((seed, name, f"rf_w_{k}", "bandwidth_m", h))
                s = _fit_density(ctx, tr, kde_mode(cfg, h))
                wtr[k] = rw.importance_ratios(tr, spec, s, ctx.frame)
                wte[k] = rw.importance_ratios(te, spec, s, ctx.frame)
            preds = {"rf": rf_predict(tr, te, cfg, seed)[0]}
            for k in kinds:
                preds[f"rf_w_{k}"] = rf_predict(tr, te, cfg, seed, wtr[k].values)[0]
            for m, p in preds.items():
                rows.append((seed, name, m, "rmse", rmse(p, te.labels)))
                for k in kinds:
                    rows.append((seed, name, m, f"sqrt_eps_{k}", rw.reweighted_rmse(p, te.labels, wte[k])))
            if seed == seeds[0] and layer is None:
                layer = {"weights": _points_layer(tr, {f"w_{k}": wtr[k].values for k in kinds}),
                         "csv": wtr[kinds[0]].to_csv()}
        return rows, layer

    for rows, layer in _map_seeds(one, seeds, threads):
        for r in rows:
            rep.add(*r)
        if layer is not None and "reweight_weights.geojson" not in rep.layers:
            rep.layers["reweight_weights.geojson"] = layer["weights"]
            rep.layers["reweight_weights.csv"] = layer["csv"]
    return rep


def pipeline_qw(ctx: Context, threads: int = 1) -> ExperimentReport:
    """The 2x2 grid: y or Q(y) labels, trained with unit or importance weights."""
    cfg = ctx.cfg
    seeds = [split_seed(cfg.seed, s) for s in range(cfg.eval.n_splits)]
    units = groups(ctx)
    kind = cfg.target.kind
    kpi = Kpi(cfg.data.kpi)
    qkind = cfg.quality.kind if cfg.quality.kind != "identity" else "cdp"
    qf = _cdp_fn(cfg) if qkind == "cdp" else qm.QualityFn(qkind)
    rep = ExperimentReport("qw", meta=_meta(ctx, "qw", seeds) | {"quality": qf.describe(), "target": kind})

    def one(seed):
        rows = []
        for name, d, _ in units:
            tr, te = _train_test(d, cfg, seed)
            spec = target_spec(ctx, kind)
            h = select_bandwidth(ctx, tr, spec, seed)
            s = _fit_density(ctx, tr, kde_mode(cfg, h))
            wtr = rw.importance_ratios(tr, spec, s, ctx.frame)
            wte = rw.importance_ratios(te, spec, s, ctx.frame)
            for wname, w in (("unit", None), (kind, wtr.values)):
                # identity domain
                p = rf_predict(tr, te, cfg, seed, w)[0]
                rows.append((seed, name, f"I_{wname}", "rmse", rmse(p, te.labels)))
                rows.append((seed, name, f"I_{wname}", f"sqrt_eps_{kind}", rw.reweighted_rmse(p, te.labels, wte)))
                # Q domain, trained directly
                truth = qm.apply(qf, te.labels, kpi)
                tq = qm.transform_dataset(tr, qf)
                mname = f"Q_{wname}"
                if qf.task == "classification":
                    p = rf_predict(tq, te, cfg, seed, w, "classification", qf.classes)[0]
                    r = classification_metrics(p, truth, qf.classes)
                    rows.append((seed, name, mname, "recall_0", r.recall[0.0]))
                    rows.append((seed, name, mname, "accuracy", r.accuracy))
                    ok = (p == truth).astype(float)
                    rows.append((seed, name, mname, f"weighted_accuracy_{kind}", float(np.mean(wte.values * ok))))
                else:
                    p = np.clip(rf_predict(tq, te, cfg, seed, w)[0], 0.0, 1.0)
                    rows.append((seed, name, mname, "rmse", rmse(p, truth)))
                    rows.append((seed, name, mname, f"sqrt_eps_{kind}", rw.reweighted_rmse(p, truth, wte)))
        return rows

    for rows in _map_seeds(one, seeds, threads):
        for r in rows:
            rep.add(*r)
    return rep


# Shapley cleaning / minimization

def _shapley_learner(cfg, d: Dataset, task, classes):
    sc = cfg.shapley
    if sc.learner == "knn":
        return sh.KnnLearner(sc.knn_k, task)
    return sh.ForestLearner.for_dataset(d, hyper(cfg, 0, task), classes)


def _valuation_xy(ctx, cfg, d, learner, encoder=None):
    # the kNN valuation learner works on local-frame coordinates
    if isinstance(learner, sh.KnnLearner):
        return ctx.frame.to_local(d.locations()), d.labels
    return d.feature_matrix(encoder), d.labels


def shapley_metric(cfg, task) -> sh.PerfMetric:
    m = cfg.shapley.metric
    if m == "neg_reweighted":
        raise ValueError("neg_reweighted Shapley metric needs test weights; use the library API")
    if task == "classification" and m == "neg_mse":
        raise ValueError("neg_mse needs a regression quality function")
    if task == "regression" and m in ("recall0", "accuracy"):
        raise ValueError(f"{m} needs a classification quality function")
    return sh.PerfMetric(m)


def shapley_split(ctx: Context, d: Dataset, seed: int):
    """60/20/20 split with label corruption applied to the training part only."""
    cfg = ctx.cfg
    sc = cfg.shapley
    (tr, _), (te, _), (ho, _) = ingest.split(d, ingest.SplitSpec(tuple(sc.split), seed))
    corrupted = np.array([], dtype=int)
    if sc.corruption_fraction > 0:
        tr, corrupted = synth.inject_label_corruption(tr, sc.corruption_fraction, sc.corruption_db, seed)
    return tr, te, ho, corrupted


def pipeline_shapley(ctx: Context, threads: int = 1) -> ExperimentReport:
    """Removal curves ordered by TMC-Shapley, leave-one-out and random values."""
    cfg = ctx.cfg
    sc = cfg.shapley
    seeds = [split_seed(cfg.seed, s) for s in range(sc.n_seeds)]
    units = groups(ctx)
    qkind = cfg.quality.kind if cfg.quality.kind != "identity" else "coverage"
    qf = _cdp_fn(cfg) if qkind == "cdp" else qm.QualityFn(qkind)
    task = qf.task
    metric = shapley_metric(cfg, task)
    kpi = Kpi(cfg.data.kpi)
    rep = ExperimentReport("shapley", meta=_meta(ctx, "shapley", seeds) | {"quality": qf.describe(),
                                                                          "metric": metric.kind})
    curves_buf = io.StringIO()
    curves_buf.write("seed,group,method,step,fraction_removed,n_remaining,score\n")
    scfg = dict(convergence_tol=sc.convergence_tol, convergence_window=sc.convergence_window,
                max_iter_factor=sc.max_iter_factor, relaxed_tol=sc.relaxed_tol,
                truncation_tol=sc.truncation_tol, n_permutations=sc.n_permutations)

    def one(seed):
        rows, curves, layer = [], [], None
        for name, d, _ in units:
            tr, te, ho, bad = shapley_split(ctx, d, seed)
            tr, te, ho = (qm.transform_dataset(x, qf) for x in (tr, te, ho))
            classes = qf.classes
            vlearner = _shapley_learner(cfg, tr, task, classes)
            Xtr, ytr = _valuation_xy(ctx, cfg, tr, vlearner)
            Xte, yte = _valuation_xy(ctx, cfg, te, vlearner, tr.encoder)
            values = {}
            if "tmc" in sc.methods:
                res = sh.tmc_shapley((Xtr, ytr), (Xte, yte), vlearner, metric,
                                     sh.ShapleyConfig(seed=seed, **scfg))
                values["tmc"] = res.phi
                rows.append((seed, name, "tmc", "iterations", res.iterations))
                rows.append((seed, name, "tmc", "converged", float(res.converged)))
                if len(bad):
                    rank = np.argsort(np.argsort(res.phi, kind="stable"), kind="stable")
                    rows.append((seed, name, "tmc", "corrupted_in_lowest_decile",
                                 float(np.mean(rank[bad] < max(1, len(ytr) // 10)))))
                if layer is None:
                    layer = res.to_geojson(tr.locations())
            if "loo" in sc.methods:
                values["loo"] = sh.loo_values((Xtr, ytr), (Xte, yte), vlearner, metric, seed)
            if "random" in sc.methods:
                values["random"] = np.zeros(len(ytr))
            rlearner = sh.ForestLearner.for_dataset(tr, hyper(cfg, seed, task), classes)
            Xr = tr.feature_matrix()
            Xh = ho.feature_matrix(tr.encoder)
            for m, v in values.items():
                curve = sh.removal_curve((Xr, tr.labels), (Xh, ho.labels), v, rlearner, metric, sc.batch_frac,
                                         "random" if m == "random" else "low", seed, sc.max_fraction)
                s = curve.scores
                f = curve.fractions
                k = int(np.argmax(s))
                rows.append((seed, name, m, "start_score", s[0]))
                rows.append((seed, name, m, "peak_score", s[k]))
                rows.append((seed, name, m, "peak_fraction", f[k]))
                rows.append((seed, name, m, "peak_gain", s[k] - s[0]))
                rows.append((seed, name, m, "truncated", float(curve.truncated)))
                for r in curve.rows:
                    curves.append(f"{seed},{name},{m},{r['step']},{float(r['fraction_removed'])!r},"
                                  f"{r['n_remaining']},{float(r['score'])!r}\n")
        return rows, curves, layer

    for rows, curves, layer in _map_seeds(one, seeds, threads):
        for r in rows:
            rep.add(*r)
        curves_buf.writelines(curves)
        if layer is not None and "shapley_values.geojson" not in rep.layers:
            rep.layers["shapley_values.geojson"] = layer
    rep.layers["shapley_curves.csv"] = curves_buf.getvalue().encode("utf-8")
    return rep


def run_pipeline(name: str, ctx: Context, threads: int = 1) -> ExperimentReport:
    fns = {"base": pipeline_base, "quality": pipeline_quality, "reweight": pipeline_reweight,
           "qw": pipeline_qw, "shapley": pipeline_shapley}
    if name not in fns:
        raise ValueError(f"unknown pipeline {name!r}; choose from {', '.join(PIPELINES)}")
    return fns[name](ctx, threads)
