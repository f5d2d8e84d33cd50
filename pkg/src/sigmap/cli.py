"""Command-line front end.

Every command resolves a scenario (defaults < config file < flags), runs, and
writes its artifacts under ``--out`` together with ``config.json`` (the resolved
scenario) and ``manifest.json`` (inputs, config hash, seed, artifact checksums).
Failures print a JSON error record on stderr, also saved as ``error.json``, and
exit non-zero: 2 for usage/config problems, 1 otherwise.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import forest, ingest
from . import pipelines as pl
from . import quality as qm
from . import reweight as rw
from . import shapley as sh
from .config import ConfigError, ScenarioConfig, effective_threads, from_dict, load, with_overrides

log = logging.getLogger("sigmap")

COMMANDS = ("synth", "ingest", "train", "predict", "eval", "weights", "shapley", "minimize", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


# flag table: (names, kwargs); shared by every command except ``report``

SCENARIO_FLAGS = [
    (("--config", "--scenario"), dict(dest="config", metavar="FILE",
                                      help="scenario file (.toml or .json); defaults apply when omitted")),
    (("--out",), dict(metavar="DIR", help="output directory (default: the scenario's 'out')")),
    (("--seed",), dict(type=int, help="master seed; overrides the scenario")),
    (("--threads",), dict(type=int, metavar="N", help="worker cap; 0 = all cores (default: scenario, else all cores)")),
    (("--granularity",), dict(choices=["cell", "ta"], help="one model per cell or per tracking area")),
    (("--quality",), dict(choices=["identity", "coverage", "bars", "cdp"], help="quality function Q applied to labels")),
    (("--target",), dict(choices=["uniform", "population", "custom"], help="target distribution for importance weights")),
]

EXTRA_FLAGS = {
    "ingest": [(("--input",), dict(required=True, metavar="GEOJSON", help="measurement file to ingest"))],
    "train": [(("--input",), dict(metavar="GEOJSON", help="training data (default: the scenario's data source)")),
              (("--weighted",), dict(action="store_true", help="train with importance weights for --target"))],
    "predict": [(("--model",), dict(required=True, metavar="FILE", help="models.json index or a single model file")),
                (("--input",), dict(required=True, metavar="GEOJSON", help="records to predict"))],
    "eval": [(("pipeline",), dict(choices=pl.PIPELINES, help="experiment pipeline to run"))],
    "weights": [(("--input",), dict(metavar="GEOJSON", help="data (default: the scenario's data source)"))],
    "shapley": [(("--input",), dict(metavar="GEOJSON", help="data (default: the scenario's data source)"))],
    "minimize": [(("--input",), dict(metavar="GEOJSON", help="data (default: the scenario's data source)"))],
}

REPORT_FLAGS = [
    (("--out",), dict(required=True, metavar="DIR", help="directory holding pipeline outputs; report.csv is written here")),
    (("--input",), dict(metavar="DIR", action="append", help="extra output directories to include (repeatable)")),
]

HELP = {
    "synth": "generate a synthetic dataset (GeoJSON) from the scenario",
    "ingest": "validate and normalize a GeoJSON measurement file",
    "train": "fit one forest per modeling unit",
    "predict": "predict with trained models",
    "eval": "run an experiment pipeline and write its report",
    "weights": "fit the sampling density and write importance weights",
    "shapley": "TMC-Shapley values for the training split",
    "minimize": "value-ordered removal curve and the minimized training set",
    "report": "merge pipeline summaries into one table",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sigmap", description="Signal-map experiments.",
                epilog="Environment: SIGMAP_LOG sets the log level (DEBUG, INFO, WARNING, ERROR).")
    p.add_argument("--version", action="version", version=f"sigmap {__version__}", help="print the version and exit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser, metavar="COMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        flags = REPORT_FLAGS if name == "report" else SCENARIO_FLAGS + EXTRA_FLAGS.get(name, [])
        for names, kw in flags:
            sp.add_argument(*names, **kw)
    return p


# scenario resolution

def resolve_config(args) -> ScenarioConfig:
    cfg = load(args.config) if args.config else from_dict({})
    ov = {"seed": args.seed, "threads": args.threads, "granularity": args.granularity,
          "quality.kind": args.quality, "target.kind": args.target, "out": args.out}
    inp = getattr(args, "input", None)
    if inp and args.command in ("train", "weights", "shapley", "minimize"):
        ov["data.source"] = "file"
        ov["data.path"] = str(inp)
    return with_overrides(cfg, **ov)


def _quality(cfg) -> qm.QualityFn:
    q = cfg.quality
    if q.kind == "cdp":
        return pl._cdp_fn(cfg)
    return qm.QualityFn(q.kind, kpi=q.kpi)


# commands: each returns (artifacts {name: bytes}, inputs {path: sha256})

def cmd_synth(args, cfg, threads):
    if cfg.data.source != "synth":
        raise ValueError("synth needs data.source = 'synth'")
    ctx = pl.load_context(cfg, threads)
    arts = {"data.geojson": ingest.write_geojson(ctx.data)}
    if ctx.population is not None:
        arts["population.csv"] = ctx.population.to_csv()
    return arts, {}


def cmd_ingest(args, cfg, threads):
    raw = Path(args.input).read_bytes()
    from .datamodel import FeatureSet, Kpi
    d, rep = ingest.read_geojson(raw, Kpi(cfg.data.kpi), FeatureSet(cfg.feature_set))
    summary = rep.to_dict() | {"n_records": len(d)}
    return ({"data.geojson": ingest.write_geojson(d),
             "ingest_report.json": json.dumps(summary, sort_keys=True, indent=2).encode()},
            {str(args.input): _sha256(raw)})


def _data_inputs(cfg):
    out = {}
    for p in (cfg.data.path if cfg.data.source == "file" else "", cfg.data.population_grid):
        if p:
            out[p] = _sha256(Path(p).read_bytes())
    return out


def _weights_for(ctx, d, seed):
    spec = pl.target_spec(ctx, ctx.cfg.target.kind)
    h = pl.select_bandwidth(ctx, d, spec, seed)
    s = pl._fit_density(ctx, d, pl.kde_mode(ctx.cfg, h))
    return rw.importance_ratios(d, spec, s, ctx.frame), h


def cmd_train(args, cfg, threads):
    ctx = pl.load_context(cfg, threads)
    qf = _quality(cfg)
    index, arts = {}, {}
    for name, d, _ in pl.groups(ctx):
        w, h = (None, None)
        if args.weighted:
            iw, h = _weights_for(ctx, d, cfg.seed)
            w = iw.values
        dq = qm.transform_dataset(d, qf)
        hp = pl.select_hyper(dq, cfg, cfg.seed, qf.task, w, qf.classes)
        m = forest.fit_dataset(dq, hp, w, qf.classes)
        fname = f"model_{name.replace('/', '_')}.json"
        arts[fname] = m.to_json().encode()
        index[name] = {"file": fname, "n_train": len(d), "task": qf.task, "quality": qf.describe(),
                       "n_trees": hp.n_trees, "max_depth": hp.max_depth, "weighted": bool(args.weighted),
                       "bandwidth_m": h}
    arts["models.json"] = json.dumps({"granularity": cfg.granularity, "models": index},
                                     sort_keys=True, indent=2).encode()
    return arts, _data_inputs(cfg)


def _group_key(m, granularity):
    return str(m.cell) if granularity == "cell" else "-".join(map(str, m.cell.ta))


def cmd_predict(args, cfg, threads):
    mpath = Path(args.model)
    mraw = mpath.read_bytes()
    inputs = {str(mpath): _sha256(mraw)}
    doc = json.loads(mraw)
    if doc.get("format") == forest.FORMAT:
        models, gran = {None: forest.ForestModel.from_json(mraw.decode())}, None
    else:
        gran = doc["granularity"]
        models = {}
        for g, e in doc["models"].items():
            f = mpath.parent / e["file"]
            b = f.read_bytes()
            inputs[str(f)] = _sha256(b)
            models[g] = forest.ForestModel.from_json(b.decode())
    raw = Path(args.input).read_bytes()
    inputs[str(args.input)] = _sha256(raw)
    from .datamodel import Kpi
    d, _ = ingest.read_geojson(raw, Kpi(cfg.data.kpi))
    pred = np.full(len(d), np.nan)
    std = np.full(len(d), np.nan)
    keys = [None] * len(d) if gran is None else [_group_key(m, gran) for m in d.records]
    missing = 0
    for g in dict.fromkeys(keys):
        idx = np.array([i for i, k in enumerate(keys) if k == g])
        if g not in models:
            missing += len(idx)
            continue
        m = models[g]
        sub = d.subset(idx)
        pred[idx] = m.predict_dataset(sub)
        if m.hyper.task == "regression":
            std[idx] = m.predict_std(m.encode(sub))
    if missing:
        log.warning("%d record(s) have no model for their unit", missing)
    ll = d.locations()
    buf = io.StringIO()
    buf.write("index,lat,lng,pred,std\n")
    for i in range(len(d)):
        buf.write(f"{i},{float(ll[i, 0])!r},{float(ll[i, 1])!r},{float(pred[i])!r},{float(std[i])!r}\n")
    meta = {"n_records": len(d), "n_without_model": missing}
    return ({"predictions.csv": buf.getvalue().encode(),
             "predictions.geojson": pl._points_layer(d, {"pred": pred, "std": std}),
             "predict_meta.json": json.dumps(meta, sort_keys=True, indent=2).encode()}, inputs)


def cmd_eval(args, cfg, threads):
    ctx = pl.load_context(cfg, threads)
    rep = pl.run_pipeline(args.pipeline, ctx, threads)
    return rep.artifacts(), _data_inputs(cfg)


def cmd_weights(args, cfg, threads):
    ctx = pl.load_context(cfg, threads)
    buf = io.StringIO()
    buf.write("group,index,lat,lng,weight,density,target_mass,bandwidth_m\n")
    feats = []
    for name, d, _ in pl.groups(ctx):
        iw, h = _weights_for(ctx, d, cfg.seed)
        ll = d.locations()
        for i in range(len(d)):
            buf.write(f"{name},{i},{float(ll[i, 0])!r},{float(ll[i, 1])!r},{float(iw.values[i])!r},{float(iw.density[i])!r},"
                      f"{float(iw.target_mass[i])!r},{float(h)!r}\n")
        feats += json.loads(pl._points_layer(d, {"weight": iw.values, "density": iw.density}))["features"]
    layer = json.dumps({"type": "FeatureCollection", "features": feats}, separators=(",", ":")).encode()
    return {"weights.csv": buf.getvalue().encode(), "weights.geojson": layer}, _data_inputs(cfg)


def _values(ctx, d, seed, threads):
    """Quality-transformed 60/20/20 split and TMC values of the training part."""
    cfg = ctx.cfg
    qf = _quality(cfg) if cfg.quality.kind != "identity" else qm.QualityFn("identity")
    metric = pl.shapley_metric(cfg, qf.task)
    tr, te, ho, bad = pl.shapley_split(ctx, d, seed)
    tr, te, ho = (qm.transform_dataset(x, qf) for x in (tr, te, ho))
    learner = pl._shapley_learner(cfg, tr, qf.task, qf.classes)
    Xtr, ytr = pl._valuation_xy(ctx, cfg, tr, learner)
    Xte, yte = pl._valuation_xy(ctx, cfg, te, learner, tr.encoder)
    sc = cfg.shapley
    scfg = sh.ShapleyConfig(sc.convergence_tol, sc.convergence_window, sc.max_iter_factor, sc.relaxed_tol,
                            sc.truncation_tol, seed, sc.n_permutations)
    res = sh.tmc_shapley((Xtr, ytr), (Xte, yte), learner, metric, scfg, threads)
    return tr, ho, res, qf, metric, bad


def cmd_shapley(args, cfg, threads):
    ctx = pl.load_context(cfg, threads)
    arts, meta = {}, {}
    buf = io.StringIO()
    buf.write("group,index,phi,lat,lng\n")
    feats = []
    for name, d, _ in pl.groups(ctx):
        tr, _, res, qf, metric, bad = _values(ctx, d, cfg.seed, threads)
        ll = tr.locations()
        for i, p in enumerate(res.phi):
            buf.write(f"{name},{i},{float(p)!r},{float(ll[i, 0])!r},{float(ll[i, 1])!r}\n")
        feats += json.loads(res.to_geojson(ll))["features"]
        meta[name] = {"iterations": res.iterations, "stop_reason": res.stop_reason, "v_full": res.v_full,
                      "v_empty": res.v_empty, "metric": metric.kind, "quality": qf.describe(),
                      "corrupted": bad.tolist()}
    arts["shapley_values.csv"] = buf.getvalue().encode()
    arts["shapley_values.geojson"] = json.dumps({"type": "FeatureCollection", "features": feats},
                                                separators=(",", ":")).encode()
    arts["shapley_meta.json"] = json.dumps(meta, sort_keys=True, indent=2).encode()
    return arts, _data_inputs(cfg)


def cmd_minimize(args, cfg, threads):
    """Remove low-valued points while held-out performance stays at least at its full-data level."""
    ctx = pl.load_context(cfg, threads)
    sc = cfg.shapley
    buf = io.StringIO()
    buf.write("group,order,step,fraction_removed,n_remaining,score\n")
    kept, meta = [], {}
    for name, d, _ in pl.groups(ctx):
        tr, ho, res, qf, metric, _ = _values(ctx, d, cfg.seed, threads)
        learner = sh.ForestLearner.for_dataset(tr, pl.hyper(cfg, cfg.seed, qf.task), qf.classes)
        Xr, Xh = tr.feature_matrix(), ho.feature_matrix(tr.encoder)
        curves = {o: sh.removal_curve((Xr, tr.labels), (Xh, ho.labels), res.phi if o == "low" else np.zeros(len(tr)),
                                      learner, metric, sc.batch_frac, o, cfg.seed, sc.max_fraction)
                  for o in ("low", "random")}
        for o, c in curves.items():
            for r in c.rows:
                buf.write(f"{name},{o},{r['step']},{float(r['fraction_removed'])!r},{r['n_remaining']},{float(r['score'])!r}\n")
        c = curves["low"]
        s = c.scores
        ok = np.flatnonzero(s >= s[0])
        step = int(ok.max())
        keep = np.sort(sh.removal_order(res.phi, "low")[step * c.batch:])
        kept += [tr.records[i] for i in keep]
        meta[name] = {"n_train": len(tr), "n_kept": int(len(keep)), "fraction_removed": float(c.fractions[step]),
                      "full_score": float(s[0]), "kept_score": float(s[step]), "metric": metric.kind}
    from .datamodel import Dataset
    return ({"minimize_curve.csv": buf.getvalue().encode(),
             "minimized.geojson": ingest.write_geojson(Dataset(kept)) if kept else b"",
             "minimize_meta.json": json.dumps(meta, sort_keys=True, indent=2).encode()}, _data_inputs(cfg))


def cmd_report(args):
    dirs = [Path(args.out)] + [Path(p) for p in (args.input or [])]
    rows, inputs = [], {}
    for dd in dirs:
        for f in sorted(dd.glob("*_summary.csv")):
            b = f.read_bytes()
            inputs[str(f)] = _sha256(b)
            pipeline = f.name[: -len("_summary.csv")]
            for r in csv.DictReader(io.StringIO(b.decode())):
                rows.append({"source": str(dd), "pipeline": pipeline, **r})
    if not rows:
        raise ValueError(f"no *_summary.csv files under {', '.join(map(str, dirs))}")
    cols = ["source", "pipeline", "group", "method", "metric", "n", "median", "q25", "q75", "iqr", "mean"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    for r in rows:
        print(f"{r['pipeline']:9s} {r['group']:22s} {r['method']:22s} {r['metric']:24s} "
              f"median {float(r['median']):.4g}  iqr {float(r['iqr']):.3g}")
    return {"report.csv": buf.getvalue().encode()}, inputs


RUNNERS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "predict": cmd_predict,
           "eval": cmd_eval, "weights": cmd_weights, "shapley": cmd_shapley, "minimize": cmd_minimize}


def write_outputs(out: Path, manifest: dict, artifacts: dict, config_json: bytes | None,
                  manifest_name: str = "manifest.json"):
    out.mkdir(parents=True, exist_ok=True)
    for name, b in artifacts.items():
        (out / name).write_bytes(b)
    if config_json is not None:
        (out / "config.json").write_bytes(config_json)
    manifest["artifacts"] = {name: _sha256(b) for name, b in sorted(artifacts.items())}
    (out / manifest_name).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _error_record(exc, code):
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError):
        rec["problems"] = exc.problems
    return rec


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SIGMAP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    out = None
    try:
        args = build_parser().parse_args(argv)
        out = Path(args.out) if getattr(args, "out", None) else None
        if args.command == "report":
            arts, inputs = cmd_report(args)
            write_outputs(out, {"tool": "sigmap", "version": __version__, "command": "report", "argv": argv,
                                "inputs": inputs}, arts, None, "report_manifest.json")
            return 0
        cfg = resolve_config(args)
        out = Path(cfg.out)
        threads = effective_threads(cfg.threads)
        arts, inputs = RUNNERS[args.command](args, cfg, threads)
        if args.config:
            inputs[str(args.config)] = _sha256(Path(args.config).read_bytes())
        manifest = {"tool": "sigmap", "version": __version__, "command": args.command,
                    "pipeline": getattr(args, "pipeline", None), "argv": argv, "seed": cfg.seed,
                    "config_sha256": cfg.digest(), "config": cfg.to_dict(), "inputs": inputs}
        write_outputs(out, manifest, arts, cfg.to_json().encode())
        return 0
    except (UsageError, ConfigError) as e:
        code = 2
        rec = _error_record(e, code)
    except Exception as e:  # noqa: BLE001 - every failure becomes a record
        code = 1
        rec = _error_record(e, code)
        log.debug("failure", exc_info=True)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
