"""Rerun one pipeline under several master seeds and print the headline comparison.

    python3 scripts/seed_sweep.py configs/reweight.toml reweight rf rf_w_uniform sqrt_eps_uniform --seeds 0 10 20
"""
import argparse

import numpy as np

from sigmap import config, pipelines as pl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("pipeline", choices=pl.PIPELINES)
    ap.add_argument("baseline", help="method name of the reference")
    ap.add_argument("method", help="method name being compared")
    ap.add_argument("metric")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--higher-is-better", action="store_true")
    args = ap.parse_args()

    cfg = config.load(args.config)
    for s in args.seeds:
        rep = pl.run_pipeline(args.pipeline, pl.load_context(config.with_overrides(cfg, seed=s), 1), 1)
        b, m = rep.values(args.baseline, args.metric), rep.values(args.method, args.metric)
        gain = (m / b - 1) if args.higher_is_better else (1 - m / b)
        wins = int(np.sum(gain >= 0))
        print(f"seed {s}: {args.method} beats {args.baseline} in {wins}/{len(gain)} splits, "
              f"median relative gain {np.median(gain):+.1%}")


if __name__ == "__main__":
    main()
