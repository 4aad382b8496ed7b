#!/usr/bin/env python3
"""Tracker persistence at one age against I(theta), plus the residual-law KS test."""
import argparse
import json

import numpy as np

from pam_ageing.ageing import ageing_cdf, i_theta, ks_censored, residual_samples
from pam_ageing.analytics import PRESETS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="d1")
    ap.add_argument("--t", type=float, default=1e6)
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--theta", type=float, nargs="+", default=[0.25, 0.5, 1.0, 2.0, 4.0])
    ap.add_argument("--cap", type=float, default=100.0)
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args()
    p = PRESETS[args.preset]
    rows = [r for r in residual_samples(p, args.t, args.reps, args.seed, args.cap, args.jobs) if "error" not in r]
    ratios = np.array([r["ratio"] for r in rows])
    out = {}
    for th in args.theta:
        est = float(np.mean(ratios > th))
        out[th] = {"estimate": est, "stderr": float(np.sqrt(est * (1 - est) / len(ratios))),
                   "i_theta": i_theta(p, th)}
    dist, pval = ks_censored(ratios, ageing_cdf(p), args.cap)
    print(json.dumps({"persistence": out, "ks_distance": dist, "p_value": pval, "n": len(ratios)}, indent=2))


if __name__ == "__main__":
    main()
