#!/usr/bin/env python3
"""Tabulate I(theta) for both presets with its small- and large-theta constants."""
import argparse
from pathlib import Path

import numpy as np

from pam_ageing.ageing import i_tail_constants, i_theta_curve, small_theta_slope
from pam_ageing.analytics import PRESETS
from pam_ageing.io import sidecar, write_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ageing_curve")
    ap.add_argument("--n", type=int, default=200)
    args = ap.parse_args()
    out = Path(args.out)
    thetas = np.concatenate([[0.0], np.geomspace(1e-4, 1e4, args.n)])
    cols, consts = {}, {}
    for name, p in PRESETS.items():
        cols[name] = i_theta_curve(p, thetas)
        large, c0 = i_tail_constants(p)
        consts[name] = {"large_theta_const": large, "stated_c0": c0, "small_theta_slope": small_theta_slope(p)}
    write_csv(out / "itheta_curve.csv", ["theta"] + [f"i_theta_{k}" for k in cols],
              zip(thetas, *cols.values()))
    sidecar(out / "itheta_curve.json", {"n": args.n}, constants=consts)
    for name, c in consts.items():
        print(name, c)


if __name__ == "__main__":
    main()
