#!/usr/bin/env python3
"""Profile persistence from the lattice solver against tracker persistence on matched replicas."""
import argparse
import json

from pam_ageing.ageing import estimate_profile_persistence, residual_samples
from pam_ageing.analytics import PRESETS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--t", type=float, default=30.0)
    ap.add_argument("--theta", type=float, default=1.0)
    ap.add_argument("--eps", type=float, default=0.25)
    ap.add_argument("--reps", type=int, default=40)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args()
    p = PRESETS["d1"]
    prof = estimate_profile_persistence(p, args.t, args.theta, args.eps, args.reps, args.seed, jobs=args.jobs)
    z = {r["rep"]: r["ratio"] > args.theta for r in residual_samples(p, args.t, args.reps, args.seed, args.theta)}
    matched = [z[k] for k in prof.extra["reps"]]
    print(json.dumps({
        "profile": prof.estimates["persistence"],
        "tracker_matched": sum(matched) / len(matched),
        "agreement": sum(a == b for a, b in zip(matched, prof.extra["stay"])) / len(matched),
        "solver_errors": prof.extra["errors"],
    }, indent=2))


if __name__ == "__main__":
    main()
