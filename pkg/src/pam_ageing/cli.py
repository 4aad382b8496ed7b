"""Single entry point ``pam-ageing <command>`` for all experiment drivers.

Every run resolves its configuration from command defaults, an optional JSON
file (``--config``) and explicit flags, in that order of precedence, and writes
``config.json`` next to its artifacts so that ``--config <dir>/config.json``
replays it bit for bit. ``--out`` and ``--jobs`` are not part of the config:
neither changes any artifact.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Callable

from . import ageing, io, limit
from .analytics import ModelParams
from .errors import DomainError, ResourceError, StabilityError
from .potential import PotentialSpec, load_overrides
from .solver import Solver, SolverConfig, residual_lifetime_X
from .tracker import Tracker, TrackerConfig

OUT_ENV = "PAM_AGEING_OUT"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RESOURCE = 3
EXIT_STABILITY = 4


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).lower() == "none":
        return None
    return float(text)


def _opt_str(text):
    if text is None or str(text).lower() in ("", "none"):
        return None
    return str(text)


# (name, type, default, help, is_list)
COMMON = [
    ("d", int, 1, "lattice dimension", False),
    ("alpha", float, 2.0, "Pareto tail index, must exceed d", False),
    ("seed", int, 0, "root seed", False),
]

TRACKER_FLAGS = [
    ("k_runners", int, TrackerConfig.k_runners, "runners-up kept besides the leader", False),
    ("radius_factor", float, TrackerConfig.radius_factor, "inner ball radius in units of r_t", False),
    ("radius_eps", float, TrackerConfig.radius_eps, "extra log power of the inner radius", False),
    ("horizon_factor", float, TrackerConfig.horizon_factor, "rescan horizon as a multiple of t", False),
    ("min_radius", int, TrackerConfig.min_radius, "smallest inner radius", False),
]

FIELD_FLAGS = [
    ("overrides", _opt_str, None, "JSON file of hand-set potential values", False),
    ("background", _opt_float, None, "constant value for all non-overridden sites", False),
]

SOLVER_FLAGS = [
    ("dt_factor", float, SolverConfig.dt_factor, "accuracy step in units of 1/(xi_max + 4d)", False),
    ("initial_radius", int, SolverConfig.initial_radius, "starting half-width of the box", False),
    ("leak_tol", float, SolverConfig.leak_tol, "boundary leak that triggers box growth", False),
    ("fixed_box", _bool, SolverConfig.fixed_box, "never grow the box", False),
    ("site_budget", int, SolverConfig.site_budget, "largest number of box sites", False),
    ("work_budget", float, SolverConfig.work_budget, "largest estimated site-steps per solve", False),
]

COMMANDS: dict[str, dict] = {
    "itheta": {
        "help": "ageing function I(theta) by quadrature",
        "flags": [("theta", float, [1.0], "window ratios", True)],
    },
    "nu-mass": {
        "help": "closed-form intensity mass of the no-overtake region",
        "flags": [
            ("theta", float, 1.0, "window ratio", False),
            ("r", float, 1.0, "radius |x| of the reference point", False),
            ("y", float, 1.0, "height of the reference point", False),
        ],
    },
    "sample-limit": {
        "help": "sample the limiting point process on a window",
        "flags": [
            ("window", str, "box", "box or cone", False),
            ("L", float, 10.0, "box half-width in l1 norm", False),
            ("u_min", float, 0.5, "box lower bound on w = y + q|x|", False),
            ("c", float, 1.0, "cone offset", False),
            ("k", float, 0.5, "cone slope", False),
        ],
    },
    "cone-path": {
        "help": "maximizer path of the cone functional on one limit pattern",
        "flags": [
            ("t_lo", float, 1.0, "start of the time range", False),
            ("t_hi", float, 10.0, "end of the time range", False),
            ("tol", float, 1e-6, "truncation bound to reach", False),
        ],
    },
    "track": {
        "help": "event-driven maximizer of the variational functional",
        "flags": [
            ("t0", float, 2.0, "start time", False),
            ("t1", float, 1000.0, "end time", False),
        ] + TRACKER_FLAGS + FIELD_FLAGS,
    },
    "solve": {
        "help": "normalized profile of the lattice equation",
        "flags": [
            ("t_end", float, 10.0, "end time", False),
            ("n_obs", int, 100, "uniform observation times on (0, t_end]", False),
            ("residual_t", _opt_float, None, "time at which to measure the profile residual lifetime", False),
            ("rel_tol", float, 1e-3, "relative accuracy of the residual lifetime", False),
        ] + SOLVER_FLAGS + FIELD_FLAGS,
    },
    "persistence": {
        "help": "persistence probability estimates against I(theta)",
        "flags": [
            ("mode", str, "tracker", "tracker, limit or profile", False),
            ("t", float, 1e4, "age t (tracker and profile modes)", False),
            ("theta", float, [1.0], "window ratios", True),
            ("n_reps", int, 200, "replicas or limit patterns", False),
            ("theta_max", _opt_float, None, "censoring cap of R/t for the KS test (tracker mode)", False),
            ("eps", float, 0.1, "profile tolerance (profile mode)", False),
            ("n_obs", int, 50, "observer times in the window (profile mode)", False),
        ] + TRACKER_FLAGS + SOLVER_FLAGS,
    },
    "moderate-dev": {
        "help": "scaled persistence over windows of ratio sqrt(log t)",
        "flags": [
            ("t", float, [1e4, 1e5, 1e6], "ages, increasing", True),
            ("n_reps", int, 500, "replicas per age", False),
        ] + TRACKER_FLAGS,
    },
    "envelope": {
        "help": "trend diagnostic for the residual-lifetime envelope",
        "flags": [
            ("h_choice", str, "convergent", "convergent or divergent", False),
            ("n_grid", int, 20, "grid points t = e^n, n = 1..n_grid", False),
            ("kappa", float, 1.0, "exceedance level", False),
            ("h_const", float, 1.0, "constant h for the divergent choice", False),
        ] + TRACKER_FLAGS,
    },
    "scaling-check": {
        "help": "KS distances of rescaled maximizer marginals to their limits",
        "flags": [
            ("T_list", float, [1e3, 1e4, 1e5, 1e6], "scales T, increasing", True),
            ("t_probe", float, [1.0], "probe times in units of T", True),
            ("n_reps", int, 500, "replicas per scale", False),
            ("n_limit", int, 20000, "limit samples for probe times other than 1", False),
        ] + TRACKER_FLAGS,
    },
}


# -- parser and config resolution -------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pam-ageing", description="Ageing experiments for the parabolic Anderson model.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for cmd, spec in COMMANDS.items():
        p = sub.add_parser(cmd, help=spec["help"], description=spec["help"],
                           argument_default=argparse.SUPPRESS)
        for name, typ, default, text, is_list in COMMON + spec["flags"]:
            shown = " ".join(map(str, default)) if is_list else default
            p.add_argument(_flag(name), dest=name, type=typ, nargs="+" if is_list else None,
                           help=f"{text} (default: {shown})")
        p.add_argument("--config", dest="config", type=str, help="JSON config; explicit flags override it")
        p.add_argument("--out", dest="out", type=str,
                       help=f"artifact directory (default: ${OUT_ENV} or ./runs, plus the command name)")
        p.add_argument("--jobs", dest="jobs", type=int, help="worker processes (default: available cores)")
    return parser


def _coerce(cmd: str, key: str, value):
    table = {name: (typ, is_list) for name, typ, _, _, is_list in COMMON + COMMANDS[cmd]["flags"]}
    if key not in table:
        raise DomainError(f"unknown config key {key!r} for command {cmd}")
    typ, is_list = table[key]
    try:
        if is_list:
            if not isinstance(value, list):
                value = [value]
            return [typ(v) for v in value]
        if value is None and typ not in (_opt_float, _opt_str):
            raise ValueError("null")
        return typ(value)
    except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
        raise DomainError(f"bad value for {key!r}: {value!r}") from exc


def resolve_config(ns: argparse.Namespace) -> dict:
    cmd = ns.command
    cfg = {"command": cmd}
    for name, _, default, _, is_list in COMMON + COMMANDS[cmd]["flags"]:
        cfg[name] = list(default) if is_list else default
    given = vars(ns)
    if given.get("config"):
        doc = json.loads(Path(given["config"]).read_text())
        if not isinstance(doc, dict):
            raise DomainError("config file must hold a JSON object")
        if doc.get("command", cmd) != cmd:
            raise DomainError(f"config is for command {doc['command']!r}, not {cmd!r}")
        for k, v in doc.items():
            if k != "command":
                cfg[k] = _coerce(cmd, k, v)
    for k, v in given.items():
        if k in ("command", "config", "out", "jobs"):
            continue
        cfg[k] = v
    return cfg


def out_dir(ns: argparse.Namespace) -> Path:
    if getattr(ns, "out", None):
        return Path(ns.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / ns.command


# -- helpers ------------------------------------------------------------------------


def _params(cfg: dict) -> ModelParams:
    return ModelParams(cfg["d"], cfg["alpha"])


def _tracker_config(cfg: dict) -> TrackerConfig:
    return TrackerConfig(k_runners=cfg["k_runners"], radius_factor=cfg["radius_factor"],
                         radius_eps=cfg["radius_eps"], horizon_factor=cfg["horizon_factor"],
                         min_radius=cfg["min_radius"])


def _solver_config(cfg: dict) -> SolverConfig:
    return SolverConfig(dt_factor=cfg["dt_factor"], initial_radius=cfg["initial_radius"],
                        leak_tol=cfg["leak_tol"], fixed_box=cfg["fixed_box"], site_budget=cfg["site_budget"],
                        work_budget=cfg["work_budget"])


def _field(cfg: dict, params: ModelParams) -> PotentialSpec:
    kw = {}
    if cfg.get("overrides"):
        kw = load_overrides(cfg["overrides"])
        if cfg.get("background") is not None:
            kw["background"] = cfg["background"]
    elif cfg.get("background") is not None:
        kw = {"background": cfg["background"]}
    return PotentialSpec(params, seed=cfg["seed"], **kw)


def _site_cols(d: int, prefix: str) -> list:
    return [f"{prefix}{i + 1}" for i in range(d)]


def _g(x: float) -> str:
    return format(float(x), ".6g")


# -- commands -------------------------------------------------------------------------


def cmd_itheta(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    vals = [ageing.i_theta(params, th) for th in cfg["theta"]]
    io.write_csv(out / "itheta.csv", ["theta", "i_theta"], zip(cfg["theta"], vals))
    io.sidecar(out / "itheta.json", cfg, values=vals)
    return " ".join(repr(float(v)) for v in vals)


def cmd_nu_mass(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    val = limit.nu_region_mass(params, cfg["theta"], cfg["r"], cfg["y"])
    io.write_csv(out / "nu_mass.csv", ["theta", "r", "y", "mass"], [(cfg["theta"], cfg["r"], cfg["y"], val)])
    io.sidecar(out / "nu_mass.json", cfg, mass=val)
    return repr(float(val))


def cmd_sample_limit(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    if cfg["window"] == "box":
        window = limit.BoxWindow(cfg["L"], cfg["u_min"])
    elif cfg["window"] == "cone":
        window = limit.ConeWindow(cfg["c"], cfg["k"])
    else:
        raise DomainError(f"window must be box or cone, got {cfg['window']!r}")
    pat = limit.sample_pattern(params, window, cfg["seed"])
    rows = [list(x) + [y, w] for x, y, w in zip(pat.x.tolist(), pat.y, pat.w)]
    io.write_csv(out / "points.csv", _site_cols(params.d, "x") + ["y", "w"], rows)
    io.sidecar(out / "points.json", cfg, window=window.to_dict(), n_points=len(pat),
               expected=window.mass(params))
    return f"{len(pat)} points (expected {_g(window.mass(params))})"


def cmd_cone_path(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    t_lo, t_hi = cfg["t_lo"], cfg["t_hi"]
    pat = limit.adaptive_pattern(params, t_lo, t_hi, cfg["seed"], tol=cfg["tol"])
    path = limit.cone_path(pat, t_lo, t_hi)
    bound = limit.truncation_bound(params, pat, None, t_lo, t_hi)
    tips = limit.tip_process(path, pat, [s[0] for s in path.segments])
    rows = []
    for (a, b, i), tip in zip(path.segments, tips):
        rows.append([a, b, i] + pat.x[i].tolist() + [pat.y[i], tip])
    io.write_csv(out / "path.csv", ["t_start", "t_end", "index"] + _site_cols(params.d, "x") + ["y", "tip"], rows)
    io.write_csv(out / "points.csv", _site_cols(params.d, "x") + ["y"], pat.to_rows())
    io.sidecar(out / "path.json", cfg, window=pat.window.to_dict(), n_points=len(pat),
               truncation_bound=bound, jumps=len(path.segments) - 1)
    return f"{len(path.segments) - 1} jumps on [{_g(t_lo)}, {_g(t_hi)}], truncation bound {bound:.3g}"


def cmd_track(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    spec = _field(cfg, params)
    tr = Tracker(spec, cfg["t0"], _tracker_config(cfg))
    tr.advance(cfg["t1"])
    path = tr.path()
    d = params.d
    rows = [[j.tau] + list(j.from_site) + list(j.to_site) + [j.xi_from, j.xi_to, j.gap_before]
            for j in path.jumps]
    io.write_csv(out / "jumps.csv",
                 ["tau"] + _site_cols(d, "from") + _site_cols(d, "to") + ["xi_from", "xi_to", "gap_before"], rows)
    st = tr.state()
    io.sidecar(out / "track.json", cfg, initial_site=list(path.initial_site), final_site=list(st.leader.site),
               final_xi=st.leader.xi, final_phi=st.leader.phi, jumps=len(path.jumps), tracker=tr.describe())
    return f"{len(path.jumps)} jumps on [{_g(cfg['t0'])}, {_g(cfg['t1'])}], leader {st.leader.site} xi={_g(st.leader.xi)}"


def cmd_solve(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    if cfg["n_obs"] < 1:
        raise DomainError("n_obs must be at least 1")
    spec = _field(cfg, params)
    solver = Solver(spec, _solver_config(cfg))
    t_end = cfg["t_end"]
    schedule = [t_end * (i + 1) / cfg["n_obs"] for i in range(cfg["n_obs"])]
    rt = cfg.get("residual_t")
    series = solver.run(t_end, schedule, keep_states=rt is not None)
    rows = [[t] + list(map(int, x)) + [v, m, lk]
            for t, x, v, m, lk in zip(series.t, series.peak, series.v_peak, series.log_mass, series.leak)]
    io.write_csv(out / "series.csv", ["t"] + _site_cols(params.d, "x") + ["v_peak", "log_mass", "leak"], rows)
    extra = {"steps": solver.steps, "growths": solver.growths}
    if rt is not None:
        res = residual_lifetime_X(series, rt, solver, cfg["rel_tol"])
        extra["residual"] = {"t": rt, "value": res.value, "censored": res.censored, "refined": res.refined}
    io.sidecar(out / "series.json", cfg, **extra)
    last = series.peak_site(len(series.t) - 1)
    return f"t={_g(t_end)} peak {last} v={_g(series.v_peak[-1])} log U={_g(series.log_mass[-1])}"


def _summary(rep: ageing.ExperimentReport, key: str, ref_key: str) -> str:
    e = rep.estimates[key]
    r = rep.references[ref_key]["value"]
    return f"{key}={_g(e['value'])}+-{_g(e['stderr'])} ref={_g(r)}"


def cmd_persistence(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    thetas = cfg["theta"]
    mode = cfg["mode"]
    seed, n = cfg["seed"], cfg["n_reps"]
    if n < 1:
        raise DomainError("n_reps must be at least 1")
    if mode == "limit":
        rep = ageing.limit_persistence(params, thetas, n, seed)
        rows = [[th, rep.estimates[f"theta={th:g}"]["value"], rep.estimates[f"theta={th:g}"]["stderr"],
                 rep.references[f"theta={th:g}"]["value"]] for th in thetas]
        io.write_csv(out / "persistence.csv", ["theta", "persistence", "stderr", "i_theta"], rows)
        io.write_json(out / "report.json", {"config": cfg, "build": io.build_id(), "report": rep.to_dict()})
        return "; ".join(f"theta={r[0]:g}: {_g(r[1])}+-{_g(r[2])} ref={_g(r[3])}" for r in rows)
    if mode == "tracker":
        tcfg = _tracker_config(cfg)
        cap = cfg["theta_max"] if cfg["theta_max"] is not None else max(thetas)
        cap = max(cap, max(thetas))
        samples = ageing.residual_samples(params, cfg["t"], n, seed, cap, jobs, tcfg)
        ok = [r for r in samples if "error" not in r]
        rows, summary = [], []
        for th in thetas:
            hits = sum(1 for r in ok if r["ratio"] > th)
            p, se = ageing._proportion(hits, len(ok))
            ref = ageing.i_theta(params, th)
            rows.append([th, p, se, ref])
            summary.append(f"theta={th:g}: {_g(p)}+-{_g(se)} ref={_g(ref)}")
        io.write_csv(out / "persistence.csv", ["theta", "persistence", "stderr", "i_theta"], rows)
        d = params.d
        rep_rows = []
        for r in samples:
            if "error" in r:
                rep_rows.append([r["rep"]] + [""] * d + ["", "", "", "", "", r["error"]])
            else:
                rep_rows.append([r["rep"]] + list(r["site"]) + [r["xi"], r["phi"], r["ratio"],
                                r["censored"], r["tail_bound"], ""])
        io.write_csv(out / "replicas.csv",
                     ["rep"] + _site_cols(d, "x") + ["xi", "phi", "ratio", "censored", "tail_bound", "error"],
                     rep_rows)
        ks = ageing.residual_law_check(params, cfg["t"], n, seed, cap, rows=samples)
        io.write_json(out / "report.json", {"config": cfg, "build": io.build_id(), "residual_law": ks.to_dict(),
                                            "errors": len(samples) - len(ok)})
        return "; ".join(summary) + f"; KS p={_g(ks.extra['p_value'])}"
    if mode == "profile":
        scfg = _solver_config(cfg)
        rows, reports = [], []
        for th in thetas:
            rep = ageing.estimate_profile_persistence(params, cfg["t"], th, cfg["eps"], n, seed,
                                                      n_obs=cfg["n_obs"], jobs=jobs, config=scfg)
            e = rep.estimates["persistence"]
            rows.append([th, e["value"], e["stderr"], rep.references["i_theta"]["value"]])
            reports.append(rep.to_dict())
        io.write_csv(out / "persistence.csv", ["theta", "persistence", "stderr", "i_theta"], rows)
        io.write_json(out / "report.json", {"config": cfg, "build": io.build_id(), "reports": reports})
        return "; ".join(f"theta={r[0]:g}: {_g(r[1])}+-{_g(r[2])} ref={_g(r[3])}" for r in rows)
    raise DomainError(f"mode must be tracker, limit or profile, got {mode!r}")


def cmd_moderate_dev(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    ts = cfg["t"]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise DomainError("ages must increase")
    tcfg = _tracker_config(cfg)
    rows, reports = [], []
    for t in ts:
        rep = ageing.moderate_deviation_check(params, t, cfg["n_reps"], cfg["seed"], jobs, tcfg)
        s = rep.estimates["scaled"]
        rows.append([t, rep.extra["theta_t"], rep.estimates["persistence"]["value"], s["value"], s["stderr"],
                     rep.extra["ratio"]])
        reports.append(rep.to_dict())
    const = params.i_tail_const
    gaps = [abs(r[5] - 1.0) for r in rows]
    trend = bool(gaps[-1] <= gaps[0]) if len(gaps) > 1 else None
    io.write_csv(out / "moderate_dev.csv", ["t", "theta_t", "persistence", "scaled", "stderr", "ratio"], rows)
    io.write_json(out / "report.json", {"config": cfg, "build": io.build_id(), "constant": const,
                                        "trend_toward_constant": trend, "reports": reports})
    return "; ".join(f"t={r[0]:g}: scaled={_g(r[3])}" for r in rows) + f"; constant={_g(const)}"


def cmd_envelope(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    rep = ageing.envelope_experiment(params, cfg["h_choice"], cfg["n_grid"], cfg["seed"], cfg["kappa"],
                                     cfg["h_const"], _tracker_config(cfg))
    x = rep.extra
    rows = zip(x["n"], x["ratio"], x["censored"], x["tail_running_max"], x["exceedances"])
    io.write_csv(out / "envelope.csv", ["n", "ratio", "censored", "tail_running_max", "exceedances"], rows)
    io.write_json(out / "report.json", {"config": cfg, "build": io.build_id(), "report": rep.to_dict()})
    verdicts = ", ".join(f"{k}={v}" for k, v in rep.verdicts.items())
    return f"{cfg['h_choice']}: {verdicts} (trend diagnostic)"


def cmd_scaling_check(cfg: dict, out: Path, jobs: int) -> str:
    params = _params(cfg)
    rep = ageing.scaling_marginal_check(params, cfg["T_list"], cfg["t_probe"], cfg["n_reps"], cfg["seed"],
                                        jobs, _tracker_config(cfg), n_limit=cfg["n_limit"])
    table = rep.extra["table"]
    io.write_csv(out / "scaling.csv", ["T", "t_probe", "n", "ks_x", "ks_y", "ks_w"],
                 [[r["T"], r["t_probe"], r["n"], r["ks_x"], r["ks_y"], r["ks_w"]] for r in table])
    io.write_json(out / "report.json", {"config": cfg, "build": io.build_id(), "report": rep.to_dict()})
    ok = sum(rep.verdicts.values())
    return f"{ok}/{len(rep.verdicts)} marginals with strictly decreasing KS distance"


HANDLERS: dict[str, Callable[[dict, Path, int], str]] = {
    "itheta": cmd_itheta,
    "nu-mass": cmd_nu_mass,
    "sample-limit": cmd_sample_limit,
    "cone-path": cmd_cone_path,
    "track": cmd_track,
    "solve": cmd_solve,
    "persistence": cmd_persistence,
    "moderate-dev": cmd_moderate_dev,
    "envelope": cmd_envelope,
    "scaling-check": cmd_scaling_check,
}


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv``, run the command and return the exit status."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(ns)
        jobs = getattr(ns, "jobs", None) or ageing.default_jobs()
        if jobs < 1:
            raise DomainError("--jobs must be positive")
        out = out_dir(ns)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "config.json", cfg)
        line = HANDLERS[ns.command](cfg, out, jobs)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ResourceError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except StabilityError as exc:
        print(f"stability error: {exc}", file=sys.stderr)
        return EXIT_STABILITY
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(line)
    return EXIT_OK


def main() -> None:
    sys.exit(run())
