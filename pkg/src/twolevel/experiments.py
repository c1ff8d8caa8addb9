"""Declarative experiment configs, the runner, and figure-data recipes.

A config is a YAML mapping::

    kind: pde            # ibm | mc | pde | qsd | classify | verify-rate | scan | invasion | figure
    seed: 1
    params: {gamma: 0.5, s: 0.1, r: {kind: linear, coefficients: [0.3]}, grid_size: 200}
    initial: {dirac: 0.5}
    pde: {t: 10, dt: 0.01}

Every run writes its files plus ``manifest.json`` into the output directory.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import platform
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, InvalidParameters, InvalidRateFunction
from .model import DecomposedMeasure, ModelParams, RateFunction, ibm_rates_from_limit

KINDS = ("ibm", "mc", "pde", "qsd", "classify", "verify-rate", "scan", "invasion", "figure")
FIGURES = ("log-proportions", "u-turn", "truncation", "qsd-profile")
SCHEMA_VERSION = "1"
SCHEMAS = {
    "series": "time,x0,x1,xint",
    "histogram": "location,mass,kind",
    "log_series": "time,log_x0,log_x1,log_xint,decay_rate",
    "u_turn": "time,interior_mean,xint",
    "truncation": "eta,time_x1_half,truncated_total,error",
    "scan": "parameter,value,rho_alpha,rho_min,sign,error",
    "invasion_sweep": "s_over_gamma,r1_over_gammaG,pi_DC,pi_CD,direction",
    "ibm": "replicate,time,location,mass,kind",
    "profiles": "location,alpha,h",
}

DEFAULTS = {
    "pde": {"t": 10.0, "dt": 0.01, "variant": "A", "eta": 0.0, "record_every": 1,
            "profiles": False},
    "qsd": {"tol": 1e-10},
    "classify": {"tie_tol": 1e-3},
    "verify-rate": {"horizon": 20.0, "window": [0.5, 1.0], "dt": None, "tie_tol": 1e-3},
    "mc": {"t": 1.0, "K": 10000, "dt": None, "mode": "weight"},
    "ibm": {"n": 20, "m": 20, "gamma_G_bar": 1.0, "replicates": 1, "times": [0.0, 1.0]},
    "invasion": {"n": 20, "m": 20, "gamma_G": 0.001, "direction": "D->C",
                 "replicates": 0, "horizon": None},
    "scan": {"parameter": "gamma", "values": None, "range": None},
    "figure": {"name": "log-proportions", "t": 100.0, "dt": 0.1, "record_every": 10,
               "etas": [0.0], "snapshots": []},
}


def _num(cfg, key, path, positive=False, allow_none=False):
    v = cfg.get(key)
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v) or (positive and v <= 0):
        raise ConfigError(f"{path}.{key}", "must be finite" + (" and > 0" if positive else ""))
    return v


def _params(block) -> ModelParams:
    if not isinstance(block, dict):
        raise ConfigError("params", "missing or not a mapping")
    r = block.get("r")
    if not isinstance(r, dict) or "kind" not in r:
        raise ConfigError("params.r", "needs a mapping with 'kind'")
    try:
        rate = RateFunction.from_dict(r)
    except (KeyError, TypeError) as exc:
        raise ConfigError("params.r", f"missing field {exc}") from None
    except InvalidRateFunction as exc:
        raise ConfigError("params.r", str(exc)) from None
    gamma = _num(block, "gamma", "params", positive=True)
    s = _num(block, "s", "params")
    N = block.get("grid_size", 200)
    if not isinstance(N, int) or isinstance(N, bool):
        raise ConfigError("params.grid_size", "expected an integer")
    try:
        return ModelParams(gamma=gamma, s=s, r=rate, grid_size=N)
    except InvalidParameters as exc:
        raise ConfigError("params", str(exc)) from None


def _initial(block, N: int) -> DecomposedMeasure:
    block = block or {"dirac": 0.5}
    if not isinstance(block, dict):
        raise ConfigError("initial", "expected a mapping")
    if "dirac" in block:
        x = _num(block, "dirac", "initial")
        if not 0 <= x <= 1:
            raise ConfigError("initial.dirac", "must lie in [0, 1]")
        return DecomposedMeasure.dirac(x, N)
    if block.get("uniform"):
        return DecomposedMeasure.uniform(N)
    if "csv" in block:
        mu = DecomposedMeasure.from_csv(block["csv"])
        if mu.N != N:
            raise ConfigError("initial.csv", f"grid has {mu.N} cells, params use {N}")
        return mu.normalized()
    raise ConfigError("initial", "use one of: dirac, uniform, csv")


def load_config(source) -> dict:
    """Parse and validate a config file (path) or mapping; returns the normalized dict."""
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        try:
            with open(source, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from None
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"YAML syntax: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError("kind", f"must be one of {KINDS}, got {kind!r}")
    cfg = {"kind": kind, "seed": raw.get("seed", 0), "params": raw.get("params"),
           "initial": raw.get("initial"), "output": raw.get("output", "out")}
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed", "expected an integer")
    params = _params(cfg["params"])
    _initial(cfg["initial"], params.grid_size)
    block_key = kind
    block = dict(DEFAULTS.get(block_key, {}))
    user = raw.get(block_key, {}) or {}
    if not isinstance(user, dict):
        raise ConfigError(block_key, "expected a mapping")
    unknown = set(user) - set(block)
    if unknown:
        raise ConfigError(f"{block_key}.{sorted(unknown)[0]}", "unknown key")
    block.update(user)
    _check_block(kind, block, params)
    cfg[block_key] = block
    return cfg


def _check_block(kind, b, params):
    p = kind
    if kind == "pde":
        _num(b, "t", p)
        _num(b, "dt", p, positive=True)
        if b["variant"] not in ("A", "A1", "A01"):
            raise ConfigError("pde.variant", "must be A, A1 or A01")
        if _num(b, "eta", p) < 0:
            raise ConfigError("pde.eta", "must be >= 0")
    elif kind == "verify-rate":
        _num(b, "horizon", p, positive=True)
        w = b["window"]
        if not (isinstance(w, list) and len(w) == 2 and 0 <= w[0] < w[1] <= 1):
            raise ConfigError("verify-rate.window", "expected [start, end] fractions")
    elif kind == "mc":
        _num(b, "t", p, positive=True)
        if not isinstance(b["K"], int) or b["K"] < 1:
            raise ConfigError("mc.K", "expected an integer >= 1")
        if b["mode"] not in ("weight", "kill"):
            raise ConfigError("mc.mode", "must be weight or kill")
    elif kind == "ibm":
        for k in ("n", "m", "replicates"):
            if not isinstance(b[k], int) or b[k] < (2 if k != "replicates" else 1):
                raise ConfigError(f"ibm.{k}", "invalid integer")
        ts = b["times"]
        if not isinstance(ts, list) or not ts or any(np.diff(ts) < 0):
            raise ConfigError("ibm.times", "expected a sorted list")
    elif kind == "invasion":
        if b["direction"] not in ("D->C", "C->D"):
            raise ConfigError("invasion.direction", "must be D->C or C->D")
        _num(b, "gamma_G", p, positive=True)
        if not params.r.is_linear:
            raise ConfigError("params.r", "invasion formulas need a linear r")
    elif kind == "scan":
        if b["parameter"] not in ("gamma", "R", "eta", "invasion"):
            raise ConfigError("scan.parameter", "must be gamma, R, eta or invasion")
        _scan_values(b)
    elif kind == "figure":
        if b["name"] not in FIGURES:
            raise ConfigError("figure.name", f"must be one of {FIGURES}")
        _num(b, "t", p, positive=True)
        _num(b, "dt", p, positive=True)


def _scan_values(b) -> np.ndarray:
    if b.get("values") is not None:
        v = b["values"]
        if not isinstance(v, list) or not v:
            raise ConfigError("scan.values", "expected a non-empty list")
        return np.asarray(v, dtype=float)
    rg = b.get("range")
    if not isinstance(rg, dict):
        raise ConfigError("scan", "give either values or range")
    start = _num(rg, "start", "scan.range")
    stop = _num(rg, "stop", "scan.range")
    num = rg.get("num", 10)
    if not isinstance(num, int) or num < 1:
        raise ConfigError("scan.range.num", "expected an integer >= 1")
    if rg.get("log"):
        if start <= 0 or stop <= 0:
            raise ConfigError("scan.range", "log ranges need positive ends")
        return np.geomspace(start, stop, num)
    return np.linspace(start, stop, num)


# -- writing -----------------------------------------------------------------

class _Outputs:
    def __init__(self, out_dir: Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def write(self, name: str, text: str, schema: str | None = None):
        path = self.dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.files[name] = {"sha256": hashlib.sha256(text.encode()).hexdigest(),
                            "schema": SCHEMAS.get(schema) if schema else None}

    def json(self, name: str, obj):
        self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


def _rows(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header.split(","))
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def versions() -> dict:
    import numba
    import scipy
    return {"twolevel": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


# -- runners -----------------------------------------------------------------

def _run_pde(cfg, params, mu0, out):
    from .pde import evolve
    b = cfg["pde"]
    ev = evolve(mu0, b["t"], b["dt"], params, variant=b["variant"], eta=b["eta"],
                record_every=b["record_every"], keep_profiles=b["profiles"])
    out.write("series.csv", ev.to_csv(with_profiles=b["profiles"]), "series")
    out.write("final.csv", ev.final.to_csv(), "histogram")
    out.json("run.json", {"N": params.grid_size, "dt": ev.dt, "variant": ev.variant,
                          "params": params.to_dict(), "times": ev.times,
                          "log_mass": ev.log_mass, "truncated": ev.truncated})
    return f"x0={ev.x0[-1]:.6g} x1={ev.x1[-1]:.6g} xint={ev.xint[-1]:.6g}"


def _run_qsd(cfg, params, mu0, out):
    from .qsd import solve_qsd, verify_ext_rho
    sol = solve_qsd(params, tol=cfg["qsd"]["tol"])
    out.write("qsd.json", sol.to_json() + "\n")
    out.write("profiles.csv", sol.profiles_csv(), "profiles")
    res, strict = verify_ext_rho(sol)
    return f"rho_alpha={sol.rho_alpha:.10g} p0={sol.p0:.6g} p1={sol.p1:.6g} ext_rho_residual={res:.2e}"


def _run_classify(cfg, params, mu0, out):
    from .regimes import classify
    rep = classify(params, cfg["classify"]["tie_tol"])
    out.write("regime.json", rep.to_json() + "\n")
    return rep.summary_line()


def _run_verify(cfg, params, mu0, out):
    from .regimes import verify_rate
    b = cfg["verify-rate"]
    rep = verify_rate(params, mu0, b["horizon"], tuple(b["window"]), dt=b["dt"],
                      tie_tol=b["tie_tol"])
    series = rep.details.pop("series")
    out.write("regime.json", rep.to_json() + "\n")
    out.write("tv_series.csv", _rows("time,tv", zip(series["times"], series["tv"])))
    return rep.summary_line()


def _run_mc(cfg, params, mu0, out, seed):
    from .diffusion_mc import feynman_kac_estimate, kill_clock_estimate
    b = cfg["mc"]
    rng = np.random.default_rng(seed)
    fn = feynman_kac_estimate if b["mode"] == "weight" else kill_clock_estimate
    est = fn(mu0, b["t"], b["K"], params, dt=b["dt"], rng=rng)
    out.write("histogram.csv", est.measure.to_csv(), "histogram")
    meta = est.metadata()
    meta["seed"] = seed
    out.json("ensemble.json", meta)
    return f"x0={est.x0:.6g} x1={est.x1:.6g} xint={est.xint:.6g} ess={est.ess:.1f}"


def _run_ibm(cfg, params, mu0, out, seed):
    import warnings
    from .ibm import IbmState, ensemble_mean, trajectories_csv
    b = cfg["ibm"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rates = ibm_rates_from_limit(params, b["n"], b["m"], b["gamma_G_bar"])
    rng = np.random.default_rng(seed)
    # each group's composition is drawn independently from mu0
    from .diffusion_mc import sample_initial
    state = IbmState.from_fractions(rates, sample_initial(mu0, rates.m, rng))
    mean, trajs = ensemble_mean(state, b["times"], b["replicates"], seed=seed,
                                N=params.grid_size)
    out.write("trajectories.csv", trajectories_csv(trajs), "ibm")
    out.write("mean_final.csv", mean[-1].to_csv(), "histogram")
    out.json("ibm.json", {"seeds": [t.seed for t in trajs], "status": [t.status for t in trajs],
                          "s_bar": rates.s_bar, "strong_selection": rates.strong_selection,
                          "warnings": [str(w.message) for w in caught]})
    return f"replicates={len(trajs)} mean<x>={np.mean([t.mean_fraction()[-1] for t in trajs]):.6g}"


def _run_invasion(cfg, params, mu0, out, seed):
    from .invasion import InvasionSetting, invasion_mc, invasion_probs, selection_direction
    b = cfg["invasion"]
    st = InvasionSetting(params, b["n"], b["m"], b["gamma_G"])
    probs = invasion_probs(st)
    direction, margin = selection_direction(st, override=True)
    report = {"probs": probs.to_dict(), "direction": direction, "margin": margin,
              "s_over_gamma": st.a, "r1_over_gammaG": st.b}
    if b["replicates"]:
        horizon = math.inf if b["horizon"] is None else float(b["horizon"])
        mc = invasion_mc(st, b["direction"], b["replicates"], horizon, seed)
        report["mc"] = mc.__dict__
    out.json("invasion.json", report)
    return f"pi_DC={probs.pi_DC:.6g} pi_CD={probs.pi_CD:.6g} direction={direction}"


def _run_scan(cfg, params, mu0, out, seed):
    b = cfg["scan"]
    values = _scan_values(b)
    rows = []
    par = b["parameter"]
    if par == "gamma":
        from .regimes import scan_gamma
        table, inc = scan_gamma(params, values)
        rows = [("gamma", r.value, r.rho_alpha, r.rho_min, r.sign, r.error) for r in table]
        extra = {"tail_increasing": inc}
    elif par == "R":
        from .regimes import scan_r_scale
        table, crit = scan_r_scale(params, params.r, values)
        rows = [("R", r.value, r.rho_alpha, r.rho_min, r.sign, r.error) for r in table]
        extra = {"critical": crit}
    elif par == "eta":
        return _truncation_sweep(cfg, params, mu0, out, values)
    else:
        from .invasion import InvasionSetting, sweep_csv
        inv = cfg.get("invasion") or DEFAULTS["invasion"]
        settings = [InvasionSetting(params.replace(s=float(v) * params.gamma), inv["n"], inv["m"],
                                    inv["gamma_G"]) for v in values]
        out.write("scan.csv", sweep_csv(settings), "invasion_sweep")
        return f"{len(settings)} invasion points"
    if all(r[5] for r in rows):
        from .errors import ConvergenceFailure
        raise ConvergenceFailure("every scan point failed")
    out.write("scan.csv", _rows(SCHEMAS["scan"], rows), "scan")
    out.json("scan.json", extra)
    return f"{len(rows)} points; " + ", ".join(f"{k}={v}" for k, v in extra.items())


def _truncation_sweep(cfg, params, mu0, out, etas):
    from .errors import PrecisionLoss
    from .pde import truncated_evolve
    b = cfg.get("figure") or DEFAULTS["figure"]
    rows = []
    for eta in etas:
        try:
            ev = truncated_evolve(mu0, float(eta), b["t"], b["dt"], params,
                                  record_every=b["record_every"])
            rows.append((float(eta), ev.first_time("x1", 0.5), float(ev.truncated.sum()), ""))
        except PrecisionLoss as exc:
            rows.append((float(eta), math.nan, math.nan, str(exc)))
    out.write("truncation.csv", _rows(SCHEMAS["truncation"], rows), "truncation")
    return "; ".join(f"eta={r[0]:g}: t(x1>1/2)={r[1]:g}" for r in rows)


def _run_figure(cfg, params, mu0, out, seed):
    from .pde import evolve_normalized
    from .qsd import solve_qsd
    from .regimes import find_plateaus, instantaneous_decay
    b = cfg["figure"]
    name = b["name"]
    if name == "qsd-profile":
        sol = solve_qsd(params)
        out.write("profiles.csv", sol.profiles_csv(), "profiles")
        out.write("qsd.json", sol.to_json() + "\n")
        return f"rho_alpha={sol.rho_alpha:.6g} mean={sol.mean():.4g}"
    if name == "truncation":
        return _truncation_sweep(cfg, params, mu0, out, b["etas"])
    keep = name == "u-turn"
    ev = evolve_normalized(mu0, b["t"], b["dt"], params, record_every=b["record_every"],
                           keep_profiles=keep)
    if name == "log-proportions":
        tm, rate = instantaneous_decay(ev)
        rate = np.concatenate(([math.nan], rate))
        with np.errstate(divide="ignore"):
            rows = zip(ev.times, np.log(ev.x0), np.log(ev.x1), np.log(ev.xint), rate)
        out.write("log_proportions.csv", _rows(SCHEMAS["log_series"], rows), "log_series")
        plateaus = find_plateaus(tm, rate[1:], 0.05, 0.05 * b["t"])
        out.json("plateaus.json", {"plateaus": plateaus})
        return f"{len(plateaus)} decay-rate plateaus: " + ", ".join(f"{p[2]:.4g}" for p in plateaus)
    means = ev.interior_mean()
    out.write("u_turn.csv", _rows(SCHEMAS["u_turn"], zip(ev.times, means, ev.xint)), "u_turn")
    snaps = []
    for ts in b["snapshots"]:
        i = int(np.argmin(np.abs(ev.times - ts)))
        snaps.extend((ev.times[i], x, m) for x, m in zip(params.grid.midpoints, ev.profiles[i]))
    if snaps:
        out.write("snapshots.csv", _rows("time,location,mass", snaps))
    i = int(np.argmin(means))
    return f"interior mean {means[0]:.4g} -> min {means[i]:.4g} at t={ev.times[i]:g} -> {means[-1]:.4g}"


_RUNNERS = {"pde": _run_pde, "qsd": _run_qsd, "classify": _run_classify,
            "verify-rate": _run_verify}
_SEEDED = {"mc": _run_mc, "ibm": _run_ibm, "invasion": _run_invasion, "scan": _run_scan,
           "figure": _run_figure}


def run(cfg: dict, out_dir=None, seed_override: int | None = None, threads: int = 1) -> dict:
    """Execute a validated config; returns the manifest (also written to disk)."""
    seed = cfg["seed"] if seed_override is None else seed_override
    params = _params(cfg["params"])
    mu0 = _initial(cfg["initial"], params.grid_size)
    out = _Outputs(Path(out_dir or cfg["output"]))
    kind = cfg["kind"]
    if kind in _RUNNERS:
        summary = _RUNNERS[kind](cfg, params, mu0, out)
    else:
        summary = _SEEDED[kind](cfg, params, mu0, out, seed)
    stored = dict(cfg)
    stored["seed"] = seed
    manifest = {"kind": kind, "summary": summary, "config": stored, "seed": seed,
                "threads": threads, "schema_version": SCHEMA_VERSION,
                "versions": versions(), "files": dict(sorted(out.files.items()))}
    out.json("manifest.json", manifest)
    return manifest


def sweep(cfg: dict, out_dir=None, seed_override=None, threads: int = 1) -> dict:
    """Like :func:`run` but requires a scan block (kind scan, or figure with etas)."""
    if cfg["kind"] != "scan":
        raise ConfigError("kind", "sweep needs kind: scan")
    return run(cfg, out_dir, seed_override, threads)
