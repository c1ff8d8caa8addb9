"""Long-time regime classification and rate verification.

After relabeling so that rho1 <= rho0, the ordering of (rho0, rho1,
rho_alpha) falls into one of seven cases, each with a predicted limit and a
predicted form for the speed of convergence:

    A  rho1 < rho0 < ra      delta_1          exp, rho0 - rho1
    B  rho1 < ra < rho0      delta_1          exp, ra - rho1
    C  rho1 < rho0 = ra      delta_1          (1+t) exp, rho0 - rho1
    D  rho0 = rho1 < ra      x d0 + (1-x) d1  exp, ra - rho1
    E  ra < rho0, rho1       alpha^{0,1}      exp, min(rho0, rho1) - ra
    F  rho1 = ra < rho0      delta_1          1/t
    G  rho0 = rho1 = ra      x d0 + (1-x) d1  1/t, x = p0/(p0+p1)
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConvergenceFailure, InvalidParameters, WindowTooLate
from .model import DecomposedMeasure, ModelParams, RateFunction, tv_distance
from .pde import evolve_normalized
from .qsd import QsdSolution, composite_alpha01, composite_alpha1, limit_mixture_x, solve_qsd

TIE_TOL = 1e-3
TV_FLOOR = 1e-12

_TABLE = {
    "A": ("delta1", "exp"),
    "B": ("delta1", "exp"),
    "C": ("delta1", "(1+t)exp"),
    "D": ("mixture", "exp"),
    "E": ("alpha01", "exp"),
    "F": ("delta1", "1/t"),
    "G": ("mixture", "1/t"),
}


def _eq(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(abs(a), abs(b), 1.0)


@dataclass
class RegimeReport:
    rho0: float
    rho1: float
    rho_alpha: float
    swapped: bool
    regime: str
    limit: str
    rate_form: str
    lam: float
    fitted_rate: float = math.nan
    r2: float = math.nan
    tt_ratio: float = math.nan
    verdict: str = "unverified"
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)

    def summary_line(self) -> str:
        fit = "-" if math.isnan(self.fitted_rate) else f"{self.fitted_rate:.5g}"
        return (f"{self.regime:<2} {self.limit:<8} {self.rate_form:<9} "
                f"lam={self.lam:<10.5g} fit={fit:<10} verdict={self.verdict}")


def classify_rates(rho0: float, rho1: float, rho_alpha: float,
                   tie_tol: float = TIE_TOL) -> RegimeReport:
    """Regime of a bare rate triple (see the module table)."""
    swapped = rho1 > rho0 and not _eq(rho0, rho1, tie_tol)
    if swapped:
        rho0, rho1 = rho1, rho0
    ra = rho_alpha
    e01 = _eq(rho0, rho1, tie_tol)
    e0a = _eq(rho0, ra, tie_tol)
    e1a = _eq(rho1, ra, tie_tol)
    if e01 and e0a and e1a:
        reg, lam = "G", 0.0
    elif e01:
        reg, lam = ("D", ra - rho1) if ra > rho1 else ("E", min(rho0, rho1) - ra)
    elif e1a:
        reg, lam = "F", 0.0
    elif e0a:
        reg, lam = "C", rho0 - rho1
    elif ra < rho1:
        reg, lam = "E", min(rho0, rho1) - ra
    elif ra < rho0:
        reg, lam = "B", ra - rho1
    else:
        reg, lam = "A", rho0 - rho1
    limit, form = _TABLE[reg]
    return RegimeReport(rho0=rho0, rho1=rho1, rho_alpha=ra, swapped=swapped, regime=reg,
                        limit=limit, rate_form=form, lam=float(lam))


def classify(params: ModelParams, tie_tol: float = TIE_TOL,
             sol: QsdSolution | None = None) -> RegimeReport:
    sol = sol or solve_qsd(params)
    rep = classify_rates(params.rho0, params.rho1, sol.rho_alpha, tie_tol)
    rep.details.update({"p0": sol.p0, "p1": sol.p1, "p_soft": sol.p_soft,
                        "tie_tol": tie_tol})
    return rep


def predicted_limit(rep: RegimeReport, params: ModelParams, mu0: DecomposedMeasure,
                    sol: QsdSolution) -> DecomposedMeasure:
    """The limit measure in the original (unswapped) orientation."""
    N = params.grid_size
    zeros = np.zeros(N)
    if rep.limit == "delta1":
        return DecomposedMeasure(1.0, 0.0, zeros) if rep.swapped else DecomposedMeasure(0.0, 1.0, zeros)
    if rep.limit == "alpha01":
        return composite_alpha01(sol, params)[0]
    if rep.regime == "G":
        x = sol.p0 / (sol.p0 + sol.p1)
    else:
        x = limit_mixture_x(mu0, params, sol, tie_rtol=rep.details.get("tie_tol", TIE_TOL))
    return DecomposedMeasure(x, 1.0 - x, zeros)


def _linfit(t, y):
    A = np.column_stack([t, np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def fit_rate(times, tv, form: str, window=(0.5, 1.0)):
    """Fit the decay of ``tv`` over the window fraction of the time span.

    Returns ``(rate, r2, tt_ratio)``; for exponential forms ``rate`` is the
    fitted lambda, for 1/t it is minus the log-log slope and ``tt_ratio`` is
    max/min of t*tv over the window.
    """
    times = np.asarray(times, dtype=float)
    tv = np.asarray(tv, dtype=float)
    T = times[-1]
    sel = (times >= window[0] * T) & (times <= window[1] * T) & (times > 0)
    if sel.sum() < 3:
        raise InvalidParameters("fit window holds fewer than 3 samples")
    t, y = times[sel], tv[sel]
    if np.any(y <= TV_FLOOR):
        raise WindowTooLate(f"distance hit the numerical floor {TV_FLOOR:g} inside the fit window")
    if form == "1/t":
        slope, r2 = _linfit(np.log(t), np.log(y))
        tt = t * y
        return -slope, r2, float(tt.max() / tt.min())
    ly = np.log(y)
    if form == "(1+t)exp":
        ly = ly - np.log1p(t)
    slope, r2 = _linfit(t, ly)
    return -slope, r2, math.nan


def default_dt(params: ModelParams, rates, horizon: float) -> float:
    top = max(max(rates), abs(params.s), 1e-12)
    return min(0.02 / top, horizon / 500.0)


def verify_rate(params: ModelParams, mu0: DecomposedMeasure, horizon: float,
                fit_window=(0.5, 1.0), dt: float | None = None,
                tie_tol: float = TIE_TOL, rate_rtol: float = 0.10,
                r2_min: float = 0.99, tt_max: float = 3.0,
                sol: QsdSolution | None = None) -> RegimeReport:
    """Run the normalized flow and fit TV(mu_t, predicted limit)."""
    sol = sol or solve_qsd(params)
    rep = classify(params, tie_tol, sol)
    limit = predicted_limit(rep, params, mu0, sol)
    dt = dt or default_dt(params, (params.rho0, params.rho1, sol.rho_alpha), horizon)
    if rep.lam > 0 and rep.lam * fit_window[0] * horizon < 5:
        warnings.warn("fit window starts before lam*t = 5; transients may bias the fit",
                      stacklevel=2)
    nsteps = int(math.ceil(horizon / dt))
    lv = limit.to_vector()
    # interior profiles are only needed when the limit itself has interior mass
    ev = evolve_normalized(mu0, horizon, dt, params, record_every=max(1, nsteps // 400),
                           keep_profiles=limit.xint > 0)
    if limit.xint > 0:
        tv = np.array([0.5 * (abs(a - lv[0]) + abs(b - lv[-1])
                              + np.abs(xi * p - lv[1:-1]).sum())
                       for a, b, xi, p in zip(ev.x0, ev.x1, ev.xint, ev.profiles)])
    else:
        tv = 0.5 * (np.abs(ev.x0 - lv[0]) + np.abs(ev.x1 - lv[-1]) + ev.xint)
    rate, r2, tt = fit_rate(ev.times, tv, rep.rate_form, fit_window)
    rep.fitted_rate, rep.r2, rep.tt_ratio = rate, r2, tt
    if rep.rate_form == "1/t":
        ok = tt <= tt_max
    else:
        ok = abs(rate - rep.lam) <= rate_rtol * abs(rep.lam) and r2 >= r2_min
    rep.verdict = "pass" if ok else "fail"
    rep.details.update({"horizon": horizon, "dt": ev.dt, "window": list(fit_window),
                        "final_tv": float(tv[-1]), "limit_x0": limit.x0,
                        "limit_x1": limit.x1})
    rep.details["series"] = {"times": ev.times.tolist(), "tv": tv.tolist()}
    return rep


def conditional_ratio(params: ModelParams, mu0: DecomposedMeasure, horizon: float,
                      dt: float | None = None, sol: QsdSolution | None = None):
    """Final x^xi_t / x^0_t of the flow and the prediction y_alpha / y0.

    The prediction applies when rho_alpha < rho0 (mass leaving alpha
    through 0 then accumulates at a slower rate than alpha itself decays).
    """
    sol = sol or solve_qsd(params)
    _, (y0, ya) = composite_alpha1(sol, params)
    dt = dt or default_dt(params, (params.rho0, params.rho1, sol.rho_alpha), horizon)
    ev = evolve_normalized(mu0, horizon, dt, params)
    return float(ev.xint[-1] / ev.x0[-1]), ya / y0


@dataclass
class ScanRow:
    value: float
    rho_alpha: float
    rho_min: float
    sign: int
    error: str = ""


def scan_gamma(base: ModelParams, gammas) -> tuple[list, bool]:
    """rho_alpha along a gamma grid; also whether the tail (last 3 points) increases."""
    g = np.asarray(gammas, dtype=float)
    if np.any(g <= 0) or np.any(np.diff(g) <= 0):
        raise InvalidParameters("gamma grid must be positive and ascending")
    rows = []
    for gv in g:
        p = base.replace(gamma=float(gv))
        try:
            ra = solve_qsd(p).rho_alpha
            rows.append(ScanRow(float(gv), ra, min(p.rho0, p.rho1), int(np.sign(ra - min(p.rho0, p.rho1)))))
        except ConvergenceFailure as exc:
            rows.append(ScanRow(float(gv), math.nan, min(p.rho0, p.rho1), 0, str(exc)))
    tail = [r.rho_alpha for r in rows[-3:]]
    increasing = len(tail) >= 2 and all(np.isfinite(tail)) and bool(np.all(np.diff(tail) > 0))
    return rows, increasing


def _margin(base: ModelParams, shape: RateFunction, R: float):
    p = base.replace(r=shape.scaled(R))
    ra = solve_qsd(p).rho_alpha
    m = min(p.rho0, p.rho1)
    return ra - m, ra, m


def scan_r_scale(base: ModelParams, shape: RateFunction, R_grid, rtol: float = 1e-3):
    """Scan r = R * shape; bracket and bisect the sign changes of rho_alpha - min(rho0, rho1).

    Returns ``(rows, critical)`` with ``critical`` a list of (R_lo, R_hi, R_mid).
    """
    R = np.asarray(R_grid, dtype=float)
    if np.any(np.diff(R) <= 0):
        raise InvalidParameters("R grid must be ascending")
    rows = []
    for Rv in R:
        try:
            d, ra, m = _margin(base, shape, float(Rv))
            rows.append(ScanRow(float(Rv), ra, m, int(np.sign(d))))
        except ConvergenceFailure as exc:
            rows.append(ScanRow(float(Rv), math.nan, math.nan, 0, str(exc)))
    critical = []
    for a, b in zip(rows, rows[1:]):
        if a.sign * b.sign < 0:
            lo, hi, slo = a.value, b.value, a.sign
            while hi - lo > rtol * max(abs(hi), 1e-12):
                mid = 0.5 * (lo + hi)
                d = _margin(base, shape, mid)[0]
                if np.sign(d) == slo:
                    lo = mid
                else:
                    hi = mid
            critical.append((lo, hi, 0.5 * (lo + hi)))
    return rows, critical


def tune_scale(make_params, target, lo: float, hi: float, atol: float = 1e-13,
               max_iter: int = 200):
    """Bisect R on [lo, hi] until rho_alpha(R) = target(params(R)) on the grid.

    ``make_params(R)`` builds the configuration and ``target(params)`` the
    rate rho_alpha must match (e.g. rho1). Returns the tuned params and
    the solver's QsdSolution. Used to engineer the tie regimes.
    """
    def f(R):
        p = make_params(R)
        sol = solve_qsd(p, tol=1e-12)
        return sol.rho_alpha - target(p), p, sol

    flo, fhi = f(lo)[0], f(hi)[0]
    if flo * fhi > 0:
        raise InvalidParameters("tuning bracket does not straddle the tie")
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        d, p, sol = f(mid)
        best = (p, sol)
        if abs(d) <= atol or hi - lo <= 1e-15 * max(abs(mid), 1.0):
            break
        if (d < 0) == (flo < 0):
            lo, flo = mid, d
        else:
            hi = mid
    return best


def instantaneous_decay(ev, series: str = "xint") -> tuple[np.ndarray, np.ndarray]:
    """-d/dt log of the unnormalized mass of a component, at sample midpoints."""
    y = np.log(np.maximum(getattr(ev, series), 1e-300)) + ev.log_mass
    t = ev.times
    return 0.5 * (t[1:] + t[:-1]), -np.diff(y) / np.diff(t)


def find_plateaus(t, rate, rtol: float = 0.05, min_span: float = 0.0):
    """Maximal runs where the decay rate stays within rtol of the run's start."""
    out = []
    i = 0
    while i < len(rate):
        j = i
        ref = rate[i]
        while j + 1 < len(rate) and abs(rate[j + 1] - ref) <= rtol * max(abs(ref), 1e-12):
            j += 1
        if t[j] - t[i] >= min_span and j > i:
            out.append((float(t[i]), float(t[j]), float(np.mean(rate[i:j + 1]))))
        i = j + 1
    return out
