"""Monte Carlo route: killed Wright-Fisher paths and Feynman-Kac weights.

Paths of dX = -s X(1-X) dt + sqrt(2 gamma X(1-X)) dB are simulated with
Euler-Maruyama. Boundary hits are declared below ``EPS_ABS`` from 0 or 1
and the path is pinned there afterwards. The penalty integral of rho along
the path is accumulated with the trapezoid rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeights, InvalidParameters
from .model import DecomposedMeasure, ModelParams

EPS_ABS = 1e-6


def default_dt(params: ModelParams) -> float:
    """Step with gamma*dt <= 1e-3 and drift/penalty increments <= 1e-2."""
    rate = max(abs(params.s), float(params.rho.max()), params.rho0, params.rho1, 1e-12)
    return min(1e-3 / params.gamma, 1e-2 / rate)


def _check_dt(dt: float, params: ModelParams):
    if not dt > 0:
        raise InvalidParameters("dt must be > 0")
    if dt >= 1.0 / (4.0 * params.gamma):
        raise InvalidParameters(f"dt={dt:g} >= 1/(4 gamma); Euler-Maruyama step too coarse")


@dataclass
class WfPath:
    times: np.ndarray
    positions: np.ndarray
    penalty_integral: np.ndarray
    tau0: float
    tau1: float
    kill_time: float = math.inf


@dataclass
class Ensemble:
    """Terminal state of K independent paths at time ``t``."""

    x: np.ndarray
    penalty: np.ndarray
    tau0: np.ndarray
    tau1: np.ndarray
    hit_low: np.ndarray | None
    t: float
    dt: float


def simulate_ensemble(x0, params: ModelParams, dt: float, horizon: float,
                      rng: np.random.Generator, low: float | None = None,
                      on_step=None) -> Ensemble:
    """Advance all starting points in ``x0`` to ``horizon``.

    ``low`` additionally flags paths that ever reach ``x <= low``;
    ``on_step(k, t, x, penalty)`` is called after every step.
    """
    _check_dt(dt, params)
    x = np.array(x0, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise InvalidParameters("starting points must lie in [0, 1]")
    K = x.size
    nsteps = int(math.ceil(horizon / dt - 1e-9)) if horizon > 0 else 0
    dt = horizon / nsteps if nsteps else dt
    s, g = params.s, params.gamma
    x[x <= EPS_ABS] = 0.0
    x[x >= 1 - EPS_ABS] = 1.0
    tau0 = np.where(x == 0.0, 0.0, np.inf)
    tau1 = np.where(x == 1.0, 0.0, np.inf)
    hit = (x <= low) if low is not None else None
    pen = np.zeros(K)
    rho_old = params.rho_at(x)
    sq = math.sqrt(2.0 * g * dt)
    for k in range(1, nsteps + 1):
        b = x * (1.0 - x)
        x = x - s * b * dt + sq * np.sqrt(b) * rng.standard_normal(K)
        np.clip(x, 0.0, 1.0, out=x)
        t = k * dt
        lo = (x <= EPS_ABS) & np.isinf(tau0) & np.isinf(tau1)
        hi = (x >= 1 - EPS_ABS) & np.isinf(tau0) & np.isinf(tau1)
        x[x <= EPS_ABS] = 0.0
        x[x >= 1 - EPS_ABS] = 1.0
        tau0[lo] = t
        tau1[hi] = t
        if hit is not None:
            hit |= x <= low
        rho_new = params.rho_at(x)
        pen += 0.5 * (rho_old + rho_new) * dt
        rho_old = rho_new
        if on_step is not None:
            on_step(k, t, x, pen)
    return Ensemble(x=x, penalty=pen, tau0=tau0, tau1=tau1, hit_low=hit,
                    t=horizon, dt=dt)


def simulate_path(x0: float, params: ModelParams, dt: float, horizon: float,
                  rng: np.random.Generator, kill_clock: bool = False) -> WfPath:
    """One path with its full trajectory and penalty integral."""
    xs, pens = [float(x0)], [0.0]

    def keep(k, t, x, pen):
        xs.append(float(x[0]))
        pens.append(float(pen[0]))

    ens = simulate_ensemble([x0], params, dt, horizon, rng, on_step=keep)
    times = np.linspace(0.0, horizon, len(xs))
    pens = np.array(pens)
    kill = math.inf
    if kill_clock:
        e = rng.exponential()
        idx = np.flatnonzero(pens >= e)
        kill = float(times[idx[0]]) if idx.size else math.inf
    return WfPath(times=times, positions=np.array(xs), penalty_integral=pens,
                  tau0=float(ens.tau0[0]), tau1=float(ens.tau1[0]), kill_time=kill)


def sample_initial(mu0: DecomposedMeasure, K: int, rng: np.random.Generator) -> np.ndarray:
    """K starting points drawn from mu0 (uniform inside each cell)."""
    if K < 1:
        raise InvalidParameters("K must be >= 1")
    probs = mu0.to_vector() / mu0.total
    counts = rng.multinomial(K, probs)
    N = mu0.N
    out = [np.zeros(counts[0])]
    cells = np.repeat(np.arange(N), counts[1:-1])
    out.append((cells + rng.random(cells.size)) / N)
    out.append(np.ones(counts[-1]))
    x = np.concatenate(out)
    rng.shuffle(x)
    return x


def _histogram(x: np.ndarray, w: np.ndarray, N: int) -> DecomposedMeasure:
    at0 = x == 0.0
    at1 = x == 1.0
    inner = ~(at0 | at1)
    cells = np.minimum((x[inner] * N).astype(int), N - 1)
    interior = np.bincount(cells, weights=w[inner], minlength=N)
    return DecomposedMeasure(float(w[at0].sum()), float(w[at1].sum()), interior)


@dataclass
class FkEstimate:
    measure: DecomposedMeasure
    survival: float
    survival_se: float
    ess: float
    K: int
    dt: float
    mode: str

    @property
    def x0(self) -> float:
        return self.measure.x0

    @property
    def x1(self) -> float:
        return self.measure.x1

    @property
    def xint(self) -> float:
        return self.measure.xint

    def metadata(self) -> dict:
        return {"K": self.K, "dt": self.dt, "mode": self.mode,
                "survival": self.survival, "survival_se": self.survival_se,
                "ess": self.ess, "x0": self.x0, "x1": self.x1, "xint": self.xint}


def feynman_kac_estimate(mu0: DecomposedMeasure, t: float, K: int, params: ModelParams,
                         dt: float | None = None,
                         rng: np.random.Generator | None = None) -> FkEstimate:
    """Weighted empirical estimate of mu_t with weights Z_t = exp(-penalty)."""
    rng = rng if rng is not None else np.random.default_rng()
    dt = dt or default_dt(params)
    ens = simulate_ensemble(sample_initial(mu0, K, rng), params, dt, t, rng)
    z = np.exp(-ens.penalty)
    total = z.sum()
    if not total > 1e-300:
        raise DegenerateWeights("all Feynman-Kac weights vanished")
    meas = _histogram(ens.x, z / total, params.grid_size)
    ess = float(total ** 2 / (z ** 2).sum())
    return FkEstimate(measure=meas, survival=float(z.mean()),
                      survival_se=float(z.std(ddof=1) / math.sqrt(K)) if K > 1 else math.nan,
                      ess=ess, K=K, dt=ens.dt, mode="weight")


def kill_clock_estimate(mu0: DecomposedMeasure, t: float, K: int, params: ModelParams,
                        dt: float | None = None,
                        rng: np.random.Generator | None = None) -> FkEstimate:
    """Empirical law of the paths surviving an independent Exp(1) kill clock."""
    rng = rng if rng is not None else np.random.default_rng()
    dt = dt or default_dt(params)
    ens = simulate_ensemble(sample_initial(mu0, K, rng), params, dt, t, rng)
    alive = ens.penalty < rng.exponential(size=K)
    n = int(alive.sum())
    frac = n / K
    if n == 0:
        raise DegenerateWeights(f"no survivors (survival fraction {frac:g})")
    w = alive / n
    meas = _histogram(ens.x, w.astype(float), params.grid_size)
    return FkEstimate(measure=meas, survival=frac,
                      survival_se=math.sqrt(frac * (1 - frac) / K), ess=float(n),
                      K=K, dt=ens.dt, mode="kill")


def kimura_fixation_prob(x, s: float, gamma: float):
    """P_x(tau_1 < tau_0) = (exp(s x/gamma) - 1) / (exp(s/gamma) - 1)."""
    if gamma <= 0:
        raise InvalidParameters("gamma must be > 0")
    x = np.asarray(x, dtype=float)
    a = s / gamma
    if abs(a) < 1e-8:
        out = x.copy()
    elif a > 0:
        out = np.exp(a * (x - 1)) * np.expm1(-a * x) / np.expm1(-a)
    else:
        out = np.expm1(a * x) / np.expm1(a)
    return float(out) if out.ndim == 0 else out


def wilson_interval(k: int, n: int, z: float = 1.959963984540054):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        return (0.0, 1.0)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass
class EscapeEstimate:
    estimate: float
    ci: tuple
    survivors: int
    unconditioned: float
    K: int


def conditional_escape_prob(eps: float, t: float, params: ModelParams, K: int,
                            rng: np.random.Generator | None = None,
                            dt: float | None = None) -> EscapeEstimate:
    """P_{1-eps}(t < tau_eps | t < soft-kill time), by the kill-clock ratio."""
    if not 0 < eps <= 0.5:
        raise InvalidParameters("eps must lie in (0, 1/2]")
    if 1 - eps <= eps:
        return EscapeEstimate(0.0, (0.0, 0.0), K, 0.0, K)
    rng = rng if rng is not None else np.random.default_rng()
    dt = dt or default_dt(params)
    ens = simulate_ensemble(np.full(K, 1.0 - eps), params, dt, t, rng, low=eps)
    alive = ens.penalty < rng.exponential(size=K)
    n = int(alive.sum())
    if n == 0:
        raise DegenerateWeights("no path survived the kill clock")
    k = int((alive & ~ens.hit_low).sum())
    return EscapeEstimate(estimate=k / n, ci=wilson_interval(k, n), survivors=n,
                          unconditioned=float((~ens.hit_low).mean()), K=K)
