"""Exact Gillespie simulation of the two-level Moran process.

Groups are exchangeable, so the state is the histogram ``counts[k]`` of
groups holding exactly k type-C individuals (k = 0..n).

Individual events: a group with k C's loses one C at rate
gI*k*(1-k/n)*(1+s_bar) and gains one at rate gI*k*(1-k/n).
Group events: a group of composition j reproduces at rate
gG*(1+r_bar(j/n)) and its copy replaces a uniformly chosen group (possibly
itself, which is a null move).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .diffusion_mc import wilson_interval
from .errors import AbsorbingState, InvalidParameters
from .model import DEFAULT_GRID, DecomposedMeasure, IbmRates

ALIVE, FIXED0, FIXED1 = 0, 1, 2


@dataclass
class IbmState:
    rates: IbmRates
    counts: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64).copy()
        if self.counts.shape != (self.rates.n + 1,):
            raise InvalidParameters(f"counts must have n+1 = {self.rates.n + 1} entries")
        if np.any(self.counts < 0) or self.counts.sum() != self.rates.m:
            raise InvalidParameters("counts must be nonnegative and sum to m")

    @classmethod
    def uniform_composition(cls, rates: IbmRates, k: int) -> "IbmState":
        """All m groups hold k C's."""
        c = np.zeros(rates.n + 1, dtype=np.int64)
        c[k] = rates.m
        return cls(rates, c)

    @classmethod
    def single_mutant(cls, rates: IbmRates, mutant: str = "C") -> "IbmState":
        """One mutant individual in one group, everything else resident."""
        n, m = rates.n, rates.m
        c = np.zeros(n + 1, dtype=np.int64)
        if mutant == "C":
            c[0], c[1] = m - 1, 1
        elif mutant == "D":
            c[n], c[n - 1] = m - 1, 1
        else:
            raise InvalidParameters("mutant must be 'C' or 'D'")
        return cls(rates, c)

    @classmethod
    def from_fractions(cls, rates: IbmRates, fractions) -> "IbmState":
        """Per-group C fractions, rounded to the nearest k/n."""
        f = np.asarray(fractions, dtype=float)
        if f.size != rates.m:
            raise InvalidParameters("need one fraction per group")
        k = np.clip(np.rint(f * rates.n).astype(np.int64), 0, rates.n)
        return cls(rates, np.bincount(k, minlength=rates.n + 1))

    @property
    def absorbed(self) -> int:
        """FIXED0 / FIXED1 when absorbed, else ALIVE."""
        if self.counts[0] == self.rates.m:
            return FIXED0
        if self.counts[-1] == self.rates.m:
            return FIXED1
        return ALIVE

    def mean_fraction(self) -> float:
        return float(self.counts @ np.arange(self.rates.n + 1)) / (self.rates.n * self.rates.m)

    def measure(self, N: int = DEFAULT_GRID) -> DecomposedMeasure:
        return counts_to_measure(self.counts, N)


@dataclass
class RateTable:
    down: np.ndarray
    up: np.ndarray
    group_parent: np.ndarray

    @property
    def individual_total(self) -> float:
        return float(self.down.sum() + self.up.sum())

    @property
    def group_total(self) -> float:
        return float(self.group_parent.sum())

    @property
    def total(self) -> float:
        return self.individual_total + self.group_total

    def channels(self) -> np.ndarray:
        """Flat channel vector [down_0..down_n, up_0..up_n, parent_0..parent_n]."""
        return np.concatenate([self.down, self.up, self.group_parent])


def event_rates(state: IbmState) -> RateTable:
    r = state.rates
    k = np.arange(r.n + 1)
    w = state.counts * k * (1.0 - k / r.n)
    return RateTable(down=r.gamma_I_bar * w * (1.0 + r.s_bar),
                     up=r.gamma_I_bar * w,
                     group_parent=r.gamma_G_bar * state.counts * (1.0 + r.r_bar_table()))


def step(state: IbmState, rng: np.random.Generator) -> tuple[IbmState, float]:
    """One Gillespie event; returns the new state and the waiting time."""
    if state.absorbed != ALIVE:
        raise AbsorbingState("all groups are fixed for the same type")
    table = event_rates(state)
    ch = table.channels()
    total = ch.sum()
    if total <= 0:
        raise AbsorbingState("total event rate is zero")
    wait = rng.exponential(1.0 / total)
    idx = int(rng.choice(ch.size, p=ch / total))
    n1 = state.rates.n + 1
    c = state.counts.copy()
    if idx < n1:
        c[idx] -= 1
        c[idx - 1] += 1
    elif idx < 2 * n1:
        k = idx - n1
        c[k] -= 1
        c[k + 1] += 1
    else:
        parent = idx - 2 * n1
        victim = int(rng.choice(n1, p=state.counts / state.rates.m))
        c[victim] -= 1
        c[parent] += 1
    return IbmState(state.rates, c, state.time + wait), wait


@njit(cache=True)
def _gillespie(counts, n, m, gI, sbar, gG, birth, horizon, sample_times, out):
    """Advance ``counts`` in place to ``horizon`` (may be inf).

    Writes the state at each sample time into ``out`` and returns
    (final time, status, number of events).
    """
    t = 0.0
    ns = sample_times.size
    nxt = 0
    w = np.empty(n + 1)
    g = np.empty(n + 1)
    W = 0.0
    G = 0.0
    for k in range(n + 1):
        w[k] = counts[k] * k * (1.0 - k / n)
        g[k] = counts[k] * birth[k]
        W += w[k]
        G += g[k]
    p_down = (1.0 + sbar) / (2.0 + sbar)
    events = 0
    while True:
        status = 0
        if counts[0] == m:
            status = 1
        elif counts[n] == m:
            status = 2
        rate_i = gI * (2.0 + sbar) * W
        rate_g = gG * G
        total = rate_i + rate_g
        if status != 0 or total <= 0.0:
            while nxt < ns:
                out[nxt, :] = counts
                nxt += 1
            return t, status, events
        t_new = t + np.random.exponential(1.0 / total)
        while nxt < ns and sample_times[nxt] < t_new:
            if sample_times[nxt] > horizon:
                break
            out[nxt, :] = counts
            nxt += 1
        if t_new > horizon:
            while nxt < ns:
                out[nxt, :] = counts
                nxt += 1
            return horizon, 0, events
        t = t_new
        events += 1
        u = np.random.random() * total
        if u < rate_i:
            # group class by weight w, then direction
            target = np.random.random() * W
            acc = 0.0
            k = n - 1
            for j in range(1, n):
                acc += w[j]
                if target < acc:
                    k = j
                    break
            while w[k] <= 0.0:
                k -= 1
            kk = k - 1 if np.random.random() < p_down else k + 1
            touched_a, touched_b = k, kk
            counts[k] -= 1
            counts[kk] += 1
        else:
            target = np.random.random() * G
            acc = 0.0
            parent = n
            for j in range(n + 1):
                acc += g[j]
                if target < acc:
                    parent = j
                    break
            while counts[parent] == 0:
                parent -= 1
            target = np.random.random() * m
            acc = 0.0
            victim = n
            for j in range(n + 1):
                acc += counts[j]
                if target < acc:
                    victim = j
                    break
            if victim == parent:
                continue
            touched_a, touched_b = victim, parent
            counts[victim] -= 1
            counts[parent] += 1
        for k in (touched_a, touched_b):
            W -= w[k]
            G -= g[k]
            w[k] = counts[k] * k * (1.0 - k / n)
            g[k] = counts[k] * birth[k]
            W += w[k]
            G += g[k]
        # refresh the running sums now and then against drift
        if events % 100000 == 0:
            W = w.sum()
            G = g.sum()


@njit(cache=True)
def _seed(seed):
    np.random.seed(seed)


@njit(cache=True)
def _absorb_batch(init, n, m, gI, sbar, gG, birth, horizon, seeds, status, times):
    dummy_t = np.empty(0)
    dummy_o = np.empty((0, n + 1), dtype=np.int64)
    for i in range(seeds.size):
        np.random.seed(seeds[i])
        c = init.copy()
        t, st, _ = _gillespie(c, n, m, gI, sbar, gG, birth, horizon, dummy_t, dummy_o)
        status[i] = st
        times[i] = t


def _kernel_args(rates: IbmRates):
    birth = 1.0 + rates.r_bar_table()
    return (rates.n, rates.m, float(rates.gamma_I_bar), float(rates.s_bar),
            float(rates.gamma_G_bar), np.ascontiguousarray(birth, dtype=float))


def replicate_seeds(seed, replicates: int) -> np.ndarray:
    """One independent 32-bit seed per replicate, derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(replicates)
    return np.array([c.generate_state(1, dtype=np.uint32)[0] for c in children],
                    dtype=np.int64)


def spread_matrix(n: int, N: int) -> np.ndarray:
    """Map from k = 0..n onto (atom0, N cells, atom1).

    k = 0 and k = n go to the atoms; every interior k/n is spread uniformly
    over [(k - 1/2)/n, (k + 1/2)/n].
    """
    M = np.zeros((n + 1, N + 2))
    M[0, 0] = 1.0
    M[n, -1] = 1.0
    edges = np.linspace(0.0, 1.0, N + 1)
    for k in range(1, n):
        a, b = (k - 0.5) / n, (k + 0.5) / n
        overlap = np.clip(np.minimum(edges[1:], b) - np.maximum(edges[:-1], a), 0, None)
        M[k, 1:-1] = overlap / (b - a)
    return M


def counts_to_measure(counts, N: int = DEFAULT_GRID) -> DecomposedMeasure:
    counts = np.asarray(counts, dtype=float)
    M = spread_matrix(counts.size - 1, N)
    return DecomposedMeasure.from_vector(counts @ M / counts.sum())


@dataclass
class IbmTrajectory:
    times: np.ndarray
    counts: np.ndarray
    status: int
    final_time: float
    seed: int
    N: int = DEFAULT_GRID

    @property
    def measures(self) -> list:
        M = spread_matrix(self.counts.shape[1] - 1, self.N)
        m = self.counts[0].sum()
        return [DecomposedMeasure.from_vector(c @ M / m) for c in self.counts]

    def mean_fraction(self) -> np.ndarray:
        n = self.counts.shape[1] - 1
        return self.counts @ np.arange(n + 1) / (n * self.counts.sum(axis=1))


def simulate(initial: IbmState, horizon: float, sample_times, seed: int,
             N: int = DEFAULT_GRID) -> IbmTrajectory:
    """Run one replicate and snapshot the histogram at ``sample_times``.

    After absorption the absorbed state is repeated.
    """
    st = np.asarray(sample_times, dtype=float)
    if st.size and (np.any(np.diff(st) < 0) or st[0] < 0 or st[-1] > horizon):
        raise InvalidParameters("sample_times must be sorted within [0, horizon]")
    c = initial.counts.copy()
    out = np.zeros((st.size, c.size), dtype=np.int64)
    _seed(int(seed))
    t, status, _ = _gillespie(c, *_kernel_args(initial.rates), float(horizon), st, out)
    return IbmTrajectory(times=st, counts=out, status=int(status), final_time=float(t),
                         seed=int(seed), N=N)


def ensemble_mean(initial: IbmState, sample_times, replicates: int, seed=0,
                  N: int = DEFAULT_GRID) -> tuple[list, list]:
    """Replicate-averaged empirical measures at ``sample_times``."""
    seeds = replicate_seeds(seed, replicates)
    st = np.asarray(sample_times, dtype=float)
    horizon = float(st[-1]) if st.size else 0.0
    acc = np.zeros((st.size, initial.rates.n + 1))
    trajs = []
    for s in seeds:
        tr = simulate(initial, horizon, st, int(s), N)
        acc += tr.counts
        trajs.append(tr)
    M = spread_matrix(initial.rates.n, N)
    mean = [DecomposedMeasure.from_vector(c @ M / (replicates * initial.rates.m)) for c in acc]
    return mean, trajs


def trajectories_csv(trajs, path=None) -> str:
    lines = ["replicate,time,location,mass,kind"]
    for i, tr in enumerate(trajs):
        for t, mu in zip(tr.times, tr.measures):
            lines.append(f"{i},{float(t)!r},0.0,{mu.x0!r},atom0")
            for x, v in zip(mu.grid.midpoints, mu.interior):
                if v > 0:
                    lines.append(f"{i},{float(t)!r},{float(x)!r},{float(v)!r},cell")
            lines.append(f"{i},{float(t)!r},1.0,{mu.x1!r},atom1")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


@dataclass
class AbsorptionStats:
    replicates: int
    fixed0: int
    fixed1: int
    alive: int
    seeds: np.ndarray = field(repr=False)
    mean_absorption_time: float = math.nan

    def fraction(self, which: str) -> float:
        return getattr(self, which) / self.replicates

    def ci(self, which: str) -> tuple:
        return wilson_interval(getattr(self, which), self.replicates)

    def sigma(self, which: str) -> float:
        p = self.fraction(which)
        return math.sqrt(max(p * (1 - p), 1e-300) / self.replicates)

    def to_json(self) -> str:
        d = {"replicates": self.replicates, "counts": {}, "fractions": {}, "ci95": {},
             "mean_absorption_time": self.mean_absorption_time,
             "seeds": [int(s) for s in self.seeds]}
        for k in ("fixed0", "fixed1", "alive"):
            d["counts"][k] = getattr(self, k)
            d["fractions"][k] = self.fraction(k)
            d["ci95"][k] = list(self.ci(k))
        return json.dumps(d, indent=2, sort_keys=True)


def absorption_stats(initial: IbmState, replicates: int, horizon: float = math.inf,
                     seed=0) -> AbsorptionStats:
    """Fractions of replicates absorbed at all-D, all-C, or still alive at ``horizon``."""
    if replicates < 1:
        raise InvalidParameters("replicates must be >= 1")
    seeds = replicate_seeds(seed, replicates)
    status = np.zeros(replicates, dtype=np.int64)
    times = np.zeros(replicates)
    _absorb_batch(initial.counts.copy(), *_kernel_args(initial.rates), float(horizon),
                  seeds, status, times)
    done = status != ALIVE
    return AbsorptionStats(replicates=replicates, fixed0=int((status == FIXED0).sum()),
                           fixed1=int((status == FIXED1).sum()), alive=int((~done).sum()),
                           seeds=seeds,
                           mean_absorption_time=float(times[done].mean()) if done.any() else math.nan)
