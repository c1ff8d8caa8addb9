"""Parameters, the r -> rho transform, IBM scaling and measure arithmetic.

Every computational route (IBM, diffusion Monte Carlo, PDE, spectral) reads
its rates from a single :class:`ModelParams` and exchanges distributions as
:class:`DecomposedMeasure` values on a uniform grid of ``N`` cells on (0, 1)
plus two atoms at the boundaries.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GridMismatch, InvalidParameters, InvalidRateFunction

MIN_GRID = 8
DEFAULT_GRID = 200


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RateFunction:
    """Group growth-rate increment r(x) on [0, 1].

    ``kind`` is ``"linear"`` (data = (slope,)), ``"polynomial"`` (data =
    coefficients in ascending powers) or ``"tabulated"`` (data = values on a
    uniform grid including both endpoints, linearly interpolated).
    """

    kind: str
    data: tuple

    def __post_init__(self):
        data = tuple(float(v) for v in self.data)
        object.__setattr__(self, "data", data)
        if self.kind not in ("linear", "polynomial", "tabulated"):
            raise InvalidRateFunction(f"unknown rate kind {self.kind!r}")
        if self.kind == "linear" and len(data) != 1:
            raise InvalidRateFunction("linear rate takes exactly one slope")
        if self.kind == "polynomial" and len(data) < 1:
            raise InvalidRateFunction("polynomial rate needs coefficients")
        if self.kind == "tabulated" and len(data) < 2:
            raise InvalidRateFunction("tabulated rate needs >= 2 nodes")
        if not np.all(np.isfinite(data)):
            raise InvalidRateFunction("rate function has non-finite values")

    @classmethod
    def linear(cls, slope: float) -> "RateFunction":
        return cls("linear", (slope,))

    @classmethod
    def polynomial(cls, coefficients: Sequence[float]) -> "RateFunction":
        return cls("polynomial", tuple(coefficients))

    @classmethod
    def tabulated(cls, values: Sequence[float]) -> "RateFunction":
        return cls("tabulated", tuple(values))

    @classmethod
    def constant(cls, c: float = 0.0) -> "RateFunction":
        return cls("polynomial", (c,))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            out = self.data[0] * x
        elif self.kind == "polynomial":
            out = np.polynomial.polynomial.polyval(x, self.data)
        else:
            nodes = np.linspace(0.0, 1.0, len(self.data))
            out = np.interp(x, nodes, self.data)
        return out * np.ones_like(x)

    @property
    def is_linear(self) -> bool:
        """True when r(x) = r(0) + slope * x."""
        if self.kind == "linear":
            return True
        if self.kind == "polynomial":
            return all(c == 0.0 for c in self.data[2:])
        return len(self.data) == 2

    @property
    def slope(self) -> float:
        if not self.is_linear:
            raise InvalidRateFunction("slope is only defined for linear r")
        return float(self(1.0) - self(0.0))

    def scaled(self, factor: float) -> "RateFunction":
        return RateFunction(self.kind, tuple(factor * v for v in self.data))

    def shifted(self, c: float) -> "RateFunction":
        """r + c (the limiting dynamics are invariant under this)."""
        if self.kind == "tabulated":
            return RateFunction.tabulated([v + c for v in self.data])
        coeffs = self.as_polynomial().data
        return RateFunction.polynomial((coeffs[0] + c,) + coeffs[1:])

    def as_polynomial(self) -> "RateFunction":
        if self.kind == "linear":
            return RateFunction.polynomial((0.0, self.data[0]))
        if self.kind == "polynomial":
            return self
        raise InvalidRateFunction("tabulated rate has no polynomial form")

    def reflected(self) -> "RateFunction":
        """x -> r(1 - x), i.e. the rate seen after swapping the two types."""
        if self.kind == "tabulated":
            return RateFunction.tabulated(self.data[::-1])
        p = np.polynomial.Polynomial(self.as_polynomial().data)
        q = p(np.polynomial.Polynomial([1.0, -1.0]))
        return RateFunction.polynomial(tuple(q.coef))

    def to_dict(self) -> dict:
        if self.kind == "tabulated":
            return {"kind": self.kind, "values": list(self.data)}
        return {"kind": self.kind, "coefficients": list(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> "RateFunction":
        kind = d.get("kind")
        if kind == "tabulated":
            return cls(kind, tuple(d["values"]))
        if kind == "linear":
            coeffs = d.get("coefficients", d.get("slope"))
            if np.isscalar(coeffs):
                coeffs = [coeffs]
            return cls(kind, tuple(coeffs))
        return cls(kind, tuple(d["coefficients"]))


@dataclass(frozen=True)
class Grid:
    """N uniform cells on (0, 1)."""

    N: int

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) / self.N

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N + 1)


def rho_from_r(r: RateFunction, N: int = DEFAULT_GRID):
    """Killing rate rho = sup r - r on the N-cell grid.

    The supremum is taken over the cell midpoints and both endpoints.
    Returns ``(rho_midpoints, rho0, rho1, sup_r)``.
    """
    mids = Grid(N).midpoints
    vals = r(mids)
    ends = r(np.array([0.0, 1.0]))
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(ends))):
        raise InvalidRateFunction("r is not finite on [0, 1]")
    sup = max(float(vals.max()), float(ends.max()))
    rho = sup - vals
    return rho, sup - float(ends[0]), sup - float(ends[1]), sup


@dataclass(frozen=True)
class ModelParams:
    """Limiting-model parameters.

    gamma: within-group diffusion intensity; s: within-group selection (for
    s > 0 the C-proportion drifts toward 0, negative s is the relabeled
    system); r: group growth rate; grid_size: number of interior cells.
    """

    gamma: float
    s: float
    r: RateFunction
    grid_size: int = DEFAULT_GRID
    rho: np.ndarray = field(init=False, repr=False, compare=False)
    rho0: float = field(init=False, compare=False)
    rho1: float = field(init=False, compare=False)
    sup_r: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidParameters("gamma must be > 0")
        if not np.isfinite(self.s):
            raise InvalidParameters("s must be finite")
        if int(self.grid_size) != self.grid_size or self.grid_size < MIN_GRID:
            raise InvalidParameters(f"grid_size must be an integer >= {MIN_GRID}")
        object.__setattr__(self, "grid_size", int(self.grid_size))
        rho, rho0, rho1, sup = rho_from_r(self.r, self.grid_size)
        object.__setattr__(self, "rho", _frozen(rho))
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "rho1", rho1)
        object.__setattr__(self, "sup_r", sup)

    @property
    def grid(self) -> Grid:
        return Grid(self.grid_size)

    def rho_at(self, x):
        """Killing rate at arbitrary points (same supremum as the grid)."""
        return self.sup_r - self.r(x)

    def replace(self, **changes) -> "ModelParams":
        d = dict(gamma=self.gamma, s=self.s, r=self.r, grid_size=self.grid_size)
        d.update(changes)
        return ModelParams(**d)

    def reflected(self) -> "ModelParams":
        """The same system with the roles of C and D exchanged."""
        return self.replace(s=-self.s, r=self.r.reflected())

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "s": self.s, "r": self.r.to_dict(),
                "grid_size": self.grid_size}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(gamma=float(d["gamma"]), s=float(d["s"]),
                   r=RateFunction.from_dict(d["r"]),
                   grid_size=int(d.get("grid_size", DEFAULT_GRID)))


@dataclass(frozen=True)
class IbmRates:
    """Rates of the individual-based two-level Moran process."""

    n: int
    m: int
    gamma_I_bar: float
    s_bar: float
    gamma_G_bar: float
    r_bar: RateFunction
    strong_selection: bool = False

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise InvalidParameters("n and m must be >= 1")
        if self.gamma_I_bar < 0 or self.gamma_G_bar < 0 or self.s_bar < -1:
            raise InvalidParameters("rates must be nonnegative")
        birth = 1.0 + self.r_bar(np.arange(self.n + 1) / self.n)
        if np.any(birth < 0):
            raise InvalidParameters("group birth rate 1 + r_bar is negative")

    def r_bar_table(self) -> np.ndarray:
        return self.r_bar(np.arange(self.n + 1) / self.n)


def ibm_rates_from_limit(params: ModelParams, n: int, m: int,
                         gamma_G_bar: float = 1.0) -> IbmRates:
    """IBM rates whose large-population limit is ``params``.

    gamma_I_bar = n*gamma, s_bar = s/(n*gamma), r_bar = r/gamma_G_bar.
    s_bar > 1 is allowed but flagged as strong selection.
    """
    if n < 2 or m < 2:
        raise InvalidParameters("need n >= 2 and m >= 2")
    if gamma_G_bar <= 0:
        raise InvalidParameters("gamma_G_bar must be > 0")
    gI = n * params.gamma
    if gI == 0:
        raise InvalidParameters("n * gamma vanishes")
    s_bar = params.s / gI
    strong = s_bar > 1
    if strong:
        warnings.warn(f"s_bar = {s_bar:.3g} > 1: strong-selection regime, "
                      "the diffusion limit is a poor approximation", stacklevel=2)
    return IbmRates(n=n, m=m, gamma_I_bar=gI, s_bar=s_bar, gamma_G_bar=gamma_G_bar,
                    r_bar=params.r.scaled(1.0 / gamma_G_bar), strong_selection=strong)


def limit_from_ibm_rates(rates: IbmRates) -> tuple[float, float]:
    """Inverse of the scaling: (gamma, s)."""
    return rates.gamma_I_bar / rates.n, rates.gamma_I_bar * rates.s_bar


@dataclass(frozen=True)
class DecomposedMeasure:
    """x0 * delta_0 + x1 * delta_1 + per-cell interior masses."""

    x0: float
    x1: float
    interior: np.ndarray

    def __post_init__(self):
        interior = _frozen(self.interior)
        if interior.ndim != 1 or interior.size < 1:
            raise InvalidParameters("interior must be a 1-d array")
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "x0", float(self.x0))
        object.__setattr__(self, "x1", float(self.x1))
        if self.x0 < 0 or self.x1 < 0 or np.any(interior < 0):
            raise InvalidParameters("measure components must be nonnegative")

    @property
    def N(self) -> int:
        return self.interior.size

    @property
    def grid(self) -> Grid:
        return Grid(self.N)

    @property
    def xint(self) -> float:
        return float(self.interior.sum())

    @property
    def total(self) -> float:
        return self.x0 + self.x1 + self.xint

    def is_normalized(self, tol: float = 1e-10) -> bool:
        return abs(self.total - 1.0) <= tol

    def normalized(self) -> "DecomposedMeasure":
        z = self.total
        if z <= 0:
            raise InvalidParameters("cannot normalize a null measure")
        return DecomposedMeasure(self.x0 / z, self.x1 / z, self.interior / z)

    def xi(self) -> np.ndarray:
        """Normalized interior profile (zeros if there is no interior mass)."""
        m = self.xint
        return self.interior / m if m > 0 else np.zeros(self.N)

    def to_vector(self) -> np.ndarray:
        """State vector ordered (atom0, cells..., atom1)."""
        return np.concatenate(([self.x0], self.interior, [self.x1]))

    @classmethod
    def from_vector(cls, v) -> "DecomposedMeasure":
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[-1], v[1:-1])

    @classmethod
    def dirac(cls, x: float, N: int = DEFAULT_GRID) -> "DecomposedMeasure":
        """Point mass; interior points go to the containing cell (split if on an edge)."""
        interior = np.zeros(N)
        if x <= 0:
            return cls(1.0, 0.0, interior)
        if x >= 1:
            return cls(0.0, 1.0, interior)
        pos = x * N
        j = int(round(pos))
        if abs(pos - j) < 1e-9 and 0 < j < N:
            # on a cell edge: split evenly so symmetric points stay symmetric
            interior[j - 1] = interior[j] = 0.5
        else:
            interior[min(int(pos), N - 1)] = 1.0
        return cls(0.0, 0.0, interior)

    @classmethod
    def uniform(cls, N: int = DEFAULT_GRID) -> "DecomposedMeasure":
        return cls(0.0, 0.0, np.full(N, 1.0 / N))

    @classmethod
    def from_density(cls, f: Callable, N: int = DEFAULT_GRID, x0: float = 0.0,
                     x1: float = 0.0) -> "DecomposedMeasure":
        """Interior masses from a density via cell-midpoint quadrature."""
        g = Grid(N)
        w = np.clip(np.asarray(f(g.midpoints), dtype=float), 0, None) * g.h
        rest = 1.0 - x0 - x1
        w = w / w.sum() * rest if w.sum() > 0 else w
        return cls(x0, x1, w)

    def coarsened(self, N: int) -> "DecomposedMeasure":
        """Aggregate cell masses onto a coarser grid (N must divide self.N)."""
        if self.N % N:
            raise GridMismatch(f"{N} does not divide {self.N}")
        return DecomposedMeasure(self.x0, self.x1,
                                 self.interior.reshape(N, -1).sum(axis=1))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["location", "mass", "kind"])
        w.writerow([repr(0.0), repr(self.x0), "atom0"])
        for x, m in zip(self.grid.midpoints, self.interior):
            w.writerow([repr(float(x)), repr(float(m)), "cell"])
        w.writerow([repr(1.0), repr(self.x1), "atom1"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "DecomposedMeasure":
        if isinstance(source, str) and "\n" in source:
            rows = list(csv.DictReader(io.StringIO(source)))
        else:
            with open(source, encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        x0 = sum(float(r["mass"]) for r in rows if r["kind"] == "atom0")
        x1 = sum(float(r["mass"]) for r in rows if r["kind"] == "atom1")
        cells = [float(r["mass"]) for r in rows if r["kind"] == "cell"]
        return cls(x0, x1, np.array(cells))


def _check_same_grid(a: DecomposedMeasure, b: DecomposedMeasure):
    if a.N != b.N:
        raise GridMismatch(f"grids differ: {a.N} vs {b.N} cells")


def tv_distance(a: DecomposedMeasure, b: DecomposedMeasure) -> float:
    """Total variation distance (half the L1 distance of the components)."""
    _check_same_grid(a, b)
    d = abs(a.x0 - b.x0) + abs(a.x1 - b.x1) + np.abs(a.interior - b.interior).sum()
    return 0.5 * float(d)


def integrate(mu: DecomposedMeasure, f: Callable) -> float:
    """<mu | f> with the midpoint rule on the interior cells."""
    ends = np.asarray(f(np.array([0.0, 1.0])), dtype=float) * np.ones(2)
    vals = np.asarray(f(mu.grid.midpoints), dtype=float) * np.ones(mu.N)
    return float(ends[0] * mu.x0 + ends[1] * mu.x1 + vals @ mu.interior)
