"""Deterministic solver for the limiting flow mu_t.

The linear killed forward equation

    d/dt u = d2/dx2 [gamma x(1-x) u] + d/dx [s x(1-x) u] - rho(x) u

is discretized on N cells plus two absorbing atom states. Each cell sends
mass to its neighbours (or, for the two edge cells, into the atoms) at
rates that reproduce the drift -s x(1-x) exactly. The default "fitted"
scheme uses exponential fitting (Scharfetter-Gummel weights), which keeps
every rate positive and matches the variance 2 gamma x(1-x) when the cell
Peclet number is small; "hybrid" (central, upwind where central goes
negative) and "upwind" are kept for comparison. The resulting matrix is a
tridiagonal sub-Markov generator on (atom0, cells..., atom1).

Time stepping is backward Euler with a tridiagonal LU factorization reused
for every step, followed by renormalization to total mass one: the
normalized flow is exactly the nonlinear equation for mu_t, and the log of
the normalizers reconstructs the unnormalized survival E(Z_t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import lapack

from .errors import DegenerateTruncation, InvalidParameters, PrecisionLoss
from .model import DecomposedMeasure, ModelParams

MASS_FLOOR = 1e-280
VARIANTS = ("A", "A1", "A01")


def _jump_rates(params: ModelParams, scheme: str = "fitted"):
    """Left/right jump rates of every cell (to the neighbour or the atom)."""
    g = params.grid
    N, h = g.N, g.h
    x = g.midpoints
    b = x * (1.0 - x)
    a = params.gamma * b
    v = -params.s * b
    hl = np.full(N, h)
    hr = np.full(N, h)
    hl[0] = hr[-1] = 0.5 * h
    if scheme == "hybrid":
        ql = (2 * a - v * hr) / (hl * (hl + hr))
        qr = (2 * a + v * hl) / (hr * (hl + hr))
        left_up = ql < 0
        right_up = qr < 0
        ql = np.where(left_up, 0.0, np.where(right_up, -v / hl, ql))
        qr = np.where(right_up, 0.0, np.where(left_up, v / hr, qr))
    elif scheme == "fitted":
        # exponential fitting: exact drift, positive rates, and exponentially
        # small (not zero) transport against a strong drift
        c = 2 * a / (hl + hr)
        z = v / c
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            bp = np.where(np.abs(z) < 1e-8, 1.0 - 0.5 * z, z / np.expm1(z))
            bm = bp + z
        ql = c * bp / hl
        qr = c * bm / hr
    elif scheme == "upwind":
        ql = 2 * a / (hl * (hl + hr)) + np.maximum(-v, 0) / hl
        qr = 2 * a / (hr * (hl + hr)) + np.maximum(v, 0) / hr
    else:
        raise InvalidParameters(f"unknown drift scheme {scheme!r}")
    return ql, qr


@dataclass(frozen=True)
class ForwardOperator:
    """Tridiagonal generator on (atom0, cell_0..cell_{N-1}, atom1).

    ``upper[j]`` is the rate from state j to j-1, ``lower[j]`` the rate from
    j to j+1 and ``diag`` the diagonal including killing. Mass flows along
    columns (``F[dest, src]``).
    """

    params: ModelParams
    upper: np.ndarray
    lower: np.ndarray
    diag: np.ndarray
    killing: np.ndarray
    scheme: str = "fitted"

    @property
    def size(self) -> int:
        return self.diag.size

    @property
    def rate_to_atom0(self) -> float:
        return float(self.upper[1])

    @property
    def rate_to_atom1(self) -> float:
        return float(self.lower[-2])

    def matrix(self, killing: bool = True) -> sparse.csc_matrix:
        d = self.diag if killing else self.diag + self.killing
        # upper[j] sits at row j-1, lower[j] at row j+1
        return sparse.diags([self.lower[:-1], d, self.upper[1:]], [-1, 0, 1],
                            format="csc")

    def dense(self, killing: bool = True) -> np.ndarray:
        return self.matrix(killing).toarray()

    def interior(self) -> np.ndarray:
        """Dense interior block (cells only), killing included."""
        return self.dense()[1:-1, 1:-1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix() @ v

    def column_sums(self, killing: bool = False) -> np.ndarray:
        return np.asarray(self.matrix(killing).sum(axis=0)).ravel()


def build_forward_operator(params: ModelParams, scheme: str = "fitted") -> ForwardOperator:
    """Discretize the killed forward equation for ``params``."""
    ql, qr = _jump_rates(params, scheme)
    N = params.grid_size
    upper = np.zeros(N + 2)
    lower = np.zeros(N + 2)
    upper[1:-1] = ql
    lower[1:-1] = qr
    killing = np.concatenate(([params.rho0], params.rho, [params.rho1]))
    diag = -(upper + lower) - killing
    return ForwardOperator(params, upper, lower, diag, killing, scheme)


class ImplicitStepper:
    """Backward-Euler map v -> (I - dt F)^{-1} v with a cached factorization."""

    def __init__(self, op: ForwardOperator, dt: float):
        if dt <= 0:
            raise InvalidParameters("dt must be > 0")
        self.op, self.dt = op, dt
        du = -dt * op.upper[1:].copy()
        dl = -dt * op.lower[:-1].copy()
        d = 1.0 - dt * op.diag
        self._lu = lapack.dgttrf(dl, d, du)
        if self._lu[-1] != 0:
            raise PrecisionLoss("singular implicit system")

    def __call__(self, v: np.ndarray, transpose: bool = False) -> np.ndarray:
        dl, d, du, du2, ipiv, _ = self._lu
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, v, trans="T" if transpose else "N")
        if info != 0:
            raise PrecisionLoss("tridiagonal solve failed")
        return x


def _project(v: np.ndarray, variant: str) -> np.ndarray:
    if variant in ("A1", "A01"):
        v[-1] = 0.0
    if variant == "A01":
        v[0] = 0.0
    return v


@dataclass
class Evolution:
    """Sampled output of a normalized evolution."""

    times: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    xint: np.ndarray
    log_mass: np.ndarray
    profiles: list = field(default_factory=list)
    truncated: np.ndarray | None = None
    final: DecomposedMeasure | None = None
    variant: str = "A"
    dt: float = 0.0

    @property
    def survival(self) -> np.ndarray:
        """Unnormalized survival mass, E(Z_t) for the plain flow."""
        return np.exp(self.log_mass)

    def interior_mean(self) -> np.ndarray:
        """Mean of the conditional interior profile at each sample."""
        x = self.final.grid.midpoints
        return np.array([p @ x for p in self.profiles])

    def first_time(self, series: str, level: float) -> float:
        """First sampled time the named series exceeds ``level`` (inf if never)."""
        y = getattr(self, series)
        idx = np.flatnonzero(y > level)
        return float(self.times[idx[0]]) if idx.size else math.inf

    def to_csv(self, path=None, with_profiles: bool = False) -> str:
        lines = ["time,x0,x1,xint"]
        for row in zip(self.times, self.x0, self.x1, self.xint):
            lines.append(",".join(repr(float(v)) for v in row))
        if with_profiles and self.profiles:
            lines.append("")
            lines.append("time,location,mass")
            mids = self.final.grid.midpoints
            for t, p in zip(self.times, self.profiles):
                for x, m in zip(mids, p):
                    lines.append(f"{float(t)!r},{float(x)!r},{float(m)!r}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def _steps(t: float, dt: float) -> tuple[int, float]:
    if t < 0:
        raise InvalidParameters("t must be >= 0")
    if not dt > 0:
        raise InvalidParameters("dt must be > 0")
    n = max(1, int(math.ceil(t / dt - 1e-9))) if t > 0 else 0
    return n, (t / n if n else dt)


def evolve(mu0: DecomposedMeasure, t: float, dt: float, params: ModelParams,
           variant: str = "A", eta: float = 0.0, record_every: int = 1,
           keep_profiles: bool = False, op: ForwardOperator | None = None) -> Evolution:
    """Normalized backward-Euler evolution of ``mu0`` up to time ``t``.

    ``variant`` selects the conditioning: "A" keeps both atoms, "A1" removes
    mass reaching 1, "A01" keeps the interior only. With ``eta > 0`` interior
    cells whose mass falls below ``eta`` are zeroed after every step.
    """
    if variant not in VARIANTS:
        raise InvalidParameters(f"variant must be one of {VARIANTS}")
    if mu0.N != params.grid_size:
        raise InvalidParameters("initial measure and params use different grids")
    if eta < 0:
        raise InvalidParameters("eta must be >= 0")
    op = op or build_forward_operator(params)
    nsteps, dt = _steps(t, dt)
    step = ImplicitStepper(op, dt)

    v = _project(mu0.to_vector().copy(), variant)
    z = v.sum()
    if z <= 0:
        raise PrecisionLoss(f"initial measure has no mass on the {variant} state set")
    v /= z
    log_mass = 0.0

    times, x0, x1, xi, lm, profiles, trunc = [], [], [], [], [], [], []

    def record(k, cut):
        times.append(k * dt)
        x0.append(v[0])
        x1.append(v[-1])
        xi.append(v[1:-1].sum())
        lm.append(log_mass)
        trunc.append(cut)
        if keep_profiles:
            m = v[1:-1].sum()
            profiles.append(v[1:-1] / m if m > 0 else np.zeros(v.size - 2))

    record(0, 0.0)
    cut = 0.0
    for k in range(1, nsteps + 1):
        v = _project(step(v), variant)
        if eta > 0:
            small = v[1:-1] < eta
            cut += float(v[1:-1][small].sum())
            v[1:-1][small] = 0.0
        np.clip(v, 0.0, None, out=v)
        z = v.sum()
        if not z > MASS_FLOOR:
            if eta > 0 and z == 0:
                raise DegenerateTruncation(f"all mass truncated at t={k * dt:g}")
            raise PrecisionLoss(f"mass underflow at t={k * dt:g}; renormalize more often")
        v /= z
        log_mass += math.log(z)
        if k % record_every == 0 or k == nsteps:
            record(k, cut)
            cut = 0.0

    return Evolution(times=np.array(times), x0=np.array(x0), x1=np.array(x1),
                     xint=np.array(xi), log_mass=np.array(lm), profiles=profiles,
                     truncated=np.array(trunc), final=DecomposedMeasure.from_vector(v),
                     variant=variant, dt=dt)


def evolve_normalized(mu0, t, dt, params, **kw) -> Evolution:
    """mu_t: the normalized (Feynman-Kac) flow."""
    return evolve(mu0, t, dt, params, variant="A", **kw)


def evolve_conditioned(mu0, variant, t, dt, params, **kw) -> Evolution:
    """mu A_t, mu A^1_t or mu A^{01}_t depending on ``variant``."""
    if variant == "A1" and mu0.x0 + mu0.xint <= 0:
        raise InvalidParameters("A1 needs mu0 != delta_1")
    if variant == "A01" and mu0.xint <= 0:
        raise InvalidParameters("A01 needs interior mass")
    return evolve(mu0, t, dt, params, variant=variant, **kw)


def truncated_evolve(mu0, eta, t, dt, params, **kw) -> Evolution:
    """Normalized flow where interior cells with mass below eta are zeroed."""
    if eta <= 0 and eta != 0:
        raise InvalidParameters("eta must be >= 0")
    return evolve(mu0, t, dt, params, variant="A", eta=eta, **kw)


def evolve_unnormalized(v0: np.ndarray, t: float, dt: float, params: ModelParams,
                        killing: bool = True) -> np.ndarray:
    """Linear (sub-Markov) evolution of a raw state vector, no renormalization."""
    op = build_forward_operator(params)
    if not killing:
        op = ForwardOperator(op.params, op.upper, op.lower, op.diag + op.killing,
                             np.zeros_like(op.killing), op.scheme)
    nsteps, dt = _steps(t, dt)
    step = ImplicitStepper(op, dt)
    v = np.array(v0, dtype=float)
    for _ in range(nsteps):
        v = step(v)
    return v
