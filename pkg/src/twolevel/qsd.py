"""Quasi-stationary analysis of the discretized limiting flow.

The interior block of the forward generator is a sub-Markov generator whose
dominant eigenpair gives the Yaglom limit alpha (right eigenvector, a
measure), the survival capacity h (left eigenvector, a function) and the
extinction rate rho_alpha. Both are obtained by power iteration on the
nonnegative resolvent kernel (I - delta F)^{-1}, which shares its
eigenvectors with F; the eigenvalue maps back exactly through
rho = (1/lambda - 1) / delta.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import lapack

from .errors import ConvergenceFailure, PrecisionLoss, RegimeHypothesisViolated
from .model import DecomposedMeasure, ModelParams
from .pde import ForwardOperator, build_forward_operator

TIE_RTOL = 1e-6


@dataclass(frozen=True)
class QsdSolution:
    alpha: np.ndarray
    h: np.ndarray
    rho_alpha: float
    p0: float
    p1: float
    p_soft: float
    residuals: dict
    params: ModelParams
    iterations: int = 0
    gap_estimate: float = float("nan")

    @property
    def alpha_measure(self) -> DecomposedMeasure:
        return DecomposedMeasure(0.0, 0.0, self.alpha)

    def mean(self) -> float:
        return float(self.alpha @ self.params.grid.midpoints)

    def to_json(self) -> str:
        return json.dumps({
            "rho_alpha": self.rho_alpha, "rho0": self.params.rho0,
            "rho1": self.params.rho1, "p0": self.p0, "p1": self.p1,
            "p_soft": self.p_soft, "residuals": self.residuals,
            "iterations": self.iterations, "gap_estimate": self.gap_estimate,
            "params": self.params.to_dict(),
        }, indent=2, sort_keys=True)

    def profiles_csv(self) -> str:
        lines = ["location,alpha,h"]
        for x, a, hv in zip(self.params.grid.midpoints, self.alpha, self.h):
            lines.append(f"{float(x)!r},{float(a)!r},{float(hv)!r}")
        return "\n".join(lines) + "\n"


class _Resolvent:
    def __init__(self, F: np.ndarray, delta: float | None):
        # F is the tridiagonal interior block; delta=None is plain inverse iteration
        n = F.shape[0]
        M = -F if delta is None else sparse.identity(n, format="csr") - delta * F
        self.delta = delta
        dl = M.diagonal(-1).copy()
        d = M.diagonal().copy()
        du = M.diagonal(1).copy()
        self._lu = lapack.dgttrf(dl, d, du)
        if self._lu[-1] != 0:
            raise PrecisionLoss("singular interior operator")

    def __call__(self, v, transpose=False):
        dl, d, du, du2, ipiv, _ = self._lu
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, v, trans="T" if transpose else "N")
        return x

    def rate(self, factor: float) -> float:
        if self.delta is None:
            return 1.0 / factor
        return (1.0 / factor - 1.0) / self.delta


def solve_qsd(params: ModelParams, tol: float = 1e-10, max_iter: int = 20000,
              delta: float | None = None, op: ForwardOperator | None = None) -> QsdSolution:
    """Dominant eigen-objects of the interior-restricted killed generator."""
    op = op or build_forward_operator(params)
    F = op.matrix()[1:-1, 1:-1].tocsr()
    K = _Resolvent(F, delta)
    # residuals cannot go below the rounding level of F @ v
    floor = 64 * np.finfo(float).eps * float(abs(F).sum(axis=1).max())
    N = F.shape[0]
    x = params.grid.midpoints
    alpha = np.full(N, 1.0 / N)
    h = x * (1 - x)
    h /= h.max()
    res_hist = []
    rho_a = rho_h = float("nan")
    for it in range(1, max_iter + 1):
        a_new = K(alpha)
        fa = a_new.sum()
        alpha = a_new / fa
        h_new = K(h, transpose=True)
        fh = h_new.max()
        h = h_new / fh
        rho_a, rho_h = K.rate(fa), K.rate(fh)
        ra = float(np.abs(F @ alpha + rho_a * alpha).sum())
        rh = float(np.abs(F.T @ h + rho_h * h).max())
        scale = max(abs(rho_a), 1.0)
        res_hist.append(max(ra, rh))
        rtol = max(tol * scale, floor)
        if ra <= rtol and rh <= rtol and abs(rho_a - rho_h) <= max(tol * scale, 1e-15 * scale):
            break
    else:
        gap = _gap_from_history(res_hist)
        raise ConvergenceFailure(
            f"power iteration did not converge in {max_iter} iterations "
            f"(residual {res_hist[-1]:.2e}, contraction ~{gap:.4f})", gap_estimate=gap)

    alpha = np.clip(alpha, 0, None)
    alpha /= alpha.sum()
    h = np.clip(h, 0, None)
    h /= h.max()
    f0 = op.rate_to_atom0 * alpha[0]
    f1 = op.rate_to_atom1 * alpha[-1]
    soft = float(params.rho @ alpha)
    total = f0 + f1 + soft
    residuals = {"left_l1": float(np.abs(F @ alpha + rho_a * alpha).sum()),
                 "right_sup": float(np.abs(F.T @ h + rho_h * h).max()),
                 "rate_mismatch": abs(rho_a - rho_h),
                 "flux_balance": abs(total - rho_a)}
    return QsdSolution(alpha=alpha, h=h, rho_alpha=float(rho_a), p0=f0 / total,
                       p1=f1 / total, p_soft=soft / total, residuals=residuals,
                       params=params, iterations=it, gap_estimate=_gap_from_history(res_hist))


def _gap_from_history(hist) -> float:
    """Geometric contraction factor of the residuals over the last iterations."""
    h = [v for v in hist[-20:] if v > 0]
    if len(h) < 3:
        return float("nan")
    return float(math.exp((math.log(h[-1]) - math.log(h[0])) / (len(h) - 1)))


def verify_ext_rho(sol: QsdSolution, params: ModelParams | None = None):
    """Residual of <alpha|rho> = rho_alpha * P_alpha(soft kill first).

    Returns ``(residual, strict)`` where ``strict`` tells whether
    <alpha|rho> < rho_alpha, which must hold whenever fixation is possible.
    """
    params = params or sol.params
    lhs = float(params.rho @ sol.alpha)
    residual = abs(lhs - sol.rho_alpha * sol.p_soft)
    return residual, lhs < sol.rho_alpha


def _check_below(rho_alpha: float, rho: float, name: str):
    if not rho_alpha < rho * (1 - TIE_RTOL) - TIE_RTOL * 1e-3:
        raise RegimeHypothesisViolated(
            f"need rho_alpha < {name}: rho_alpha={rho_alpha:.6g}, {name}={rho:.6g}")


def composite_alpha1(sol: QsdSolution, params: ModelParams | None = None):
    """QSD for extinction at 1-fixation: y0 delta_0 + y_alpha alpha."""
    params = params or sol.params
    _check_below(sol.rho_alpha, params.rho0, "rho0")
    ratio = sol.rho_alpha * sol.p0 / (params.rho0 - sol.rho_alpha)
    y_alpha = 1.0 / (1.0 + ratio)
    y0 = ratio * y_alpha
    return DecomposedMeasure(y0, 0.0, y_alpha * sol.alpha), (y0, y_alpha)


def composite_alpha01(sol: QsdSolution, params: ModelParams | None = None):
    """Stable QSD y0 delta_0 + y1 delta_1 + y_alpha alpha when rho_alpha < rho0, rho1."""
    params = params or sol.params
    _check_below(sol.rho_alpha, params.rho0, "rho0")
    _check_below(sol.rho_alpha, params.rho1, "rho1")
    r0 = sol.rho_alpha * sol.p0 / (params.rho0 - sol.rho_alpha)
    r1 = sol.rho_alpha * sol.p1 / (params.rho1 - sol.rho_alpha)
    y_alpha = 1.0 / (1.0 + r0 + r1)
    y0, y1 = r0 * y_alpha, r1 * y_alpha
    return DecomposedMeasure(y0, y1, y_alpha * sol.alpha), (y0, y1, y_alpha)


def exit_resolvents(params: ModelParams, rate: float, op: ForwardOperator | None = None):
    """u0(x) = E_x[e^{rate tau}; tau = tau_0] and u01 for tau = tau_{0,1}.

    tau is the first of fixation and soft killing. Returns the two functions
    on the full state vector (atom0, cells..., atom1).
    """
    op = op or build_forward_operator(params)
    F = op.matrix()[1:-1, 1:-1]
    M = (F.T + rate * sparse.identity(F.shape[0])).tocsr()
    b0 = np.zeros(F.shape[0])
    b1 = np.zeros(F.shape[0])
    b0[0] = -op.rate_to_atom0
    b1[-1] = -op.rate_to_atom1
    dl, d, du = M.diagonal(-1).copy(), M.diagonal().copy(), M.diagonal(1).copy()
    out = lapack.dgtsv(dl, d, du, np.column_stack([b0, b1]))
    if out[-1] != 0:
        raise RegimeHypothesisViolated("singular resolvent system (rate >= rho_alpha?)")
    sol = out[-2]
    u0 = np.concatenate(([1.0], sol[:, 0], [0.0]))
    u1 = np.concatenate(([0.0], sol[:, 1], [1.0]))
    return u0, u0 + u1


def limit_mixture_x(mu0: DecomposedMeasure, params: ModelParams,
                    sol: QsdSolution | None = None, tie_rtol: float = 1e-3) -> float:
    """Weight of delta_0 in the limit x delta_0 + (1-x) delta_1 when rho0 = rho1 < rho_alpha."""
    r0, r1 = params.rho0, params.rho1
    if abs(r0 - r1) > tie_rtol * max(r0, r1, 1.0):
        raise RegimeHypothesisViolated(f"need rho0 = rho1, got {r0:.6g} vs {r1:.6g}")
    sol = sol or solve_qsd(params)
    if not r1 < sol.rho_alpha:
        raise RegimeHypothesisViolated(
            f"need rho1 < rho_alpha, got {r1:.6g} >= {sol.rho_alpha:.6g}")
    u0, u01 = exit_resolvents(params, r1)
    if np.any(u0 < -1e-12) or np.any(u01 <= 0):
        raise RegimeHypothesisViolated("resolvent lost positivity; rate too close to rho_alpha")
    v = mu0.to_vector()
    return float(v @ u0 / (v @ u01))
