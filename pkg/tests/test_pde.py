import numpy as np
import pytest

from twolevel import DecomposedMeasure, ModelParams, RateFunction, build_forward_operator
from twolevel.errors import InvalidParameters
from twolevel.pde import evolve, evolve_conditioned, evolve_normalized, evolve_unnormalized, truncated_evolve


def _p(**kw):
    base = dict(gamma=0.5, s=0.1, r=RateFunction.linear(0.3), grid_size=50)
    base.update(kw)
    return ModelParams(**base)


@pytest.mark.parametrize("scheme", ["fitted", "hybrid", "upwind"])
def test_operator_conserves_mass_without_killing(scheme):
    op = build_forward_operator(_p(), scheme=scheme)
    np.testing.assert_allclose(op.column_sums(killing=False), 0, atol=1e-10)
    A = op.dense(killing=False)
    off = A - np.diag(np.diag(A))
    assert np.all(off >= 0)


def test_atoms_are_absorbing():
    A = build_forward_operator(_p()).dense(killing=False)
    assert np.all(A[:, 0] == 0) and np.all(A[:, -1] == 0)


def test_fitted_drift_is_exact():
    # <L f> for f(x)=x equals the drift -s x(1-x) integrated against the cell
    p = _p(gamma=0.01, s=0.3)
    op = build_forward_operator(p)
    A = op.dense(killing=False)
    x = np.concatenate(([0.0], p.grid.midpoints, [1.0]))
    drift = x @ A
    mid = p.grid.midpoints
    np.testing.assert_allclose(drift[2:-2], -p.s * mid[1:-1] * (1 - mid[1:-1]), rtol=2e-2)


def test_evolution_stays_normalized():
    ev = evolve_normalized(DecomposedMeasure.dirac(0.5, 50), 2.0, 0.01, _p(), record_every=10)
    tot = ev.x0 + ev.x1 + ev.xint
    np.testing.assert_allclose(tot, 1.0, atol=1e-12)
    assert np.all(np.diff(ev.log_mass) <= 1e-14)
    assert ev.final.is_normalized()


def test_conditioned_variants():
    mu = DecomposedMeasure.dirac(0.5, 50)
    ev = evolve_conditioned(mu, "A01", 1.0, 0.01, _p())
    np.testing.assert_allclose(ev.xint, 1.0)
    ev1 = evolve_conditioned(mu, "A1", 1.0, 0.01, _p())
    assert np.all(ev1.x1 == 0)


def test_unnormalized_matches_log_mass():
    p = _p()
    mu = DecomposedMeasure.dirac(0.5, 50)
    ev = evolve(mu, 1.0, 0.01, p)
    v = evolve_unnormalized(mu.to_vector(), 1.0, 0.01, p)
    assert np.log(v.sum()) == pytest.approx(ev.log_mass[-1], rel=1e-10)


def test_truncation_delays_fixation():
    p = ModelParams(5e-3, 0.05, RateFunction.linear(0.1), 100)
    mu = DecomposedMeasure.dirac(0.9, 100)
    t0 = truncated_evolve(mu, 0.0, 200, 0.5, p).first_time("x1", 0.5)
    t1 = truncated_evolve(mu, 1e-6, 200, 0.5, p).first_time("x1", 0.5)
    assert t1 >= t0


def test_rejects_bad_dt():
    with pytest.raises(InvalidParameters):
        evolve(DecomposedMeasure.dirac(0.5, 50), 1.0, 0.0, _p())


def test_csv_output_header():
    ev = evolve(DecomposedMeasure.dirac(0.5, 50), 0.1, 0.01, _p())
    assert ev.to_csv().splitlines()[0].startswith("time,x0,x1,xint")
