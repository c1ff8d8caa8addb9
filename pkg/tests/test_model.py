import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twolevel import (DecomposedMeasure, GridMismatch, InvalidParameters, InvalidRateFunction,
                      ModelParams, RateFunction, ibm_rates_from_limit, integrate,
                      limit_from_ibm_rates, tv_distance)
from twolevel.model import Grid, rho_from_r


def test_rate_function_kinds():
    lin = RateFunction.linear(0.3)
    assert lin(0.5) == pytest.approx(0.15)
    poly = RateFunction.polynomial([0.0, 20.5, -20.0])
    assert poly(1.0) == pytest.approx(0.5)
    assert not poly.is_linear and lin.is_linear
    assert lin.slope == 0.3
    tab = RateFunction.tabulated([0.0, 1.0, 0.0])
    assert tab(0.5) == pytest.approx(1.0)
    assert RateFunction.from_dict(poly.to_dict())(0.3) == pytest.approx(poly(0.3))


def test_reflection_is_involution():
    r = RateFunction.polynomial([0.1, 2.0, -0.5])
    x = np.linspace(0, 1, 7)
    np.testing.assert_allclose(r.reflected().reflected()(x), r(x))
    np.testing.assert_allclose(r.reflected()(x), r(1 - x))


def test_rate_function_rejects_nonfinite():
    with pytest.raises(InvalidRateFunction):
        RateFunction.polynomial([np.nan])


def test_rho_properties():
    p = ModelParams(0.5, 0.1, RateFunction.linear(0.3))
    assert p.rho0 == pytest.approx(0.3)
    assert p.rho1 == pytest.approx(0.0)
    assert np.all(p.rho >= 0)
    rho, r0, r1, sup = rho_from_r(RateFunction.polynomial([0, 1, -1]), 200)
    # the supremum is taken on the grid midpoints
    assert sup == pytest.approx(0.25, abs=1e-4)
    assert r0 == pytest.approx(sup) and r1 == pytest.approx(sup)


@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(gamma=-1.0), dict(s=np.inf),
                                dict(grid_size=4), dict(grid_size=10.5)])
def test_params_validation(kw):
    base = dict(gamma=0.5, s=0.1, r=RateFunction.linear(0.1))
    base.update(kw)
    with pytest.raises(InvalidParameters):
        ModelParams(**base)


def test_params_roundtrip():
    p = ModelParams(0.5, 0.1, RateFunction.polynomial([0, 1, -1]), 64)
    assert ModelParams.from_dict(p.to_dict()) == p


def test_ibm_scaling_roundtrip():
    p = ModelParams(0.01, 0.002, RateFunction.linear(0.05))
    rates = ibm_rates_from_limit(p, 50, 20, gamma_G_bar=2.0)
    assert rates.gamma_I_bar == pytest.approx(0.5)
    assert rates.s_bar == pytest.approx(0.004)
    assert rates.r_bar.slope == pytest.approx(0.025)
    g, s = limit_from_ibm_rates(rates)
    assert (g, s) == pytest.approx((0.01, 0.002))


def test_ibm_scaling_warns_on_strong_selection():
    p = ModelParams(2e-4, 0.1, RateFunction.linear(0.1))
    with pytest.warns(UserWarning, match="strong"):
        rates = ibm_rates_from_limit(p, 100, 2000)
    assert rates.strong_selection


def test_measure_constructors_and_csv():
    mu = DecomposedMeasure.dirac(0.5, 10)
    assert mu.interior[4] == mu.interior[5] == 0.5 and DecomposedMeasure.dirac(0.52, 10).interior[5] == 1.0 and mu.is_normalized()
    assert DecomposedMeasure.dirac(0.0, 10).x0 == 1.0
    assert DecomposedMeasure.dirac(1.0, 10).x1 == 1.0
    u = DecomposedMeasure.uniform(20)
    back = DecomposedMeasure.from_csv(u.to_csv())
    np.testing.assert_allclose(back.interior, u.interior)
    assert u.coarsened(5).interior == pytest.approx(np.full(5, 0.2))
    with pytest.raises(GridMismatch):
        u.coarsened(3)
    with pytest.raises(InvalidParameters):
        DecomposedMeasure(-0.1, 0, np.ones(3))


def test_vector_layout():
    mu = DecomposedMeasure(0.2, 0.3, np.array([0.1, 0.4]))
    v = mu.to_vector()
    assert v.tolist() == [0.2, 0.1, 0.4, 0.3]
    np.testing.assert_array_equal(DecomposedMeasure.from_vector(v).to_vector(), v)


def test_grid():
    g = Grid(4)
    assert g.h == 0.25
    np.testing.assert_allclose(g.midpoints, [0.125, 0.375, 0.625, 0.875])


def test_tv_grid_mismatch():
    with pytest.raises(GridMismatch):
        tv_distance(DecomposedMeasure.uniform(10), DecomposedMeasure.uniform(20))


measures = st.integers(8, 40).flatmap(
    lambda N: st.lists(st.floats(0, 1), min_size=N + 2, max_size=N + 2)
    .filter(lambda w: sum(w) > 1e-6)
    .map(lambda w: DecomposedMeasure.from_vector(np.array(w) / sum(w))))


@settings(max_examples=50, deadline=None)
@given(measures, st.data())
def test_tv_metric_axioms(a, data):
    N = a.N
    w1 = data.draw(st.lists(st.floats(0, 1), min_size=N + 2, max_size=N + 2).filter(lambda w: sum(w) > 1e-6))
    w2 = data.draw(st.lists(st.floats(0, 1), min_size=N + 2, max_size=N + 2).filter(lambda w: sum(w) > 1e-6))
    b = DecomposedMeasure.from_vector(np.array(w1) / sum(w1))
    c = DecomposedMeasure.from_vector(np.array(w2) / sum(w2))
    assert tv_distance(a, a) == 0
    assert tv_distance(a, b) == pytest.approx(tv_distance(b, a))
    assert 0 <= tv_distance(a, b) <= 1 + 1e-12
    assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-12


@settings(max_examples=50, deadline=None)
@given(measures)
def test_integrate_constant_is_total_mass(mu):
    assert integrate(mu, lambda x: np.ones_like(x)) == pytest.approx(1.0)
