import numpy as np
import pytest

from twolevel import DecomposedMeasure, ModelParams, RateFunction
from twolevel.errors import InvalidParameters, WindowTooLate
from twolevel.regimes import (classify, classify_rates, find_plateaus, fit_rate, scan_gamma,
                              scan_r_scale)


@pytest.mark.parametrize("rates,regime", [
    ((0.3, 0.0, 0.5), "A"),
    ((3.0, 0.0, 2.5), "B"),
    ((1.0, 1.0, 0.5), "E"),
    ((0.25, 0.25, 1.06), "D"),
    ((0.3, 0.0, 0.0), "F"),
    ((0.0, 0.0, 0.0), "G"),
])
def test_classify_rates(rates, regime):
    assert classify_rates(*rates).regime == regime


def test_classification_invariant_under_relabeling():
    p = ModelParams(0.5, 0.1, RateFunction.polynomial([0, 3, -1]), 100)
    a, b = classify(p), classify(p.reflected())
    assert a.regime == b.regime
    assert a.swapped != b.swapped


def test_fit_rate_exponential():
    t = np.linspace(0, 10, 101)
    lam, r2, _ = fit_rate(t, 0.3 * np.exp(-0.7 * t), "exp")
    assert lam == pytest.approx(0.7) and r2 == pytest.approx(1.0)
    lam, _, _ = fit_rate(t, (1 + t) * np.exp(-0.4 * t), "(1+t)exp")
    assert lam == pytest.approx(0.4)


def test_fit_rate_inverse_time():
    t = np.linspace(1, 100, 200)
    lam, r2, tt = fit_rate(t, 2.0 / t, "1/t")
    assert lam == pytest.approx(1.0) and tt == pytest.approx(1.0)


def test_fit_rate_floor():
    t = np.linspace(0, 10, 50)
    with pytest.raises(WindowTooLate):
        fit_rate(t, np.exp(-10 * t), "exp")
    with pytest.raises(InvalidParameters):
        fit_rate(t[:3], np.ones(3), "exp")


def test_gamma_scan_tail():
    base = ModelParams(0.5, 0.1, RateFunction.linear(0.1), 100)
    rows, inc = scan_gamma(base, [0.05, 0.2, 0.5, 1.0])
    assert len(rows) == 4 and not any(r.error for r in rows)
    assert inc


def test_r_scale_finds_critical_value():
    base = ModelParams(0.5, 0.0, RateFunction.constant(0.0), 200)
    rows, crit = scan_r_scale(base, RateFunction.polynomial([0, 1, -1]), [2, 4, 6, 8])
    assert len(crit) == 1
    assert crit[0][2] == pytest.approx(4.9347, rel=2e-3)


def test_plateaus():
    t = np.arange(100.0)
    rate = np.where(t < 50, 0.1, 0.02)
    pl = find_plateaus(t, rate, 0.05, 10)
    assert [round(p[2], 3) for p in pl] == [0.1, 0.02]
