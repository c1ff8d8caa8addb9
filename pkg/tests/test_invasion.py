import itertools
import math

import numpy as np
import pytest

from twolevel import ModelParams, RateFunction
from twolevel.errors import InvalidParameters, UnsupportedRateShape
from twolevel.invasion import (InvasionSetting, invasion_mc, invasion_probs, moran_fixation,
                               moran_product, selection_direction, strong_selection_asymptotics,
                               sweep_csv)


def setting(a, b, n=20, m=20, gamma=0.05, gamma_G=0.01):
    p = ModelParams(gamma, a * gamma, RateFunction.linear(b * gamma_G))
    return InvasionSetting(p, n, m, gamma_G)


def test_neutral_is_one_over_nm():
    pr = invasion_probs(setting(0.0, 0.0))
    assert pr.pi_DC == pytest.approx(1 / 400) and pr.pi_CD == pytest.approx(1 / 400)


def test_weak_selection_expansion():
    pr = invasion_probs(setting(0.01, 0.03))
    assert pr.weak_valid
    assert pr.pi_DC == pytest.approx(pr.weak_DC, rel=1e-3)
    assert pr.pi_CD == pytest.approx(pr.weak_CD, rel=1e-3)


@pytest.mark.parametrize("a,b", list(itertools.product([0.0, 0.1, 1.0, 5.0], [0.0, 0.2, 2.0, 8.0])))
def test_monotonicity(a, b):
    base = invasion_probs(setting(a, b))
    more_s = invasion_probs(setting(a + 0.5, b))
    more_r = invasion_probs(setting(a, b + 0.5))
    assert more_s.pi_DC < base.pi_DC and more_s.pi_CD > base.pi_CD
    assert more_r.pi_DC > base.pi_DC and more_r.pi_CD < base.pi_CD


def test_strong_selection_forms():
    ss = strong_selection_asymptotics(setting(0.1, 6.0, m=100))
    assert ss.in_regime
    assert ss.pi_G_DC == pytest.approx(ss.exact_G_DC, rel=0.01)
    assert ss.pi_G_CD == pytest.approx(ss.exact_G_CD, rel=0.01)
    zero = strong_selection_asymptotics(setting(0.1, 0.0, m=100))
    assert zero.exact_G_DC == pytest.approx(0.01) and zero.exact_G_CD == pytest.approx(0.01)


def test_direction_guard():
    assert selection_direction(setting(0.01, 0.05))[0] == "toward C"
    assert selection_direction(setting(0.05, 0.01))[0] == "toward D"
    with pytest.raises(InvalidParameters):
        selection_direction(setting(1.0, 0.05))
    assert selection_direction(setting(1.0, 0.05), override=True)[0] == "toward D"


def test_nonlinear_r_rejected():
    p = ModelParams(0.05, 0.001, RateFunction.polynomial([0, 1, -1]))
    with pytest.raises(UnsupportedRateShape):
        invasion_probs(InvasionSetting(p, 20, 20, 0.01))


def test_moran_oracle():
    assert moran_fixation(10, 1.0) == pytest.approx(0.1)
    f = 1.1
    assert moran_fixation(10, f) == pytest.approx((1 - 1 / f) / (1 - f ** -10))
    st = InvasionSetting.from_ibm(20, 20, 1.0, 0.02, 0.001, 0.05)
    assert moran_product(st.ibm_rates(), "D->C") == pytest.approx(3.1453e-3, rel=1e-3)


def test_from_ibm_scaling():
    st = InvasionSetting.from_ibm(20, 20, 1.0, 0.02, 0.001, 0.05)
    assert st.a == pytest.approx(0.4) and st.b == pytest.approx(1.0)
    r = st.ibm_rates()
    assert r.s_bar == pytest.approx(0.02) and r.gamma_G_bar == pytest.approx(0.001)
    assert r.r_bar.slope == pytest.approx(0.05)


def test_invasion_mc_small():
    st = InvasionSetting.from_ibm(5, 4, 1.0, 0.0, 1.0, 0.0)
    mc = invasion_mc(st, "D->C", 5000, seed=1)
    assert abs(mc.z_score(1 / 20)) < 4
    assert mc.unresolved == 0


def test_sweep_csv():
    text = sweep_csv([setting(0.1, 0.2), setting(0.3, 0.1)])
    lines = text.splitlines()
    assert lines[0] == "s_over_gamma,r1_over_gammaG,pi_DC,pi_CD,direction"
    assert len(lines) == 3
