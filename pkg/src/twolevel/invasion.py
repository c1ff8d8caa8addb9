"""Invasion probabilities of a single mutant under separated time scales.

A mutant first has to fix inside its own group (individual level, noise
gamma, selection s against C), then its group lineage has to take over the
population (group level, noise gamma_G, selection r1 for C). With
a = s/gamma and b = r1/gamma_G:

    pi_DC = [a / (n (e^a - 1))] * [b / (m (1 - e^-b))]
    pi_CD = [a / (n (1 - e^-a))] * [b / (m (e^b - 1))]
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameters, UnsupportedRateShape
from .ibm import IbmState, absorption_stats
from .model import IbmRates, ModelParams, RateFunction

TIE = 1e-9
WEAK_LIMIT = 0.1
SEPARATION = 1e-2


def _x_over_expm1(x: float) -> float:
    """x / (e^x - 1), equal to 1 at x = 0."""
    if abs(x) < 1e-12:
        return 1.0 - 0.5 * x
    if x > 700:
        return x * math.exp(-x)
    return x / math.expm1(x)


@dataclass(frozen=True)
class InvasionSetting:
    params: ModelParams
    n: int
    m: int
    gamma_G: float

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise InvalidParameters("n and m must be >= 1")
        if not self.gamma_G > 0:
            raise InvalidParameters("gamma_G must be > 0")

    @property
    def r1(self) -> float:
        if not self.params.r.is_linear:
            raise UnsupportedRateShape("closed forms need a linear r")
        return self.params.r.slope

    @property
    def a(self) -> float:
        """Individual-level selection-to-noise ratio s/gamma."""
        return self.params.s / self.params.gamma

    @property
    def b(self) -> float:
        """Group-level ratio r1/gamma_G."""
        return self.r1 / self.gamma_G

    def ibm_rates(self) -> IbmRates:
        """IBM rates matching this setting: gI = n gamma, gG = m gamma_G."""
        p = self.params
        gI = self.n * p.gamma
        gG = self.m * self.gamma_G
        return IbmRates(n=self.n, m=self.m, gamma_I_bar=gI, s_bar=p.s / gI,
                        gamma_G_bar=gG, r_bar=p.r.scaled(1.0 / gG))

    @classmethod
    def from_ibm(cls, n: int, m: int, gamma_I_bar: float, s_bar: float,
                 gamma_G_bar: float, r1_bar: float) -> "InvasionSetting":
        gamma = gamma_I_bar / n
        params = ModelParams(gamma=gamma, s=gamma_I_bar * s_bar,
                             r=RateFunction.linear(gamma_G_bar * r1_bar))
        return cls(params, n, m, gamma_G_bar / m)


@dataclass(frozen=True)
class InvasionProbs:
    pi_I_DC: float
    pi_G_DC: float
    pi_DC: float
    pi_I_CD: float
    pi_G_CD: float
    pi_CD: float
    weak_DC: float
    weak_CD: float
    weak_valid: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def invasion_probs(setting: InvasionSetting) -> InvasionProbs:
    n, m, a, b = setting.n, setting.m, setting.a, setting.b
    iDC = _x_over_expm1(a) / n
    iCD = _x_over_expm1(-a) / n
    gDC = _x_over_expm1(-b) / m
    gCD = _x_over_expm1(b) / m
    base = 1.0 / (n * m)
    half = 0.5 * (b - a)
    return InvasionProbs(pi_I_DC=iDC, pi_G_DC=gDC, pi_DC=iDC * gDC,
                         pi_I_CD=iCD, pi_G_CD=gCD, pi_CD=iCD * gCD,
                         weak_DC=base * (1 + half), weak_CD=base * (1 - half),
                         weak_valid=max(abs(a), abs(b)) < WEAK_LIMIT)


@dataclass(frozen=True)
class StrongSelection:
    pi_G_CD: float
    pi_G_DC: float
    ratio: float
    exact_G_CD: float
    exact_G_DC: float
    in_regime: bool


def strong_selection_asymptotics(setting: InvasionSetting) -> StrongSelection:
    """Large-b forms (1/m) b e^{-b} and (1/m) b, with the exact values alongside."""
    b, m = setting.b, setting.m
    cd = b * math.exp(-b) / m
    dc = b / m
    return StrongSelection(pi_G_CD=cd, pi_G_DC=dc,
                           ratio=cd / dc if dc > 0 else math.nan,
                           exact_G_CD=_x_over_expm1(b) / m,
                           exact_G_DC=_x_over_expm1(-b) / m,
                           in_regime=b >= 2)


def selection_direction(setting: InvasionSetting, override: bool = False):
    """("toward C" | "toward D" | "neutral", margin b - a)."""
    probs = invasion_probs(setting)
    if not (probs.weak_valid or override):
        raise InvalidParameters("weak-selection criterion needs s/gamma, r1/gamma_G < 0.1 "
                                "(pass override=True to force)")
    margin = setting.b - setting.a
    if abs(margin) <= TIE:
        return "neutral", margin
    return ("toward C" if margin > 0 else "toward D"), margin


def moran_fixation(size: int, fitness: float) -> float:
    """Fixation probability of one mutant of relative fitness ``fitness`` in a Moran population."""
    if size < 1 or fitness <= 0:
        raise InvalidParameters("need size >= 1 and fitness > 0")
    if abs(fitness - 1.0) < 1e-12:
        return 1.0 / size
    return -math.expm1(-math.log(fitness)) / -math.expm1(-size * math.log(fitness))


def moran_product(rates: IbmRates, direction: str) -> float:
    """Product of the exact per-level Moran fixation probabilities."""
    if not rates.r_bar.is_linear:
        raise UnsupportedRateShape("needs a linear r_bar")
    r1 = rates.r_bar.slope
    if direction == "D->C":
        return moran_fixation(rates.n, 1.0 / (1.0 + rates.s_bar)) * moran_fixation(rates.m, 1.0 + r1)
    if direction == "C->D":
        return moran_fixation(rates.n, 1.0 + rates.s_bar) * moran_fixation(rates.m, 1.0 / (1.0 + r1))
    raise InvalidParameters("direction must be 'D->C' or 'C->D'")


@dataclass
class InvasionMc:
    direction: str
    replicates: int
    fixed: int
    unresolved: int
    fraction: float
    sigma: float
    ci: tuple
    closed_form: float
    moran: float
    separated: bool

    def z_score(self, target: float) -> float:
        return (self.fraction - target) / self.sigma if self.sigma > 0 else math.inf

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True, default=float)


def invasion_mc(setting: InvasionSetting, direction: str, replicates: int,
                horizon: float = math.inf, seed=0, rates: IbmRates | None = None) -> InvasionMc:
    """Empirical fixation frequency of a single mutant in the IBM."""
    rates = rates or setting.ibm_rates()
    if direction not in ("D->C", "C->D"):
        raise InvalidParameters("direction must be 'D->C' or 'C->D'")
    mutant = "C" if direction == "D->C" else "D"
    st = absorption_stats(IbmState.single_mutant(rates, mutant), replicates, horizon, seed)
    which = "fixed1" if mutant == "C" else "fixed0"
    probs = invasion_probs(setting)
    return InvasionMc(direction=direction, replicates=replicates, fixed=getattr(st, which),
                      unresolved=st.alive, fraction=st.fraction(which), sigma=st.sigma(which),
                      ci=st.ci(which),
                      closed_form=probs.pi_DC if mutant == "C" else probs.pi_CD,
                      moran=moran_product(rates, direction),
                      separated=rates.gamma_G_bar <= SEPARATION * rates.gamma_I_bar)


def sweep_csv(settings, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s_over_gamma", "r1_over_gammaG", "pi_DC", "pi_CD", "direction"])
    for st in settings:
        p = invasion_probs(st)
        d, _ = selection_direction(st, override=True)
        w.writerow([repr(st.a), repr(st.b), repr(p.pi_DC), repr(p.pi_CD), d])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
