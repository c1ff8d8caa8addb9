"""Two-level (individual / group) selection: forward equation, QSDs, regimes, simulators."""
__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .model import (DecomposedMeasure, Grid, IbmRates, ModelParams, RateFunction,
                    ibm_rates_from_limit, integrate, limit_from_ibm_rates, tv_distance)
from .pde import build_forward_operator, evolve, evolve_conditioned, evolve_normalized, truncated_evolve
from .qsd import solve_qsd, verify_ext_rho

__all__ = ["DecomposedMeasure", "Grid", "IbmRates", "ModelParams", "RateFunction",
           "ibm_rates_from_limit", "integrate", "limit_from_ibm_rates", "tv_distance",
           "build_forward_operator", "evolve", "evolve_conditioned", "evolve_normalized",
           "truncated_evolve", "solve_qsd", "verify_ext_rho", "__version__"]
