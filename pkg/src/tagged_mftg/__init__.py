"""Tagged and ordinary pedestrian crowds as mean-field type games."""

from .core import Ensemble, TimeGrid, empirical_law, make_grid, sample_brownian
from .lq import integrate_matching, solve_lq
from .lsmc import PicardConfig, solve_equilibrium
from .scenarios import ScenarioSpec, builtin, parse_scenario, serialize_scenario

__all__ = [
    "Ensemble",
    "PicardConfig",
    "ScenarioSpec",
    "TimeGrid",
    "builtin",
    "empirical_law",
    "integrate_matching",
    "make_grid",
    "parse_scenario",
    "sample_brownian",
    "serialize_scenario",
    "solve_equilibrium",
    "solve_lq",
]
