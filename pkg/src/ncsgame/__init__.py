"""Decentralized LQ control over lossy, delayed networks.

Controllers share a linear plant, see its state through a network with sub-period
delays and Bernoulli packet losses, and each minimizes its own quadratic cost.  The
package computes the Nash gains of this game by backward recursion over an augmented
state of the plant state and all past controls, and checks them in closed-loop
Monte Carlo simulation.
"""

from .discretization import PlantSpec, build_beta, discretize, exp_integral, matrix_exponential
from .network import IMPERFECT, PERFECT, NetworkSpec, ScenarioRealization, empirical_rates, \
    sample_scenario
from .scenarios import ScenarioConfig, builtin_generic, builtin_lfc
from .simulator import CostSummary, SimulationTrace, run_episode, run_monte_carlo
from .solver import GainSchedule, GameSolution, converged_gains, single_controller_gains, \
    solve_game

__version__ = "0.1.0"

__all__ = [
    "PERFECT",
    "IMPERFECT",
    "PlantSpec",
    "NetworkSpec",
    "ScenarioRealization",
    "ScenarioConfig",
    "GainSchedule",
    "GameSolution",
    "SimulationTrace",
    "CostSummary",
    "matrix_exponential",
    "exp_integral",
    "discretize",
    "build_beta",
    "sample_scenario",
    "empirical_rates",
    "solve_game",
    "converged_gains",
    "single_controller_gains",
    "run_episode",
    "run_monte_carlo",
    "builtin_generic",
    "builtin_lfc",
]
