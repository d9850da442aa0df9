"""Manipulative attack planning against defenders that learn attacker behavior.

Submodules: ``game`` (instances, SSE), ``behavior`` (QR/SUQR/SHARP models and
their learning loss), ``diffopt`` (polytopes, projections, projection
Jacobians), ``defender`` (learn-then-patrol with hypergradients), ``planner``
(attack-plan optimisation), ``gradcheck`` (finite-difference harness) and
``bench`` (experiment matrix and CSV output).
"""

from .behavior import ModelKind, ParamVector, param_space
from .defender import PGDConfig
from .diffopt import Polytope, PolytopeError, SolverError
from .game import GameInstance, generate_covariance_game, solve_sse
from .planner import (AttackPlan, Trajectory, evaluate_plan, nonmanipulative_baseline,
                      optimize_plan, round_plan, simulate_horizon, total_gradient)

__all__ = [
    "ModelKind", "ParamVector", "param_space", "PGDConfig", "Polytope", "PolytopeError",
    "SolverError", "GameInstance", "generate_covariance_game", "solve_sse", "AttackPlan",
    "Trajectory", "evaluate_plan", "nonmanipulative_baseline", "optimize_plan", "round_plan",
    "simulate_horizon", "total_gradient",
]
