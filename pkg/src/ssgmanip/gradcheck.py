"""Finite-difference checks of the planner's analytic derivatives.

Every check freezes the inner solvers with the schedules of a base run, so
perturbed runs replay the same restart for the same number of steps.  A
perturbation that changes any strict active set, or a base run with a weakly
active constraint, makes the map non-smooth there; such entries are reported
as excluded rather than compared.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .behavior import ModelKind
from .defender import PGDConfig, patrol_pgd_with_grad
from .game import GameInstance
from .planner import AttackPlan, simulate_horizon, total_gradient

log = logging.getLogger(__name__)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``max|a - b| / max(max|a|, max|b|, floor)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def mask(self) -> np.ndarray:
        keep = np.ones(self.analytic.shape, dtype=bool)
        for idx in self.excluded:
            keep[idx] = False
        return keep

    @property
    def rel_err(self) -> float:
        keep = self.mask
        return relative_error(self.analytic[keep], self.numeric[keep])

    @property
    def usable(self) -> bool:
        return not self.degenerate and bool(self.mask.any())

    def to_dict(self) -> dict:
        return {"analytic": self.analytic.tolist(), "numeric": self.numeric.tolist(),
                "excluded": [list(map(int, np.atleast_1d(i))) for i in self.excluded],
                "degenerate": self.degenerate,
                "rel_err": self.rel_err if self.usable else None}


def _frozen(game, z, model, cfg, schedules, param_spaces):
    return simulate_horizon(game, z, model, model, cfg, False, schedules=schedules,
                            param_spaces=param_spaces)


def check_total_gradient(game: GameInstance, plan, model, cfg: PGDConfig, eps: float = 1e-3,
                         *, param_spaces=None) -> GradCheck:
    """``total_gradient`` against central differences of ``F`` in each ``z_{s,n}``."""
    model = ModelKind.parse(model)
    z = plan.z if isinstance(plan, AttackPlan) else np.asarray(plan, dtype=float)
    base = simulate_horizon(game, z, model, model, cfg, True, param_spaces=param_spaces)
    analytic = total_gradient(base, game, z)
    numeric = np.zeros_like(analytic)
    sig = base.active_signature()
    excluded = []
    for idx in np.ndindex(*z.shape):
        vals = []
        for sign in (1.0, -1.0):
            zp = z.copy()
            zp[idx] += sign * eps
            tr = _frozen(game, zp, model, cfg, base.schedules, param_spaces)
            if tr.active_signature() != sig:
                excluded.append(idx)
            vals.append(tr.total_utility)
        numeric[idx] = (vals[0] - vals[1]) / (2 * eps)
    excluded = sorted(set(excluded))
    if excluded or base.degenerate:
        log.info("total-gradient check: %d entries excluded, degenerate=%s",
                 len(excluded), base.degenerate)
    return GradCheck(analytic, numeric, excluded, base.degenerate)


def check_learning_hypergradient(game: GameInstance, plan, model, cfg: PGDConfig, t: int,
                                 s: int, eps: float = 1e-3, *, param_spaces=None) -> GradCheck:
    """``d theta_t / d z_s`` against central differences of the learned parameters."""
    model = ModelKind.parse(model)
    z = plan.z if isinstance(plan, AttackPlan) else np.asarray(plan, dtype=float)
    if not 0 <= s < t < z.shape[0]:
        raise ValueError("need 0 <= s < t < horizon")
    base = simulate_horizon(game, z, model, model, cfg, True, param_spaces=param_spaces)
    analytic = base.dtheta_dz[(t, s)]
    numeric = np.zeros_like(analytic)
    sig = base.active_signature()
    excluded = []
    for n in range(z.shape[1]):
        cols = []
        for sign in (1.0, -1.0):
            zp = z.copy()
            zp[s, n] += sign * eps
            tr = _frozen(game, zp, model, cfg, base.schedules, param_spaces)
            if tr.active_signature() != sig:
                excluded.extend((k, n) for k in range(analytic.shape[0]))
            cols.append(tr.params[t].theta)
        numeric[:, n] = (cols[0] - cols[1]) / (2 * eps)
    return GradCheck(analytic, numeric, sorted(set(excluded)), base.degenerate)


def check_patrol_hypergradient(game: GameInstance, theta, model, cfg: PGDConfig,
                               eps: float = 1e-4, *, key=()) -> GradCheck:
    """``dx/dtheta`` of the patrol solver against central differences in each parameter."""
    model = ModelKind.parse(model)
    theta = np.asarray(theta, dtype=float)
    base = patrol_pgd_with_grad(game, theta, model, cfg, key=key)
    numeric = np.zeros_like(base.dx_dtheta)
    excluded = []
    for j in range(theta.size):
        cols = []
        for sign in (1.0, -1.0):
            th = theta.copy()
            th[j] += sign * eps
            po = patrol_pgd_with_grad(game, th, model, cfg, key=key, schedule=base.schedule)
            if not np.array_equal(po.active, base.active):
                excluded.extend((n, j) for n in range(game.n_targets))
            cols.append(po.x)
        numeric[:, j] = (cols[0] - cols[1]) / (2 * eps)
    return GradCheck(base.dx_dtheta, numeric, sorted(set(excluded)), base.degenerate)


__all__ = ["GradCheck", "relative_error", "check_total_gradient",
           "check_learning_hypergradient", "check_patrol_hypergradient"]
