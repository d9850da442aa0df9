"""Multi-step manipulative attack planning.

The attacker's objective is the accumulated utility

    F(z) = sum_t z_t . U^a(x_t)

where ``x_1`` is the SSE strategy and every later ``x_t`` comes from the
defender learning on all earlier (x, z) pairs and then patrolling.  ``F`` is
maximised over relaxed attack counts by projected gradient ascent, with
``dF/dz`` assembled from the patrol hypergradients ``dx_t/dtheta_t`` and the
learning hypergradients ``dtheta_t/dz_s`` (s < t).

Steps are indexed from 0 in code: step 0 plays the SSE strategy.
"""

from __future__ import annotations

import json
import logging
import math
import time
import weakref
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .behavior import ModelKind, ParamVector, param_space
from .defender import (LearnOutcome, PGDConfig, Schedule, learn_theta, learning_hypergradient,
                       patrol_alt, patrol_pgd_with_grad)
from .diffopt import Polytope, SolverError, project_capped_simplex
from .game import GameInstance, best_response, solve_sse

log = logging.getLogger(__name__)

OUTER_STREAM = 4
_sse_cache: "weakref.WeakKeyDictionary[GameInstance, tuple]" = weakref.WeakKeyDictionary()


def sse_cached(game: GameInstance) -> tuple[np.ndarray, int]:
    if game not in _sse_cache:
        _sse_cache[game] = solve_sse(game)
    x, n = _sse_cache[game]
    return x.copy(), n


@dataclass(frozen=True)
class AttackPlan:
    """T x N attack counts, each row inside the capped simplex of size K."""

    z: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        if z.ndim != 2:
            raise ValueError("an attack plan is a T x N matrix")
        if np.any(z < -1e-12):
            raise ValueError("attack counts must be nonnegative")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def horizon(self) -> int:
        return self.z.shape[0]

    def check(self, cap: float) -> None:
        if np.any(self.z.sum(axis=1) > cap + 1e-8):
            raise ValueError(f"some step launches more than {cap} attacks")

    def to_dict(self) -> dict:
        return {"z": self.z.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackPlan":
        return cls(d["z"])


@dataclass
class Trajectory:
    """One play-through of the horizon, optionally with derivative blocks.

    ``dx_dtheta[t]`` is N x m; ``dtheta_dz[(t, s)]`` is m x N for s < t.
    ``schedules[t]`` holds the (learning, patrol) schedules of step t and is
    what a frozen re-simulation replays.
    """

    strategies: np.ndarray
    attacks: np.ndarray
    params: list
    total_utility: float
    model: Optional[ModelKind]
    solver: str = "pgd"
    dx_dtheta: dict = field(default_factory=dict)
    dtheta_dz: dict = field(default_factory=dict)
    schedules: dict = field(default_factory=dict)
    learn: dict = field(default_factory=dict)
    patrol: dict = field(default_factory=dict)
    converged: bool = True

    @property
    def has_grads(self) -> bool:
        return len(self.dx_dtheta) == self.strategies.shape[0] - 1

    def dx_dz(self, t: int, s: int) -> np.ndarray:
        """``d x_t / d z_s``; zero unless s < t."""
        N = self.strategies.shape[1]
        if s >= t:
            return np.zeros((N, N))
        return self.dx_dtheta[t] @ self.dtheta_dz[(t, s)]

    def active_signature(self) -> tuple:
        """Strict active sets of every projection replayed along the way."""
        sig = []
        for t in sorted(self.learn):
            sig.append(tuple(tuple(np.flatnonzero(p.strict_mask)) for p in self.learn[t].trace.projections))
            po = self.patrol.get(t)
            if po is not None and po.active is not None:
                sig.append(tuple(tuple(np.flatnonzero(row)) for row in po.active))
        return tuple(sig)

    @property
    def degenerate(self) -> bool:
        """True when some replayed projection had an active row with zero multiplier."""
        learn = any(p.degenerate for lo in self.learn.values() for p in lo.trace.projections)
        return learn or any(po.degenerate for po in self.patrol.values())

    def to_dict(self) -> dict:
        return {
            "model": self.model.value if self.model is not None else None,
            "solver": self.solver,
            "strategies": self.strategies.tolist(),
            "attacks": self.attacks.tolist(),
            "params": [p.to_dict() if p is not None else None for p in self.params],
            "total_utility": self.total_utility,
            "converged": self.converged,
            "dx_dtheta": {str(t): v.tolist() for t, v in self.dx_dtheta.items()},
            "dtheta_dz": {f"{t},{s}": v.tolist() for (t, s), v in self.dtheta_dz.items()},
            "schedules": {str(t): [list(a) if a else None for a in v]
                          for t, v in self.schedules.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _slot_scale(game: GameInstance, n_steps: int) -> float:
    return float(max(game.max_attacks * n_steps, 1))


def simulate_horizon(game: GameInstance, plan, attacker_model, defender_model,
                     cfg: PGDConfig, with_grads: bool = False, *, solver: str = "pgd",
                     schedules: Optional[dict] = None,
                     param_spaces: Optional[dict] = None) -> Trajectory:
    """Play ``plan`` against the learning defender.

    Without gradients this is the actual game: the defender learns with
    ``defender_model`` and patrols with ``solver`` ("pgd" or "alt").  With
    gradients it is the attacker's model of the game: learning with
    ``attacker_model`` and PGD patrolling, with every derivative block needed
    by :func:`total_gradient`.  The two coincide for matched models under PGD.

    ``schedules`` (from a previous trajectory) freezes restart choices and
    iteration counts so the map from ``z`` to ``F`` is smooth.
    """
    z = plan.z if isinstance(plan, AttackPlan) else np.asarray(plan, dtype=float)
    T, N = z.shape
    if N != game.n_targets:
        raise ValueError("plan width does not match the number of targets")
    model = ModelKind.parse(attacker_model if with_grads else defender_model)
    if with_grads:
        solver = "pgd"
    if solver not in ("pgd", "alt"):
        raise ValueError(f"unknown patrol solver {solver!r}")
    space = (param_spaces or {}).get(model) or param_space(model)
    base_key = int(game.seed or 0)

    X = np.zeros((T, N))
    X[0], _ = sse_cached(game)
    traj = Trajectory(X, z.copy(), [None] * T, 0.0, model, solver)
    theta_prev = None
    for t in range(1, T):
        hist = (X[:t], z[:t])
        sched = schedules.get(t, (None, None)) if schedules else (None, None)
        try:
            theta0 = theta_prev if (cfg.warm_start and theta_prev is not None) else None
            lo = learn_theta(hist, model, game, space, cfg, scale=_slot_scale(game, t),
                             key=(base_key, t), theta0=theta0, schedule=sched[0])
            theta = lo.theta
            if solver == "pgd":
                po = patrol_pgd_with_grad(game, theta, model, cfg, key=(base_key, t),
                                          schedule=sched[1])
            else:
                po = patrol_alt(game, theta, model, cfg, key=(base_key, t))
        except SolverError as exc:
            raise SolverError(f"step {t}: {exc}") from exc
        X[t] = po.x
        traj.params[t] = theta
        traj.learn[t] = lo
        traj.patrol[t] = po
        traj.schedules[t] = (lo.schedule, po.schedule)
        traj.converged &= lo.converged and po.converged
        theta_prev = theta.theta
        if with_grads:
            traj.dx_dtheta[t] = po.dx_dtheta
            dxz = {(u, s): traj.dx_dz(u, s) for u in range(1, t) for s in range(u)}
            blocks = grad_theta_wrt_z(lo, hist, dxz, model, game, space)
            for s, blk in enumerate(blocks):
                traj.dtheta_dz[(t, s)] = blk
    traj.total_utility = float(np.einsum("tn,tn->", z, game.att_utilities(X)))
    return traj


def grad_theta_wrt_z(learn: LearnOutcome, history, dx_dz: dict, attacker_model,
                     game: GameInstance, space: Optional[Polytope] = None) -> list[np.ndarray]:
    """``[d theta_t / d z_s for s < t]`` from the learning trace of step t.

    ``dx_dz[(u, s)] = d x_u / d z_s`` for earlier steps; those are the
    composition of patrol and learning hypergradients already computed.
    """
    if learn is None or learn.trace is None:
        raise ValueError("learning trace missing; rerun learning to record it")
    model = ModelKind.parse(attacker_model)
    space = space or param_space(model)
    return learning_hypergradient(learn.trace, history, model, game, space, dx_dz)


def total_gradient(traj: Trajectory, game: GameInstance, plan=None) -> np.ndarray:
    """``dF/dz`` as a T x N matrix.

    The direct term is ``U^a(x_s)``; each later step adds
    ``(z_t * dU^a/dx) . dx_t/dz_s``.
    """
    z = traj.attacks if plan is None else (plan.z if isinstance(plan, AttackPlan) else np.asarray(plan))
    T, N = z.shape
    if T > 1 and not traj.has_grads:
        raise ValueError("trajectory was simulated without gradient blocks")
    grad = game.att_utilities(traj.strategies).copy()
    for s in range(T):
        for t in range(s + 1, T):
            grad[s] += (z[t] * game.att_slope) @ traj.dx_dz(t, s)
    return grad


# outer ascent ---------------------------------------------------------------

@dataclass
class PlanResult:
    plan: AttackPlan
    trajectory: Trajectory
    restart_values: list
    n_iters: list
    runtime_sec: float
    converged: bool


def random_plan(game: GameInstance, T: int, rng: np.random.Generator) -> np.ndarray:
    K = game.max_attacks
    return project_capped_simplex(rng.uniform(0.0, K, (T, game.n_targets)), K)


def myopic_plan(game: GameInstance, model, cfg: PGDConfig, T: Optional[int] = None, *,
                solver: str = "pgd", param_spaces=None) -> AttackPlan:
    """Greedy per-step plan: each row maximises that step's utility alone.

    The maximiser of a linear utility over the capped simplex is all K
    attacks on the best response when its utility is positive, else no
    attack at all.
    """
    T = T or game.horizon
    z = np.zeros((T, game.n_targets))
    for t in range(T):
        traj = simulate_horizon(game, z[:t + 1], model, model, cfg, solver=solver,
                                param_spaces=param_spaces)
        x = traj.strategies[t]
        n = best_response(game, x)
        if game.att_utilities(x)[n] > 0:
            z[t, n] = game.max_attacks
    return AttackPlan(z)


def _ascend(game, z, model, cfg, param_spaces) -> tuple[np.ndarray, Trajectory, int, bool]:
    K = game.max_attacks
    traj = simulate_horizon(game, z, model, model, cfg, True, param_spaces=param_spaces)
    F = traj.total_utility
    for it in range(cfg.outer_max_iters):
        g = total_gradient(traj, game, z)
        if not np.all(np.isfinite(g)):
            log.warning("non-finite attacker gradient; stopping this restart")
            return z, traj, it, False
        step = cfg.outer_alpha
        for _ in range(cfg.outer_halvings + 1):
            zn = project_capped_simplex(z + step * g, K)
            if np.max(np.abs(zn - z)) < 1e-12:
                return z, traj, it, True
            trial = simulate_horizon(game, zn, model, model, cfg, True, param_spaces=param_spaces)
            if trial.total_utility > F + cfg.outer_tol:
                break
            step *= 0.5
        else:
            return z, traj, it, True
        z, traj, F = zn, trial, trial.total_utility
    return z, traj, cfg.outer_max_iters, False


def optimize_plan(game: GameInstance, attacker_model, defender_model, cfg: PGDConfig,
                  n_outer_restarts: Optional[int] = None, *, T: Optional[int] = None,
                  param_spaces=None) -> PlanResult:
    """Best relaxed attack plan under the attacker's model of the defender.

    Restarts from the myopic plan and ``n_outer_restarts`` random feasible
    plans; each runs projected gradient ascent with step halving until no
    step improves ``F``.  ``defender_model`` only matters when the plan is
    evaluated (see :func:`evaluate_plan`): the planner never sees it.
    """
    model = ModelKind.parse(attacker_model)
    T = T or game.horizon
    restarts = cfg.outer_restarts if n_outer_restarts is None else n_outer_restarts
    start = time.perf_counter()
    K = game.max_attacks
    inits = [myopic_plan(game, model, cfg, T, param_spaces=param_spaces).z]
    for r in range(restarts):
        rng = np.random.default_rng([int(cfg.seed), OUTER_STREAM, int(game.seed or 0), r])
        inits.append(random_plan(game, T, rng))
    best = None
    values, iters, conv_all = [], [], True
    for z0 in inits:
        if K == 0:
            z0 = np.zeros_like(z0)
        z, traj, n_it, conv = _ascend(game, z0, model, cfg, param_spaces)
        values.append(traj.total_utility)
        iters.append(n_it)
        conv_all &= conv
        if best is None or traj.total_utility > best[1].total_utility:
            best = (z, traj)
    return PlanResult(AttackPlan(best[0]), best[1], values, iters,
                      time.perf_counter() - start, conv_all)


def round_plan(plan, cap: Optional[float] = None) -> AttackPlan:
    """Integer plan by largest remainders, row by row.

    Each row keeps ``min(floor(sum z), cap)`` attacks: entries are floored
    and the leftover units go to the largest fractional parts (lowest index
    first on ties).
    """
    z = plan.z if isinstance(plan, AttackPlan) else np.asarray(plan, dtype=float)
    out = np.floor(z + 1e-9)
    for t, row in enumerate(z):
        total = math.floor(row.sum() + 1e-9)
        if cap is not None:
            total = min(total, int(math.floor(cap + 1e-9)))
        frac = row - out[t]
        short = int(total - out[t].sum())
        if short > 0:
            order = sorted(range(row.size), key=lambda n: (-round(frac[n], 12), n))
            for n in order[:short]:
                out[t, n] += 1
        elif short < 0:
            for n in sorted(range(row.size), key=lambda n: (round(frac[n], 12), -n)):
                if short == 0:
                    break
                take = min(out[t, n], -short)
                out[t, n] -= take
                short += int(take)
    return AttackPlan(out)


# evaluation -----------------------------------------------------------------

@dataclass
class StepUtilities:
    attacker: float
    defender: float


def per_step_utilities(game: GameInstance, strategies, attacks) -> StepUtilities:
    """Per-step, per-attack-slot averages of both players' realised utilities."""
    X = np.asarray(strategies, dtype=float)
    Z = np.asarray(attacks, dtype=float)
    norm = X.shape[0] * max(game.max_attacks, 1)
    att = float((Z * game.att_utilities(X)).sum() / norm)
    dfn = float((Z * game.def_utilities(X)).sum() / norm)
    return StepUtilities(att, dfn)


def nonmanipulative_baseline(game: GameInstance, T: Optional[int] = None) -> tuple[AttackPlan, Trajectory]:
    """Both players repeat the SSE every step."""
    T = T or game.horizon
    x, n = sse_cached(game)
    X = np.tile(x, (T, 1))
    z = np.zeros((T, game.n_targets))
    z[:, n] = game.max_attacks
    F = float(np.einsum("tn,tn->", z, game.att_utilities(X)))
    traj = Trajectory(X, z, [None] * T, F, None, "sse")
    return AttackPlan(z), traj


def evaluate_plan(game: GameInstance, plan, attacker_model, defender_model, cfg: PGDConfig, *,
                  solver: str = "pgd", rounded: bool = True, param_spaces=None):
    """Round ``plan`` and play it against the actual defender."""
    if rounded:
        plan = round_plan(plan, game.max_attacks)
    traj = simulate_horizon(game, plan, attacker_model, defender_model, cfg, False,
                            solver=solver, param_spaces=param_spaces)
    return plan, traj, per_step_utilities(game, traj.strategies, traj.attacks)


__all__ = [
    "AttackPlan", "Trajectory", "PlanResult", "StepUtilities", "simulate_horizon",
    "grad_theta_wrt_z", "total_gradient", "optimize_plan", "round_plan", "myopic_plan",
    "random_plan", "nonmanipulative_baseline", "per_step_utilities", "evaluate_plan",
    "sse_cached",
]
