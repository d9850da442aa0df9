"""The defender's learn-then-patrol step.

Patrolling maximises the defender's expected utility against the learned
softmax attacker by projected gradient ascent; while iterating we carry the
derivative of the iterate with respect to the model parameters (unrolled
differentiation through the ascent and the projections).  Learning fits the
parameters by projected gradient descent on the attack log-likelihood and
keeps the accepted iterates so the attacker can differentiate through them.

Each PGD call runs its restarts as one batch without derivatives, picks the
best restart, then replays that restart alone with derivatives.  The replay
is governed by a :class:`Schedule` (restart index, accepted steps), which
can also be passed in to freeze the pipeline for finite-difference checks.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .behavior import (ModelKind, ParamVector, loss_and_grad_batch, loss_grad_theta,
                       jacobian_blocks_batch, nll_loss, score_terms, softmax)
from .diffopt import (Polytope, ProjectionResult, SolverError, project_many, project_polytope,
                      project_rows, projection_jacobian)
from .game import GameInstance

log = logging.getLogger(__name__)

PATROL_STREAM = 1
LEARN_STREAM = 2
ALT_STREAM = 3


@dataclass(frozen=True)
class PGDConfig:
    """Step sizes, restarts and tolerances for the three nested PGD loops."""

    step_alpha: float = 0.01      # patrol ascent step
    learn_alpha: float = 0.05     # learning descent step (per attack slot)
    n_rounds: int = 5             # restarts of each inner PGD
    max_iters: int = 500
    utility_tol: float = 1e-7
    loss_tol: float = 1e-7
    seed: int = 0
    warm_start: bool = False      # learning starts from the previous step's theta
    outer_alpha: float = 0.5      # attacker ascent step, attacks per unit gradient
    outer_restarts: int = 5
    outer_max_iters: int = 50
    outer_tol: float = 1e-6
    outer_halvings: int = 20

    def __post_init__(self):
        if self.step_alpha <= 0 or self.learn_alpha <= 0 or self.outer_alpha <= 0:
            raise ValueError("step sizes must be positive")
        if self.n_rounds < 1 or self.max_iters < 0 or self.outer_restarts < 0:
            raise ValueError("restart and iteration counts must be positive")
        if self.utility_tol < 0 or self.loss_tol < 0:
            raise ValueError("tolerances must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PGDConfig":
        return cls(**d)


class Schedule(NamedTuple):
    """Which restart won and how many ascent/descent steps it accepted."""

    restart: int
    n_iters: int


def _rng(cfg: PGDConfig, stream: int, key: Sequence[int], restart: int) -> np.random.Generator:
    return np.random.default_rng([int(cfg.seed), stream, *map(int, key), restart])


# defender utility -----------------------------------------------------------

def defender_utility(game: GameInstance, x, theta, kind) -> float:
    """Expected defender utility against the softmax attacker."""
    theta = theta.theta if isinstance(theta, ParamVector) else theta
    q = softmax(score_terms(kind, game, x, theta, order=0).f)
    return float(q @ game.def_utilities(x))


def _centered(q, u):
    # u_k - q.u as a weighted sum of pairwise gaps; stays accurate when q is one-hot
    return np.einsum("...kn,...n->...k", u[..., :, None] - u[..., None, :], q)


def _utility_batch(game, X, theta, kind) -> np.ndarray:
    q = softmax(score_terms(kind, game, X, theta, order=0).f)
    return (q * game.def_utilities(X)).sum(axis=-1)


def _grad_batch(game, X, theta, kind) -> np.ndarray:
    t = score_terms(kind, game, X, theta, order=1)
    q = softmax(t.f)
    dev = _centered(q, game.def_utilities(X))
    return q * (game.def_slope + t.fx * dev)


def defender_utility_grad(game: GameInstance, x, theta, kind):
    """Gradient ``G`` of the defender utility in ``x`` and its Jacobian blocks.

    Returns ``(G, J_G_x, J_G_theta)`` with shapes ``(N,)``, ``(N, N)``, ``(N, m)``.
    """
    theta = theta.theta if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    t = score_terms(kind, game, x, theta, order=2)
    q = softmax(t.f)
    d = game.def_slope
    u = game.def_utilities(x)
    dev = _centered(q, u)
    c = d + t.fx * dev
    G = q * c
    rest = (1.0 - np.eye(q.size)) @ q    # 1 - q without cancellation
    J_x = -np.outer(q * c, q * t.fx) - np.outer(q * t.fx, G)
    np.fill_diagonal(J_x, q * t.fx * (rest * (c + d) - q * t.fx * dev) + q * t.fxx * dev)
    centered = np.einsum("knj,n->kj", t.fth[:, None, :] - t.fth[None, :, :], q)
    dubar = (q * dev) @ centered
    J_th = ((q * c)[:, None] * centered
            + q[:, None] * (t.fxth * dev[:, None] - np.outer(t.fx, dubar)))
    return G, J_x, J_th


# patrol ---------------------------------------------------------------------

@dataclass
class PatrolOutcome:
    x: np.ndarray
    utility: float
    dx_dtheta: np.ndarray
    solver_tag: str = "PGD"
    schedule: Optional[Schedule] = None
    converged: bool = True
    # strictly active rows and degeneracy flags of each replayed projection
    active: Optional[np.ndarray] = None
    degenerate: bool = False


def _initial_strategies(game: GameInstance, cfg: PGDConfig, key) -> np.ndarray:
    draws = [_rng(cfg, PATROL_STREAM, key, r).uniform(0.0, 1.0, game.n_targets)
             for r in range(cfg.n_rounds)]
    return project_rows(np.array(draws), game.strategy_space)


def _patrol_forward(game, theta, kind, cfg, X0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    space = game.strategy_space
    X = X0.copy()
    U = _utility_batch(game, X, theta, kind)
    iters = np.zeros(len(X), dtype=int)
    live = np.isfinite(U)
    converged = np.zeros(len(X), dtype=bool)
    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        Xa = X[idx]
        Xn = project_rows(Xa + cfg.step_alpha * _grad_batch(game, Xa, theta, kind), space)
        Un = _utility_batch(game, Xn, theta, kind)
        gain = Un - U[idx]
        ok = np.isfinite(Un) & (gain >= 0)
        X[idx[ok]] = Xn[ok]
        U[idx[ok]] = Un[ok]
        iters[idx[ok]] += 1
        stop = ~np.isfinite(Un) | (gain <= cfg.utility_tol)
        converged[idx[stop]] = True
        live[idx[stop]] = False
    return X, U, iters, converged


def _patrol_replay(game, theta, kind, cfg, x0, n_iters):
    space = game.strategy_space
    x = x0.copy()
    dx = np.zeros((game.n_targets, kind.n_params))
    a = cfg.step_alpha
    eye = np.eye(game.n_targets)
    masks = np.zeros((n_iters, space.n_rows), dtype=bool)
    degenerate = False
    for i in range(n_iters):
        G, J_x, J_th = defender_utility_grad(game, x, theta, kind)
        dx = a * J_th + (a * J_x + eye) @ dx
        res = project_polytope(x + a * G, space)
        dx = projection_jacobian(res, space, method="nullspace") @ dx
        x = res.point
        masks[i] = res.strict_mask
        degenerate |= res.degenerate
    return x, dx, masks, degenerate


def patrol_pgd_with_grad(game: GameInstance, theta, kind, cfg: PGDConfig, *,
                         key: Sequence[int] = (), x0=None,
                         schedule: Optional[Schedule] = None) -> PatrolOutcome:
    """Best of ``cfg.n_rounds`` projected-gradient ascents plus ``dx/dtheta``.

    ``x0`` replaces the random starting points with one fixed start.
    ``schedule`` skips the search and replays the given restart for exactly
    the given number of steps.
    """
    kind = ModelKind.parse(kind)
    theta = theta.theta if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    if x0 is not None:
        X0 = project_rows(np.asarray(x0, dtype=float)[None], game.strategy_space)
    else:
        X0 = _initial_strategies(game, cfg, key)
    converged = True
    if schedule is None:
        X, U, iters, conv = _patrol_forward(game, theta, kind, cfg, X0)
        if not np.isfinite(U).any():
            raise SolverError("every patrol restart produced a non-finite utility")
        best = int(np.argmax(np.where(np.isfinite(U), U, -np.inf)))
        schedule = Schedule(best, int(iters[best]))
        converged = bool(conv[best])
    x, dx, masks, degen = _patrol_replay(game, theta, kind, cfg, X0[schedule.restart],
                                         schedule.n_iters)
    return PatrolOutcome(x, defender_utility(game, x, theta, kind), dx, "PGD", schedule,
                         converged, masks, degen)


def patrol_alt(game: GameInstance, theta, kind, cfg: PGDConfig, *,
               key: Sequence[int] = ()) -> PatrolOutcome:
    """Log-barrier interior-point maximiser of the same objective.

    Newton steps on ``-U^d - mu * sum(log(b - A x))`` with the barrier weight
    shrunk by 0.2 per round, from several interior starts.  No parameter
    derivative is produced.
    """
    kind = ModelKind.parse(kind)
    theta = theta.theta if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    space = game.strategy_space
    A, b = space.A, space.b
    m = kind.n_params
    center, radius = space.chebyshev_center()
    if radius < 1e-9:
        x = project_polytope(center, space).point
        return PatrolOutcome(x, defender_utility(game, x, theta, kind),
                             np.zeros((game.n_targets, m)), "InteriorAlt")

    def phi(x, mu):
        s = b - A @ x
        if np.any(s <= 0):
            return np.inf
        return -defender_utility(game, x, theta, kind) - mu * np.log(s).sum()

    best_x, best_u = None, -np.inf
    for r in range(cfg.n_rounds):
        y = project_rows(_rng(cfg, ALT_STREAM, key, r).uniform(0, 1, game.n_targets)[None],
                         space)[0]
        x = center + 0.9 * (y - center) if r else center.copy()
        mu = 1.0
        while mu > 1e-10:
            for _ in range(50):
                s = b - A @ x
                G, J_x, _ = defender_utility_grad(game, x, theta, kind)
                g = -G + mu * (A.T @ (1.0 / s))
                H = -0.5 * (J_x + J_x.T) + mu * (A.T * (1.0 / s ** 2)) @ A
                w, V = np.linalg.eigh(H)
                w = np.maximum(np.abs(w), 1e-10)
                dx = -(V @ ((V.T @ g) / w))
                dec = -g @ dx
                if dec < 1e-14:
                    break
                step, f0 = 1.0, phi(x, mu)
                while step > 1e-12 and phi(x + step * dx, mu) > f0 - 0.25 * step * dec:
                    step *= 0.5
                if step <= 1e-12:
                    break
                x = x + step * dx
            mu *= 0.2
        u = defender_utility(game, x, theta, kind)
        if u > best_u:
            best_x, best_u = x, u
    if best_x is None:
        raise SolverError("interior-point patrol failed on every start")
    return PatrolOutcome(best_x, best_u, np.zeros((game.n_targets, m)), "InteriorAlt")


# learning -------------------------------------------------------------------

@dataclass
class LearnTrace:
    """Accepted iterates of the winning learning restart.

    ``iterates[0]`` is the (feasible) start; ``projections[i]`` is the
    projection that produced ``iterates[i + 1]``.
    """

    step: float
    iterates: list = field(default_factory=list)
    projections: list = field(default_factory=list)

    @property
    def n_iters(self) -> int:
        return len(self.projections)

    def to_dict(self) -> dict:
        return {"step": self.step,
                "iterates": [np.asarray(t).tolist() for t in self.iterates],
                "active": [p.active_mask.tolist() for p in self.projections]}


@dataclass
class LearnOutcome:
    theta: ParamVector
    loss: float
    trace: LearnTrace
    schedule: Schedule
    converged: bool = True


def _initial_thetas(space: Polytope, cfg: PGDConfig, key, m: int) -> np.ndarray:
    if space.form == "box":
        lo, hi = space.lower, space.upper
    else:
        c, _ = space.chebyshev_center()
        lo, hi = c - 1.0, c + 1.0
    # lo + u * (hi - lo) keeps the leading draws shared between nested models
    draws = [lo + _rng(cfg, LEARN_STREAM, key, r).random(m) * (hi - lo)
             for r in range(cfg.n_rounds)]
    return project_rows(np.array(draws).reshape(cfg.n_rounds, m), space)


def learn_theta(history, kind, game: GameInstance, space: Polytope, cfg: PGDConfig, *,
                scale: float = 1.0, key: Sequence[int] = (), theta0=None,
                schedule: Optional[Schedule] = None) -> LearnOutcome:
    """Fit behavior parameters to ``history = (X, Z)`` by projected gradient descent.

    The descent step is ``cfg.learn_alpha / scale``; callers pass the number
    of attack slots in the history as ``scale`` so one step size suits any
    history length.  Returns the best restart by loss and its trace.
    """
    kind = ModelKind.parse(kind)
    X, Z = history
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if X.shape[0] == 0 or X.shape != Z.shape:
        raise ValueError("learning needs a non-empty history of matching shapes")
    m = kind.n_params
    step = cfg.learn_alpha / scale
    if theta0 is not None:
        T0 = project_rows(np.asarray(theta0, dtype=float).reshape(1, m), space)
    else:
        T0 = _initial_thetas(space, cfg, key, m)

    converged = True
    if schedule is None:
        TH = T0.copy()
        L, H = loss_and_grad_batch(X, Z, kind, game, TH)
        iters = np.zeros(len(TH), dtype=int)
        live = np.isfinite(L)
        conv = np.zeros(len(TH), dtype=bool)
        pre = []            # pre-projection points of every restart, per step
        for _ in range(cfg.max_iters):
            idx = np.flatnonzero(live)
            if idx.size == 0:
                break
            V = np.full_like(TH, np.nan)
            V[idx] = TH[idx] - step * H[idx]
            pre.append(V)
            Tn = project_rows(V[idx], space)
            Ln, Hn = loss_and_grad_batch(X, Z, kind, game, Tn)
            drop = L[idx] - Ln
            ok = np.isfinite(Ln) & (drop >= 0)
            TH[idx[ok]], L[idx[ok]], H[idx[ok]] = Tn[ok], Ln[ok], Hn[ok]
            iters[idx[ok]] += 1
            stop = ~np.isfinite(Ln) | (drop <= cfg.loss_tol * scale)
            conv[idx[stop]] = True
            live[idx[stop]] = False
        if not np.isfinite(L).any():
            raise SolverError("every learning restart produced a non-finite loss")
        best = int(np.argmin(np.where(np.isfinite(L), L, np.inf)))
        schedule = Schedule(best, int(iters[best]))
        converged = bool(conv[best])
        trace = LearnTrace(step)
        trace.iterates.append(T0[best].copy())
        if schedule.n_iters:
            # accepted steps of a restart form a prefix of its recorded steps
            results = project_many([V[best] for V in pre[:schedule.n_iters]], space)
            trace.projections.extend(results)
            trace.iterates.extend(r.point.copy() for r in results)
        theta = trace.iterates[-1]
    else:
        trace = LearnTrace(step)
        theta = T0[schedule.restart].copy()
        trace.iterates.append(theta.copy())
        for _ in range(schedule.n_iters):
            res = project_polytope(theta - step * loss_grad_theta((X, Z), kind, game, theta),
                                   space)
            theta = res.point
            trace.iterates.append(theta.copy())
            trace.projections.append(res)
    return LearnOutcome(ParamVector(kind, theta), nll_loss((X, Z), kind, game, theta),
                        trace, schedule, converged)


def learning_hypergradient(trace: LearnTrace, history, kind, game: GameInstance,
                           space: Polytope, dx_dz: dict) -> list[np.ndarray]:
    """``d theta / d z_s`` for every history step ``s`` by replaying ``trace``.

    ``dx_dz[(u, s)]`` holds ``d x_u / d z_s`` (N x N) for ``s < u``; strategies
    of steps not depending on ``z_s`` need no entry.  Each descent step adds

        -step * (sum_u J_x[u] dx_u/dz_s + J_z[s] + J_theta dtheta/dz_s)

    and each projection multiplies by the projection Jacobian.
    """
    kind = ModelKind.parse(kind)
    X, Z = history
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    S, N = X.shape
    m = kind.n_params
    D = np.zeros((S, m, N))
    n_it = trace.n_iters
    if n_it == 0:
        return list(D)
    J_th, J_x, J_z = jacobian_blocks_batch(X, Z, kind, game, np.array(trace.iterates[:n_it]))
    # constant-in-D part of each step: J_z[s] + sum_u J_x[u] dx_u/dz_s
    C = J_z.copy()
    for (u, s), M in dx_dz.items():
        if s < u < S:
            C[:, s] += J_x[:, u] @ M
    if space.form == "box":
        # the box projection Jacobian is a 0/1 diagonal
        free = np.array([~(r.strict_mask[:m] | r.strict_mask[m:]) for r in trace.projections[:n_it]])
        for i in range(n_it):
            D = free[i][:, None] * (D - trace.step * (C[i] + J_th[i] @ D))
        return list(D)
    for i in range(n_it):
        P = projection_jacobian(trace.projections[i], space, method="nullspace")
        D = P @ (D - trace.step * (C[i] + J_th[i] @ D))
    return list(D)


__all__ = [
    "PGDConfig", "Schedule", "PatrolOutcome", "LearnOutcome", "LearnTrace",
    "defender_utility", "defender_utility_grad", "patrol_pgd_with_grad", "patrol_alt",
    "learn_theta", "learning_hypergradient",
]
