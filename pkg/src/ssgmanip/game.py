"""Security game instances, per-target utilities and the SSE baseline."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .diffopt import TOL_FEAS, Polytope

StrategyPolytope = Polytope


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GameInstance:
    """Payoffs of an N-target security game plus the repeated-play settings."""

    att_reward: np.ndarray
    att_penalty: np.ndarray
    def_reward: np.ndarray
    def_penalty: np.ndarray
    strategy_space: Polytope
    max_attacks: int = 50
    horizon: int = 1
    covariance_r: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ("att_reward", "att_penalty", "def_reward", "def_penalty"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.att_reward.size
        if n < 1:
            raise ValueError("a game needs at least one target")
        for name in ("att_penalty", "def_reward", "def_penalty"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        if np.any(self.att_penalty >= self.att_reward):
            raise ValueError("attacker penalty must be below attacker reward")
        if np.any(self.def_penalty >= self.def_reward):
            raise ValueError("defender penalty must be below defender reward")
        if self.strategy_space.dim != n:
            raise ValueError("strategy space dimension does not match target count")
        if self.max_attacks < 0 or self.horizon < 1:
            raise ValueError("max_attacks must be >= 0 and horizon >= 1")

    @property
    def n_targets(self) -> int:
        return self.att_reward.size

    @property
    def budget(self) -> Optional[float]:
        return self.strategy_space.budget

    # vectorised utilities
    def def_utilities(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x * (self.def_reward - self.def_penalty) + self.def_penalty

    def att_utilities(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x * (self.att_penalty - self.att_reward) + self.att_reward

    @property
    def def_slope(self) -> np.ndarray:
        return self.def_reward - self.def_penalty

    @property
    def att_slope(self) -> np.ndarray:
        return self.att_penalty - self.att_reward

    def with_settings(self, **kw) -> "GameInstance":
        fields = dict(att_reward=self.att_reward, att_penalty=self.att_penalty,
                      def_reward=self.def_reward, def_penalty=self.def_penalty,
                      strategy_space=self.strategy_space, max_attacks=self.max_attacks,
                      horizon=self.horizon, covariance_r=self.covariance_r, seed=self.seed)
        fields.update(kw)
        return GameInstance(**fields)

    # serialization
    def to_dict(self) -> dict:
        if self.strategy_space.form != "budget_box":
            raise ValueError("only budget-box games serialize to JSON")
        return {
            "n_targets": self.n_targets,
            "horizon": self.horizon,
            "max_attacks": self.max_attacks,
            "att_reward": self.att_reward.tolist(),
            "att_penalty": self.att_penalty.tolist(),
            "def_reward": self.def_reward.tolist(),
            "def_penalty": self.def_penalty.tolist(),
            "budget": self.budget,
            "covariance_r": self.covariance_r,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GameInstance":
        n = int(d["n_targets"])
        return cls(att_reward=d["att_reward"], att_penalty=d["att_penalty"],
                   def_reward=d["def_reward"], def_penalty=d["def_penalty"],
                   strategy_space=Polytope.budget_box(n, float(d["budget"])),
                   max_attacks=int(d.get("max_attacks", 50)),
                   horizon=int(d.get("horizon", 1)),
                   covariance_r=d.get("covariance_r"), seed=d.get("seed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GameInstance":
        return cls.from_dict(json.loads(text))


def _check_target(game: GameInstance, n: int):
    if not 0 <= n < game.n_targets:
        raise IndexError(f"target {n} out of range for {game.n_targets} targets")


def def_utility_at(game: GameInstance, n: int, x_n: float) -> float:
    """Defender's expected utility when target ``n`` is attacked."""
    _check_target(game, n)
    return x_n * (game.def_reward[n] - game.def_penalty[n]) + game.def_penalty[n]


def att_utility_at(game: GameInstance, n: int, x_n: float) -> float:
    """Attacker's expected utility for attacking target ``n``."""
    _check_target(game, n)
    return x_n * (game.att_penalty[n] - game.att_reward[n]) + game.att_reward[n]


def att_step_utility(game: GameInstance, x, z) -> float:
    """Attacker utility of attack counts ``z`` against coverage ``x``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.shape != (game.n_targets,) or z.shape != (game.n_targets,):
        raise ValueError("coverage and attack vectors must have one entry per target")
    return float(z @ game.att_utilities(x))


def covariance_weight(r: float) -> float:
    """Weight on the negated attacker payoff so the mixture has correlation |r|.

    Mixing ``w * a + (1 - w) * e`` of two iid variables has correlation
    ``w / sqrt(w^2 + (1 - w)^2)`` with ``a``; solving for ``|r|`` gives this.
    """
    s = abs(r)
    return s / (s + math.sqrt(1.0 - s * s)) if s < 1.0 else 1.0


def generate_covariance_game(n_targets: int, r: float, seed: int, ratio: float = 0.5,
                             *, max_attacks: int = 50, horizon: int = 1) -> GameInstance:
    """Random game whose defender payoffs have correlation ``r`` with the attacker's.

    Attacker rewards are U[0, 10] and penalties U[-10, 0].  Defender rewards
    mix ``-P^a`` with a fresh U[0, 10] draw (and penalties mix ``-R^a`` with a
    fresh U[-10, 0] draw) using :func:`covariance_weight`, so ``r = -1`` is
    exactly zero-sum, ``r = 0`` independent, and the mixture stays in range.
    """
    if not -1.0 <= r <= 0.0:
        raise ValueError(f"covariance r must lie in [-1, 0], got {r}")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"resource ratio must lie in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    att_r = rng.uniform(0.0, 10.0, n_targets)
    att_p = rng.uniform(-10.0, 0.0, n_targets)
    # measure-zero ties would violate the strict payoff ordering
    att_p = np.minimum(att_p, att_r - 1e-9)
    fresh_r = rng.uniform(0.0, 10.0, n_targets)
    fresh_p = rng.uniform(-10.0, 0.0, n_targets)
    w = covariance_weight(r)
    if w == 1.0:
        def_r, def_p = -att_p, -att_r
    else:
        def_r = w * (-att_p) + (1.0 - w) * fresh_r
        def_p = w * (-att_r) + (1.0 - w) * fresh_p
    def_p = np.minimum(def_p, def_r - 1e-9)
    budget = float(math.ceil(ratio * n_targets - 1e-12))
    return GameInstance(att_r, att_p, def_r, def_p, Polytope.budget_box(n_targets, budget),
                        max_attacks=max_attacks, horizon=horizon, covariance_r=float(r),
                        seed=int(seed))


def solve_sse(game: GameInstance) -> tuple[np.ndarray, int]:
    """Strong Stackelberg equilibrium by the multiple-LP method.

    For each candidate target ``n`` maximise the defender's utility at ``n``
    over coverages that make ``n`` a best response.  Candidates are compared
    on defender utility; ties go to the lowest index.
    """
    N = game.n_targets
    space = game.strategy_space
    a_slope, a_rew = game.att_slope, game.att_reward
    best_val, best_x, best_n = -np.inf, None, -1
    for n in range(N):
        # U^a_{n'}(x_{n'}) - U^a_n(x_n) <= 0 for every n' != n
        rows = []
        rhs = []
        for k in range(N):
            if k == n:
                continue
            row = np.zeros(N)
            row[k] = a_slope[k]
            row[n] = -a_slope[n]
            rows.append(row)
            rhs.append(a_rew[n] - a_rew[k])
        A_ub = np.vstack([space.A] + ([np.array(rows)] if rows else []))
        b_ub = np.concatenate([space.b, np.array(rhs)])
        c = np.zeros(N)
        c[n] = -(game.def_reward[n] - game.def_penalty[n])
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * N, method="highs")
        if res.status != 0:
            continue
        x = np.clip(res.x, 0.0, 1.0)
        val = def_utility_at(game, n, x[n])
        if val > best_val + 1e-9:
            best_val, best_x, best_n = val, x, n
    if best_x is None:
        raise RuntimeError("no SSE candidate LP was feasible")
    assert space.contains(best_x, tol=1e-6)
    return best_x, best_n


def best_response(game: GameInstance, x) -> int:
    """Attacker best response to ``x``; ties broken by lowest index."""
    u = game.att_utilities(x)
    return int(np.flatnonzero(u >= u.max() - 1e-12)[0])


__all__ = [
    "GameInstance", "StrategyPolytope", "TOL_FEAS", "def_utility_at", "att_utility_at",
    "att_step_utility", "generate_covariance_game", "covariance_weight", "solve_sse",
    "best_response",
]
