"""Attacker behavior models (QR, SUQR, SHARP) and the defender's learning loss.

Every model scores a target with ``f(x_n, theta)`` and the attacker picks
targets by the softmax of those scores.  Besides the scores themselves this
module supplies every first and second derivative the hypergradient code
needs, vectorised over targets, history steps and parameter batches.

Parameter arrays may carry leading batch dimensions: ``theta[..., m]``
broadcasts against coverage arrays ``x[..., N]``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .diffopt import Polytope
from .game import GameInstance

SHARP_CLAMP = 1e-6


class ModelKind(str, enum.Enum):
    QR = "QR"
    SUQR = "SUQR"
    SHARP = "SHARP"

    @property
    def n_params(self) -> int:
        return {"QR": 1, "SUQR": 3, "SHARP": 5}[self.value]

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown behavior model {value!r}") from None


PARAM_BOXES = {
    ModelKind.QR: ([0.0], [5.0]),
    ModelKind.SUQR: ([-15.0, 0.0, -2.0], [0.0, 2.0, 0.0]),
    ModelKind.SHARP: ([-15.0, 0.0, -2.0, 0.3, 0.3], [0.0, 2.0, 0.0, 3.0, 3.0]),
}

ParamSpace = Polytope


def param_space(kind: ModelKind) -> Polytope:
    """Default feasible parameter box for ``kind`` as a polytope."""
    lo, hi = PARAM_BOXES[ModelKind.parse(kind)]
    return Polytope.box(lo, hi)


@dataclass(frozen=True)
class ParamVector:
    kind: ModelKind
    theta: np.ndarray

    def __post_init__(self):
        kind = ModelKind.parse(self.kind)
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.size != kind.n_params:
            raise ValueError(f"{kind.value} takes {kind.n_params} parameters, got {theta.size}")
        theta.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "theta", theta)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamVector":
        return cls(ModelKind.parse(d["kind"]), d["theta"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class ScoreTerms(NamedTuple):
    """Scores and their partials, shapes ``(..., N)`` / ``(..., N, m)`` / ``(..., N, m, m)``."""

    f: np.ndarray
    fx: np.ndarray
    fth: np.ndarray
    fxx: np.ndarray
    fxth: np.ndarray
    fthth: np.ndarray


def _full(shape, value) -> np.ndarray:
    out = np.empty(shape)
    out[...] = value
    return out


def _check_theta(kind: ModelKind, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1:] != (kind.n_params,):
        raise ValueError(f"{kind.value} expects {kind.n_params} parameters, got shape {theta.shape}")
    return theta


def score_terms(kind: ModelKind, game: GameInstance, x, theta, order: int = 2) -> ScoreTerms:
    """Scores ``f`` and partial derivatives for every target.

    ``order`` 0 fills only ``f``; 1 adds ``fx`` and ``fth``; 2 adds the
    second-order blocks.  Unfilled entries are ``None``.
    """
    kind = ModelKind.parse(kind)
    theta = _check_theta(kind, theta)
    x = np.asarray(x, dtype=float)
    th = [theta[..., k, None] for k in range(kind.n_params)]
    R, P = game.att_reward, game.att_penalty
    m = kind.n_params

    if kind is ModelKind.QR:
        lam = th[0]
        U = x * game.att_slope + R
        f = lam * U
        if order == 0:
            return ScoreTerms(f, None, None, None, None, None)
        shape = f.shape
        fx = _full(shape, lam * game.att_slope)
        fth = _full(shape, U)[..., None]
        if order == 1:
            return ScoreTerms(f, fx, fth, None, None, None)
        fxx = np.zeros(shape)
        fxth = _full(shape, game.att_slope)[..., None]
        return ScoreTerms(f, fx, fth, fxx, fxth, np.zeros(shape + (1, 1)))

    if kind is ModelKind.SUQR:
        w1, w2, w3 = th
        f = w1 * x + w2 * R + w3 * P
        if order == 0:
            return ScoreTerms(f, None, None, None, None, None)
        shape = f.shape
        fx = _full(shape, w1)
        fth = np.empty(shape + (m,))
        fth[..., 0], fth[..., 1], fth[..., 2] = x, R, P
        if order == 1:
            return ScoreTerms(f, fx, fth, None, None, None)
        fxth = np.zeros(shape + (m,))
        fxth[..., 0] = 1.0
        return ScoreTerms(f, fx, fth, np.zeros(shape), fxth, np.zeros(shape + (m, m)))

    # SHARP: SUQR with coverage passed through the weighting function
    # pi(p) = delta p^g / (delta p^g + (1-p)^g) = expit(log(delta) + g * logit(p)).
    # The score uses the exact pi (limits 0 and 1 at the ends); derivatives
    # are taken at p clamped away from {0, 1} so they stay finite for g < 1.
    w1, w2, w3, gam, dlt = th
    with np.errstate(divide="ignore"):
        pi_exact = expit(np.log(dlt) + gam * (np.log(x) - np.log1p(-x)))
    f = w1 * pi_exact + w2 * R + w3 * P
    if order == 0:
        return ScoreTerms(f, None, None, None, None, None)
    shape = f.shape
    p = np.clip(x, SHARP_CLAMP, 1.0 - SHARP_CLAMP)
    ell = np.log(p) - np.log1p(-p)
    pi = expit(np.log(dlt) + gam * ell)
    d1 = pi * (1.0 - pi)
    pq = p * (1.0 - p)
    s_p = gam / pq
    pi_p = d1 * s_p
    pi_g = d1 * ell
    pi_d = d1 / dlt
    fx = w1 * pi_p
    fth = np.empty(shape + (m,))
    fth[..., 0], fth[..., 1], fth[..., 2] = pi_exact, R, P
    fth[..., 3], fth[..., 4] = w1 * pi_g, w1 * pi_d
    if order == 1:
        return ScoreTerms(f, fx, fth, None, None, None)
    d2 = d1 * (1.0 - 2.0 * pi)
    s_pp = -gam * (1.0 - 2.0 * p) / pq ** 2
    pi_pp = d2 * s_p ** 2 + d1 * s_pp
    pi_pg = d2 * s_p * ell + d1 / pq
    pi_pd = d2 * s_p / dlt
    pi_gg = d2 * ell ** 2
    pi_gd = d2 * ell / dlt
    pi_dd = (d2 - d1) / dlt ** 2
    fxx = w1 * pi_pp
    fxth = np.zeros(shape + (m,))
    fxth[..., 0] = pi_p
    fxth[..., 3] = w1 * pi_pg
    fxth[..., 4] = w1 * pi_pd
    fthth = np.zeros(shape + (m, m))
    fthth[..., 0, 3] = fthth[..., 3, 0] = pi_g
    fthth[..., 0, 4] = fthth[..., 4, 0] = pi_d
    fthth[..., 3, 3] = w1 * pi_gg
    fthth[..., 3, 4] = fthth[..., 4, 3] = w1 * pi_gd
    fthth[..., 4, 4] = w1 * pi_dd
    return ScoreTerms(f, fx, fth, fxx, fxth, fthth)


def _as_theta(theta):
    return theta.theta if isinstance(theta, ParamVector) else theta


def score(kind, game: GameInstance, n: int, x_n: float, theta) -> float:
    """Score of a single target under coverage ``x_n``."""
    theta = _as_theta(theta)
    x = np.zeros(game.n_targets)
    x[n] = x_n
    return float(score_terms(kind, game, x, theta, order=0).f[n])


def score_grads(kind, game: GameInstance, n: int, x_n: float, theta) -> tuple[float, np.ndarray]:
    """``(df/dx_n, df/dtheta)`` for a single target."""
    theta = _as_theta(theta)
    x = np.zeros(game.n_targets)
    x[n] = x_n
    t = score_terms(kind, game, x, theta, order=1)
    return float(t.fx[n]), np.array(t.fth[n])


def softmax(f, axis: int = -1) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    e = np.exp(f - f.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(f) -> tuple[np.ndarray, np.ndarray]:
    """``(log q, q)`` along the last axis, shifted by the max score."""
    shifted = f - f.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    tot = e.sum(axis=-1, keepdims=True)
    return shifted - np.log(tot), e / tot


def attack_distribution(kind, game: GameInstance, x, theta) -> np.ndarray:
    """Probability of each target being attacked."""
    return softmax(score_terms(kind, game, x, _as_theta(theta), order=0).f)


# learning loss --------------------------------------------------------------

def _history(history) -> tuple[np.ndarray, np.ndarray]:
    X, Z = history
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if X.shape != Z.shape or X.shape[0] == 0:
        raise ValueError("history must hold at least one (strategy, attacks) pair of equal shape")
    return X, Z


def nll_loss(history, kind, game: GameInstance, theta) -> float:
    """Attack-count weighted negative log-likelihood of the history."""
    X, Z = _history(history)
    f = score_terms(kind, game, X, _as_theta(theta), order=0).f
    logq, _ = _log_softmax(f)
    return float(-(Z * logq).sum())


def loss_grad_theta(history, kind, game: GameInstance, theta) -> np.ndarray:
    """Gradient of :func:`nll_loss` in ``theta``."""
    X, Z = _history(history)
    t = score_terms(kind, game, X, _as_theta(theta), order=1)
    q = softmax(t.f)
    resid = Z - Z.sum(axis=-1, keepdims=True) * q
    return -np.einsum("sn,snk->k", resid, t.fth)


def loss_and_grad_batch(X, Z, kind, game: GameInstance, thetas) -> tuple[np.ndarray, np.ndarray]:
    """Loss and gradient for a batch of parameter vectors ``thetas[R, m]``."""
    th = np.asarray(thetas, dtype=float)[:, None, :]
    t = score_terms(kind, game, X[None], th, order=1)
    logq, q = _log_softmax(t.f)
    loss = -(Z * logq).sum(axis=(1, 2))
    resid = Z - Z.sum(axis=-1, keepdims=True) * q
    R = resid.shape[0]
    grad = -(resid[..., None] * t.fth).reshape(R, -1, t.fth.shape[-1]).sum(axis=1)
    return loss, grad


def jacobian_blocks_batch(X, Z, kind, game: GameInstance, thetas):
    """Batched second-derivative blocks for parameter vectors ``thetas[I, m]``.

    Returns ``J_theta[I, m, m]``, ``J_x[I, S, m, N]`` and ``J_z[I, S, m, N]``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    th = np.asarray(thetas, dtype=float)[:, None, :]
    t = score_terms(kind, game, X[None], th, order=2)
    _, q = _log_softmax(t.f)
    tot = Z.sum(axis=-1, keepdims=True)
    resid = Z - tot * q
    fbar = np.einsum("isn,isnk->isk", q, t.fth)
    centered = t.fth - fbar[:, :, None, :]

    J_theta = -np.einsum("isn,isnkl->ikl", resid, t.fthth)
    J_theta += np.einsum("isnk,isnl->ikl", (tot * q)[..., None] * centered, centered)
    J_z = -np.swapaxes(centered, -1, -2)
    J_x = -resid[..., None] * t.fxth + (tot * q * t.fx)[..., None] * centered
    return J_theta, np.swapaxes(J_x, -1, -2), J_z


def loss_jacobian_blocks(history, kind, game: GameInstance, theta):
    """Second-derivative blocks of the loss.

    Returns ``(J_theta, J_x, J_z)`` where ``J_theta`` is ``d2L/dtheta2`` (m x m)
    and ``J_x[s]``, ``J_z[s]`` are the m x N mixed blocks ``d2L/dtheta dx_s``
    and ``d2L/dtheta dz_s`` for each history step ``s``.
    """
    X, Z = _history(history)
    theta = _check_theta(ModelKind.parse(kind), _as_theta(theta))
    J_th, J_x, J_z = jacobian_blocks_batch(X, Z, kind, game, theta[None])
    return J_th[0], list(J_x[0]), list(J_z[0])


__all__ = [
    "ModelKind", "ParamVector", "ParamSpace", "PARAM_BOXES", "param_space", "ScoreTerms",
    "score_terms", "score", "score_grads", "softmax", "attack_distribution", "nll_loss",
    "loss_grad_theta", "loss_and_grad_batch", "loss_jacobian_blocks", "jacobian_blocks_batch",
]
