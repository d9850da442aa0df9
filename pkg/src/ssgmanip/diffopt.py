"""Euclidean projections onto polyhedra and their implicit Jacobians.

Every feasible set in the package is a polytope ``{x : A x <= b}``.  Three
structured forms get closed-form projections (box, budget box, capped
simplex); everything else goes through a small dense active-set QP.  The
Jacobian of the projection map comes from differentiating the KKT system of

    min_x  1/2 ||x - v||^2   s.t.  A x <= b

with respect to ``v``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

log = logging.getLogger(__name__)

TOL_FEAS = 1e-8
TOL_ACTIVE = 1e-7
TOL_DUAL = 1e-9


class SolverError(RuntimeError):
    """Raised when an iterative solver fails to converge."""


class PolytopeError(ValueError):
    """Raised for empty or unbounded polytopes."""


@dataclass(frozen=True, eq=False)
class Polytope:
    """The set ``{x : A x <= b}`` with an optional structured form.

    ``form`` is one of ``"box"``, ``"budget_box"``, ``"capped_simplex"`` or
    ``"general"``.  Structured forms fix the row layout of ``A``:

    * box:            ``[I; -I]``, ``b = [upper; -lower]``
    * budget_box:     ``[I; -I; 1^T]``, ``b = [1; 0; budget]``
    * capped_simplex: ``[-I; 1^T]``, ``b = [0; budget]``
    """

    A: np.ndarray
    b: np.ndarray
    form: str = "general"
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    budget: Optional[float] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        b = np.array(self.b, dtype=float)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise PolytopeError(f"bad constraint shapes A{A.shape} b{b.shape}")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        if self.form == "general":
            self._check_general()

    # constructors ---------------------------------------------------------

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(lower > upper):
            raise PolytopeError("empty box: lower > upper")
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]),
                   form="box", lower=lower, upper=upper)

    @classmethod
    def budget_box(cls, n: int, budget: float) -> "Polytope":
        if budget < 0:
            raise PolytopeError("budget must be nonnegative")
        eye = np.eye(n)
        A = np.vstack([eye, -eye, np.ones((1, n))])
        b = np.concatenate([np.ones(n), np.zeros(n), [float(budget)]])
        return cls(A, b, form="budget_box", lower=np.zeros(n), upper=np.ones(n),
                   budget=float(budget))

    @classmethod
    def capped_simplex(cls, n: int, cap: float) -> "Polytope":
        if cap < 0:
            raise PolytopeError("cap must be nonnegative")
        A = np.vstack([-np.eye(n), np.ones((1, n))])
        b = np.concatenate([np.zeros(n), [float(cap)]])
        return cls(A, b, form="capped_simplex", lower=np.zeros(n), budget=float(cap))

    @classmethod
    def general(cls, A, b) -> "Polytope":
        return cls(A, b, form="general")

    # properties -----------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def contains(self, x, tol: float = TOL_FEAS) -> bool:
        return bool(np.all(self.A @ np.asarray(x, dtype=float) <= self.b + tol))

    def feasible_point(self) -> np.ndarray:
        if "feasible" not in self._cache:
            if self.form == "box":
                pt = 0.5 * (self.lower + self.upper)
            elif self.form in ("budget_box", "capped_simplex"):
                pt = np.zeros(self.dim)
            else:
                pt, _ = self.chebyshev_center()
            self._cache["feasible"] = pt
        return self._cache["feasible"].copy()

    def chebyshev_center(self) -> tuple[np.ndarray, float]:
        """Center and radius of the largest inscribed ball."""
        if "cheb" not in self._cache:
            norms = np.linalg.norm(self.A, axis=1)
            c = np.zeros(self.dim + 1)
            c[-1] = -1.0
            A_ub = np.hstack([self.A, norms[:, None]])
            res = linprog(c, A_ub=A_ub, b_ub=self.b,
                          bounds=[(None, None)] * self.dim + [(0, None)],
                          method="highs")
            if res.status != 0:
                raise PolytopeError(f"Chebyshev center LP failed: {res.message}")
            self._cache["cheb"] = (res.x[:-1], float(res.x[-1]))
        center, radius = self._cache["cheb"]
        return center.copy(), radius

    def _check_general(self):
        n = self.dim
        res = linprog(np.zeros(n), A_ub=self.A, b_ub=self.b,
                      bounds=[(None, None)] * n, method="highs")
        if res.status != 0:
            raise PolytopeError("polytope is empty")
        for j in range(n):
            for sign in (1.0, -1.0):
                c = np.zeros(n)
                c[j] = sign
                res = linprog(c, A_ub=self.A, b_ub=self.b,
                              bounds=[(None, None)] * n, method="highs")
                if res.status == 3:
                    raise PolytopeError(f"polytope unbounded along coordinate {j}")


@dataclass(frozen=True)
class ProjectionResult:
    point: np.ndarray
    duals: np.ndarray
    active_mask: np.ndarray

    @property
    def strict_mask(self) -> np.ndarray:
        return self.active_mask & (self.duals > TOL_DUAL)

    @property
    def degenerate(self) -> bool:
        """True when some constraint is active with a zero multiplier."""
        return bool(np.any(self.active_mask & (self.duals <= TOL_DUAL)))


# closed forms ---------------------------------------------------------------

def _waterfill_shift(V: np.ndarray, hi: float, cap: float) -> np.ndarray:
    """Row-wise shift tau >= 0 with sum(clip(v - tau, 0, hi)) == cap.

    Rows whose clipped sum already fits get tau = 0.  The clipped sum is
    piecewise linear in tau with kinks at v and v - hi, so evaluating it at
    the sorted kinks and interpolating is exact.
    """
    tau = np.zeros(V.shape[0])
    need = np.clip(V, 0.0, hi).sum(axis=1) > cap
    if not need.any():
        return tau
    W = V[need]
    kinks = W if np.isinf(hi) else np.concatenate([W, W - hi], axis=1)
    kinks = np.sort(np.maximum(kinks, 0.0), axis=1)
    pts = np.concatenate([np.zeros((W.shape[0], 1)), kinks], axis=1)
    g = np.clip(W[:, None, :] - pts[:, :, None], 0.0, hi).sum(axis=2)
    k = np.argmax(g <= cap, axis=1)
    rows = np.arange(W.shape[0])
    t0, t1 = pts[rows, k - 1], pts[rows, k]
    g0, g1 = g[rows, k - 1], g[rows, k]
    slope = np.where(g0 > g1, g0 - g1, 1.0)
    tau[need] = t0 + (g0 - cap) / slope * (t1 - t0)
    return tau


def project_capped_simplex(v, cap: float) -> np.ndarray:
    """Project onto ``{z >= 0, sum(z) <= cap}``; 2-D input is projected row-wise."""
    V = np.atleast_2d(np.asarray(v, dtype=float))
    tau = _waterfill_shift(V, np.inf, cap)
    out = np.maximum(V - tau[:, None], 0.0)
    return out.reshape(np.shape(v))


def project_rows(V, space: Polytope) -> np.ndarray:
    """Project every row of ``V`` onto ``space`` (points only)."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if space.form == "box":
        return np.clip(V, space.lower, space.upper)
    if space.form == "budget_box":
        tau = _waterfill_shift(V, 1.0, space.budget)
        return np.clip(V - tau[:, None], 0.0, 1.0)
    if space.form == "capped_simplex":
        return project_capped_simplex(V, space.budget)
    return np.array([project_polytope(row, space).point for row in V])


def _structured_duals(v: np.ndarray, space: Polytope) -> tuple[np.ndarray, np.ndarray]:
    if space.form == "box":
        x = np.clip(v, space.lower, space.upper)
        duals = np.concatenate([np.maximum(v - space.upper, 0.0),
                                np.maximum(space.lower - v, 0.0)])
        return x, duals
    hi = 1.0 if space.form == "budget_box" else np.inf
    tau = float(_waterfill_shift(v[None, :], hi, space.budget)[0])
    w = v - tau
    x = np.clip(w, 0.0, hi)
    low = np.maximum(-w, 0.0)
    if space.form == "budget_box":
        duals = np.concatenate([np.maximum(w - 1.0, 0.0), low, [tau]])
    else:
        duals = np.concatenate([low, [tau]])
    return x, duals


def _active_set_qp(v: np.ndarray, space: Polytope, max_iter: int) -> tuple[np.ndarray, np.ndarray]:
    """Primal active-set method for min 1/2||x - v||^2 s.t. A x <= b."""
    A, b = space.A, space.b
    x = space.feasible_point()
    work: list[int] = []
    lam = np.zeros(0)
    scale = 1.0 + np.linalg.norm(v)
    for _ in range(max_iter):
        r = v - x
        if work:
            Aw = A[work]
            lam = np.linalg.lstsq(Aw @ Aw.T, Aw @ r, rcond=None)[0]
            p = r - Aw.T @ lam
        else:
            lam = np.zeros(0)
            p = r
        if np.linalg.norm(p) <= 1e-12 * scale:
            if lam.size == 0 or lam.min() >= -1e-12:
                duals = np.zeros(space.n_rows)
                duals[work] = np.maximum(lam, 0.0)
                return x, duals
            work.pop(int(np.argmin(lam)))
            continue
        step, blocking = 1.0, None
        Ap = A @ p
        slack = b - A @ x
        for j in np.flatnonzero(Ap > 1e-14):
            if j in work:
                continue
            ratio = max(slack[j], 0.0) / Ap[j]
            if ratio < step:
                step, blocking = ratio, int(j)
        x = x + step * p
        if blocking is not None:
            work.append(blocking)
    infeas = np.linalg.norm(np.maximum(A @ x - b, 0.0))
    r = v - x
    stat = np.linalg.norm(r - A[work].T @ lam) if work and lam.size == len(work) else np.linalg.norm(r)
    raise SolverError(f"active-set QP did not converge in {max_iter} iterations "
                      f"(stationarity residual {stat:.3e}, infeasibility residual {infeas:.3e}, "
                      f"working set {work})")


def project_polytope(v, space: Polytope, *, method: str = "auto") -> ProjectionResult:
    """Euclidean projection of ``v`` onto ``space`` with multipliers.

    ``method="auto"`` uses the closed form for structured polytopes and the
    active-set QP otherwise; ``method="qp"`` forces the QP.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (space.dim,):
        raise ValueError(f"expected vector of length {space.dim}, got {v.shape}")
    if method == "auto" and space.form != "general":
        x, duals = _structured_duals(v, space)
    else:
        x, duals = _active_set_qp(v, space, max_iter=100 * space.n_rows)
    active = np.abs(space.A @ x - space.b) <= TOL_ACTIVE
    return ProjectionResult(x, duals, active)


def project_many(V, space: Polytope) -> list[ProjectionResult]:
    """:func:`project_polytope` applied to each row of ``V``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if space.form != "box":
        return [project_polytope(v, space) for v in V]
    X = np.clip(V, space.lower, space.upper)
    duals = np.concatenate([np.maximum(V - space.upper, 0.0),
                            np.maximum(space.lower - V, 0.0)], axis=1)
    active = np.abs(X @ space.A.T - space.b) <= TOL_ACTIVE
    return [ProjectionResult(x, d, a) for x, d, a in zip(X, duals, active)]


# Jacobians ------------------------------------------------------------------

def projection_jacobian(result: ProjectionResult, space: Polytope, *,
                        method: str = "kkt") -> np.ndarray:
    """d(projected point)/d(input) at ``result``.

    ``method="kkt"`` solves the implicit-function system

        [[I, A^T], [diag(eta) A, diag(A x - b)]] [dx; deta] = [I; 0]

    ``method="nullspace"`` uses the equivalent projector onto the null space
    of the strictly active rows.  Weakly active rows (zero multiplier) are
    treated as inactive in both.
    """
    if method == "nullspace":
        return _nullspace_jacobian(result, space)
    if method != "kkt":
        raise ValueError(f"unknown method {method!r}")
    A, b = space.A, space.b
    n, m = space.dim, space.n_rows
    x, eta = result.point, result.duals
    slack = A @ x - b
    strict = result.strict_mask
    weak = result.active_mask & ~strict
    slack = np.where(strict, 0.0, slack)
    slack = np.where(weak, -1.0, slack)
    eta = np.where(strict, eta, 0.0)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = np.eye(n)
    K[:n, n:] = A.T
    K[n:, :n] = eta[:, None] * A
    K[n:, n:] = np.diag(slack)
    rhs = np.zeros((n + m, n))
    rhs[:n] = np.eye(n)
    try:
        cond = np.linalg.cond(K)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned KKT matrix")
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        log.warning("singular KKT system in projection Jacobian; regularizing")
        Kr = K + 1e-10 * np.eye(n + m)
        sol = np.linalg.lstsq(Kr, rhs, rcond=None)[0]
    return sol[:n]


def _nullspace_jacobian(result: ProjectionResult, space: Polytope) -> np.ndarray:
    n = space.dim
    strict = result.strict_mask
    if space.form in ("box", "budget_box", "capped_simplex"):
        if space.form == "box":
            clamped = strict[:n] | strict[n:2 * n]
            budget_on = False
        elif space.form == "budget_box":
            clamped = strict[:n] | strict[n:2 * n]
            budget_on = bool(strict[-1])
        else:
            clamped = strict[:n]
            budget_on = bool(strict[-1])
        free = (~clamped).astype(float)
        J = np.diag(free)
        k = free.sum()
        if budget_on and k > 0:
            J -= np.outer(free, free) / k
        return J
    Aa = space.A[strict]
    if Aa.shape[0] == 0:
        return np.eye(n)
    return np.eye(n) - Aa.T @ np.linalg.pinv(Aa @ Aa.T) @ Aa
