import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssgmanip.game import (GameInstance, att_step_utility, att_utility_at, best_response,
                           covariance_weight, def_utility_at, generate_covariance_game, solve_sse)
from ssgmanip.diffopt import Polytope

from conftest import make_game


@pytest.fixture
def small():
    return make_game([6.0, 5.0], [-3.0, -1.0], [4.0, 3.0], [-2.0, -5.0], 1.0)


@pytest.mark.parametrize("x, want", [(1.0, 4.0), (0.0, -2.0), (0.5, 1.0)])
def test_def_utility_examples(small, x, want):
    assert def_utility_at(small, 0, x) == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("x, want", [(0.0, 6.0), (1.0, -3.0), (2.0 / 3.0, 0.0)])
def test_att_utility_examples(small, x, want):
    assert att_utility_at(small, 0, x) == pytest.approx(want, abs=1e-14)


def test_utilities_reject_bad_index(small):
    with pytest.raises(IndexError):
        def_utility_at(small, 2, 0.5)
    with pytest.raises(IndexError):
        att_utility_at(small, -1, 0.5)


def test_step_utility_examples(small):
    x = np.array([0.3, 0.7])
    assert att_step_utility(small, x, [0.0, 0.0]) == 0.0
    assert att_step_utility(small, x, [0.0, 1.0]) == pytest.approx(att_utility_at(small, 1, 0.7))
    with pytest.raises(ValueError):
        att_step_utility(small, x, [1.0, 0.0, 0.0])


def test_step_utility_matches_scalar_loop(rng):
    g = generate_covariance_game(3, -0.3, 7)
    for _ in range(20):
        x = rng.uniform(0, 1, 3)
        z = rng.uniform(0, 10, 3)
        loop = 0.0
        for n in range(3):
            loop += z[n] * (x[n] * g.att_penalty[n] + (1 - x[n]) * g.att_reward[n])
        assert att_step_utility(g, x, z) == pytest.approx(loop, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.1, 5.0))
def test_step_utility_bilinear_and_permutation(seed, xn, c):
    g = generate_covariance_game(4, -0.5, seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, 4)
    z = rng.uniform(0, 5, 4)
    base = att_step_utility(g, x, z)
    assert att_step_utility(g, x, c * z) == pytest.approx(c * base, rel=1e-10, abs=1e-10)
    perm = rng.permutation(4)
    gp = GameInstance(g.att_reward[perm], g.att_penalty[perm], g.def_reward[perm],
                      g.def_penalty[perm], g.strategy_space)
    assert att_step_utility(gp, x[perm], z[perm]) == pytest.approx(base, rel=1e-10, abs=1e-10)
    # affine in the coverage of one target, with the stated slopes
    h = 1e-3
    for n in range(4):
        fd_d = (def_utility_at(g, n, xn + h) - def_utility_at(g, n, xn - h)) / (2 * h)
        fd_a = (att_utility_at(g, n, xn + h) - att_utility_at(g, n, xn - h)) / (2 * h)
        assert fd_d == pytest.approx(g.def_reward[n] - g.def_penalty[n], rel=1e-9)
        assert fd_a == pytest.approx(g.att_penalty[n] - g.att_reward[n], rel=1e-9)


def test_payoff_ordering_enforced():
    with pytest.raises(ValueError):
        make_game([1.0], [1.0], [1.0], [0.0], 1.0)
    with pytest.raises(ValueError):
        make_game([1.0, 2.0], [0.0], [1.0, 1.0], [0.0, 0.0], 1.0)


def test_budget_box_expansion_exact():
    p = Polytope.budget_box(3, 2.0)
    want_A = np.vstack([np.eye(3), -np.eye(3), np.ones((1, 3))])
    want_b = np.concatenate([np.ones(3), np.zeros(3), [2.0]])
    assert np.array_equal(p.A, want_A) and np.array_equal(p.b, want_b)
    q = Polytope.budget_box(3, 2.0)
    assert p.A.tobytes() == q.A.tobytes() and p.b.tobytes() == q.b.tobytes()


@pytest.mark.parametrize("seed", [0, 3, 99])
def test_zero_sum_generation(seed):
    g = generate_covariance_game(6, -1.0, seed)
    assert np.array_equal(g.def_reward, -g.att_penalty)
    assert np.array_equal(g.def_penalty, -g.att_reward)
    x = np.random.default_rng(seed).uniform(0, 1, 6)
    assert np.allclose(g.def_utilities(x), -g.att_utilities(x), rtol=0, atol=1e-12)


def test_generation_deterministic_and_ranges():
    a = generate_covariance_game(8, 0.0, 5)
    b = generate_covariance_game(8, 0.0, 5)
    assert a.to_json() == b.to_json()
    for g in (a, generate_covariance_game(8, -0.7, 1)):
        assert np.all((g.att_reward >= 0) & (g.att_reward <= 10))
        assert np.all((g.def_reward >= 0) & (g.def_reward <= 10))
        assert np.all((g.att_penalty >= -10) & (g.att_penalty <= 0))
        assert np.all((g.def_penalty >= -10) & (g.def_penalty <= 0))
        assert g.budget == 4.0


def test_generation_rejects_bad_parameters():
    with pytest.raises(ValueError):
        generate_covariance_game(4, 0.5, 0)
    with pytest.raises(ValueError):
        generate_covariance_game(4, -1.5, 0)
    with pytest.raises(ValueError):
        generate_covariance_game(4, -0.5, 0, ratio=0.0)


def test_budget_rounds_up():
    assert generate_covariance_game(5, 0.0, 0).budget == 3.0
    assert generate_covariance_game(5, 0.0, 0, ratio=0.3).budget == 2.0
    assert generate_covariance_game(10, 0.0, 0, ratio=0.3).budget == 3.0


def test_covariance_mixing_correlation():
    # Monte-Carlo check of the generator's own mixing rule: corr(R^d, -P^a) = |r|
    vals = []
    for seed in range(1250):
        g = generate_covariance_game(8, -0.5, seed)
        vals.append(np.stack([g.def_reward, -g.att_penalty], axis=1))
    pairs = np.concatenate(vals)
    assert pairs.shape[0] == 10_000
    corr = np.corrcoef(pairs.T)[0, 1]
    assert abs(corr - 0.5) <= 0.05
    w = covariance_weight(-0.5)
    assert w / math.hypot(w, 1 - w) == pytest.approx(0.5, rel=1e-12)


def test_json_round_trip():
    g = generate_covariance_game(5, -0.4, 11, max_attacks=20, horizon=3)
    h = GameInstance.from_json(g.to_json())
    for name in ("att_reward", "att_penalty", "def_reward", "def_penalty"):
        assert np.array_equal(getattr(g, name), getattr(h, name))
    assert (h.budget, h.max_attacks, h.horizon, h.covariance_r, h.seed) == (3.0, 20, 3, -0.4, 11)


def test_sse_symmetric_zero_sum():
    g = make_game([5.0, 5.0], [-5.0, -5.0], [5.0, 5.0], [-5.0, -5.0], 1.0)
    x, n = solve_sse(g)
    assert np.allclose(x, [0.5, 0.5], atol=1e-9)


def test_sse_full_budget():
    g = generate_covariance_game(4, -0.3, 2)
    g = g.with_settings(strategy_space=Polytope.budget_box(4, 4.0))
    x, n = solve_sse(g)
    u = g.att_utilities(np.ones(4))
    assert np.max(u) - u[n] <= 1e-9
    assert def_utility_at(g, n, x[n]) == pytest.approx(g.def_reward[n], abs=1e-7)


def _grid_sse_value(g, step=1e-3):
    """Best defender utility over a coverage grid with defender-favourable ties.

    Rounding coverage to the grid moves each attacker utility by at most
    ``|slope| * step / 2``, so near-ties up to ``max|slope| * step`` count as ties.
    """
    k = int(round(1 / step))
    grid = np.arange(k + 1) * step
    a_s, a_r = g.att_slope, g.att_reward
    d_s, d_p = g.def_slope, g.def_penalty
    tie = np.abs(a_s).max() * step
    best = -np.inf
    for i in range(k + 1):
        m = k - i
        x2 = grid[:m + 1, None]
        x3 = grid[None, :m + 1]
        inside = (np.arange(m + 1)[:, None] + np.arange(m + 1)[None, :]) <= m
        u1 = grid[i] * a_s[0] + a_r[0]
        u2 = x2 * a_s[1] + a_r[1]
        u3 = x3 * a_s[2] + a_r[2]
        top = np.maximum(np.maximum(u1, u2), u3) - tie
        val = np.maximum(np.maximum(np.where(u1 >= top, grid[i] * d_s[0] + d_p[0], -np.inf),
                                    np.where(u2 >= top, x2 * d_s[1] + d_p[1], -np.inf)),
                         np.where(u3 >= top, x3 * d_s[2] + d_p[2], -np.inf))
        best = max(best, val[inside].max())
    return best


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_sse_matches_grid_search(seed):
    g = generate_covariance_game(3, -0.5, seed, ratio=1 / 3)
    assert g.budget == 1.0
    x, n = solve_sse(g)
    ua = g.att_utilities(x)
    assert ua.max() - ua[n] <= 1e-6
    assert abs(def_utility_at(g, n, x[n]) - _grid_sse_value(g)) <= 1e-2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 7), st.floats(-1.0, 0.0))
def test_sse_best_response_property(seed, n_targets, r):
    g = generate_covariance_game(n_targets, r, seed)
    x, n = solve_sse(g)
    assert g.strategy_space.contains(x, tol=1e-6)
    ua = g.att_utilities(x)
    assert ua.max() - ua[n] <= 1e-6


def test_best_response_lowest_index_on_ties():
    g = make_game([5.0, 5.0, 1.0], [-5.0, -5.0, -1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 1.0)
    assert best_response(g, [0.2, 0.2, 0.0]) == 0
