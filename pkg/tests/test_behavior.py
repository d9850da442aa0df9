import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssgmanip.behavior import (PARAM_BOXES, ModelKind, ParamVector, attack_distribution,
                               loss_grad_theta, loss_jacobian_blocks, nll_loss, param_space,
                               score, score_grads, score_terms, softmax)
from ssgmanip.game import generate_covariance_game

from conftest import central_diff, make_game, rel_err


def random_theta(kind, rng, margin=0.05):
    lo, hi = map(np.asarray, PARAM_BOXES[kind])
    span = hi - lo
    return lo + margin * span + rng.random(kind.n_params) * (1 - 2 * margin) * span


@pytest.fixture
def g6():
    return make_game([6.0, 2.0], [-3.0, -4.0], [1.0, 1.0], [0.0, 0.0], 1.0)


def test_score_examples(g6):
    assert score("QR", g6, 0, 0.7, [0.0]) == 0.0
    assert score("SUQR", g6, 0, 0.4, [-1.0, 0.0, 0.0]) == pytest.approx(-0.4, abs=1e-15)


@pytest.mark.parametrize("p", [0.0, 1e-9, 0.3, 0.77, 1.0])
def test_sharp_identity_weighting_reduces_to_suqr(g6, p):
    w = [-4.0, 0.7, -0.3]
    assert score("SHARP", g6, 1, p, w + [1.0, 1.0]) == pytest.approx(score("SUQR", g6, 1, p, w),
                                                                   rel=1e-12, abs=1e-12)


def test_sharp_boundary_limits(g6):
    for gam, dlt in [(0.4, 2.0), (2.5, 0.5)]:
        assert score("SHARP", g6, 0, 0.0, [1.0, 0.0, 0.0, gam, dlt]) == 0.0
        assert score("SHARP", g6, 0, 1.0, [1.0, 0.0, 0.0, gam, dlt]) == 1.0


def test_sharp_weighting_closed_form(g6):
    p, gam, dlt = 0.3, 0.6, 1.7
    want = dlt * p ** gam / (dlt * p ** gam + (1 - p) ** gam)
    assert score("SHARP", g6, 0, p, [1.0, 0.0, 0.0, gam, dlt]) == pytest.approx(want, rel=1e-13)


def test_dimension_mismatch(g6):
    with pytest.raises(ValueError):
        score("QR", g6, 0, 0.5, [1.0, 2.0])
    with pytest.raises(ValueError):
        ParamVector("SUQR", [1.0])


def test_param_vector_json():
    p = ParamVector("SHARP", [-1.0, 0.5, -0.5, 1.0, 2.0])
    assert ParamVector.from_dict(p.to_dict()).theta.tolist() == p.theta.tolist()
    assert p.to_dict()["kind"] == "SHARP"
    assert ModelKind.SHARP.n_params == 5 and ModelKind.parse("qr") is ModelKind.QR


def test_attack_distribution_examples(g6):
    q = attack_distribution("QR", generate_covariance_game(5, 0.0, 1), np.full(5, 0.3), [0.0])
    assert np.allclose(q, 0.2, atol=1e-15)
    assert np.allclose(softmax([math.log(3.0), 0.0]), [0.75, 0.25], atol=1e-15)


def test_softmax_overflow_safe():
    q = softmax([1000.0, 999.0])
    assert np.all(np.isfinite(q)) and q.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(list(ModelKind)), st.floats(-50, 50))
def test_attack_distribution_properties(seed, kind, c):
    rng = np.random.default_rng(seed)
    g = generate_covariance_game(6, -0.5, seed % 1000)
    x = rng.uniform(0, 1, 6)
    th = random_theta(kind, rng)
    q = attack_distribution(kind, g, x, th)
    assert abs(q.sum() - 1.0) <= 1e-12 and np.all(q >= 0)
    f = score_terms(kind, g, x, th, order=0).f
    naive = np.exp(f) / np.exp(f).sum()
    assert np.abs(q - naive).max() <= 1e-10
    assert np.abs(softmax(f + c) - q).max() <= 1e-12


def test_score_grad_examples(g6):
    dfx, dth = score_grads("QR", g6, 0, 0.25, [1.0])
    assert dfx == -9.0
    assert dth[0] == pytest.approx(6.0 - 9.0 * 0.25)
    dfx, _ = score_grads("SUQR", g6, 1, 0.6, [-3.5, 1.0, -1.0])
    assert dfx == -3.5


@pytest.mark.parametrize("seed", range(10))
def test_sharp_score_grads_fd(seed):
    rng = np.random.default_rng(seed)
    g = generate_covariance_game(3, -0.5, seed)
    th = random_theta(ModelKind.SHARP, rng)
    n, xn = int(rng.integers(3)), rng.uniform(0.05, 0.95)
    dfx, dth = score_grads("SHARP", g, n, xn, th)
    h = 1e-5
    fd_x = (score("SHARP", g, n, xn + h, th) - score("SHARP", g, n, xn - h, th)) / (2 * h)
    fd_th = central_diff(lambda t: score("SHARP", g, n, xn, t), th, h)
    assert rel_err(dfx, fd_x) <= 1e-6
    assert rel_err(dth, fd_th) <= 1e-6


def test_nll_examples():
    g = generate_covariance_game(4, 0.0, 3)
    X = np.full((1, 4), 0.5)
    Z = np.array([[10.0, 20.0, 15.0, 5.0]])
    assert nll_loss((X, Z), "QR", g, [0.0]) == pytest.approx(50 * math.log(4), rel=1e-14)
    with pytest.raises(ValueError):
        nll_loss((np.zeros((0, 4)), np.zeros((0, 4))), "QR", g, [1.0])


@pytest.mark.parametrize("kind", list(ModelKind))
def test_nll_linear_and_scalar_loop(kind):
    rng = np.random.default_rng(4)
    g = generate_covariance_game(4, -0.2, 9)
    X = rng.uniform(0, 1, (3, 4))
    Z = rng.uniform(0, 10, (3, 4))
    th = random_theta(kind, rng)
    L = nll_loss((X, Z), kind, g, th)
    assert nll_loss((X, 2.5 * Z), kind, g, th) == pytest.approx(2.5 * L, rel=1e-12)
    loop = 0.0
    for s in range(3):
        f = [score(kind, g, n, X[s, n], th) for n in range(4)]
        den = sum(math.exp(v) for v in f)
        for n in range(4):
            loop -= Z[s, n] * math.log(math.exp(f[n]) / den)
    assert L == pytest.approx(loop, rel=1e-11)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_loss_gradient_stationary_at_generator(kind):
    rng = np.random.default_rng(8)
    g = generate_covariance_game(5, -0.5, 2)
    th = random_theta(kind, rng)
    X = rng.uniform(0, 1, (3, 5))
    Z = 1000.0 * np.stack([attack_distribution(kind, g, x, th) for x in X])
    assert np.abs(loss_grad_theta((X, Z), kind, g, th)).max() <= 1e-8


def test_single_target_gradient_zero():
    g = make_game([3.0], [-2.0], [1.0], [-1.0], 1.0)
    for kind in ModelKind:
        th = random_theta(kind, np.random.default_rng(0))
        grad = loss_grad_theta(([[0.4]], [[7.0]]), kind, g, th)
        assert np.all(grad == 0.0)


@pytest.mark.parametrize("kind", list(ModelKind))
@pytest.mark.parametrize("seed", range(4))
def test_loss_gradient_fd(kind, seed):
    rng = np.random.default_rng(seed)
    g = generate_covariance_game(4, -0.5, seed)
    X = rng.uniform(0.05, 0.95, (2, 4))
    Z = rng.uniform(0, 20, (2, 4))
    th = random_theta(kind, rng)
    fd = central_diff(lambda t: nll_loss((X, Z), kind, g, t), th, 1e-5)
    assert rel_err(loss_grad_theta((X, Z), kind, g, th), fd) <= 1e-6


def test_jacobian_blocks_zero_counts():
    g = generate_covariance_game(3, 0.0, 1)
    X = np.full((2, 3), 0.4)
    for kind in ModelKind:
        th = random_theta(kind, np.random.default_rng(1))
        J_th, J_x, J_z = loss_jacobian_blocks((X, np.zeros((2, 3))), kind, g, th)
        assert np.all(J_th == 0) and all(np.all(j == 0) for j in J_x)
        # dH/dz does not depend on z: it stays -(df/dtheta - E_q[df/dtheta]) at z = 0
        t = score_terms(kind, g, X, th, order=1)
        for s in range(2):
            q = attack_distribution(kind, g, X[s], th)
            want = -(t.fth[s] - q @ t.fth[s]).T
            assert np.allclose(J_z[s], want, rtol=0, atol=1e-13)


def test_jacobian_qr_z_block_closed_form():
    g = generate_covariance_game(4, -0.5, 5)
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 1, (2, 4))
    Z = rng.uniform(0, 10, (2, 4))
    lam = 1.3
    _, _, J_z = loss_jacobian_blocks((X, Z), "QR", g, [lam])
    for s in range(2):
        U = g.att_utilities(X[s])
        q = attack_distribution("QR", g, X[s], [lam])
        assert np.allclose(J_z[s][0], -(U - q @ U), rtol=0, atol=1e-13)


@pytest.mark.parametrize("kind", list(ModelKind))
@pytest.mark.parametrize("seed", range(3))
def test_jacobian_blocks_fd(kind, seed):
    rng = np.random.default_rng(100 + seed)
    g = generate_covariance_game(4, -0.5, seed)
    X = rng.uniform(0.05, 0.95, (3, 4))
    Z = rng.uniform(0, 20, (3, 4))
    th = random_theta(kind, rng)
    J_th, J_x, J_z = loss_jacobian_blocks((X, Z), kind, g, th)
    h = 1e-5
    fd_th = central_diff(lambda t: loss_grad_theta((X, Z), kind, g, t), th, h)
    assert rel_err(J_th, fd_th) <= 1e-5
    for s in range(3):
        def at_x(v, s=s):
            Xp = X.copy()
            Xp[s] = v
            return loss_grad_theta((Xp, Z), kind, g, th)

        def at_z(v, s=s):
            Zp = Z.copy()
            Zp[s] = v
            return loss_grad_theta((X, Zp), kind, g, th)
        assert rel_err(J_x[s], central_diff(at_x, X[s], h)) <= 1e-5
        assert rel_err(J_z[s], central_diff(at_z, Z[s], h)) <= 1e-5


def test_param_space_contains_boxes():
    for kind in ModelKind:
        space = param_space(kind)
        lo, hi = PARAM_BOXES[kind]
        assert space.contains(np.asarray(lo)) and space.contains(np.asarray(hi))
        assert not space.contains(np.asarray(hi) + 0.1)
