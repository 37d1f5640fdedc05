import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quped.errors import ConfigError
from quped.quantizer import (CenterVector, distance_R, grad_c_hard_mode, hard_quantize, init_centers,
                             levels_for_bits, prox_c, prox_x, quantize, quantized_vjp, repair_centers,
                             soft_quantize, soft_quantize_jacobians)

from oracles import (brute_R, central_diff, grid_prox, linearized_center_objective, nearest, rel_err,
                     soft_q)

sorted_centers = st.lists(st.floats(-3, 3), min_size=2, max_size=5, unique=True).map(
    lambda v: np.sort(np.array(v))).filter(lambda c: np.all(np.diff(c) > 1e-3))


def C(*vals, P=math.inf):
    return CenterVector(np.array(vals, dtype=float), P)


# -- CenterVector ---------------------------------------------------------

@pytest.mark.parametrize("bad", [[1.0], [0.0, 0.0], [1.0, 0.0], [0.0, np.nan], [0.0, 11.0]])
def test_center_vector_invariants(bad):
    with pytest.raises(ConfigError):
        CenterVector(np.array(bad))


def test_center_vector_rejects_nonpositive_P():
    with pytest.raises(ConfigError):
        CenterVector(np.array([0.0, 1.0]), P=0.0)


def test_levels_for_bits():
    assert levels_for_bits(1) == 2 and levels_for_bits(2) == 4
    with pytest.raises(ConfigError):
        levels_for_bits(0)


# -- hard quantizer -------------------------------------------------------

def test_hard_quantize_examples():
    assert hard_quantize(np.array([0.3]), C(0, 1))[0].tolist() == [0.0]
    assert hard_quantize(np.array([-2, 0.6]), C(-1, 1))[0].tolist() == [-1.0, 1.0]
    assert hard_quantize(np.array([0.5]), C(0, 1))[0].tolist() == [0.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), sorted_centers)
def test_hard_quantize_is_nearest(xs, c):
    x = np.array(xs)
    q, a = hard_quantize(x, CenterVector(c))
    for xi, qi, j in zip(x, q, a.index):
        assert j == nearest(xi, c)
        assert qi == c[j]
    assert distance_R(q, CenterVector(c)) == 0.0


# -- soft quantizer -------------------------------------------------------

def test_soft_quantize_examples():
    for P in (0.1, 3.0, 50.0):
        assert soft_quantize(np.array([0.5]), C(0, 1, P=P))[0] == pytest.approx(0.5, abs=1e-15)
    assert soft_quantize(np.array([0.8]), C(0, 1, P=10))[0] == pytest.approx(0.952574, abs=1e-6)
    lim = soft_quantize(np.array([-1e6, 1e6]), C(-1, 0.5, 2, P=3))
    assert lim.tolist() == pytest.approx([-1, 2], abs=1e-12)


def test_soft_quantize_rejects_hard_mode():
    with pytest.raises(ValueError):
        soft_quantize(np.array([0.0]), C(0, 1))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=20), sorted_centers, st.floats(0.1, 50))
def test_soft_quantize_monotone_bounded_and_matches_oracle(xs, c, P):
    x = np.sort(np.array(xs))
    cv = CenterVector(c, P)
    q = soft_quantize(x, cv)
    assert np.all(np.diff(q) >= -1e-12)
    assert np.all(q >= c[0] - 1e-12) and np.all(q <= c[-1] + 1e-12)
    assert np.allclose(q, soft_q(x, c, P), rtol=1e-12, atol=1e-12)


def test_soft_to_hard_limit():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        c = np.sort(rng.uniform(-1, 1, size=4))
        if np.min(np.diff(c)) < 0.05:
            continue
        x = rng.uniform(-1.5, 1.5, size=500)
        mids = 0.5 * (c[1:] + c[:-1])
        x = x[np.min(np.abs(x[:, None] - mids[None, :]), axis=1) >= 1e-2]
        cv = CenterVector(c, 1e4)
        worst = max(worst, np.max(np.abs(soft_quantize(x, cv) - hard_quantize(x, cv)[0])))
    assert worst <= 1e-6


def test_jacobian_midpoint_example():
    dx, dc = soft_quantize_jacobians(np.array([0.5]), C(0, 1, P=4))
    assert dx[0] == pytest.approx(1.0, abs=1e-15)
    dx_far, _ = soft_quantize_jacobians(np.array([1e3]), C(0, 1, P=4))
    assert dx_far[0] < 1e-300 + 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_jacobians_finite_differences(seed):
    rng = np.random.default_rng(seed)
    c = np.sort(rng.uniform(-1, 1, size=4))
    c[1:] += np.arange(1, 4) * 0.1
    P = float(rng.uniform(1, 10))
    x = rng.uniform(-1.5, 1.5, size=6)
    dx, dc = soft_quantize_jacobians(x, CenterVector(c, P))
    for i in range(x.size):
        fd = central_diff(lambda v: soft_q([v[0]], c, P)[0], [x[i]])[0]
        assert abs(dx[i] - fd) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9
        fd_c = central_diff(lambda cc: soft_q([x[i]], cc, P)[0], c)
        assert rel_err(dc[:, i], fd_c) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_quantized_vjp_chain_rule(seed):
    rng = np.random.default_rng(seed)
    c = np.array([-0.8, -0.1, 0.4, 1.0])
    P = 6.0
    x = rng.uniform(-1.2, 1.2, size=5)
    a = rng.normal(size=5)
    g_up = a  # f(z) = a . z
    gx, gc = quantized_vjp(x, CenterVector(c, P), g_up)
    assert rel_err(gx, central_diff(lambda v: a @ soft_q(v, c, P), x)) <= 1e-4
    assert rel_err(gc, central_diff(lambda cc: a @ soft_q(x, cc, P), c)) <= 1e-4


def test_grad_c_hard_mode_examples():
    x = np.array([0.1, 0.2, 0.9])
    cv = C(0, 1)
    _, a = hard_quantize(x, cv)
    assert grad_c_hard_mode(a, np.array([1.0, 2.0, 4.0])).tolist() == [3.0, 4.0]
    assert grad_c_hard_mode(a, np.zeros(3)).tolist() == [0.0, 0.0]
    _, a1 = hard_quantize(np.array([-0.5]), C(-0.4, 0, 1))
    assert grad_c_hard_mode(a1, np.array([2.5])).tolist() == [2.5, 0.0, 0.0]
    gx, gc = quantized_vjp(x, cv, np.array([1.0, 2.0, 4.0]))
    assert gx.tolist() == [0.0, 0.0, 0.0] and gc.tolist() == [3.0, 4.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), sorted_centers)
def test_grad_c_hard_mode_conserves_mass(xs, c):
    x = np.array(xs)
    up = np.linspace(-1, 2, x.size)
    _, a = hard_quantize(x, CenterVector(c))
    assert grad_c_hard_mode(a, up).sum() == pytest.approx(up.sum(), abs=1e-9)


# -- distance penalty -----------------------------------------------------

def test_distance_R_examples():
    assert distance_R(np.array([0.2, 0.9]), C(0, 1)) == pytest.approx(0.15, abs=1e-15)
    assert distance_R(np.array([0.0, 1.0, 0.0]), C(0, 1)) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_distance_R_brute_force(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 7))
    m = int(rng.integers(2, 4))
    c = np.sort(rng.choice(np.linspace(-1, 1, 41), size=m, replace=False))
    x = rng.uniform(-1.5, 1.5, size=d)
    assert distance_R(x, CenterVector(c)) == pytest.approx(brute_R(x, c), abs=1e-12)


# -- prox_x ---------------------------------------------------------------

def test_prox_x_examples():
    y = np.array([0.3, -2.0, 0.97])
    assert np.array_equal(prox_x(y, C(-1, 1), 0.0), y)
    assert prox_x(np.array([0.9]), C(-1, 1), 0.05)[0] == pytest.approx(0.95, abs=1e-15)
    assert prox_x(np.array([1.02]), C(-1, 1), 0.05)[0] == 1.0
    with pytest.raises(ValueError):
        prox_x(y, C(-1, 1), -0.1)


@pytest.mark.parametrize("seed", range(100))
def test_prox_x_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    c = np.sort(rng.uniform(-1, 1, size=int(rng.integers(2, 5))))
    y = rng.uniform(-1.5, 1.5, size=d)
    t = float(rng.uniform(0, 0.3))
    got = prox_x(y, CenterVector(c), t)
    for yi, gi in zip(y, got):
        assert abs(gi - grid_prox(yi, c, t)) <= 1e-3


# -- prox_c ---------------------------------------------------------------


def test_prox_c_worked_example():
    # members of c_1 = 0: {0.1, 0.2}, both above -> moves up by 2t;
    # member of c_2 = 1: {0.9}, below -> moves down by t
    out = prox_c(np.array([0.05, 0.95]), C(0, 1), np.array([0.1, 0.2, 0.9]), 0.01)
    assert out.centers.tolist() == pytest.approx([0.07, 0.94], abs=1e-15)


def test_prox_c_empty_and_balanced_groups():
    mu = np.array([-0.3, 0.2, 2.0])
    out = prox_c(mu, C(-0.5, 0.0, 1.0), np.array([-0.1, 0.1, 0.0]), 0.05)
    # group 0 is empty, group 1 has one above and one below (0.0 is a tie), group 2 empty
    assert np.array_equal(out.centers, mu)


@pytest.mark.parametrize("seed", range(50))
def test_prox_c_minimizes_linearized_objective(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 5))
    c_prev = np.sort(rng.uniform(-1, 1, size=m))
    c_prev[1:] += 0.2 * np.arange(1, m)
    mu = c_prev + rng.normal(scale=0.01, size=m)
    x = rng.uniform(-1.5, 1.5, size=int(rng.integers(1, 30)))
    t = float(rng.uniform(0, 0.01))
    out = prox_c(mu, CenterVector(c_prev), x, t).centers
    f_out = linearized_center_objective(out, mu, c_prev, x, t)
    # not above staying at mu, nor above any random perturbation of the answer
    assert f_out <= linearized_center_objective(mu, mu, c_prev, x, t) + 1e-12
    for _ in range(20):
        assert f_out <= linearized_center_objective(out + rng.normal(scale=1e-3, size=m), mu, c_prev, x, t) + 1e-12


def test_prox_c_reorders_crossing_centers():
    out = prox_c(np.array([0.6, 0.5]), C(0, 1), np.array([]), 0.0)
    assert out.centers.tolist() == [0.5, 0.6]


def test_repair_centers_separates_ties_and_clips():
    c = repair_centers(np.array([0.3, 0.3, 0.3, 20.0]), c_max=10.0)
    assert np.all(np.diff(c) > 0) and c[-1] == 10.0
    c = repair_centers(np.array([10.0, 10.0, 10.0]), c_max=10.0)
    assert np.all(np.diff(c) > 0) and c[-1] <= 10.0


# -- init ---------------------------------------------------------------

def test_init_centers_symmetric_two_levels():
    rng = np.random.default_rng(0)
    w = rng.normal(size=1001)
    w = np.concatenate([w, -w])
    c = init_centers(w, 2)
    q = np.median(np.abs(w))
    assert c.centers.tolist() == pytest.approx([-q, q], rel=1e-12)


@pytest.mark.parametrize("m", [2, 3, 4, 8])
def test_init_centers_sorted_distinct_bounded(m):
    for w in (np.zeros(5), np.array([1.0]), np.random.default_rng(m).normal(size=50) * 30):
        c = init_centers(w, m, c_max=10.0)
        assert c.m == m
        assert np.all(np.diff(c.centers) > 0)
        assert np.all(np.abs(c.centers) <= 10.0)


def test_quantize_dispatch():
    x = np.array([0.2, 0.7])
    assert np.array_equal(quantize(x, C(0, 1)), [0.0, 1.0])
    assert np.allclose(quantize(x, C(0, 1, P=3.0)), soft_q(x, [0, 1], 3.0))
