import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinnmpc.expr_graph import (ConstraintSet, ExprDomainError, Tape, UnsupportedExpression, Variables, const,
                                evaluate, exp, gradient, lagrangian_hessian, lin_sum, log, node_count, sigmoid,
                                sparse_jacobian, tanh)


def random_expr(rng, xs, depth=4):
    """Random smooth expression that stays inside every primitive's domain."""
    if depth == 0 or rng.random() < 0.2:
        return xs[rng.integers(len(xs))] if rng.random() < 0.8 else const(rng.normal())
    a = random_expr(rng, xs, depth - 1)
    b = random_expr(rng, xs, depth - 1)
    op = rng.integers(9)
    if op == 0:
        return a + b
    if op == 1:
        return a - 0.5 * b
    if op == 2:
        return a * b
    if op == 3:
        return a / (1.5 + tanh(b))
    if op == 4:
        return exp(0.3 * tanh(a))
    if op == 5:
        return log(a * a + 1.0)
    if op == 6:
        return tanh(a)
    if op == 7:
        return sigmoid(a) * b
    return (a * a + 1.0) ** 1.5


def central_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def test_values_and_prefix():
    v = Variables()
    x, y = v.add("x", init=2.0), v.add("y", init=3.0)
    e = x * y + exp(x) - log(y) / 2
    assert evaluate(e, [2.0, 3.0]) == pytest.approx(6 + math.exp(2) - math.log(3) / 2, rel=1e-15)
    assert "exp" in e.to_prefix(v.names)


def test_lin_sum_matches_manual():
    v = Variables()
    xs = [v.add(f"x{i}") for i in range(5)]
    e = lin_sum(xs, [1.0, 2.0, 3.0, 4.0, 5.0], offset=-1.0)
    assert evaluate(e, np.arange(5.0)) == pytest.approx(0 + 2 + 6 + 12 + 20 - 1)
    assert np.allclose(gradient(e, np.zeros(5)).dense(), [1, 2, 3, 4, 5])


@pytest.mark.parametrize("bad", [lambda x: log(x - 10.0), lambda x: 1.0 / (x - 1.0), lambda x: (x - 3.0) ** 0.5])
def test_domain_errors(bad):
    v = Variables()
    x = v.add("x")
    with pytest.raises(ExprDomainError):
        evaluate(bad(x), [1.0])


def test_unsupported_operand():
    v = Variables()
    x = v.add("x")
    with pytest.raises((UnsupportedExpression, TypeError)):
        ConstraintSet().add("not an expression")
    with pytest.raises((UnsupportedExpression, TypeError)):
        x + "a"


def test_variable_bounds_validation():
    v = Variables()
    with pytest.raises(ValueError):
        v.add("x", lb=1.0, ub=0.0)
    i = v.add("y", lb=0.0, ub=1.0, init=5.0)
    assert v.initial()[i.data] == 1.0
    v.fix(i.data, 0.25)
    lb, ub = v.bounds()
    assert lb[i.data] == ub[i.data] == 0.25


def test_shared_subexpression_counted_once():
    v = Variables()
    x = v.add("x")
    s = tanh(x)
    e = s * s + s
    assert node_count(e) <= 5


@pytest.mark.parametrize("seed", range(120))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    v = Variables()
    xs = [v.add(f"x{i}") for i in range(4)]
    e = random_expr(rng, xs)
    if not e.args and e.kind == "const":
        e = e + xs[0]
    x = rng.normal(size=4)
    g = gradient(e, x).dense()
    g_fd = central_grad(lambda z: evaluate(e, z), x)
    assert rel_err(g, g_fd) <= 1e-6


@pytest.mark.parametrize("seed", range(120))
def test_hessian_matches_central_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    v = Variables()
    xs = [v.add(f"x{i}") for i in range(3)]
    cs = ConstraintSet()
    cs.add(random_expr(rng, xs) + xs[0])
    cs.add(random_expr(rng, xs) + xs[1])
    x = rng.normal(size=3)
    lam = rng.normal(size=2)
    tape = Tape(cs.exprs, 3)

    def weighted_grad(z):
        return tape.jacobian(z).T @ lam

    H = tape.hessian(x, lam).toarray()
    H_fd = np.zeros((3, 3))
    h = 1e-5
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        H_fd[:, i] = (weighted_grad(x + e) - weighted_grad(x - e)) / (2 * h)
    assert np.allclose(H, H.T, atol=1e-14)
    assert rel_err(H, H_fd) <= 1e-5


def test_sparse_jacobian_pattern_is_structural():
    v = Variables()
    x = [v.add(f"x{i}") for i in range(3)]
    cs = ConstraintSet()
    cs.add(x[0] * x[1])
    cs.add(tanh(x[2]))
    r, c, d = sparse_jacobian(cs, np.zeros(3))
    # x0*x1 at the origin has zero partials but keeps its structural entries
    assert sorted(zip(r.tolist(), c.tolist())) == [(0, 0), (0, 1), (1, 2)]
    assert np.allclose(d[(r == 1)], 1.0)


def test_lagrangian_hessian_modes():
    v = Variables()
    x = [v.add(f"x{i}") for i in range(2)]
    cs = ConstraintSet()
    cs.add(x[0] * x[0] * x[1])
    obj = x[0] * x[0] + x[1] * x[1]
    H = lagrangian_hessian(cs, obj, np.array([1.0, 2.0]), np.array([0.5])).toarray()
    assert np.allclose(H, [[2 + 0.5 * 2 * 2, 0.5 * 2], [0.5 * 2, 2]])
    assert lagrangian_hessian(cs, obj, np.zeros(2), np.zeros(1), mode="bfgs") is None


def test_constraint_dump_is_line_per_row():
    v = Variables()
    x = v.add("x")
    cs = ConstraintSet()
    cs.add(x - 1.0, name="first")
    cs.add(x * x, "<=", 4.0)
    text = cs.dump(v.names)
    assert text.count("\n") == 2 and text.startswith("first:")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_tanh_sigmoid_identity(vals):
    v = Variables()
    x = [v.add(f"x{i}") for i in range(3)]
    e = tanh(x[0]) - (2.0 * sigmoid(2.0 * x[0]) - 1.0)
    assert abs(evaluate(e, vals)) < 1e-12
    assert np.allclose(gradient(e + 0.0 * x[1], np.array(vals)).dense(), 0.0, atol=1e-12)
