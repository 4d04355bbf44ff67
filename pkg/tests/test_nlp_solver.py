import csv

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import example, given, settings
from hypothesis import strategies as st

from pinnmpc.expr_graph import lin_sum
from pinnmpc.nlp_solver import (INFEASIBLE, MAX_ITERATIONS, OPTIMAL, ExternalObjective, GreyBoxBlock, NlpProblem,
                                SolverOptions, count_variables, solve)

HS071_X = np.array([1.0, 4.74299963, 3.82114998, 1.37940829])
HS071_F = 17.0140173


def hs071(init=(1.0, 5.0, 5.0, 1.0)):
    p = NlpProblem()
    x = [p.variables.add(f"x{i}", 1.0, 5.0, init[i]) for i in range(4)]
    p.set_objective(x[0] * x[3] * (x[0] + x[1] + x[2]) + x[2])
    p.constraints.add(25.0 - x[0] * x[1] * x[2] * x[3], "<=", 0.0)
    p.constraints.add(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3], "=", 40.0)
    return p


@pytest.mark.parametrize("mode", ["exact", "bfgs"])
def test_hs071(mode):
    res = solve(hs071(), SolverOptions(hessian_mode=mode, tol=1e-8))
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(HS071_F, rel=1e-6)
    assert np.allclose(res.x, HS071_X, atol=1e-5)


def test_rosenbrock_unconstrained():
    p = NlpProblem()
    x = p.variables.add("x", init=-1.2)
    y = p.variables.add("y", init=1.0)
    p.set_objective((1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2)
    res = solve(p, SolverOptions(tol=1e-10))
    assert res.success
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_equality_qp_against_kkt():
    rng = np.random.default_rng(3)
    n, m = 6, 2
    Q = rng.normal(size=(n, n))
    Q = Q @ Q.T + n * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    p = NlpProblem()
    xs = [p.variables.add(f"x{i}") for i in range(n)]
    quad = sum(0.5 * Q[i, j] * xs[i] * xs[j] for i in range(n) for j in range(n))
    p.set_objective(quad + lin_sum(xs, c))
    for k in range(m):
        p.constraints.add(lin_sum(xs, A[k]), "=", b[k])
    res = solve(p, SolverOptions(tol=1e-10))
    K = np.block([[Q, A.T], [A, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([-c, b]))
    assert res.success
    assert np.allclose(res.x, sol[:n], atol=1e-7)


class _Circle(GreyBoxBlock):
    """w(y) = y0^2 + y1^2 - 1."""

    n_inputs = 2
    n_outputs = 1

    def __init__(self, hessian=True):
        self._h = hessian

    @property
    def has_hessian(self):
        return self._h

    def eval_w(self, y):
        return np.array([y[0] ** 2 + y[1] ** 2 - 1.0])

    def eval_jacobian(self, y):
        return sp.csr_matrix(np.array([[2 * y[0], 2 * y[1]]]))

    def eval_weighted_hessian(self, y, lam):
        return sp.csr_matrix(2.0 * lam[0] * np.eye(2))


@pytest.mark.parametrize("hessian", [True, False])
def test_grey_box_matches_algebraic(hessian):
    def base():
        p = NlpProblem()
        x = p.variables.add("x", init=0.5)
        y = p.variables.add("y", init=0.5)
        p.set_objective((x - 2.0) ** 2 + (y - 1.0) ** 2)
        return p, x, y

    pa, x, y = base()
    pa.constraints.add(x * x + y * y - 1.0)
    pg, _, _ = base()
    pg.add_block(_Circle(hessian), 0, "circle")
    ra, rg = solve(pa, SolverOptions(tol=1e-9)), solve(pg, SolverOptions(tol=1e-9))
    assert ra.success and rg.success
    assert np.allclose(ra.x, rg.x, atol=1e-6)
    assert np.allclose(ra.x, np.array([2.0, 1.0]) / np.sqrt(5.0), atol=1e-6)
    assert rg.hessian_mode == ("exact" if hessian else "bfgs")


def test_block_slice_checked():
    p = NlpProblem()
    p.variables.add("x")
    with pytest.raises(ValueError):
        p.add_block(_Circle(), 0)


class _Quartic(ExternalObjective):
    def value(self, x):
        return float(np.sum((x - 0.3) ** 4) + np.sum((x - 0.3) ** 2))

    def gradient(self, x):
        return 4 * (x - 0.3) ** 3 + 2 * (x - 0.3)


def test_external_objective_uses_quasi_newton():
    p = NlpProblem()
    for i in range(3):
        p.variables.add(f"x{i}", -1.0, 1.0, 0.9)
    p.set_objective(_Quartic())
    res = solve(p, SolverOptions(hessian_mode="auto"))
    assert res.success and res.hessian_mode == "bfgs"
    assert np.allclose(res.x, 0.3, atol=1e-5)


def test_infeasible_reports_status():
    p = NlpProblem()
    x = p.variables.add("x", 0.0, 1.0, 0.5)
    p.set_objective(x * x)
    p.constraints.add(x, "=", 2.0)
    res = solve(p, SolverOptions(max_iter=200))
    assert res.status == INFEASIBLE
    assert not res.success


def test_iteration_limit():
    res = solve(hs071(), SolverOptions(max_iter=2))
    assert res.status == MAX_ITERATIONS


def test_warm_start_reduces_iterations():
    cold = solve(hs071(), SolverOptions(tol=1e-8))
    p = hs071(init=tuple(cold.x))
    warm = solve(p, SolverOptions(tol=1e-8), warm=cold)
    assert warm.success
    assert warm.iterations < cold.iterations


def test_fixed_variables_are_respected():
    p = hs071()
    p.variables.fix(0, 1.0)
    res = solve(p)
    assert res.success and res.x[0] == 1.0


def test_trace_file(tmp_path):
    path = tmp_path / "trace.csv"
    res = solve(hs071(), SolverOptions(trace_path=str(path)))
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "objective", "violation", "step", "wall_clock"]
    assert len(rows) - 1 == len(res.trace)


def test_backend_hook():
    calls = []

    def backend(p, opts, warm):
        calls.append(p)
        return solve(p, SolverOptions())

    res = solve(hs071(), SolverOptions(backend=backend))
    assert calls and res.success


def test_counting_convention():
    p = NlpProblem()
    p.variables.add("s", kind="state")
    p.variables.add("u", kind="control")
    p.variables.add("a", kind="aux")
    p.variables.add("sp", kind="param")
    p.constraints.add(p.variables.node(0) - p.variables.node(2))
    c = count_variables(p)
    assert c == {"decision_vars": 2, "aux_vars": 1, "total_vars": 3, "constraints": 1}


def test_unknown_hessian_mode():
    with pytest.raises(ValueError):
        solve(hs071(), SolverOptions(hessian_mode="newton"))


@settings(max_examples=25, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0.1, 3))
@example(0.0, 1.1577899295154554e-148, 1.0)
def test_bound_projection(a, b, r):
    # minimizing the distance to (a, b) over a box yields the clipped point;
    # at a degenerate corner (zero bound multiplier) the barrier leaves an O(sqrt(mu)) offset
    p = NlpProblem()
    x = p.variables.add("x", -r, r, 0.0)
    y = p.variables.add("y", -r, r, 0.0)
    p.set_objective((x - a) ** 2 + (y - b) ** 2)
    res = solve(p, SolverOptions(tol=1e-9))
    assert res.success
    assert np.allclose(res.x, np.clip([a, b], -r, r), atol=1e-4)


@pytest.mark.parametrize("angle", [0.3, 1.0, 2.0, 3.0])
def test_curved_constraint_converges_quickly(angle):
    # full Newton steps raise the violation here; a merit-only search crawls
    p = NlpProblem()
    x = p.variables.add("x", init=float(np.cos(angle)))
    y = p.variables.add("y", init=float(np.sin(angle)))
    r = x * x + y * y
    p.set_objective(2.0 * (r - 1.0) - x)
    p.constraints.add(r, "=", 1.0)
    res = solve(p, SolverOptions(tol=1e-10))
    assert res.status == OPTIMAL and res.iterations <= 25
    assert np.allclose(res.x, [1.0, 0.0], atol=1e-6)
