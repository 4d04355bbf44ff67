import dataclasses

import numpy as np
import pytest

from pinnmpc.embedding import TrainedNetwork
from pinnmpc.nn_engine import init_params
from pinnmpc.nmpc import Schedule
from pinnmpc.presets import initial_condition, network_spec, nmpc_config, nmpc_solver_options
from pinnmpc.shooting import ShootingObjective, ShootingProblem, model_evaluator, shooting_closed_loop, shooting_solve


def _net(plant, seed=0):
    spec = network_spec("b1", "pinn", plant)
    return TrainedNetwork(spec, init_params(spec, seed))


def _problem(b1, model="implicit", net=None, P=8, M=3, sp=0.3):
    x0, u0 = initial_condition("b1", b1)
    cfg = dataclasses.replace(nmpc_config("b1"), P=P, M=M)
    return ShootingProblem(model_evaluator(b1, model, net), b1, cfg, x0, u0, np.array([sp]))


def test_decision_count_is_moves_only(b1):
    sp = _problem(b1, P=40, M=10)
    assert sp.n_decision == 20


def test_objective_matches_manual_rollout(b1):
    sp = _problem(b1)
    U = np.array([[0.7, 0.9], [0.6, 0.95], [0.5, 0.85]])
    obj = ShootingObjective(sp)
    x = sp.x0.copy()
    total = (0.3 - x[0, -1]) ** 2
    for k in range(sp.cfg.P):
        x = sp.step(x, U[min(k, 2)])
        total += (0.3 - x[0, -1]) ** 2
    prev = sp.u_prev
    for j in range(3):
        total += np.sum((U[j] - prev) ** 2)
        prev = U[j]
    assert obj.value(U.ravel()) == pytest.approx(total, rel=1e-12)


def test_gradient_is_forward_difference(b1):
    sp = _problem(b1, "net", _net(b1))
    obj = ShootingObjective(sp)
    z = np.array([0.7, 0.9, 0.6, 0.95, 0.5, 0.85])
    g = obj.gradient(z)
    for j in range(len(z)):
        h = obj.rel_step * max(1.0, abs(z[j]))
        e = np.zeros_like(z)
        e[j] = h
        assert g[j] == pytest.approx((obj.value(z + e) - obj.value(z)) / h, rel=1e-9, abs=1e-12)


def test_solve_improves_on_holding(b1):
    sp = _problem(b1)
    U, f, stats = shooting_solve(sp, nmpc_solver_options(hessian_mode="bfgs"))
    assert stats.status == "Optimal" and stats.n_decision == 6
    hold = ShootingObjective(sp).value(np.tile(sp.u_prev, 3))
    assert f < hold
    assert np.all(U >= b1.u_lb) and np.all(U <= b1.u_ub)


def test_model_evaluator_validation(b1):
    with pytest.raises(ValueError):
        model_evaluator(b1, "pinn")
    with pytest.raises(ValueError):
        model_evaluator(b1, "kriging")


def test_short_closed_loop_with_network_model(b1):
    x0, u0 = initial_condition("b1", b1)
    cfg = dataclasses.replace(nmpc_config("b1"), P=8, M=2)
    net = _net(b1)
    tr = shooting_closed_loop(b1, cfg, Schedule((0.4,)), 3, x0, "pinn", net, u0,
                              nmpc_solver_options(hessian_mode="bfgs"))
    assert len(tr) == 3 and tr.variant == "shooting-pinn" and tr.model.startswith("net-")
    assert tr.counts == {"decision_vars": 4, "aux_vars": 0, "total_vars": 4, "constraints": 0}


def test_gradient_steps_backwards_at_upper_bound(b1):
    sp = _problem(b1)
    obj = ShootingObjective(sp)
    z = np.array([1.0, 1.0, 0.6, 0.9, 0.5, 0.9])
    g = obj.gradient(z)
    h = obj.rel_step
    e = np.zeros_like(z)
    e[0] = -h
    assert g[0] == pytest.approx((obj.value(z + e) - obj.value(z)) / -h, rel=1e-9)
