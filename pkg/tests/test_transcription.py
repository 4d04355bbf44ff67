import numpy as np
import pytest

from pinnmpc.expr_graph import lin_sum
from pinnmpc.nlp_solver import NlpProblem, SolverOptions, count_variables, solve
from pinnmpc.plants import make_plant, simulate_implicit, steady_state
from pinnmpc.transcription import Grid, dynamics_row_count, spatial_rhs, transcribe


def _values_from_trajectory(ts, traj, u_moves, n):
    z = np.zeros(n)
    z[ts.x_index.ravel()] = np.asarray(traj).ravel()
    z[ts.u_index.ravel()] = np.asarray(u_moves).ravel()
    return z


@pytest.mark.parametrize("pid,P,M,expected", [("b1", 40, 10, 430), ("b2", 40, 10, 860)])
def test_variable_and_row_counts(pid, P, M, expected):
    plant = make_plant(pid)
    x0 = steady_state(plant, plant.u_nominal)
    ts = transcribe(plant, P, M, x0)
    p = NlpProblem(ts.variables)
    p.constraints = ts.constraints
    c = count_variables(p)
    assert c["total_vars"] == expected
    assert c["constraints"] == dynamics_row_count(P, plant.n_x, plant.n_fe)


@pytest.mark.parametrize("pid", ["b1", "b2", "b3"])
def test_rows_vanish_on_implicit_trajectory(pid):
    plant = make_plant(pid, n_fe=10 if pid == "b3" else None)
    P, M = 4, 2
    x0 = steady_state(plant, plant.u_nominal)
    moves = np.array([plant.u_nominal, 0.5 * (plant.u_nominal + plant.u_ub)])
    traj = [x0]
    for k in range(P):
        traj.append(simulate_implicit(plant, traj[-1], moves[min(k, M - 1)]))
    ts = transcribe(plant, P, M, x0)
    z = _values_from_trajectory(ts, traj, moves, ts.variables.n)
    r = ts.constraints.tape(ts.variables.n).output_values(z)
    assert np.max(np.abs(r)) < 1e-8


def test_move_blocking():
    plant = make_plant("b1")
    ts = transcribe(plant, 6, 2, steady_state(plant, plant.u_nominal))
    assert ts.P == 6 and ts.M == 2
    assert all(ts.u_steps[k][0] is ts.u_moves[1][0] for k in range(1, 6))


@pytest.mark.parametrize("P,M", [(3, 4), (3, 0)])
def test_horizon_validation(P, M):
    plant = make_plant("b1")
    with pytest.raises(ValueError):
        transcribe(plant, P, M, steady_state(plant, plant.u_nominal))


def test_initial_profile_outside_bounds():
    plant = make_plant("b1")
    with pytest.raises(ValueError):
        transcribe(plant, 3, 1, np.full(plant.shape, 5.0))


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(0.0, 10, 1.0, 5)
    assert Grid(0.1, 10, 2.0, 5).dz == pytest.approx(0.2)


def test_spatial_rhs_inlet_node():
    plant = make_plant("b1")
    x = np.full(plant.shape, 0.5)
    f1 = spatial_rhs(plant, x, [1.0, 1.0], 1)[0]
    assert f1 == pytest.approx(-(1.0 / plant.dz) * (0.5 - 1.0) - plant.k_rxn * 0.25)
    with pytest.raises(ValueError):
        spatial_rhs(plant, x, [1.0, 1.0], 0)


def _tracking_solution(explicit):
    plant = make_plant("b1")
    x0 = steady_state(plant, [0.8, 0.8])
    ts = transcribe(plant, 10, 3, x0, u_init=[0.8, 0.8], explicit_inlet=explicit)
    p = NlpProblem(ts.variables)
    p.constraints = ts.constraints
    track = [(ts.x[k, 0, -1] - 0.3) * (ts.x[k, 0, -1] - 0.3) for k in range(11)]
    prev = [0.8, 0.8]
    moves = []
    for j in range(3):
        for l in range(2):
            d = ts.u_moves[j, l] - prev[l]
            moves.append(d * d)
        prev = list(ts.u_moves[j])
    p.set_objective(lin_sum(track + moves))
    res = solve(p, SolverOptions(tol=1e-9))
    assert res.success
    return res.x[ts.u_index.ravel()], res.objective


def test_explicit_inlet_matches_substitution():
    u_sub, f_sub = _tracking_solution(False)
    u_exp, f_exp = _tracking_solution(True)
    assert f_sub == pytest.approx(f_exp, rel=1e-6)
    assert np.allclose(u_sub, u_exp, atol=1e-5)


def test_steady_transcription_outlet_close_to_analytic():
    plant = make_plant("b1")
    x0 = steady_state(plant, [1.0, 1.0])
    assert x0[0, -1] == pytest.approx(plant.analytic_steady_outlet(1.0, 1.0), abs=5e-2)
