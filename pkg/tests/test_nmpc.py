import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinnmpc.embedding import TrainedNetwork, fs_row_count
from pinnmpc.nlp_solver import solve
from pinnmpc.nmpc import (ClosedLoopTrace, NmpcConfig, Schedule, TraceRecord, build_nmpc, closed_loop,
                          distance_factors, initialize_feasible, model_tag, warm_point, read_trace_csv, shift_solution,
                          trajectory_distance)
from pinnmpc.nn_engine import init_params
from pinnmpc.plants import steady_state
from pinnmpc.presets import (default_schedule, initial_condition, network_spec, nmpc_config, nmpc_solver_options,
                             plant_for)


def _random_net(plant, arch="pinn", seed=0):
    spec = network_spec(plant.name, arch, plant)
    return TrainedNetwork(spec, init_params(spec, seed))


def test_schedule_steps():
    s = Schedule((0.4,), ((50, (0.3,)),))
    assert s.at(0)[0] == 0.4 and s.at(49)[0] == 0.4 and s.at(50)[0] == 0.3 and s.at(99)[0] == 0.3


def test_schedule_orders_changes_and_validates():
    s = Schedule((1.0, 2.0), ((20, (3.0, 4.0)), (10, (5.0, 6.0))))
    assert list(s.at(15)) == [5.0, 6.0] and list(s.at(25)) == [3.0, 4.0]
    with pytest.raises(ValueError):
        Schedule((1.0, 2.0), ((5, (1.0,)),))


def test_schedule_from_dict():
    s = Schedule.from_dict({"initial": [0.4], "changes": [{"step": 3, "values": [0.2]}]})
    assert s == Schedule((0.4,), ((3, (0.2,)),))


@pytest.mark.parametrize("kw", [dict(P=3, M=4), dict(M=0), dict(output_weights=(1.0, 1.0)),
                                dict(move_weights=(-1.0, 1.0)), dict(aux_init="random")])
def test_config_validation(kw):
    base = dict(P=5, M=2, outputs=(("C", 10),), output_weights=(1.0,), move_weights=(1.0, 1.0))
    with pytest.raises(ValueError):
        NmpcConfig(**{**base, **kw})


def test_config_selector_validation(b1):
    cfg = NmpcConfig(5, 2, (("C", 11),), (1.0,), (1.0, 1.0))
    with pytest.raises(ValueError):
        cfg.validate(b1)
    with pytest.raises(ValueError):
        NmpcConfig(5, 2, (("C", 10),), (1.0,), (1.0,)).validate(b1)


@pytest.mark.parametrize("variant", ["mechanistic", "efe"])
def test_b1_counts(b1, variant):
    x0, u0 = initial_condition("b1", b1)
    nm = build_nmpc(b1, _random_net(b1), nmpc_config("b1", variant), x0, u0)
    c = nm.counts()
    assert c["total_vars"] == 430 and c["aux_vars"] == 0


def test_b1_fs_counts(b1):
    x0, u0 = initial_condition("b1", b1)
    net = _random_net(b1)
    nm = build_nmpc(b1, net, nmpc_config("b1", "ece-fs"), x0, u0)
    c = nm.counts()
    rows = fs_row_count(net.spec)
    assert c["decision_vars"] == 430 and c["total_vars"] == 430 + c["aux_vars"]
    assert c["aux_vars"] == 40 * rows["aux_vars"] == 40 * 2 * 24 * 6
    assert c["constraints"] == 40 * rows["rows"] and nm.rows_per_step == rows["rows"]


def test_network_variant_needs_network(b1):
    x0, u0 = initial_condition("b1", b1)
    with pytest.raises(ValueError):
        build_nmpc(b1, None, nmpc_config("b1", "efe"), x0, u0)
    with pytest.raises(ValueError):
        build_nmpc(b1, _random_net(plant_for("b2"), "picnn"), nmpc_config("b1", "efe"), x0, u0)


@pytest.mark.parametrize("variant", ["mechanistic", "ece-fs", "ece-rs", "efe"])
def test_initial_point_is_feasible(b1, variant):
    x0, u0 = initial_condition("b1", b1)
    cfg = dataclasses.replace(nmpc_config("b1", variant), P=6, M=2)
    nm = build_nmpc(b1, _random_net(b1), cfg, x0, u0, (0.4,))
    z = initialize_feasible(nm, x0, u0)
    p = nm.problem
    if len(p.constraints):
        assert np.max(np.abs(p.constraints.tape(p.variables.n).output_values(z))) < 1e-8
    for att in p.blocks:
        y = z[att.start:att.start + att.block.n_inputs]
        assert np.max(np.abs(att.block.eval_w(y))) < 1e-10


def test_fs_aux_bounds_hold_after_state_change(b1):
    x0, u0 = initial_condition("b1", b1)
    cfg = dataclasses.replace(nmpc_config("b1", "ece-fs"), P=4, M=2)
    nm = build_nmpc(b1, _random_net(b1), cfg, x0, u0, (0.4,))
    x_new = np.clip(0.5 * x0 + 0.3, b1.x_lb[0], b1.x_ub[0])
    z = initialize_feasible(nm, x_new, u0)
    lb, ub = nm.problem.variables.bounds()
    aux = np.concatenate([np.asarray(st.aux_indices, dtype=int) for st in nm.steps])
    assert np.all(z[aux] > lb[aux]) and np.all(z[aux] < ub[aux])


@pytest.mark.parametrize("variant", ["mechanistic", "ece-fs", "efe"])
def test_warm_point_is_consistent_with_new_state(b1, variant):
    x0, u0 = initial_condition("b1", b1)
    cfg = dataclasses.replace(nmpc_config("b1", variant), P=5, M=2)
    nm = build_nmpc(b1, _random_net(b1), cfg, x0, u0, (0.4,))
    z_old = initialize_feasible(nm, x0, u0)
    z_old[nm.u_index.ravel()] = np.tile([0.6, 0.4], nm.M)
    x_new = 0.9 * x0 + 0.02
    nm.set_initial_state(x_new)
    z = warm_point(nm, z_old, x_new)
    p = nm.problem
    assert np.array_equal(z[nm.u_index.ravel()], z_old[nm.u_index.ravel()])
    assert np.array_equal(z[nm.x_index[0].ravel()], x_new.ravel())
    if len(p.constraints):
        assert np.max(np.abs(p.constraints.tape(p.variables.n).output_values(z))) < 1e-8
    for att in p.blocks:
        assert np.max(np.abs(att.block.eval_w(z[att.start:att.start + att.block.n_inputs]))) < 1e-10


def test_shift_moves_states_and_moves_forward(b1):
    x0, u0 = initial_condition("b1", b1)
    cfg = dataclasses.replace(nmpc_config("b1", "mechanistic"), P=6, M=3)
    nm = build_nmpc(b1, None, cfg, x0, u0, (0.4,))
    initialize_feasible(nm, x0, u0)
    res = solve(nm.problem, cfg.solver)
    assert res.success
    sh = shift_solution(nm, res)
    for k in range(cfg.P):
        assert np.array_equal(sh.x[nm.x_index[k].ravel()], res.x[nm.x_index[k + 1].ravel()])
    assert np.array_equal(sh.x[nm.u_index[0]], res.x[nm.u_index[1]])
    assert np.array_equal(sh.x[nm.u_index[-1]], res.x[nm.u_index[-1]])
    assert sh.lam.shape == res.lam.shape


def test_nmpc_solver_defaults():
    opts = nmpc_solver_options()
    assert opts.mu_init == 1e-4 and nmpc_solver_options(mu_init=0.1).mu_init == 0.1
    assert nmpc_config("b1").solver == opts


def test_short_closed_loop_and_csv_roundtrip(b1, tmp_path):
    x0, u0 = initial_condition("b1", b1)
    cfg = dataclasses.replace(nmpc_config("b1", "mechanistic"), P=10, M=3)
    sched = Schedule((0.4,), ((2, (0.3,)),))
    tr = closed_loop(b1, cfg, sched, 4, x0, u0)
    assert len(tr) == 4 and tr.model == "mechanistic"
    assert all(r.status == "Optimal" for r in tr.records)
    assert np.array_equal(tr.states[0], x0.ravel())
    assert tr.setpoints[1, 0] == 0.4 and tr.setpoints[2, 0] == 0.3
    # the controller moves the outlet towards the lower target
    assert tr.outputs[-1, 0] < tr.outputs[0, 0]
    path = tmp_path / "t.csv"
    tr.write_csv(path)
    cols = read_trace_csv(path)
    assert cols["_header"] == tr.header()
    assert cols["plant"] == ["b1"] * 4 and cols["model"] == ["mechanistic"] * 4
    assert np.array_equal(cols[f"u_{b1.control_names[0]}"], tr.controls[:, 0])
    assert np.all(cols["count_total_vars"] == tr.counts["total_vars"])
    assert np.array_equal(cols["x_C_10"], tr.states[:, 9])


def test_closed_loop_rejects_empty_horizon(b1):
    x0, u0 = initial_condition("b1", b1)
    with pytest.raises(ValueError):
        closed_loop(b1, nmpc_config("b1"), default_schedule("b1", b1), 0, x0, u0)


def test_model_tag(b1):
    a, b = _random_net(b1, seed=0), _random_net(b1, seed=1)
    assert model_tag(None) == "mechanistic"
    assert model_tag(a) == model_tag(_random_net(b1, seed=0)) != model_tag(b)
    assert model_tag(a).startswith("net-") and len(model_tag(a)) == 20


def _trace(states, controls):
    tr = ClosedLoopTrace("b1", "x", ["C@10"], ["F", "G"], ["C"], len(states[0]))
    for k, (s, u) in enumerate(zip(states, controls)):
        tr.records.append(TraceRecord(k, np.zeros(1), np.zeros(1), np.asarray(u), np.asarray(s), "Optimal", 1, 0.0, 0.0))
    return tr


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), min_size=1,
                max_size=6))
def test_distance_properties(rows):
    a = _trace([[r[0], r[1]] for r in rows], [[r[2], r[3]] for r in rows])
    b = _trace([[r[1], r[0]] for r in rows], [[r[3], r[2]] for r in rows])
    dx, du = trajectory_distance(a, b, [1.0, 2.0], [0.5, 1.0])
    dx2, du2 = trajectory_distance(b, a, [1.0, 2.0], [0.5, 1.0])
    assert np.all(dx >= 0) and np.all(du >= 0)
    assert np.allclose(dx, dx2) and np.allclose(du, du2)
    z = trajectory_distance(a, a, [1.0, 2.0], [0.5, 1.0])
    assert not np.any(z[0]) and not np.any(z[1])


def test_distance_value_and_validation():
    a = _trace([[0.0, 0.0]], [[0.0, 0.0]])
    b = _trace([[0.5, 1.0]], [[0.1, 0.0]])
    dx, du = trajectory_distance(a, b, [1.0, 2.0], [0.5, 1.0])
    assert dx[0] == pytest.approx(0.25 + 0.25) and du[0] == pytest.approx(0.04)
    with pytest.raises(ValueError):
        trajectory_distance(a, b, [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        trajectory_distance(a, _trace([[0, 0], [0, 0]], [[0, 0], [0, 0]]), 1.0, 1.0)


def test_distance_factors(b1):
    xf, uf = distance_factors(b1)
    assert xf.shape == (10,) and uf.shape == (2,) and np.all(xf > 0) and np.all(uf > 0)


def test_initial_conditions_are_steady(b1):
    x0, u0 = initial_condition("b1", b1)
    assert np.allclose(x0, steady_state(b1, u0))
