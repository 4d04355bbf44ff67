import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinnmpc.nn_engine import Conv1d, Dense, Flatten, NetworkSpec, forward_batch, init_params
from pinnmpc.pinn_training import (LossReport, Normalizer, SampleSet, TrainConfig, TrainingError,
                                   fold_normalization, learning_rate, loss, physics_residual,
                                   residual_with_adjoint, sample_inputs, train)
from pinnmpc.plants import make_plant, simulate_implicit, steady_state
from pinnmpc.presets import initial_state_band, network_spec


@pytest.mark.parametrize("pid", ["b1", "b2"])
def test_samples_within_bounds(pid):
    plant = make_plant(pid)
    s = sample_inputs(plant, 500, seed=3)
    lo, hi = plant.state_bounds()
    assert s.x.shape == (500,) + plant.shape and s.u.shape == (500, plant.n_u)
    assert np.all(s.x >= lo) and np.all(s.x <= hi)
    assert np.all(s.u >= plant.u_lb) and np.all(s.u <= plant.u_ub)


def test_sampling_is_seeded():
    plant = make_plant("b1")
    a, b = sample_inputs(plant, 10, 1), sample_inputs(plant, 10, 1)
    assert np.array_equal(a.x, b.x) and not np.array_equal(a.x, sample_inputs(plant, 10, 2).x)


def test_band_sampling():
    plant = make_plant("b3", n_fe=10)
    lower, upper = initial_state_band(plant)
    s = sample_inputs(plant, 200, 0, band=(lower, upper))
    assert np.all(s.x >= lower - 1e-15) and np.all(s.x <= upper + 1e-15)
    with pytest.raises(ValueError):
        sample_inputs(plant, 10, 0, band=(upper + 1.0, lower))


def test_sample_set_validation():
    with pytest.raises(ValueError):
        SampleSet(np.zeros((0, 1, 2)), np.zeros((0, 2)), 0)
    with pytest.raises(ValueError):
        sample_inputs(make_plant("b1"), 0, 0)


@pytest.mark.parametrize("pid", ["b1", "b2", "b3"])
def test_residual_vanishes_at_oracle(pid):
    plant = make_plant(pid, n_fe=10 if pid == "b3" else None)
    x0 = steady_state(plant, plant.u_nominal)
    u = 0.5 * (plant.u_nominal + plant.u_ub)
    x1 = simulate_implicit(plant, x0, u)
    assert np.max(np.abs(physics_residual(plant, x0, x1, u))) < 1e-8
    batched = physics_residual(plant, np.stack([x0, x0]), np.stack([x1, x0]), np.stack([u, u]))
    assert batched.shape == (2,) + plant.shape
    assert np.allclose(batched[0], physics_residual(plant, x0, x1, u))


@pytest.mark.parametrize("pid", ["b1", "b2", "b3"])
def test_adjoint_matches_finite_differences(pid):
    plant = make_plant(pid, n_fe=6)
    rng = np.random.default_rng(7)
    s = sample_inputs(plant, 3, 11)
    lo, hi = plant.state_bounds()
    xn = lo + rng.uniform(0.2, 0.8, size=(3,) + plant.shape) * (hi - lo)
    R, adj = residual_with_adjoint(plant, s.x, xn, s.u)
    assert np.allclose(R, physics_residual(plant, s.x, xn, s.u), rtol=1e-14, atol=1e-14)
    L = lambda z: loss(physics_residual(plant, s.x, z, s.u))
    fd = np.zeros_like(xn)
    for idx in np.ndindex(xn.shape):
        h = 1e-6 * max(1.0, abs(xn[idx]))
        e = np.zeros_like(xn)
        e[idx] = h
        fd[idx] = (L(xn + e) - L(xn - e)) / (2 * h)
    assert np.max(np.abs(adj - fd)) / max(1.0, np.max(np.abs(fd))) <= 1e-6


@pytest.mark.parametrize("epoch,expected", [(0, 0.01), (99, 0.01), (100, 0.007), (250, 0.01 * 0.49)])
def test_learning_rate_schedule(epoch, expected):
    assert learning_rate(epoch, TrainConfig()) == pytest.approx(expected)


@pytest.mark.parametrize("bad", [dict(decay=0.0), dict(test_fraction=1.0), dict(epochs=-1), dict(batch_size=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


@pytest.mark.parametrize("layout", ["flattened", "channels"])
def test_folding_preserves_function(layout):
    plant = make_plant("b2", n_fe=8)
    if layout == "flattened":
        spec = NetworkSpec((Dense(20, 6), Dense(6, 16, "linear")), layout, 2, 8, 4)
    else:
        spec = NetworkSpec((Conv1d(6, 4, 3), Flatten(), Dense(24, 16, "linear")), layout, 2, 8, 4)
    params = init_params(spec, 1)
    norm = Normalizer.from_plant(plant)
    s = sample_inputs(plant, 5, 2)
    xn, un = norm.inputs(s.x, s.u)
    expected = norm.outputs(forward_batch(spec, params, xn, un))
    folded = fold_normalization(spec, params, norm)
    assert np.allclose(forward_batch(spec, folded, s.x, s.u), expected, rtol=1e-10, atol=1e-10)


def test_short_training_reduces_loss_and_reports(tmp_path):
    plant = make_plant("b1")
    spec = network_spec("b1", "pinn", plant)
    cfg = TrainConfig(epochs=15, batch_size=64, n_samples=1000, seed=3)
    params, report = train(spec, plant, cfg)
    assert report.epochs == list(range(16))
    assert report.train_loss[-1] < 0.1 * report.train_loss[0]
    assert report.test_loss[report.best_epoch] == min(report.test_loss)
    report.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_loss" and len(lines) == 17
    params2, report2 = train(spec, plant, cfg)
    assert params2.equals(params) and report2.train_loss == report.train_loss


def test_zero_epochs_returns_initialization():
    plant = make_plant("b1")
    spec = network_spec("b1", "pinn", plant)
    params, report = train(spec, plant, TrainConfig(epochs=0, n_samples=100))
    norm = Normalizer.from_plant(plant)
    assert params.equals(fold_normalization(spec, init_params(spec, 0), norm))
    assert len(report.train_loss) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    plant = make_plant("b1")
    spec = network_spec("b1", "pinn", plant)
    init = init_params(spec, 0)
    init.arrays[-1]["b"][:] = 1e200
    with pytest.raises(TrainingError):
        train(spec, plant, TrainConfig(epochs=1, n_samples=100), init=init)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        train(network_spec("b1", "pinn", make_plant("b1")), make_plant("b2"), TrainConfig(epochs=0, n_samples=10))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_loss_is_sum_of_squares(vals):
    assert loss(vals) == pytest.approx(math.fsum(v * v for v in vals), rel=1e-12, abs=1e-12)


def test_loss_report_append():
    r = LossReport()
    r.append(0, 2.0, 3.0)
    r.append(1, 1.0, 1.5)
    assert r.train_loss == [2.0, 1.0] and r.test_loss == [3.0, 1.5]
