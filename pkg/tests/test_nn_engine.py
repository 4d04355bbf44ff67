import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinnmpc.nn_engine import (Conv1d, Dense, Flatten, NetworkSpec, ParamFileError, Reshape, activation,
                               flatten_state, forward, forward_batch, init_params, input_jacobian,
                               input_jacobian_batch, load_params, param_gradient, read_param_header, save_params,
                               unflatten_state, weighted_hessian, weighted_hessian_batch, weighted_hessian_fd)


def small_dense(act="tanh"):
    # n_x=2, n_fe=3, n_u=1
    return NetworkSpec((Dense(7, 5, act), Dense(5, 4, act), Dense(4, 6, "linear")), "flattened", 2, 3, 1)


def small_conv(act="tanh"):
    # channels = n_x + n_u = 3, length 6
    return NetworkSpec((Conv1d(3, 4, 2, act), Conv1d(4, 3, 3, act), Flatten(), Dense(9, 12, "linear")),
                       "channels", 2, 6, 1)


SPECS = {"dense": small_dense, "conv": small_conv, "dense-sigmoid": lambda: small_dense("sigmoid"),
         "conv-softplus": lambda: small_conv("softplus")}


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def random_point(spec, rng):
    return rng.normal(size=(spec.n_x, spec.n_fe)), rng.normal(size=spec.n_u)


def as_vec(x, u):
    return np.concatenate([np.ravel(x), u])


def split(spec, z):
    n = spec.n_x * spec.n_fe
    return z[:n].reshape(spec.n_x, spec.n_fe), z[n:]


def test_dense_forward_matches_manual():
    spec = small_dense()
    p = init_params(spec, 1)
    rng = np.random.default_rng(0)
    x, u = random_point(spec, rng)
    a = as_vec(x, u)
    for i, layer in enumerate(spec.layers):
        a = activation(layer.activation, p.arrays[i]["W"] @ a + p.arrays[i]["b"])
    assert np.allclose(forward(spec, p, x, u).ravel(), a, atol=1e-14)


def test_conv_forward_matches_cross_correlation():
    spec = NetworkSpec((Conv1d(3, 2, 3, "linear"), Flatten(), Dense(8, 12, "linear")), "channels", 2, 6, 1)
    p = init_params(spec, 2)
    rng = np.random.default_rng(1)
    x, u = random_point(spec, rng)
    chans = np.vstack([x, np.repeat(u[:, None], 6, axis=1)])
    K, b = p.arrays[0]["K"], p.arrays[0]["b"]
    conv = np.array([[sum(np.correlate(chans[c], K[o, c], mode="valid") for c in range(3)) + b[o]]
                     for o in range(2)])[:, 0, :]
    expected = p.arrays[2]["W"] @ conv.ravel() + p.arrays[2]["b"]
    assert np.allclose(forward(spec, p, x, u).ravel(), expected, atol=1e-14)


def test_batch_equals_single():
    spec = small_conv()
    p = init_params(spec, 3)
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(5, 2, 6))
    us = rng.normal(size=(5, 1))
    batch = forward_batch(spec, p, xs, us)
    for i in range(5):
        assert np.allclose(batch[i], forward(spec, p, xs[i], us[i]), rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("bad", [
    lambda: NetworkSpec((Dense(7, 6, "tanh"),), "flattened", 2, 3, 1),
    lambda: NetworkSpec((Dense(8, 6, "linear"),), "flattened", 2, 3, 1),
    lambda: NetworkSpec((Conv1d(3, 4, 7), Flatten(), Dense(4, 12, "linear")), "channels", 2, 6, 1),
    lambda: NetworkSpec((Dense(7, 5),), "flattened", 2, 3, 1),
    lambda: Dense(3, 3, "relu"),
    lambda: NetworkSpec((Dense(7, 6, "linear"),), "grid", 2, 3, 1),
])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        bad()


def test_reshape_layer():
    spec = NetworkSpec((Dense(7, 6, "linear"), Reshape((2, 3))), "flattened", 2, 3, 1)
    p = init_params(spec, 0)
    assert forward(spec, p, np.zeros((2, 3)), np.zeros(1)).shape == (2, 3)


def test_state_layout_roundtrip():
    x = np.arange(12.0).reshape(3, 4)
    v = flatten_state(x)
    assert v[4] == x[1, 0]
    assert np.array_equal(unflatten_state(v, 3, 4), x)


@pytest.mark.parametrize("kind", sorted(SPECS))
@pytest.mark.parametrize("seed", range(30))
def test_input_jacobian_central_differences(kind, seed):
    spec = SPECS[kind]()
    p = init_params(spec, seed)
    rng = np.random.default_rng(seed)
    x, u = random_point(spec, rng)
    J = input_jacobian(spec, p, x, u)
    z = as_vec(x, u)
    h = 1e-6
    J_fd = np.zeros_like(J)
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h
        J_fd[:, i] = (forward(spec, p, *split(spec, z + e)).ravel()
                      - forward(spec, p, *split(spec, z - e)).ravel()) / (2 * h)
    assert rel_err(J, J_fd) <= 1e-6


@pytest.mark.parametrize("kind", sorted(SPECS))
@pytest.mark.parametrize("seed", range(30))
def test_param_gradient_central_differences(kind, seed):
    spec = SPECS[kind]()
    p = init_params(spec, seed)
    rng = np.random.default_rng(100 + seed)
    xs = rng.normal(size=(3, spec.n_x, spec.n_fe))
    us = rng.normal(size=(3, spec.n_u))
    adj = rng.normal(size=(3, spec.n_x, spec.n_fe))
    g = param_gradient(spec, p, (xs, us), adj).flat()
    theta = p.flat()
    idx = rng.choice(len(theta), size=min(25, len(theta)), replace=False)
    h = 1e-6
    g_fd = np.empty(len(idx))
    for j, i in enumerate(idx):
        e = np.zeros_like(theta)
        e[i] = h
        fp = np.sum(adj * forward_batch(spec, p.unflatten(theta + e), xs, us))
        fm = np.sum(adj * forward_batch(spec, p.unflatten(theta - e), xs, us))
        g_fd[j] = (fp - fm) / (2 * h)
    assert rel_err(g[idx], g_fd) <= 1e-6


@pytest.mark.parametrize("kind", sorted(SPECS))
@pytest.mark.parametrize("seed", range(30))
def test_weighted_hessian_central_differences(kind, seed):
    spec = SPECS[kind]()
    p = init_params(spec, seed)
    rng = np.random.default_rng(200 + seed)
    x, u = random_point(spec, rng)
    lam = rng.normal(size=spec.n_outputs)
    H = weighted_hessian(spec, p, x, u, lam)
    H_fd = weighted_hessian_fd(spec, p, x, u, lam)
    assert np.allclose(H, H.T, atol=1e-13)
    assert rel_err(H, H_fd) <= 1e-5


def test_batched_derivatives_equal_single():
    spec = small_conv()
    p = init_params(spec, 9)
    rng = np.random.default_rng(9)
    xs = rng.normal(size=(4, 2, 6))
    us = rng.normal(size=(4, 1))
    lam = rng.normal(size=(4, spec.n_outputs))
    Jb = input_jacobian_batch(spec, p, xs, us, chunk=5)
    Hb = weighted_hessian_batch(spec, p, xs, us, lam, chunk=7)
    for i in range(4):
        assert np.allclose(Jb[i], input_jacobian(spec, p, xs[i], us[i]), atol=1e-14)
        assert np.allclose(Hb[i], weighted_hessian(spec, p, xs[i], us[i], lam[i]), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30), st.sampled_from(["tanh", "sigmoid", "softplus", "linear"]))
def test_activation_derivatives(z, name):
    h = 1e-5
    d1 = (activation(name, np.array(z + h)) - activation(name, np.array(z - h))) / (2 * h)
    d2 = (activation(name, np.array(z + h), 1) - activation(name, np.array(z - h), 1)) / (2 * h)
    assert abs(activation(name, np.array(z), 1) - d1) <= 1e-7
    assert abs(activation(name, np.array(z), 2) - d2) <= 1e-7


def test_param_file_roundtrip(tmp_path):
    spec = small_conv()
    p = init_params(spec, 4)
    path = tmp_path / "net.nnp"
    save_params(path, spec, p, metadata={"seed": 4})
    spec2, p2 = load_params(path, spec)
    assert spec2 == spec and p2.equals(p)
    assert read_param_header(path)["metadata"] == {"seed": 4}


def test_param_file_rejects_mismatch(tmp_path):
    path = tmp_path / "net.nnp"
    save_params(path, small_conv(), init_params(small_conv(), 0))
    with pytest.raises(ParamFileError):
        load_params(path, small_dense())
    data = path.read_bytes()
    (tmp_path / "short.nnp").write_bytes(data[:-8])
    with pytest.raises(ParamFileError):
        load_params(tmp_path / "short.nnp")
    (tmp_path / "junk.nnp").write_bytes(b"hello world, not a network")
    with pytest.raises(ParamFileError):
        load_params(tmp_path / "junk.nnp")


def test_init_is_seeded_and_bounded():
    spec = small_dense()
    a, b = init_params(spec, 5), init_params(spec, 5)
    assert a.equals(b) and not a.equals(init_params(spec, 6))
    assert np.all(np.abs(a.arrays[0]["W"]) <= np.sqrt(1 / 7))


def test_unflatten_checks_length():
    p = init_params(small_dense(), 0)
    with pytest.raises(ValueError):
        p.unflatten(np.zeros(p.size + 1))
    assert p.unflatten(p.flat()).equals(p)
