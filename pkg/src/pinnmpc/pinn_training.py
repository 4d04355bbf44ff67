"""Physics-informed training of one-step surrogates.

The loss is the sum of squared implicit-Euler residuals of the plant when the
network output is used as the next state, over uniformly sampled states and
controls. No data term is used.

Training runs in normalized coordinates (inputs and outputs mapped from their
bounds to ``[-1, 1]``); the affine maps are folded into the first and last
layers afterwards, so the returned parameters act on physical units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dual import Dual
from .nn_engine import NetworkParams, NetworkSpec, forward_batch, init_params, param_gradient
from .plants.base import PlantModel

__all__ = [
    "SampleSet",
    "TrainConfig",
    "LossReport",
    "TrainingError",
    "Normalizer",
    "sample_inputs",
    "physics_residual",
    "residual_with_adjoint",
    "loss",
    "learning_rate",
    "train",
    "fold_normalization",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class SampleSet:
    """Sampled ``(x_k, u_k)`` pairs, ``x`` of shape (n_s, n_x, n_fe), ``u`` of (n_s, n_u)."""

    x: np.ndarray
    u: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.x) == 0 or len(self.x) != len(self.u):
            raise ValueError("a sample set needs at least one (x, u) pair")

    @property
    def n_s(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.x[idx], self.u[idx], self.seed)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr0: float = 0.01
    decay: float = 0.7
    decay_every: int = 100
    test_fraction: float = 0.1
    seed: int = 0
    n_samples: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1 or self.n_samples < 2:
            raise ValueError("invalid training budget")


@dataclass
class LossReport:
    """Per-epoch mean residual loss per sample; entry 0 is the initialization."""

    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    best_epoch: int = 0

    def append(self, epoch, train_value, test_value):
        self.epochs.append(int(epoch))
        self.train_loss.append(float(train_value))
        self.test_loss.append(float(test_value))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_loss"])
            for row in zip(self.epochs, self.train_loss, self.test_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_inputs(plant: PlantModel, n_s: int, seed: int, band=None) -> SampleSet:
    """Uniform samples of node states and controls within their bounds.

    ``band`` optionally restricts states to ``lower <= x <= upper`` profiles
    (each of shape ``(n_x, n_fe)``) by independent convex interpolation per
    entry.
    """
    if n_s < 1:
        raise ValueError("n_s must be positive")
    if band is None:
        lo, hi = plant.state_bounds()
    else:
        lo, hi = (np.asarray(b, dtype=float).reshape(plant.shape) for b in band)
        if np.any(lo > hi):
            raise ValueError("band lower profile exceeds the upper profile")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("sampling requires finite bounds")
    rng = np.random.default_rng(seed)
    t = rng.random((n_s,) + plant.shape)
    x = lo + t * (hi - lo)
    s = rng.random((n_s, plant.n_u))
    u = plant.u_lb + s * (plant.u_ub - plant.u_lb)
    return SampleSet(x, u, seed)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def _batched(a):
    """(B, n_x, n_fe) -> (n_x, n_fe, B)."""
    return np.moveaxis(np.asarray(a, dtype=float), 0, -1)


def physics_residual(plant: PlantModel, x_k, x_next, u, dt: float | None = None) -> np.ndarray:
    """Implicit-Euler residual of the plant, ``(n_x, n_fe)`` or batched ``(B, n_x, n_fe)``."""
    dt = plant.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    x_k = np.asarray(x_k, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if x_k.shape != x_next.shape:
        raise ValueError("x_k and x_next must have the same shape")
    if x_k.ndim == 2:
        return plant.residual(x_k, x_next, np.asarray(u, dtype=float), dt=dt)
    uu = [np.asarray(u, dtype=float)[:, l] for l in range(plant.n_u)]
    r = plant.residual(_batched(x_k), _batched(x_next), uu, dt=dt)
    return np.moveaxis(r, -1, 0)


def residual_with_adjoint(plant: PlantModel, x_k, x_next, u, dt: float | None = None):
    """Batched residual ``R`` and ``dL/dx_next`` for ``L = sum(R**2)``.

    Each residual row depends only on ``x_next`` at its own node and the one
    upstream, so the local Jacobian is obtained with ``2*n_x`` dual directions.
    """
    dt = plant.dt if dt is None else dt
    n_x = plant.n_x
    xk = _batched(x_k)
    xn = _batched(x_next)
    uu = [np.asarray(u, dtype=float)[:, l] for l in range(plant.n_u)]
    nd = 2 * n_x
    inlet = plant.inlet(uu)
    xs, prev = [], []
    for i in range(n_x):
        d = np.zeros((nd,) + xn[i].shape)
        d[i] = 1.0
        xs.append(Dual(xn[i], d))
        p_val = np.concatenate([np.broadcast_to(np.asarray(inlet[i], float), xn[i][:1].shape[1:])[None],
                                xn[i][:-1]], axis=0)
        dp = np.zeros((nd,) + xn[i].shape)
        dp[n_x + i, 1:] = 1.0
        prev.append(Dual(p_val, dp))
    hk = plant.holdup([xk[i] for i in range(n_x)], uu)
    res = plant.residual_nodes(hk, xs, prev, uu, 1.0 / dt)
    R = np.array([r.val for r in res])  # (n_x, n_fe, B)
    D = np.array([r.der for r in res])  # (n_x rows, nd, n_fe, B)
    g = 2.0 * R
    adj = np.einsum("jnvb,jvb->nvb", D, g)
    out = adj[:n_x].copy()
    out[:, :-1] += adj[n_x:, 1:]
    return np.moveaxis(R, -1, 0), np.moveaxis(out, -1, 0)


def loss(residuals) -> float:
    """Sum of squared residuals over samples, states and nodes."""
    r = np.asarray(residuals, dtype=float)
    return float(np.sum(r * r))


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Affine maps ``x = mid + half * s`` for states (per state) and controls."""

    x_mid: np.ndarray
    x_half: np.ndarray
    u_mid: np.ndarray
    u_half: np.ndarray

    @classmethod
    def from_plant(cls, plant: PlantModel) -> "Normalizer":
        def parts(lo, hi):
            half = 0.5 * (hi - lo)
            return 0.5 * (hi + lo), np.where(half > 0, half, 1.0)
        xm, xh = parts(plant.x_lb, plant.x_ub)
        um, uh = parts(plant.u_lb, plant.u_ub)
        return cls(xm, xh, um, uh)

    def inputs(self, x, u):
        return (x - self.x_mid[:, None]) / self.x_half[:, None], (u - self.u_mid) / self.u_half

    def outputs(self, y):
        return self.x_mid[:, None] + self.x_half[:, None] * y


def fold_normalization(spec: NetworkSpec, params: NetworkParams, norm: Normalizer) -> NetworkParams:
    """Parameters acting on physical units that reproduce the normalized network."""
    out = params.copy()
    arrays = out.arrays
    pidx = [i for i, l in enumerate(spec.layers) if l.has_params]
    first, last = pidx[0], pidx[-1]
    n_x, n_fe = spec.n_x, spec.n_fe
    # input side: r0_norm = (r0 - m) / h
    if spec.input_layout == "flattened":
        if spec.layers[first].kind != "dense" or spec.shapes[first] != spec.input_shape:
            raise ValueError("flattened layout needs a dense first layer")
        m = np.concatenate([np.repeat(norm.x_mid, n_fe), norm.u_mid])
        h = np.concatenate([np.repeat(norm.x_half, n_fe), norm.u_half])
        W = arrays[first]["W"]
        arrays[first]["b"] = arrays[first]["b"] - W @ (m / h)
        arrays[first]["W"] = W / h
    else:
        if spec.layers[first].kind != "conv1d" or spec.shapes[first] != spec.input_shape:
            raise ValueError("channel layout needs a convolutional first layer")
        m = np.concatenate([norm.x_mid, norm.u_mid])
        h = np.concatenate([norm.x_half, norm.u_half])
        K = arrays[first]["K"]
        arrays[first]["b"] = arrays[first]["b"] - np.einsum("ock,c->o", K, m / h)
        arrays[first]["K"] = K / h[None, :, None]
    # output side: y = m_out + h_out * y_norm
    layer = spec.layers[last]
    if layer.kind != "dense" or spec.shapes[-1] not in ((n_x * n_fe,), (n_x, n_fe)):
        raise ValueError("the final parameterized layer must be dense and produce the state profile")
    mo = np.repeat(norm.x_mid, n_fe)
    ho = np.repeat(norm.x_half, n_fe)
    arrays[last]["W"] = arrays[last]["W"] * ho[:, None]
    arrays[last]["b"] = arrays[last]["b"] * ho + mo
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _eval_loss(spec, params, plant, norm, samples, chunk=4096) -> float:
    total = 0.0
    for s in range(0, samples.n_s, chunk):
        xk, uk = samples.x[s:s + chunk], samples.u[s:s + chunk]
        xn, un = norm.inputs(xk, uk)
        y = norm.outputs(forward_batch(spec, params, xn, un))
        total += loss(physics_residual(plant, xk, y, uk))
    return total / samples.n_s


def train(spec: NetworkSpec, plant: PlantModel, config: TrainConfig, samples: SampleSet | None = None,
          test: SampleSet | None = None, band=None, init: NetworkParams | None = None,
          log=None) -> tuple[NetworkParams, LossReport]:
    """ADAM on the physics loss with a step learning-rate schedule.

    Returns the parameters (in physical units) with the lowest held-out loss
    and the per-epoch report. The held-out set is drawn with an independent
    seed; its size is ``test_fraction`` of the training set size.
    """
    if (spec.n_x, spec.n_fe, spec.n_u) != (plant.n_x, plant.n_fe, plant.n_u):
        raise ValueError("network dimensions do not match the plant")
    n_test = max(1, int(round(config.test_fraction * config.n_samples)))
    if samples is None:
        samples = sample_inputs(plant, config.n_samples - n_test, config.seed, band)
    if test is None:
        test = sample_inputs(plant, n_test, config.seed + 7919, band)
    norm = Normalizer.from_plant(plant)
    params = init.copy() if init is not None else init_params(spec, config.seed)
    report = LossReport()
    tr0 = _eval_loss(spec, params, plant, norm, samples)
    te0 = _eval_loss(spec, params, plant, norm, test)
    report.append(0, tr0, te0)
    if not (math.isfinite(tr0) and math.isfinite(te0)):
        raise TrainingError("non-finite loss at initialization")
    best, best_params = te0, params.copy()
    theta = params.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    rng = np.random.default_rng(config.seed + 104729)
    n = samples.n_s
    xn_all, un_all = norm.inputs(samples.x, samples.u)
    for epoch in range(config.epochs):
        lr = learning_rate(epoch, config)
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            y_n = forward_batch(spec, params, xn_all[idx], un_all[idx])
            y = norm.outputs(y_n)
            R, adj = residual_with_adjoint(plant, samples.x[idx], y, samples.u[idx])
            batch_loss = loss(R)
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}")
            running += batch_loss
            adj_n = adj * norm.x_half[None, :, None] / len(idx)
            g = param_gradient(spec, params, (xn_all[idx], un_all[idx]), adj_n).flat()
            step += 1
            m = config.beta1 * m + (1.0 - config.beta1) * g
            v = config.beta2 * v + (1.0 - config.beta2) * g * g
            mh = m / (1.0 - config.beta1 ** step)
            vh = v / (1.0 - config.beta2 ** step)
            theta = theta - lr * mh / (np.sqrt(vh) + config.eps)
            params = params.unflatten(theta)
        te = _eval_loss(spec, params, plant, norm, test)
        if not math.isfinite(te):
            raise TrainingError(f"non-finite test loss in epoch {epoch + 1}")
        report.append(epoch + 1, running / n, te)
        if te < best:
            best, best_params = te, params.copy()
            report.best_epoch = epoch + 1
        if log is not None:
            log(epoch + 1, running / n, te)
    return fold_normalization(spec, best_params, norm), report
