"""Ways of placing a trained one-step network inside an NLP.

* full-space algebraic (``ece-fs``): one auxiliary variable per pre-activation
  and per activation, linked by explicit rows;
* reduced-space algebraic (``ece-rs``): layers substituted into one nested
  expression per output, no auxiliaries (dense networks only);
* external grey box (``efe``): a single block over the whole horizon whose
  residuals, Jacobian and weighted Hessian come from :mod:`nn_engine`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import expr_graph as eg
from .expr_graph import Expr, lin_sum
from .nlp_solver import GreyBoxBlock, NlpProblem
from .nn_engine import (NetworkParams, NetworkSpec, _forward_trace, _vec_to_input, activation, forward_batch,
                        input_jacobian_batch, weighted_hessian_batch)

__all__ = [
    "EmbeddingKind",
    "TrainedNetwork",
    "EmbeddedStep",
    "EmbeddingError",
    "embed_fs_dense",
    "embed_fs_conv",
    "embed_fs",
    "embed_rs_dense",
    "make_efe_block",
    "EfeBlock",
    "initialize_aux",
    "fs_row_count",
]

DEFAULT_MAX_NODES = 1_000_000


class EmbeddingError(ValueError):
    pass


class EmbeddingKind(str, enum.Enum):
    ECE_FS = "ece-fs"
    ECE_RS = "ece-rs"
    EFE = "efe"
    MECHANISTIC = "mechanistic"

    @classmethod
    def parse(cls, value) -> "EmbeddingKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise EmbeddingError(f"unknown embedding kind {value!r}; expected one of "
                                 f"{[k.value for k in cls]}") from None


@dataclass(frozen=True)
class TrainedNetwork:
    spec: NetworkSpec
    params: NetworkParams

    def __post_init__(self):
        self.params.check(self.spec)

    def step(self, x, u) -> np.ndarray:
        return forward_batch(self.spec, self.params, np.asarray(x, float)[None], np.asarray(u, float)[None])[0]


@dataclass
class EmbeddedStep:
    """Handles of one embedded network evaluation.

    ``layers`` holds, per hidden parameterized layer, the variable indices of
    the pre-activations and activations (full space only).
    """

    kind: EmbeddingKind
    net: TrainedNetwork
    in_vars: list
    out_vars: list
    layers: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    block: GreyBoxBlock | None = None

    @property
    def aux_indices(self) -> list:
        return [i for pre, post in self.layers for i in list(pre) + list(post)]


def _check_io(net: TrainedNetwork, in_vars, out_vars):
    spec = net.spec
    if len(in_vars) != spec.n_inputs:
        raise EmbeddingError(f"expected {spec.n_inputs} input variables, got {len(in_vars)}")
    if len(out_vars) != spec.n_outputs:
        raise EmbeddingError(f"expected {spec.n_outputs} output variables, got {len(out_vars)}")
    ids_in = {id(v) for v in in_vars}
    if any(id(v) in ids_in for v in out_vars):
        raise EmbeddingError("input and output variable slices overlap")


def _affine(terms, coeffs, offset) -> Expr:
    """Sum with repeated terms merged (replicated controls appear many times)."""
    merged: dict[int, list] = {}
    order = []
    for t, c in zip(terms, coeffs):
        if c == 0.0:
            continue
        key = id(t)
        if key not in merged:
            merged[key] = [t, 0.0]
            order.append(key)
        merged[key][1] += float(c)
    return lin_sum([merged[k][0] for k in order], [merged[k][1] for k in order], offset)


def _var_bounds(problem: NlpProblem, exprs) -> tuple[np.ndarray, np.ndarray]:
    lb, ub = problem.variables.bounds()
    lo = np.empty(len(exprs))
    hi = np.empty(len(exprs))
    for j, e in enumerate(exprs):
        if not (isinstance(e, Expr) and e.kind == "var"):
            raise EmbeddingError("embedding inputs must be plain variables")
        lo[j], hi[j] = lb[e.data], ub[e.data]
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise EmbeddingError("interval bounds need finite input bounds")
    return lo, hi


def _widen(lo, hi, frac=1e-2):
    pad = frac * (hi - lo) + 1e-6
    return lo - pad, hi + pad


def _act_interval(name, lo, hi):
    a, b = activation(name, lo), activation(name, hi)
    if name == "tanh":
        return np.maximum(a - 1e-6, -1.0), np.minimum(b + 1e-6, 1.0)
    if name == "sigmoid":
        return np.maximum(a - 1e-6, 0.0), np.minimum(b + 1e-6, 1.0)
    if name == "softplus":
        return np.maximum(a - 1e-6, 0.0), b + 1e-6
    return a, b


def _activation_expr(name: str, e):
    if name == "tanh":
        return eg.tanh(e)
    if name == "sigmoid":
        return eg.sigmoid(e)
    if name == "softplus":
        return eg.softplus(e)
    if name == "linear":
        return e
    raise EmbeddingError(f"unsupported activation {name!r}")


def _layer_affine(layer, p, a: np.ndarray) -> np.ndarray:
    """Object array of affine expressions for one dense or conv layer."""
    if layer.kind == "dense":
        W, b = p["W"], p["b"]
        return np.array([_affine(list(a), W[o], b[o]) for o in range(layer.n_out)], dtype=object)
    K, b = p["K"], p["b"]
    k = layer.kernel_size
    l_out = a.shape[1] - k + 1
    out = np.empty((layer.out_channels, l_out), dtype=object)
    for o in range(layer.out_channels):
        coeffs = K[o].ravel()  # (C_in * k), channel-major
        for v in range(l_out):
            window = a[:, v:v + k].ravel()
            out[o, v] = _affine(list(window), coeffs, b[o])
    return out


def _interval_affine(layer, p, lo, hi):
    m = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    if layer.kind == "dense":
        c = p["W"] @ m + p["b"]
        rad = np.abs(p["W"]) @ r
        return c - rad, c + rad
    from numpy.lib.stride_tricks import sliding_window_view
    k = layer.kernel_size
    wm = sliding_window_view(m, k, axis=1)
    wr = sliding_window_view(r, k, axis=1)
    c = np.einsum("clk,ock->ol", wm, p["K"]) + p["b"][:, None]
    rad = np.einsum("clk,ock->ol", wr, np.abs(p["K"]))
    return c - rad, c + rad


def _reshape_input(spec: NetworkSpec, items: np.ndarray) -> np.ndarray:
    """Arrange ``[x_flat, u]`` items (numbers or expressions) into the input layout."""
    n = spec.n_x * spec.n_fe
    if spec.input_layout == "flattened":
        return np.asarray(items, dtype=items.dtype)
    x = np.asarray(items[:n]).reshape(spec.n_x, spec.n_fe)
    u = np.asarray(items[n:])
    ctrl = np.empty((spec.n_u, spec.n_fe), dtype=items.dtype)
    for l in range(spec.n_u):
        for v in range(spec.n_fe):
            ctrl[l, v] = u[l]
    return np.concatenate([x, ctrl], axis=0)


def _last_param_layer(spec: NetworkSpec) -> int:
    return max(i for i, l in enumerate(spec.layers) if l.has_params)


def fs_row_count(spec: NetworkSpec) -> dict:
    """Auxiliary variables and rows added by one full-space embedded step."""
    last = _last_param_layer(spec)
    aux = 0
    for i, layer in enumerate(spec.layers):
        if layer.has_params and i != last:
            aux += 2 * int(np.prod(spec.shapes[i + 1]))
    return {"aux_vars": aux, "aux_rows": aux, "output_rows": spec.n_outputs, "rows": aux + spec.n_outputs}


def embed_fs(net: TrainedNetwork, in_vars, out_vars, problem: NlpProblem, name: str = "nn",
             input_bounds=None) -> EmbeddedStep:
    """Full-space embedding of a dense or convolutional network.

    Auxiliary bounds come from interval propagation of the input box, which
    defaults to the input variables' bounds. Pass ``input_bounds=(lo, hi)``
    when an input is fixed now but will be re-fixed to other values later.
    """
    spec, params = net.spec, net.params
    _check_io(net, in_vars, out_vars)
    if input_bounds is None:
        lo_in, hi_in = _var_bounds(problem, in_vars)
    else:
        lo_in, hi_in = (np.asarray(b, dtype=float) for b in input_bounds)
        if lo_in.shape != (len(in_vars),) or hi_in.shape != lo_in.shape or np.any(lo_in > hi_in):
            raise EmbeddingError("input_bounds must be two ordered arrays, one entry per input")
    a = _reshape_input(spec, np.asarray(list(in_vars), dtype=object))
    lo = _reshape_input(spec, lo_in)
    hi = _reshape_input(spec, hi_in)
    variables, cs = problem.variables, problem.constraints
    last = _last_param_layer(spec)
    step = EmbeddedStep(EmbeddingKind.ECE_FS, net, list(in_vars), list(out_vars))
    for i, (layer, p) in enumerate(zip(spec.layers, params.arrays)):
        if not layer.has_params:
            shape = spec.shapes[i + 1]
            a, lo, hi = a.reshape(shape), lo.reshape(shape), hi.reshape(shape)
            continue
        if layer.activation not in ("tanh", "sigmoid", "softplus", "linear"):
            raise EmbeddingError(f"unsupported activation {layer.activation!r}")
        z = _layer_affine(layer, p, a)
        zlo, zhi = _interval_affine(layer, p, lo, hi)
        if i == last:
            if int(np.prod(z.shape)) != spec.n_outputs:
                raise EmbeddingError("final layer width does not match the outputs")
            for j, (o, e) in enumerate(zip(out_vars, z.ravel())):
                step.rows.append(cs.add(o - e, "=", 0.0, name=f"{name}.out[{j}]"))
            break
        zlo, zhi = _widen(zlo, zhi)
        alo, ahi = _act_interval(layer.activation, zlo, zhi)
        pre = np.empty(z.shape, dtype=object)
        post = np.empty(z.shape, dtype=object)
        pre_idx, post_idx = [], []
        for pos in np.ndindex(z.shape):
            tag = ",".join(str(q) for q in pos)
            rp = variables.add(f"{name}.pre[{i}][{tag}]", zlo[pos], zhi[pos], 0.5 * (zlo[pos] + zhi[pos]), kind="aux")
            ra = variables.add(f"{name}.act[{i}][{tag}]", alo[pos], ahi[pos], 0.5 * (alo[pos] + ahi[pos]), kind="aux")
            step.rows.append(cs.add(rp - z[pos], "=", 0.0, name=f"{name}.pre[{i}][{tag}]"))
            step.rows.append(cs.add(ra - _activation_expr(layer.activation, rp), "=", 0.0,
                                    name=f"{name}.act[{i}][{tag}]"))
            pre[pos], post[pos] = rp, ra
            pre_idx.append(rp.data)
            post_idx.append(ra.data)
        step.layers.append((np.array(pre_idx), np.array(post_idx)))
        a, lo, hi = post, alo, ahi
    return step


def embed_fs_dense(net: TrainedNetwork, in_vars, out_vars, problem: NlpProblem, name: str = "nn") -> EmbeddedStep:
    """Full-space embedding of a dense network (one pre-activation and one activation row per neuron)."""
    if any(l.kind == "conv1d" for l in net.spec.layers) or net.spec.input_layout != "flattened":
        raise EmbeddingError("embed_fs_dense needs a dense network with the flattened layout")
    return embed_fs(net, in_vars, out_vars, problem, name)


def embed_fs_conv(net: TrainedNetwork, in_vars, out_vars, problem: NlpProblem, name: str = "nn") -> EmbeddedStep:
    """Full-space embedding of a convolutional network (valid convolution, stride one)."""
    if net.spec.input_layout != "channels":
        raise EmbeddingError("embed_fs_conv needs the channel input layout")
    return embed_fs(net, in_vars, out_vars, problem, name)


def embed_rs_dense(net: TrainedNetwork, in_vars, out_vars, problem: NlpProblem, name: str = "nn",
                   max_nodes: int = DEFAULT_MAX_NODES) -> EmbeddedStep:
    """Reduced-space embedding: one nested expression per output, no auxiliaries."""
    spec, params = net.spec, net.params
    if not spec.is_dense_only:
        raise EmbeddingError("reduced-space embedding supports dense networks only")
    _check_io(net, in_vars, out_vars)
    a = np.asarray(list(in_vars), dtype=object)
    last = _last_param_layer(spec)
    for i, (layer, p) in enumerate(zip(spec.layers, params.arrays)):
        if not layer.has_params:
            continue
        z = _layer_affine(layer, p, a)
        if i == last:
            a = z
            break
        a = np.array([_activation_expr(layer.activation, e) for e in z], dtype=object)
    step = EmbeddedStep(EmbeddingKind.ECE_RS, net, list(in_vars), list(out_vars))
    for j, (o, e) in enumerate(zip(out_vars, a.ravel())):
        body = o - e
        count = eg.node_count(body)
        if count > max_nodes:
            raise EmbeddingError(f"row {name}.out[{j}] has {count} nodes, above the limit {max_nodes}")
        step.rows.append(problem.constraints.add(body, "=", 0.0, name=f"{name}.out[{j}]"))
    return step


def initialize_aux(step: EmbeddedStep, guess, set_outputs: bool = False) -> np.ndarray:
    """Write forward-propagated values of all auxiliaries into ``guess``.

    With ``set_outputs`` the output variables also receive the network
    prediction. Returns the updated copy.
    """
    x = np.asarray(guess, dtype=float).copy()
    spec, params = step.net.spec, step.net.params
    vec = np.array([x[v.data] for v in step.in_vars])
    r0 = _vec_to_input(spec, vec[None])
    trace, out = _forward_trace(spec, params, r0)
    if step.kind == EmbeddingKind.ECE_FS:
        hidden = [i for i, l in enumerate(spec.layers) if l.has_params][:-1]
        for (pre, post), li in zip(step.layers, hidden):
            _, z, a = trace[li]
            x[pre] = z[0].ravel()
            x[post] = a[0].ravel()
    if set_outputs:
        for o, val in zip(step.out_vars, out[0].ravel()):
            x[o.data] = val
    return x


# ---------------------------------------------------------------------------
# grey-box block over a whole horizon
# ---------------------------------------------------------------------------


class EfeBlock(GreyBoxBlock):
    """Residuals ``x_{k+1} - NN(x_k, u_{min(k, M-1)})`` for ``k = 0..P-1``.

    Inputs are ``y = [x_0, ..., x_P, u_0, ..., u_{M-1}]`` with each state
    profile flattened state-major.
    """

    def __init__(self, net: TrainedNetwork, P: int, M: int):
        if P < 1 or not 1 <= M <= P:
            raise EmbeddingError("need P >= 1 and 1 <= M <= P")
        self.net = net
        self.P, self.M = int(P), int(M)
        spec = net.spec
        self.N = spec.n_x * spec.n_fe
        self.n_u = spec.n_u
        self._pattern = self._structure()
        self._cache_key = None
        self._cache = None

    @property
    def n_inputs(self) -> int:
        return (self.P + 1) * self.N + self.M * self.n_u

    @property
    def n_outputs(self) -> int:
        return self.P * self.N

    @property
    def has_hessian(self) -> bool:
        return True

    def _split(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_inputs,):
            raise EmbeddingError(f"block expects {self.n_inputs} inputs, got {y.shape}")
        spec = self.net.spec
        X = y[:(self.P + 1) * self.N].reshape(self.P + 1, spec.n_x, spec.n_fe)
        U = y[(self.P + 1) * self.N:].reshape(self.M, self.n_u)
        Uk = U[np.minimum(np.arange(self.P), self.M - 1)]
        return X, Uk

    def _u_col(self, k):
        return (self.P + 1) * self.N + min(k, self.M - 1) * self.n_u

    def _structure(self):
        rows, cols = [], []
        N, n_u = self.N, self.n_u
        for k in range(self.P):
            r = k * N + np.arange(N)
            rows.append(r)
            cols.append((k + 1) * N + np.arange(N))
            rr = np.repeat(r, N + n_u)
            cc = np.tile(np.concatenate([k * N + np.arange(N), self._u_col(k) + np.arange(n_u)]), N)
            rows.append(rr)
            cols.append(cc)
        return np.concatenate(rows), np.concatenate(cols)

    def eval_w(self, y) -> np.ndarray:
        X, Uk = self._split(y)
        pred = forward_batch(self.net.spec, self.net.params, X[:-1], Uk)
        return (X[1:] - pred).reshape(-1)

    def eval_jacobian(self, y) -> sp.csr_matrix:
        X, Uk = self._split(y)
        jac = input_jacobian_batch(self.net.spec, self.net.params, X[:-1], Uk)  # (P, N, N + n_u)
        vals = []
        for k in range(self.P):
            vals.append(np.ones(self.N))
            vals.append(-jac[k].ravel())
        r, c = self._pattern
        return sp.csr_matrix((np.concatenate(vals), (r, c)), shape=(self.n_outputs, self.n_inputs))

    def eval_weighted_hessian(self, y, lam) -> sp.coo_matrix:
        X, Uk = self._split(y)
        lam = np.asarray(lam, dtype=float).reshape(self.P, self.N)
        H = weighted_hessian_batch(self.net.spec, self.net.params, X[:-1], Uk, lam)
        rows, cols, vals = [], [], []
        for k in range(self.P):
            idx = np.concatenate([k * self.N + np.arange(self.N), self._u_col(k) + np.arange(self.n_u)])
            rows.append(np.repeat(idx, len(idx)))
            cols.append(np.tile(idx, len(idx)))
            vals.append(-H[k].ravel())
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_inputs, self.n_inputs))


def make_efe_block(net: TrainedNetwork, P: int, M: int | None = None) -> EfeBlock:
    """Grey-box block spanning the horizon; ``M`` defaults to ``P`` (no blocking)."""
    return EfeBlock(net, P, P if M is None else M)
