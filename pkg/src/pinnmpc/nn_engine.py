"""Small float64 neural-network engine for one-step surrogates.

Supports dense and 1D convolutional layers (stride 1, no padding) with
smooth activations, batched forward evaluation, reverse-mode gradients with
respect to parameters and inputs, and forward-over-reverse products for the
multiplier-weighted input Hessian.

Networks map ``(x_k, u_k)`` with ``x_k`` of shape ``(n_x, n_fe)`` to a
prediction of ``x_{k+1}``. Two input layouts exist:

* ``flattened``: ``r0 = [x_k.ravel(), u_k]`` (state-major, then space);
* ``channels``: ``r0`` has ``n_x + n_u`` channels of length ``n_fe``, the
  control channels being constant copies of each control.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "NetworkParams",
    "ParamFileError",
    "Dense",
    "Conv1d",
    "Flatten",
    "Reshape",
    "flatten_state",
    "unflatten_state",
    "init_params",
    "forward",
    "forward_batch",
    "input_jacobian",
    "input_jacobian_batch",
    "param_gradient",
    "weighted_hessian",
    "weighted_hessian_batch",
    "weighted_hessian_fd",
    "save_params",
    "load_params",
    "activation",
]

ACTIVATIONS = ("tanh", "sigmoid", "softplus", "linear")
LAYOUTS = ("flattened", "channels")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    shape: tuple = ()
    activation: str = "linear"

    def __post_init__(self):
        if self.kind not in ("dense", "conv1d", "flatten", "reshape"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.kind == "conv1d" and self.kernel_size < 1:
            raise ValueError("kernel_size must be at least 1")
        if self.kind in ("flatten", "reshape") and self.activation != "linear":
            raise ValueError("shape layers carry no activation")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv1d")


def Dense(n_in: int, n_out: int, activation: str = "tanh") -> LayerSpec:
    return LayerSpec("dense", n_in=n_in, n_out=n_out, activation=activation)


def Conv1d(in_channels: int, out_channels: int, kernel_size: int, activation: str = "tanh") -> LayerSpec:
    return LayerSpec("conv1d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, activation=activation)


def Flatten() -> LayerSpec:
    return LayerSpec("flatten")


def Reshape(shape) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(int(s) for s in shape))


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_layout: str
    n_x: int
    n_fe: int
    n_u: int
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_layout not in LAYOUTS:
            raise ValueError(f"unknown input layout {self.input_layout!r}")
        shapes = [self.input_shape]
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                if cur != (layer.n_in,):
                    raise ValueError(f"layer {i}: dense expects ({layer.n_in},), got {cur}")
                cur = (layer.n_out,)
            elif layer.kind == "conv1d":
                if len(cur) != 2 or cur[0] != layer.in_channels:
                    raise ValueError(f"layer {i}: conv expects {layer.in_channels} channels, got {cur}")
                length = cur[1] - layer.kernel_size + 1
                if length < 1:
                    raise ValueError(f"layer {i}: kernel longer than channel length {cur[1]}")
                cur = (layer.out_channels, length)
            elif layer.kind == "flatten":
                cur = (int(np.prod(cur)),)
            else:
                if int(np.prod(layer.shape)) != int(np.prod(cur)):
                    raise ValueError(f"layer {i}: cannot reshape {cur} to {layer.shape}")
                cur = layer.shape
            shapes.append(cur)
        if int(np.prod(cur)) != self.n_x * self.n_fe:
            raise ValueError(f"network output size {int(np.prod(cur))} does not match n_x*n_fe")
        last = [l for l in self.layers if l.has_params]
        if not last or last[-1].activation != "linear":
            raise ValueError("the final parameterized layer must use a linear activation")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def input_shape(self) -> tuple:
        if self.input_layout == "flattened":
            return (self.n_x * self.n_fe + self.n_u,)
        return (self.n_x + self.n_u, self.n_fe)

    @property
    def n_inputs(self) -> int:
        return self.n_x * self.n_fe + self.n_u

    @property
    def n_outputs(self) -> int:
        return self.n_x * self.n_fe

    @property
    def is_dense_only(self) -> bool:
        return all(l.kind in ("dense", "reshape") for l in self.layers) and self.input_layout == "flattened"

    def to_dict(self) -> dict:
        return {
            "input_layout": self.input_layout,
            "n_x": self.n_x,
            "n_fe": self.n_fe,
            "n_u": self.n_u,
            "layers": [_layer_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            ld["shape"] = tuple(ld.get("shape", ()))
            layers.append(LayerSpec(**ld))
        return cls(tuple(layers), d["input_layout"], int(d["n_x"]), int(d["n_fe"]), int(d["n_u"]))

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _layer_dict(layer: LayerSpec) -> dict:
    d = asdict(layer)
    d["shape"] = list(d["shape"])
    return d


class NetworkParams:
    """Per-layer parameter arrays: ``W``/``b`` for dense, ``K``/``b`` for conv layers."""

    def __init__(self, arrays: list):
        self.arrays = [dict(a) for a in arrays]

    def copy(self) -> "NetworkParams":
        return NetworkParams([{k: v.copy() for k, v in a.items()} for a in self.arrays])

    def flat(self) -> np.ndarray:
        parts = [a[k].ravel() for a in self.arrays for k in sorted(a)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, vec) -> "NetworkParams":
        vec = np.asarray(vec, dtype=float)
        out, pos = [], 0
        for a in self.arrays:
            d = {}
            for k in sorted(a):
                size = a[k].size
                d[k] = vec[pos:pos + size].reshape(a[k].shape).copy()
                pos += size
            out.append(d)
        if pos != len(vec):
            raise ValueError("parameter vector has the wrong length")
        return NetworkParams(out)

    @property
    def size(self) -> int:
        return sum(v.size for a in self.arrays for v in a.values())

    def check(self, spec: NetworkSpec):
        if len(self.arrays) != len(spec.layers):
            raise ValueError("parameter list does not match the layer list")
        for i, (layer, a) in enumerate(zip(spec.layers, self.arrays)):
            expected = _param_shapes(layer)
            if set(a) != set(expected) or any(a[k].shape != s for k, s in expected.items()):
                raise ValueError(f"layer {i}: parameter shapes do not match the spec")
            if any(not np.all(np.isfinite(v)) for v in a.values()):
                raise ValueError(f"layer {i}: non-finite parameters")

    def equals(self, other: "NetworkParams") -> bool:
        return len(self.arrays) == len(other.arrays) and all(
            set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
            for a, b in zip(self.arrays, other.arrays))


def _param_shapes(layer: LayerSpec) -> dict:
    if layer.kind == "dense":
        return {"W": (layer.n_out, layer.n_in), "b": (layer.n_out,)}
    if layer.kind == "conv1d":
        return {"K": (layer.out_channels, layer.in_channels, layer.kernel_size), "b": (layer.out_channels,)}
    return {}


def init_params(spec: NetworkSpec, seed: int = 0) -> NetworkParams:
    """Uniform fan-in initialization in ``[-sqrt(1/n_in), sqrt(1/n_in)]``."""
    rng = np.random.default_rng(seed)
    arrays = []
    for layer in spec.layers:
        shapes = _param_shapes(layer)
        if layer.kind == "dense":
            fan_in = layer.n_in
        elif layer.kind == "conv1d":
            fan_in = layer.in_channels * layer.kernel_size
        else:
            arrays.append({})
            continue
        bound = np.sqrt(1.0 / fan_in)
        arrays.append({k: rng.uniform(-bound, bound, size=s) for k, s in sorted(shapes.items())})
    return NetworkParams(arrays)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def activation(name: str, z: np.ndarray, order: int = 0) -> np.ndarray:
    """Value (``order=0``) or first/second derivative of an activation."""
    if name == "tanh":
        t = np.tanh(z)
        if order == 0:
            return t
        d1 = 1.0 - t * t
        return d1 if order == 1 else -2.0 * t * d1
    if name in ("sigmoid", "softplus"):
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        if name == "softplus" and order == 0:
            return np.logaddexp(0.0, z)
        if name == "sigmoid" and order == 0:
            return s
        d_s = s * (1.0 - s)
        if name == "softplus":
            return s if order == 1 else d_s
        return d_s if order == 1 else d_s * (1.0 - 2.0 * s)
    if name == "linear":
        if order == 0:
            return z
        return np.ones_like(z) if order == 1 else np.zeros_like(z)
    raise ValueError(f"unsupported activation {name!r}")


# ---------------------------------------------------------------------------
# linear pieces of each layer, operating on a leading batch axis
# ---------------------------------------------------------------------------


def _apply(layer, p, a, bias=True):
    if layer.kind == "dense":
        z = a @ p["W"].T
        return z + p["b"] if bias else z
    if layer.kind == "conv1d":
        win = sliding_window_view(a, layer.kernel_size, axis=2)  # (B, C_in, L_out, k)
        z = np.einsum("bclk,ock->bol", win, p["K"], optimize=True)
        return z + p["b"][None, :, None] if bias else z
    if layer.kind == "flatten":
        return a.reshape(a.shape[0], -1)
    return a.reshape((a.shape[0],) + layer.shape)


def _transpose(layer, p, g, in_shape):
    if layer.kind == "dense":
        return g @ p["W"]
    if layer.kind == "conv1d":
        k = layer.kernel_size
        l_out = g.shape[2]
        out = np.zeros((g.shape[0],) + in_shape)
        for j in range(k):
            out[:, :, j:j + l_out] += np.einsum("bol,oc->bcl", g, p["K"][:, :, j], optimize=True)
        return out
    return g.reshape((g.shape[0],) + in_shape)


def _param_grad(layer, a_in, gz):
    if layer.kind == "dense":
        return {"W": gz.T @ a_in, "b": gz.sum(axis=0)}
    if layer.kind == "conv1d":
        win = sliding_window_view(a_in, layer.kernel_size, axis=2)
        return {"K": np.einsum("bol,bclk->ock", gz, win, optimize=True), "b": gz.sum(axis=(0, 2))}
    return {}


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------


def flatten_state(x) -> np.ndarray:
    """Flatten an ``(n_x, n_fe)`` profile state-major, then space."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected an (n_x, n_fe) profile, got shape {x.shape}")
    return x.reshape(-1).copy()


def unflatten_state(vec, n_x: int, n_fe: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.shape[-1] != n_x * n_fe:
        raise ValueError("vector length does not match n_x*n_fe")
    return vec.reshape(vec.shape[:-1] + (n_x, n_fe))


def _inputs(spec: NetworkSpec, x, u) -> np.ndarray:
    """Network input tensor for a batch: x (B, n_x, n_fe), u (B, n_u)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[1:] != (spec.n_x, spec.n_fe) or u.shape[1:] != (spec.n_u,) or x.shape[0] != u.shape[0]:
        raise ValueError(f"inputs must be (B, {spec.n_x}, {spec.n_fe}) and (B, {spec.n_u})")
    if spec.input_layout == "flattened":
        return np.concatenate([x.reshape(x.shape[0], -1), u], axis=1)
    ctrl = np.repeat(u[:, :, None], spec.n_fe, axis=2)
    return np.concatenate([x, ctrl], axis=1)


def _vec_to_input(spec: NetworkSpec, v) -> np.ndarray:
    """Map concatenated ``[x_flat, u]`` vectors (B, n_in) to the input layout."""
    v = np.asarray(v, dtype=float)
    n = spec.n_x * spec.n_fe
    return _inputs(spec, v[:, :n].reshape(-1, spec.n_x, spec.n_fe), v[:, n:])


def _input_to_vec(spec: NetworkSpec, g) -> np.ndarray:
    """Transpose of :func:`_vec_to_input` (adjoints back to ``[x_flat, u]``)."""
    if spec.input_layout == "flattened":
        return g
    gx = g[:, :spec.n_x, :].reshape(g.shape[0], -1)
    gu = g[:, spec.n_x:, :].sum(axis=2)
    return np.concatenate([gx, gu], axis=1)


# ---------------------------------------------------------------------------
# forward and reverse passes
# ---------------------------------------------------------------------------


def _forward_trace(spec, params, r0):
    """Return per-layer (input, pre-activation, output) for a batch."""
    trace = []
    a = r0
    for layer, p in zip(spec.layers, params.arrays):
        z = _apply(layer, p, a)
        out = activation(layer.activation, z) if layer.has_params else z
        trace.append((a, z, out))
        a = out
    return trace, a


def forward_batch(spec: NetworkSpec, params: NetworkParams, x, u) -> np.ndarray:
    """Predictions for a batch: x (B, n_x, n_fe), u (B, n_u) -> (B, n_x, n_fe)."""
    _, out = _forward_trace(spec, params, _inputs(spec, x, u))
    out = out.reshape(out.shape[0], spec.n_x, spec.n_fe)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network output")
    return out


def forward(spec: NetworkSpec, params: NetworkParams, x, u) -> np.ndarray:
    """One-step prediction of the next ``(n_x, n_fe)`` profile."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (spec.n_x, spec.n_fe):
        raise ValueError(f"state must have shape ({spec.n_x}, {spec.n_fe}), got {x.shape}")
    if u.shape != (spec.n_u,):
        raise ValueError(f"control must have length {spec.n_u}")
    return forward_batch(spec, params, x[None], u[None])[0]


def _backward(spec, params, trace, g_out, want_params=False, want_input=True):
    """Reverse sweep from output adjoints ``g_out`` (batch, *out_shape)."""
    grads = [None] * len(spec.layers)
    g = g_out
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer, p = spec.layers[idx], params.arrays[idx]
        a_in, z, _ = trace[idx]
        if layer.has_params:
            gz = g * activation(layer.activation, z, 1)
            if want_params:
                grads[idx] = _param_grad(layer, a_in, gz)
        else:
            gz = g
        if idx > 0 or want_input:
            g = _transpose(layer, p, gz, a_in.shape[1:])
        if want_params:
            grads[idx] = grads[idx] if grads[idx] is not None else {}
    return g, grads


def param_gradient(spec: NetworkSpec, params: NetworkParams, batch_inputs, loss_adjoints) -> NetworkParams:
    """Gradient of ``sum(loss_adjoints * NN(batch))`` w.r.t. every parameter.

    ``batch_inputs`` is ``(x, u)`` with shapes ``(B, n_x, n_fe)`` and
    ``(B, n_u)``; ``loss_adjoints`` has shape ``(B, n_x, n_fe)``.
    """
    x, u = batch_inputs
    r0 = _inputs(spec, x, u)
    adj = np.asarray(loss_adjoints, dtype=float)
    if adj.shape != (r0.shape[0], spec.n_x, spec.n_fe):
        raise ValueError("adjoints must have shape (B, n_x, n_fe) matching the batch")
    trace, out = _forward_trace(spec, params, r0)
    _, grads = _backward(spec, params, trace, adj.reshape(out.shape), want_params=True, want_input=False)
    return NetworkParams(grads)


def _repeat_trace(trace, reps):
    return [(np.repeat(a, reps, axis=0), np.repeat(z, reps, axis=0), None) for a, z, _ in trace]


def input_jacobian_batch(spec: NetworkSpec, params: NetworkParams, x, u, chunk: int = 4096) -> np.ndarray:
    """Jacobians ``d NN / d [x_flat, u]`` for a batch, shape (B, n_out, n_in).

    Reverse mode with one seed per output row; seeds of all samples are
    processed together in chunks.
    """
    r0 = _inputs(spec, x, u)
    B = r0.shape[0]
    n_out = spec.n_outputs
    trace, out = _forward_trace(spec, params, r0)
    out_shape = out.shape[1:]
    jac = np.empty((B, n_out, spec.n_inputs))
    per = max(1, chunk // n_out)
    eye = np.eye(n_out).reshape((n_out,) + out_shape)
    for s in range(0, B, per):
        e = min(B, s + per)
        sub = [(a[s:e], z[s:e], None) for a, z, _ in trace]
        rep = _repeat_trace(sub, n_out)
        seeds = np.tile(eye, (e - s,) + (1,) * len(out_shape))
        g, _ = _backward(spec, params, rep, seeds)
        jac[s:e] = _input_to_vec(spec, g).reshape(e - s, n_out, spec.n_inputs)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite Jacobian entries")
    return jac


def input_jacobian(spec: NetworkSpec, params: NetworkParams, x, u) -> np.ndarray:
    """Exact ``(n_x*n_fe) x (n_x*n_fe + n_u)`` Jacobian at one point."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return input_jacobian_batch(spec, params, x[None], u[None])[0]


def _hessian_vector(spec, params, trace, lam_out, v_in):
    """Forward-over-reverse products ``H v`` for batched directions.

    ``trace`` holds the forward pass of a batch (each sample already repeated
    once per direction); ``lam_out`` the output multipliers and ``v_in`` the
    input-layout tangents, both with the same leading axis.
    """
    # forward tangents of the pre-activations
    dz_list = []
    da = v_in
    for layer, p, (a_in, z, _) in zip(spec.layers, params.arrays, trace):
        dz = _apply(layer, p, da, bias=False)
        dz_list.append(dz)
        da = dz * activation(layer.activation, z, 1) if layer.has_params else dz
    # reverse sweep carrying the tangent of the adjoint
    g = lam_out
    dg = np.zeros_like(lam_out)
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer, p = spec.layers[idx], params.arrays[idx]
        a_in, z, _ = trace[idx]
        if layer.has_params:
            s1 = activation(layer.activation, z, 1)
            s2 = activation(layer.activation, z, 2)
            gz = g * s1
            dgz = dg * s1 + g * s2 * dz_list[idx]
        else:
            gz, dgz = g, dg
        g = _transpose(layer, p, gz, a_in.shape[1:])
        dg = _transpose(layer, p, dgz, a_in.shape[1:])
    return dg


def weighted_hessian_batch(spec: NetworkSpec, params: NetworkParams, x, u, lam, chunk: int = 8192) -> np.ndarray:
    """Hessians of ``lam_b^T NN(x_b, u_b)`` w.r.t. ``[x_flat, u]``, shape (B, n_in, n_in)."""
    r0 = _inputs(spec, x, u)
    B = r0.shape[0]
    lam = np.asarray(lam, dtype=float).reshape(B, spec.n_outputs)
    n_in = spec.n_inputs
    trace, out = _forward_trace(spec, params, r0)
    out_shape = out.shape[1:]
    dirs = _vec_to_input(spec, np.eye(n_in))  # (n_in, *input_shape)
    hess = np.empty((B, n_in, n_in))
    per = max(1, chunk // n_in)
    for s in range(0, B, per):
        e = min(B, s + per)
        sub = [(a[s:e], z[s:e], None) for a, z, _ in trace]
        rep = _repeat_trace(sub, n_in)
        lam_rep = np.repeat(lam[s:e], n_in, axis=0).reshape((-1,) + out_shape)
        v = np.tile(dirs, (e - s,) + (1,) * (dirs.ndim - 1))
        hv = _hessian_vector(spec, params, rep, lam_rep, v)
        hess[s:e] = _input_to_vec(spec, hv).reshape(e - s, n_in, n_in)
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    if not np.all(np.isfinite(hess)):
        raise FloatingPointError("non-finite Hessian entries")
    return hess


def weighted_hessian(spec: NetworkSpec, params: NetworkParams, x, u, lam) -> np.ndarray:
    """``d^2 (lam^T NN(x, u)) / d[x_flat, u]^2`` at one point (forward-over-reverse)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return weighted_hessian_batch(spec, params, x[None], u[None], np.asarray(lam, float)[None])[0]


def weighted_hessian_fd(spec: NetworkSpec, params: NetworkParams, x, u, lam, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``J^T lam``; cross-check for :func:`weighted_hessian`."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float).ravel()
    n = spec.n_x * spec.n_fe
    base = np.concatenate([x.ravel(), u])
    pts = []
    for i in range(spec.n_inputs):
        for sgn in (1.0, -1.0):
            p = base.copy()
            p[i] += sgn * step
            pts.append(p)
    pts = np.array(pts)
    jac = input_jacobian_batch(spec, params, pts[:, :n].reshape(-1, spec.n_x, spec.n_fe), pts[:, n:])
    grads = np.einsum("bij,i->bj", jac, lam)
    h = (grads[0::2] - grads[1::2]) / (2.0 * step)
    return 0.5 * (h + h.T)


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------

_MAGIC = b"NNPARAM1"


class ParamFileError(ValueError):
    pass


def save_params(path, spec: NetworkSpec, params: NetworkParams, metadata: dict | None = None):
    """Write ``magic | uint64 header length | JSON header | raw <f8 arrays``."""
    params.check(spec)
    entries = []
    for i, a in enumerate(params.arrays):
        for k in sorted(a):
            entries.append({"layer": i, "name": k, "shape": list(a[k].shape)})
    header = {
        "format": "nnparam",
        "version": 1,
        "spec_digest": spec.digest(),
        "spec": spec.to_dict(),
        "dtype": "<f8",
        "arrays": entries,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for i, a in enumerate(params.arrays):
            for k in sorted(a):
                fh.write(np.ascontiguousarray(a[k], dtype="<f8").tobytes())


def read_param_header(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    return _parse(data)[0]


def _parse(data: bytes):
    if len(data) < len(_MAGIC) + 8 or data[:len(_MAGIC)] != _MAGIC:
        raise ParamFileError("not a parameter file (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", data[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    if len(data) < start + hlen:
        raise ParamFileError("truncated parameter header")
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamFileError(f"corrupt parameter header: {exc}") from exc
    return header, data[start + hlen:]


def load_params(path, spec: NetworkSpec | None = None) -> tuple[NetworkSpec, NetworkParams]:
    """Read a parameter file; with ``spec`` given, reject mismatched digests."""
    with open(path, "rb") as fh:
        data = fh.read()
    header, payload = _parse(data)
    file_spec = NetworkSpec.from_dict(header["spec"])
    if file_spec.digest() != header["spec_digest"]:
        raise ParamFileError("parameter header is inconsistent with its spec digest")
    if spec is not None and spec.digest() != header["spec_digest"]:
        raise ParamFileError("spec digest mismatch: file was saved for a different network")
    if header.get("dtype") != "<f8":
        raise ParamFileError(f"unsupported dtype {header.get('dtype')!r}")
    total = sum(int(np.prod(e["shape"])) for e in header["arrays"])
    if len(payload) != 8 * total:
        raise ParamFileError(f"payload has {len(payload)} bytes, expected {8 * total}")
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    arrays = [dict() for _ in file_spec.layers]
    pos = 0
    for e in header["arrays"]:
        size = int(np.prod(e["shape"]))
        arrays[e["layer"]][e["name"]] = values[pos:pos + size].reshape(e["shape"]).copy()
        pos += size
    params = NetworkParams(arrays)
    try:
        params.check(file_spec)
    except ValueError as exc:
        raise ParamFileError(str(exc)) from exc
    return file_spec, params
