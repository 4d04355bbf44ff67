"""Algebraic expression graphs with sparse reverse-mode derivatives.

Expressions are immutable DAGs built with ordinary Python arithmetic on
:class:`Expr` nodes. A :class:`Tape` compiles a list of output expressions
into level-ordered arrays so that values, the sparse Jacobian of every
output, and the multiplier-weighted Hessian can be evaluated with a handful
of vectorized numpy/scipy operations per graph level.

Supported primitives: constants, variables, linear sums, products,
quotients, constant powers, ``exp``, ``log``, ``tanh`` and ``sigmoid``.
Anything else is rejected when the expression is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from numbers import Real

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Expr",
    "VarRef",
    "Variables",
    "ConstraintSet",
    "Tape",
    "ExprDomainError",
    "UnsupportedExpression",
    "SparseGradient",
    "const",
    "lin_sum",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "evaluate",
    "gradient",
    "sparse_jacobian",
    "lagrangian_hessian",
    "node_count",
]

_KIND_CODES = {
    "const": 0,
    "var": 1,
    "sum": 2,
    "mul": 3,
    "div": 4,
    "pow": 5,
    "exp": 6,
    "log": 7,
    "tanh": 8,
    "sigmoid": 9,
}
_UNARY = ("pow", "exp", "log", "tanh", "sigmoid")

# sums with more children than this are nested instead of flattened on `+`
_FLATTEN_LIMIT = 16


class ExprDomainError(ArithmeticError):
    """Raised when an expression is evaluated outside its domain."""


class UnsupportedExpression(TypeError):
    """Raised when building an expression outside the supported primitive set."""


def _is_number(x) -> bool:
    return isinstance(x, (Real, np.number)) and not isinstance(x, bool)


class Expr:
    """A node of an expression DAG.

    ``data`` holds the constant value (``const``), the variable index
    (``var``), ``(coeffs, offset)`` (``sum``) or the exponent (``pow``).
    """

    __slots__ = ("kind", "args", "data", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, kind: str, args: tuple = (), data=None):
        self.kind = kind
        self.args = args
        self.data = data

    # -- construction helpers -------------------------------------------
    def _terms(self):
        if self.kind == "sum":
            coeffs, offset = self.data
            return list(self.args), list(coeffs), offset
        return [self], [1.0], 0.0

    def __add__(self, other):
        if _is_number(other):
            if self.kind == "sum":
                coeffs, offset = self.data
                return Expr("sum", self.args, (coeffs, offset + float(other)))
            return Expr("sum", (self,), ((1.0,), float(other)))
        if not isinstance(other, Expr):
            return NotImplemented
        parts = []
        for e in (self, other):
            if e.kind == "sum" and len(e.args) <= _FLATTEN_LIMIT:
                parts.append(e._terms())
            else:
                parts.append(([e], [1.0], 0.0))
        args = tuple(parts[0][0] + parts[1][0])
        coeffs = tuple(parts[0][1] + parts[1][1])
        return Expr("sum", args, (coeffs, parts[0][2] + parts[1][2]))

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if _is_number(other):
            return self + (-float(other))
        if not isinstance(other, Expr):
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        if not _is_number(other):
            return NotImplemented
        return (-self) + float(other)

    def __mul__(self, other):
        if _is_number(other):
            c = float(other)
            if self.kind == "sum":
                coeffs, offset = self.data
                return Expr("sum", self.args, (tuple(c * k for k in coeffs), c * offset))
            if self.kind == "const":
                return Expr("const", (), c * self.data)
            return Expr("sum", (self,), ((c,), 0.0))
        if not isinstance(other, Expr):
            return NotImplemented
        if self.kind == "const":
            return other * self.data
        if other.kind == "const":
            return self * other.data
        return Expr("mul", (self, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_number(other):
            if float(other) == 0.0:
                raise ZeroDivisionError("division of an expression by constant zero")
            return self * (1.0 / float(other))
        if not isinstance(other, Expr):
            return NotImplemented
        return Expr("div", (self, other))

    def __rtruediv__(self, other):
        if not _is_number(other):
            return NotImplemented
        return Expr("div", (const(other), self))

    def __pow__(self, p):
        if isinstance(p, Expr):
            raise UnsupportedExpression("variable exponents are not supported")
        if not _is_number(p):
            return NotImplemented
        p = float(p)
        if p == 1.0:
            return self
        if p == 0.0:
            return const(1.0)
        return Expr("pow", (self,), p)

    def __rpow__(self, base):
        if not _is_number(base) or float(base) <= 0.0:
            raise UnsupportedExpression("only positive constant bases can be raised to an expression")
        return exp(self * math.log(float(base)))

    def __bool__(self):
        raise TypeError("an Expr has no truth value; use ConstraintSet.add for relations")

    # elementwise math so that generic model code can call x.exp() etc.
    def exp(self):
        return Expr("exp", (self,))

    def log(self):
        return Expr("log", (self,))

    def tanh(self):
        return Expr("tanh", (self,))

    def sigmoid(self):
        return Expr("sigmoid", (self,))

    def __repr__(self):
        return f"Expr({self.to_prefix(max_depth=3)})"

    def to_prefix(self, names=None, max_depth: int | None = None) -> str:
        """Render in prefix notation, e.g. ``(+ (* 2 x[0]) 1)``."""
        return _prefix(self, names, max_depth, 0)


def _fmt(v: float) -> str:
    return repr(float(v))


def _prefix(e: Expr, names, max_depth, depth) -> str:
    if e.kind == "const":
        return _fmt(e.data)
    if e.kind == "var":
        return names[e.data] if names is not None else f"x[{e.data}]"
    if max_depth is not None and depth >= max_depth:
        return "..."
    sub = [_prefix(a, names, max_depth, depth + 1) for a in e.args]
    if e.kind == "sum":
        coeffs, offset = e.data
        terms = [s if c == 1.0 else f"(* {_fmt(c)} {s})" for c, s in zip(coeffs, sub)]
        if offset != 0.0:
            terms.append(_fmt(offset))
        return "(+ " + " ".join(terms) + ")"
    if e.kind == "mul":
        return f"(* {sub[0]} {sub[1]})"
    if e.kind == "div":
        return f"(/ {sub[0]} {sub[1]})"
    if e.kind == "pow":
        return f"(^ {sub[0]} {_fmt(e.data)})"
    return f"({e.kind} {sub[0]})"


def const(value: float) -> Expr:
    return Expr("const", (), float(value))


def lin_sum(terms, coeffs=None, offset: float = 0.0) -> Expr:
    """Build ``sum(coeffs[i] * terms[i]) + offset`` as a single sum node.

    Numbers among ``terms`` are folded into the offset.
    """
    args, cs = [], []
    offset = float(offset)
    if coeffs is None:
        coeffs = [1.0] * len(terms)
    for t, c in zip(terms, coeffs):
        if _is_number(t):
            offset += float(c) * float(t)
        elif isinstance(t, Expr):
            args.append(t)
            cs.append(float(c))
        else:
            raise UnsupportedExpression(f"cannot add {type(t).__name__} to a sum")
    if not args:
        return const(offset)
    return Expr("sum", tuple(args), (tuple(cs), offset))


def _unary(name, fn):
    def apply(x):
        if isinstance(x, Expr):
            if x.kind == "const":
                return const(fn(np.float64(x.data)))
            return Expr(name, (x,))
        method = getattr(x, name, None)
        if method is not None and not isinstance(x, np.ndarray):
            return method()
        return fn(x)

    apply.__name__ = name
    apply.__doc__ = f"Elementwise ``{name}`` for numbers, arrays and expressions."
    return apply


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


exp = _unary("exp", np.exp)
log = _unary("log", np.log)
tanh = _unary("tanh", np.tanh)
sigmoid = _unary("sigmoid", _np_sigmoid)


def softplus(x):
    """``log(1 + exp(x))`` built from supported primitives."""
    return log(1.0 + exp(x))


@dataclass(frozen=True)
class VarRef:
    index: int
    name: str
    lb: float
    ub: float
    init: float


class Variables:
    """Registry of problem variables with bounds, initial values and a kind tag.

    Kinds are free-form strings used for counting conventions
    (``"state"``, ``"control"``, ``"aux"``, ``"param"``, ...).
    """

    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.init: list[float] = []
        self.kinds: list[str] = []
        self._nodes: list[Expr] = []

    def __len__(self):
        return len(self.names)

    @property
    def n(self) -> int:
        return len(self.names)

    def add(self, name: str, lb: float = -np.inf, ub: float = np.inf, init: float = 0.0,
            kind: str = "decision") -> Expr:
        lb, ub = float(lb), float(ub)
        if lb > ub:
            raise ValueError(f"variable {name}: lower bound {lb} exceeds upper bound {ub}")
        init = min(max(float(init), lb), ub)
        node = Expr("var", (), len(self.names))
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.init.append(init)
        self.kinds.append(kind)
        self._nodes.append(node)
        return node

    def add_array(self, name: str, shape, lb=-np.inf, ub=np.inf, init=0.0, kind="decision") -> np.ndarray:
        """Add an array of variables; bounds and init broadcast to ``shape``."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        lb = np.broadcast_to(lb, shape)
        ub = np.broadcast_to(ub, shape)
        init = np.broadcast_to(init, shape)
        out = np.empty(shape, dtype=object)
        for idx in np.ndindex(*shape):
            label = name + "[" + ",".join(map(str, idx)) + "]"
            out[idx] = self.add(label, lb[idx], ub[idx], init[idx], kind)
        return out

    def node(self, i: int) -> Expr:
        return self._nodes[i]

    def ref(self, i: int) -> VarRef:
        return VarRef(i, self.names[i], self.lb[i], self.ub[i], self.init[i])

    def set_bounds(self, i: int, lb: float, ub: float):
        self.lb[i], self.ub[i] = float(lb), float(ub)
        self.init[i] = min(max(self.init[i], self.lb[i]), self.ub[i])

    def fix(self, i: int, value: float):
        self.set_bounds(i, value, value)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.lb, dtype=float), np.array(self.ub, dtype=float)

    def initial(self) -> np.ndarray:
        return np.array(self.init, dtype=float)

    def count(self, kind: str) -> int:
        return sum(1 for k in self.kinds if k == kind)


def _var_support(e: Expr) -> set[int]:
    seen, out, stack = set(), set(), [e]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.kind == "var":
            out.add(node.data)
        stack.extend(node.args)
    return out


def node_count(e: Expr) -> int:
    """Number of distinct nodes in the DAG rooted at ``e``."""
    seen, stack = set(), [e]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node.args)
    return len(seen)


class ConstraintSet:
    """Ordered constraints ``body (= | <=) rhs``."""

    def __init__(self):
        self.exprs: list[Expr] = []
        self.relations: list[str] = []
        self.rhs: list[float] = []
        self.names: list[str] = []
        self._supports: list[frozenset] = []
        self._tape = None

    def __len__(self):
        return len(self.exprs)

    def add(self, body, relation: str = "=", rhs: float = 0.0, name: str | None = None) -> int:
        if relation not in ("=", "<="):
            raise ValueError(f"unsupported relation {relation!r}")
        if _is_number(body):
            body = const(body)
        if not isinstance(body, Expr):
            raise UnsupportedExpression(f"constraint body must be an Expr, got {type(body).__name__}")
        self.exprs.append(body)
        self.relations.append(relation)
        self.rhs.append(float(rhs))
        self.names.append(name or f"c{len(self.exprs) - 1}")
        self._supports.append(frozenset(_var_support(body)))
        self._tape = None
        return len(self.exprs) - 1

    def extend(self, other: "ConstraintSet"):
        for e, r, b, n in zip(other.exprs, other.relations, other.rhs, other.names):
            self.add(e, r, b, n)

    def support(self, i: int) -> frozenset:
        return self._supports[i]

    def equality_mask(self) -> np.ndarray:
        return np.array([r == "=" for r in self.relations], dtype=bool)

    def tape(self, n_vars: int) -> "Tape":
        if self._tape is None or self._tape.n_vars != n_vars:
            self._tape = Tape(self.exprs, n_vars)
        return self._tape

    def dump(self, names=None) -> str:
        """One constraint per line in prefix notation."""
        lines = []
        for name, e, r, b in zip(self.names, self.exprs, self.relations, self.rhs):
            lines.append(f"{name}: ({r} {e.to_prefix(names)} {_fmt(b)})")
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# compiled evaluation
# ---------------------------------------------------------------------------


def _collect(outputs):
    """Post-order DFS over the DAG; returns nodes (children first)."""
    index: dict[int, int] = {}
    nodes: list[Expr] = []
    for root in outputs:
        if id(root) in index:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if key in index:
                continue
            if expanded:
                index[key] = len(nodes)
                nodes.append(node)
                continue
            stack.append((node, True))
            for child in reversed(node.args):
                if id(child) not in index:
                    stack.append((child, False))
    return nodes, index


def _keys(m: sp.csr_matrix) -> np.ndarray:
    rows = np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))
    return rows * m.shape[1] + m.indices.astype(np.int64)


class Tape:
    """Level-ordered compiled form of a list of output expressions.

    Nodes are sorted by graph level (leaves at level 0) and then by kind so
    that every (level, kind) group occupies a contiguous slice. All derivative
    products are expressed as sparse matrix operations over those slices.
    """

    def __init__(self, outputs, n_vars: int):
        outputs = list(outputs)
        self.n_vars = int(n_vars)
        self.n_out = len(outputs)
        nodes, index = _collect(outputs)
        n = len(nodes)
        kind = np.empty(n, dtype=np.int8)
        level = np.zeros(n, dtype=np.int64)
        for i, node in enumerate(nodes):
            kind[i] = _KIND_CODES[node.kind]
            if node.args:
                level[i] = 1 + max(level[index[id(c)]] for c in node.args)
        order = np.lexsort((kind, level))
        new_of_old = np.empty(n, dtype=np.int64)
        new_of_old[order] = np.arange(n)
        self.n_nodes = n
        self.kind = kind[order]
        self.level = level[order]
        nodes = [nodes[i] for i in order]
        pos = {id(node): i for i, node in enumerate(nodes)}
        self._nodes = nodes
        self.out_idx = np.array([pos[id(o)] for o in outputs], dtype=np.int64)

        var_nodes = np.flatnonzero(self.kind == _KIND_CODES["var"])
        self.var_nodes = var_nodes
        self.var_of_node = np.array([nodes[i].data for i in var_nodes], dtype=np.int64)
        if len(self.var_of_node) and (self.var_of_node.max() >= self.n_vars or self.var_of_node.min() < 0):
            raise UnsupportedExpression("expression references a variable outside the problem")
        const_nodes = np.flatnonzero(self.kind == _KIND_CODES["const"])
        self.const_nodes = const_nodes
        self.const_vals = np.array([nodes[i].data for i in const_nodes], dtype=float)

        # groups of contiguous (level, kind) slices above the leaves
        self.levels = []  # list of (start, stop, [groups])
        edge_rows, edge_cols = [], []
        self._edge_groups = []  # (kind, slot arrays) for partial computation order
        sum_coeff_chunks = []
        max_level = int(self.level.max()) if n else 0
        bounds = np.searchsorted(self.level, np.arange(max_level + 2))
        self.n_leaf = int(bounds[1]) if n else 0
        for lv in range(1, max_level + 1):
            s, e = int(bounds[lv]), int(bounds[lv + 1])
            if s == e:
                continue
            groups = []
            kinds_here = self.kind[s:e]
            kb = np.flatnonzero(np.diff(kinds_here)) + 1
            starts = np.concatenate(([0], kb)) + s
            stops = np.concatenate((kb, [e - s])) + s
            for gs, ge in zip(starts, stops):
                kname = nodes[gs].kind
                members = nodes[gs:ge]
                g = {"kind": kname, "start": int(gs), "stop": int(ge)}
                if kname == "sum":
                    indptr = [0]
                    cols, vals, offs = [], [], []
                    for m in members:
                        coeffs, offset = m.data
                        cols.extend(pos[id(c)] for c in m.args)
                        vals.extend(coeffs)
                        indptr.append(len(cols))
                        offs.append(offset)
                    mat = sp.csr_matrix((np.array(vals, float), np.array(cols, np.int64), np.array(indptr)),
                                        shape=(ge - gs, n))
                    g["mat"] = mat
                    g["offset"] = np.array(offs, float)
                    rows = np.repeat(np.arange(gs, ge), np.diff(indptr))
                    edge_rows.append(rows)
                    edge_cols.append(np.array(cols, np.int64))
                    sum_coeff_chunks.append(np.array(vals, float))
                    self._edge_groups.append(("sum", len(sum_coeff_chunks) - 1))
                elif kname in ("mul", "div"):
                    a = np.array([pos[id(m.args[0])] for m in members], np.int64)
                    b = np.array([pos[id(m.args[1])] for m in members], np.int64)
                    g["a"], g["b"] = a, b
                    rows = np.arange(gs, ge)
                    edge_rows += [rows, rows]
                    edge_cols += [a, b]
                    self._edge_groups.append((kname, g))
                else:
                    a = np.array([pos[id(m.args[0])] for m in members], np.int64)
                    g["a"] = a
                    if kname == "pow":
                        g["p"] = np.array([m.data for m in members], float)
                    edge_rows.append(np.arange(gs, ge))
                    edge_cols.append(a)
                    self._edge_groups.append((kname, g))
                groups.append(g)
            self.levels.append((s, e, groups))
        self._sum_coeffs = sum_coeff_chunks

        er = np.concatenate(edge_rows) if edge_rows else np.zeros(0, np.int64)
        ec = np.concatenate(edge_cols) if edge_cols else np.zeros(0, np.int64)
        skel = sp.csr_matrix((np.ones(len(er)), (er, ec)), shape=(n, n))
        skel.sum_duplicates()
        skel.sort_indices()
        self._d_indptr, self._d_indices = skel.indptr, skel.indices
        d_keys = _keys(skel)
        self._edge_pos = np.searchsorted(d_keys, er * n + ec)
        self._d_nnz = skel.nnz

        # structural patterns (all-positive propagation: no cancellation)
        self._values = None
        self._x = None
        struct_d = sp.csr_matrix((np.ones(self._d_nnz), self._d_indices, self._d_indptr), shape=(n, n))
        j_struct = self._propagate_jacobian(struct_d)
        self._j_struct = j_struct
        jo = j_struct[self.out_idx]
        jo.sort_indices()
        self.jac_pattern = sp.csr_matrix((np.ones(jo.nnz), jo.indices, jo.indptr), shape=jo.shape)
        self._jac_keys = _keys(self.jac_pattern)
        h_struct = self._hessian_terms(j_struct, struct=True)
        h_struct.sort_indices()
        self.hess_pattern = sp.csr_matrix((np.ones(h_struct.nnz), h_struct.indices, h_struct.indptr),
                                          shape=h_struct.shape)
        self._hess_keys = _keys(self.hess_pattern)

    # -- forward values --------------------------------------------------
    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise ValueError(f"expected variable vector of length {self.n_vars}, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ExprDomainError("non-finite variable values")
        v = np.empty(self.n_nodes)
        v[self.var_nodes] = x[self.var_of_node]
        v[self.const_nodes] = self.const_vals
        with np.errstate(all="ignore"):
            for s, e, groups in self.levels:
                for g in groups:
                    gs, ge, k = g["start"], g["stop"], g["kind"]
                    if k == "sum":
                        v[gs:ge] = g["mat"] @ v + g["offset"]
                    elif k == "mul":
                        v[gs:ge] = v[g["a"]] * v[g["b"]]
                    elif k == "div":
                        den = v[g["b"]]
                        if np.any(den == 0.0):
                            self._domain_error(gs + int(np.flatnonzero(den == 0.0)[0]), "division by zero")
                        v[gs:ge] = v[g["a"]] / den
                    elif k == "pow":
                        base, p = v[g["a"]], g["p"]
                        bad = (base < 0.0) & (p != np.round(p))
                        bad |= (base == 0.0) & (p < 0.0)
                        if np.any(bad):
                            self._domain_error(gs + int(np.flatnonzero(bad)[0]), "power outside domain")
                        v[gs:ge] = base ** p
                    elif k == "exp":
                        v[gs:ge] = np.exp(v[g["a"]])
                    elif k == "log":
                        arg = v[g["a"]]
                        if np.any(arg <= 0.0):
                            self._domain_error(gs + int(np.flatnonzero(arg <= 0.0)[0]), "log of nonpositive value")
                        v[gs:ge] = np.log(arg)
                    elif k == "tanh":
                        v[gs:ge] = np.tanh(v[g["a"]])
                    elif k == "sigmoid":
                        v[gs:ge] = _np_sigmoid(v[g["a"]])
                bad = ~np.isfinite(v[s:e])
                if np.any(bad):
                    self._domain_error(s + int(np.flatnonzero(bad)[0]), "non-finite value")
        self._values = v
        self._x = x.copy()
        return v

    def _ensure(self, x):
        x = np.asarray(x, dtype=float)
        if self._values is None or self._x is None or not np.array_equal(self._x, x):
            self.forward(x)
        return self._values

    def _domain_error(self, node: int, msg: str):
        raise ExprDomainError(f"{msg} at {self.node_path(node)}")

    def node_path(self, node: int) -> str:
        """Describe a node by the chain of node kinds from its output row."""
        target = self._nodes[node]
        for row, oi in enumerate(self.out_idx):
            path = _find_path(self._nodes[oi], target)
            if path is not None:
                return f"output {row}: " + " > ".join(path)
        return f"node {node} ({target.kind})"

    def output_values(self, x) -> np.ndarray:
        return self._ensure(x)[self.out_idx].copy()

    # -- first derivatives -----------------------------------------------
    def _partials(self, v) -> np.ndarray:
        chunks = []
        for k, g in self._edge_groups:
            if k == "sum":
                chunks.append(self._sum_coeffs[g])
            elif k == "mul":
                chunks += [v[g["b"]], v[g["a"]]]
            elif k == "div":
                b = v[g["b"]]
                chunks += [1.0 / b, -v[g["a"]] / (b * b)]
            elif k == "pow":
                p = g["p"]
                chunks.append(p * v[g["a"]] ** (p - 1.0))
            elif k == "exp":
                chunks.append(v[g["start"]:g["stop"]])
            elif k == "log":
                chunks.append(1.0 / v[g["a"]])
            elif k == "tanh":
                t = v[g["start"]:g["stop"]]
                chunks.append(1.0 - t * t)
            elif k == "sigmoid":
                s = v[g["start"]:g["stop"]]
                chunks.append(s * (1.0 - s))
        edge_vals = np.concatenate(chunks) if chunks else np.zeros(0)
        return np.bincount(self._edge_pos, weights=edge_vals, minlength=self._d_nnz)

    def _dmatrix(self, v) -> sp.csr_matrix:
        return sp.csr_matrix((self._partials(v), self._d_indices, self._d_indptr),
                             shape=(self.n_nodes, self.n_nodes))

    def _propagate_jacobian(self, d: sp.csr_matrix) -> sp.csr_matrix:
        nl = self.n_leaf
        rows = np.searchsorted(np.arange(nl), self.var_nodes)
        j = sp.csr_matrix((np.ones(len(self.var_nodes)), (rows, self.var_of_node)), shape=(nl, self.n_vars))
        for s, e, _ in self.levels:
            block = d[s:e, :s] @ j
            j = sp.vstack([j, block], format="csr")
        return j

    def node_jacobian(self, x) -> sp.csr_matrix:
        v = self._ensure(x)
        return self._propagate_jacobian(self._dmatrix(v))

    def jacobian(self, x) -> sp.csr_matrix:
        """Sparse Jacobian of the outputs on the fixed structural pattern."""
        jo = self.node_jacobian(x)[self.out_idx]
        return self._aligned(jo, self.jac_pattern, self._jac_keys)

    @staticmethod
    def _aligned(m, pattern, keys):
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        data = np.zeros(pattern.nnz)
        if m.nnz:
            loc = np.searchsorted(keys, _keys(m))
            data[loc] = m.data
        return sp.csr_matrix((data, pattern.indices, pattern.indptr), shape=pattern.shape)

    def adjoints(self, x, weights) -> np.ndarray:
        """Reverse sweep: d(sum_i weights_i * out_i)/d(node) for every node."""
        v = self._ensure(x)
        d = self._dmatrix(v)
        abar = np.zeros(self.n_nodes)
        np.add.at(abar, self.out_idx, np.asarray(weights, dtype=float))
        for s, e, _ in reversed(self.levels):
            abar[:s] += d[s:e, :s].T @ abar[s:e]
        return abar

    def weighted_gradient(self, x, weights) -> np.ndarray:
        abar = self.adjoints(x, weights)
        g = np.zeros(self.n_vars)
        np.add.at(g, self.var_of_node, abar[self.var_nodes])
        return g

    # -- second derivatives ----------------------------------------------
    def _hessian_terms(self, j_all, abar=None, struct=False) -> sp.csr_matrix:
        v = self._values
        h = sp.csr_matrix((self.n_vars, self.n_vars))
        terms = []
        for _, _, groups in self.levels:
            for g in groups:
                k = g["kind"]
                if k == "sum":
                    continue
                gs, ge = g["start"], g["stop"]
                w = np.ones(ge - gs) if struct else abar[gs:ge]
                if k in ("mul", "div"):
                    a_rows, b_rows = j_all[g["a"]], j_all[g["b"]]
                    if struct:
                        w_ab, w_bb = w, (w if k == "div" else None)
                    elif k == "mul":
                        w_ab, w_bb = w, None
                    else:
                        vb, va = v[g["b"]], v[g["a"]]
                        w_ab = -w / (vb * vb)
                        w_bb = w * 2.0 * va / (vb * vb * vb)
                    c = a_rows.T @ sp.diags(w_ab) @ b_rows
                    terms += [c, c.T]
                    if w_bb is not None:
                        terms.append(b_rows.T @ sp.diags(w_bb) @ b_rows)
                    continue
                if struct:
                    curv = w
                else:
                    a = v[g["a"]]
                    out = v[gs:ge]
                    if k == "pow":
                        p = g["p"]
                        curv = p * (p - 1.0) * a ** (p - 2.0)
                    elif k == "exp":
                        curv = out
                    elif k == "log":
                        curv = -1.0 / (a * a)
                    elif k == "tanh":
                        curv = -2.0 * out * (1.0 - out * out)
                    else:  # sigmoid
                        curv = out * (1.0 - out) * (1.0 - 2.0 * out)
                    curv = w * curv
                rows = j_all[g["a"]]
                terms.append(rows.T @ sp.diags(curv) @ rows)
        for t in terms:
            h = h + t
        return sp.csr_matrix(h)

    def hessian(self, x, weights) -> sp.csr_matrix:
        """Exact Hessian of ``sum_i weights_i * out_i`` on the fixed pattern.

        Second-order adjoint form: each nonlinear node contributes its adjoint
        times its local second derivative, pushed onto the variables through
        the first-order Jacobians of its children.
        """
        v = self._ensure(x)
        d = self._dmatrix(v)
        j_all = self._propagate_jacobian(d)
        abar = np.zeros(self.n_nodes)
        np.add.at(abar, self.out_idx, np.asarray(weights, dtype=float))
        for s, e, _ in reversed(self.levels):
            abar[:s] += d[s:e, :s].T @ abar[s:e]
        h = self._hessian_terms(j_all, abar)
        return self._aligned(h, self.hess_pattern, self._hess_keys)


def _find_path(root: Expr, target: Expr):
    stack = [(root, [root.kind])]
    seen = set()
    while stack:
        node, path = stack.pop()
        if node is target:
            return path
        if id(node) in seen:
            continue
        seen.add(id(node))
        for c in node.args:
            stack.append((c, path + [c.kind]))
    return None


# ---------------------------------------------------------------------------
# functional interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseGradient:
    indices: np.ndarray
    values: np.ndarray
    size: int

    def dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        out[self.indices] = self.values
        return out


def _n_vars_for(expr_list, x):
    return len(np.asarray(x))


def evaluate(expr: Expr, x) -> float:
    """Evaluate one expression at the variable vector ``x``."""
    if _is_number(expr):
        return float(expr)
    tape = Tape([expr], _n_vars_for([expr], x))
    return float(tape.output_values(x)[0])


def gradient(expr: Expr, x) -> SparseGradient:
    """Exact reverse-mode gradient of one expression."""
    x = np.asarray(x, dtype=float)
    tape = Tape([expr], len(x))
    row = tape.jacobian(x)
    return SparseGradient(row.indices.copy(), row.data.copy(), len(x))


def sparse_jacobian(cs: ConstraintSet, x):
    """Jacobian triplets ``(rows, cols, values)`` of the constraint bodies.

    The pattern is computed once per constraint set and reused.
    """
    x = np.asarray(x, dtype=float)
    tape = cs.tape(len(x))
    jac = tape.jacobian(x).tocoo()
    return jac.row.copy(), jac.col.copy(), jac.data.copy()


def lagrangian_hessian(cs: ConstraintSet, objective, x, lam, mode: str = "exact",
                       obj_factor: float = 1.0):
    """Hessian of ``obj_factor * f + lam^T c`` for the algebraic part.

    ``mode="exact"`` returns a symmetric CSR matrix. ``mode="bfgs"`` returns
    ``None``: the quasi-Newton approximation is owned by the solver.
    """
    if mode == "bfgs":
        return None
    if mode != "exact":
        raise ValueError(f"unknown hessian mode {mode!r}")
    x = np.asarray(x, dtype=float)
    outputs = list(cs.exprs)
    weights = list(np.asarray(lam, dtype=float))
    if objective is not None:
        outputs.append(objective if isinstance(objective, Expr) else const(objective))
        weights.append(obj_factor)
    if not outputs:
        return sp.csr_matrix((len(x), len(x)))
    tape = Tape(outputs, len(x))
    return tape.hessian(x, weights)
