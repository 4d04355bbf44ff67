"""Primal-dual interior-point NLP solver for algebraic plus grey-box constraints.

The solver treats inequality rows with nonnegative slacks and enforces all
bounds with a logarithmic barrier. Each iteration solves the symmetric
primal-dual Newton system

    [ W + Sigma + dw I    J^T  ] [dz]   = - [ grad phi_mu + J^T lam ]
    [ J                 -dc I  ] [dlam]     [ c                     ]

and globalizes with an l1 exact-penalty merit function, an Armijo
backtracking line search, one second-order correction and a
feasibility-restoration phase. Nonconvexity is handled by shifting the
Hessian block by ``dw`` until a curvature test along the step passes.

Grey-box blocks contribute equality rows computed outside the expression
graph; their Jacobian and (optionally) weighted Hessian come from the block
itself.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr_graph import ConstraintSet, Expr, ExprDomainError, Tape, Variables, const

__all__ = [
    "GreyBoxBlock",
    "ExternalObjective",
    "NlpProblem",
    "SolverOptions",
    "SolveResult",
    "solve",
    "count_variables",
    "OPTIMAL",
    "MAX_ITERATIONS",
    "LINE_SEARCH_FAILURE",
    "INFEASIBLE",
]

OPTIMAL = "Optimal"
MAX_ITERATIONS = "MaxIterations"
LINE_SEARCH_FAILURE = "LineSearchFailure"
INFEASIBLE = "Infeasible"


class GreyBoxBlock(ABC):
    """Equality rows ``w(y) = 0`` evaluated outside the expression graph."""

    @property
    @abstractmethod
    def n_inputs(self) -> int:
        ...

    @property
    @abstractmethod
    def n_outputs(self) -> int:
        ...

    @abstractmethod
    def eval_w(self, y: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def eval_jacobian(self, y: np.ndarray) -> sp.spmatrix:
        ...

    def eval_weighted_hessian(self, y: np.ndarray, lam: np.ndarray) -> sp.spmatrix:
        raise NotImplementedError("this block does not provide second derivatives")

    @property
    def has_hessian(self) -> bool:
        return False


class ExternalObjective(ABC):
    """Objective evaluated by a callback rather than an expression."""

    @abstractmethod
    def value(self, x: np.ndarray) -> float:
        ...

    @abstractmethod
    def gradient(self, x: np.ndarray) -> np.ndarray:
        ...


@dataclass
class BlockAttachment:
    block: GreyBoxBlock
    start: int
    name: str = "block"

    @property
    def stop(self) -> int:
        return self.start + self.block.n_inputs


class NlpProblem:
    """Variables, an objective, algebraic constraints and grey-box blocks."""

    def __init__(self, variables: Variables | None = None):
        self.variables = variables if variables is not None else Variables()
        self.objective: Expr | ExternalObjective | None = None
        self.constraints = ConstraintSet()
        self.blocks: list[BlockAttachment] = []
        self._tape_cache = None

    @property
    def n(self) -> int:
        return self.variables.n

    def set_objective(self, objective):
        self.objective = objective

    def add_block(self, block: GreyBoxBlock, start: int, name: str = "block") -> BlockAttachment:
        if start < 0 or start + block.n_inputs > self.n:
            raise ValueError(f"block {name} slice [{start}, {start + block.n_inputs}) "
                             f"outside the {self.n} problem variables")
        att = BlockAttachment(block, start, name)
        self.blocks.append(att)
        return att

    @property
    def n_block_rows(self) -> int:
        return sum(b.block.n_outputs for b in self.blocks)


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 500
    hessian_mode: str = "auto"  # auto | exact | bfgs
    mu_init: float = 0.1
    warm_mu_init: float = 1e-6
    bound_push: float = 1e-2
    warm_bound_push: float = 1e-8
    max_restoration_iter: int = 200
    dense_limit: int = 2000
    scaling_max_gradient: float = 100.0
    trace_path: str | None = None
    backend: object | None = None


@dataclass
class SolveResult:
    status: str
    x: np.ndarray
    lam: np.ndarray
    z_L: np.ndarray
    z_U: np.ndarray
    iterations: int
    wall_clock_seconds: float
    violation: float
    kkt_residual: float
    objective: float
    mu: float = 0.0
    hessian_mode: str = "exact"
    trace: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


def count_variables(p: NlpProblem) -> dict:
    """Variable and constraint counts under a fixed convention.

    ``decision_vars`` are variables tagged ``state`` or ``control`` (the
    initial-state variables are included even though they are fixed),
    ``aux_vars`` are embedding auxiliaries tagged ``aux``. Variables tagged
    ``param`` (setpoints, the previously applied control) are not counted.
    """
    kinds = p.variables.kinds
    decision = sum(1 for k in kinds if k in ("state", "control", "decision"))
    aux = sum(1 for k in kinds if k == "aux")
    return {
        "decision_vars": decision,
        "aux_vars": aux,
        "total_vars": decision + aux,
        "constraints": len(p.constraints) + p.n_block_rows,
    }


# ---------------------------------------------------------------------------
# internal evaluation of the slack-augmented problem
# ---------------------------------------------------------------------------


class _Model:
    """The problem restricted to free variables and augmented with slacks."""

    def __init__(self, p: NlpProblem, mode: str, opts: SolverOptions):
        self.p = p
        v = p.variables
        lb, ub = v.bounds()
        self.n_full = v.n
        self.fixed = lb == ub
        self.free = np.flatnonzero(~self.fixed)
        self.nf = len(self.free)
        self.base = np.where(self.fixed, lb, 0.0)
        cs = p.constraints
        self.m_alg = len(cs)
        self.ineq = np.flatnonzero(~cs.equality_mask()) if self.m_alg else np.zeros(0, int)
        self.ni = len(self.ineq)
        self.n = self.nf + self.ni
        self.m = self.m_alg + p.n_block_rows
        self.rhs = np.array(cs.rhs, dtype=float)
        self.l = np.concatenate([lb[self.free], np.zeros(self.ni)])
        self.u = np.concatenate([ub[self.free], np.full(self.ni, np.inf)])
        self.has_l = np.isfinite(self.l)
        self.has_u = np.isfinite(self.u)
        self.mode = mode

        self.ext_obj = p.objective if isinstance(p.objective, ExternalObjective) else None
        outputs = list(cs.exprs)
        self.obj_row = None
        if self.ext_obj is None:
            obj = p.objective if p.objective is not None else const(0.0)
            outputs.append(obj)
            self.obj_row = len(outputs) - 1
        key = (len(cs), id(p.objective), self.n_full)
        cached = getattr(p, "_tape_cache", None)
        if cached is not None and cached[0] == key:
            self.tape = cached[1]
        else:
            self.tape = Tape(outputs, self.n_full) if outputs else None
            p._tape_cache = (key, self.tape)

        # selection of free columns
        self.sel = sp.csr_matrix((np.ones(self.nf), (self.free, np.arange(self.nf))), shape=(self.n_full, self.nf))
        slack_rows = self.ineq
        self.slack_block = sp.csr_matrix((np.ones(self.ni), (slack_rows, np.arange(self.ni))),
                                         shape=(self.m_alg, self.ni))
        self.block_rows = []
        r = self.m_alg
        for att in p.blocks:
            self.block_rows.append((r, r + att.block.n_outputs))
            r += att.block.n_outputs
        self.obj_scale = 1.0
        self.row_scale = np.ones(self.m)
        self.scaling_max_gradient = opts.scaling_max_gradient

    # -- point mapping ---------------------------------------------------
    def full_x(self, z):
        x = self.base.copy()
        x[self.free] = z[:self.nf]
        return x

    def initial_z(self, x_full):
        z = np.zeros(self.n)
        z[:self.nf] = np.asarray(x_full, float)[self.free]
        return z

    # -- evaluation ------------------------------------------------------
    def evaluate(self, z, need_derivs=True):
        """Return (f, grad_f, c, J) at z, all scaled."""
        x = self.full_x(z)
        if self.tape is not None:
            vals = self.tape.output_values(x)
        else:
            vals = np.zeros(0)
        c = np.empty(self.m)
        c[:self.m_alg] = vals[:self.m_alg] - self.rhs
        if self.ni:
            c[self.ineq] += z[self.nf:]
        for att, (r0, r1) in zip(self.p.blocks, self.block_rows):
            c[r0:r1] = att.block.eval_w(x[att.start:att.stop])
        if self.ext_obj is not None:
            f = float(self.ext_obj.value(x))
        else:
            f = float(vals[self.obj_row])
        if not (np.isfinite(f) and np.all(np.isfinite(c))):
            raise ExprDomainError("non-finite objective or constraint value")
        if not need_derivs:
            return self.obj_scale * f, None, self.row_scale * c, None
        if self.tape is not None:
            jac = self.tape.jacobian(x)
        else:
            jac = sp.csr_matrix((0, self.n_full))
        if self.ext_obj is not None:
            g_full = np.asarray(self.ext_obj.gradient(x), float)
        else:
            g_full = np.asarray(jac[self.obj_row].todense()).ravel()
        j_alg = jac[:self.m_alg] @ self.sel
        blocks = [sp.hstack([j_alg, self.slack_block], format="csr")]
        for att in self.p.blocks:
            jb = sp.csr_matrix(att.block.eval_jacobian(x[att.start:att.stop]))
            jfull = sp.csr_matrix((jb.data, jb.indices + att.start, jb.indptr),
                                  shape=(jb.shape[0], self.n_full))
            blocks.append(sp.hstack([jfull @ self.sel, sp.csr_matrix((jb.shape[0], self.ni))], format="csr"))
        J = sp.vstack(blocks, format="csr")
        g = np.concatenate([g_full[self.free], np.zeros(self.ni)])
        J = sp.diags(self.row_scale) @ J
        return self.obj_scale * f, self.obj_scale * g, self.row_scale * c, J

    def hessian(self, z, lam, obj_factor=1.0):
        """Exact scaled Lagrangian Hessian over z (slack block is zero)."""
        x = self.full_x(z)
        lam_s = lam * self.row_scale
        h = sp.csr_matrix((self.n_full, self.n_full))
        if self.tape is not None:
            w = np.zeros(self.tape.n_out)
            w[:self.m_alg] = lam_s[:self.m_alg]
            if self.obj_row is not None:
                w[self.obj_row] = obj_factor * self.obj_scale
            h = self.tape.hessian(x, w)
        for att, (r0, r1) in zip(self.p.blocks, self.block_rows):
            hb = sp.coo_matrix(att.block.eval_weighted_hessian(x[att.start:att.stop], lam_s[r0:r1]))
            h = h + sp.csr_matrix((hb.data, (hb.row + att.start, hb.col + att.start)),
                                  shape=(self.n_full, self.n_full))
        hf = self.sel.T @ h @ self.sel
        if self.ni:
            hf = sp.block_diag([hf, sp.csr_matrix((self.ni, self.ni))], format="csr")
        return sp.csr_matrix(hf)

    def compute_scaling(self, z):
        try:
            _, g, _, J = self.evaluate(z)
        except ExprDomainError:
            return
        gmax = np.max(np.abs(g)) if len(g) else 0.0
        if gmax > self.scaling_max_gradient:
            self.obj_scale = self.scaling_max_gradient / gmax
        if self.m:
            rmax = np.zeros(self.m)
            Jc = J.tocsr()
            for i in range(self.m):
                seg = Jc.data[Jc.indptr[i]:Jc.indptr[i + 1]]
                if len(seg):
                    rmax[i] = np.max(np.abs(seg))
            self.row_scale = np.where(rmax > self.scaling_max_gradient,
                                      self.scaling_max_gradient / np.maximum(rmax, 1e-300), 1.0)

    def unscaled_violation(self, z, c_scaled):
        """Max violation of the original constraints and bounds."""
        c = c_scaled / self.row_scale
        viol = 0.0
        if self.m:
            eq = np.ones(self.m, bool)
            eq[self.ineq] = False
            if np.any(eq):
                viol = float(np.max(np.abs(c[eq])))
            if self.ni:
                g_minus_rhs = c[self.ineq] - z[self.nf:]
                viol = max(viol, float(np.max(np.maximum(g_minus_rhs, 0.0))))
        xb = z[:self.nf]
        lo = self.l[:self.nf]
        hi = self.u[:self.nf]
        if self.nf:
            viol = max(viol, float(np.max(np.maximum(lo - xb, 0.0), initial=0.0)),
                       float(np.max(np.maximum(xb - hi, 0.0), initial=0.0)))
        return viol


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


class _KktSolver:
    def __init__(self, dense: bool):
        self.dense = dense
        self.lu = None

    def factor(self, K):
        if self.dense:
            Kd = K.toarray() if sp.issparse(K) else K
            try:
                with np.errstate(all="ignore"), warnings.catch_warnings():
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    self.lu = sla.lu_factor(Kd, check_finite=True)
            except (ValueError, np.linalg.LinAlgError):
                return False
            piv = np.abs(np.diag(self.lu[0]))
            if piv.min(initial=np.inf) <= 1e-14 * max(1.0, piv.max(initial=0.0)):
                return False
            return True
        try:
            self.lu = spla.splu(sp.csc_matrix(K), permc_spec="COLAMD")
        except RuntimeError:
            return False
        return True

    def solve(self, rhs):
        if self.dense:
            out = sla.lu_solve(self.lu, rhs, check_finite=False)
        else:
            out = self.lu.solve(rhs)
        return out


def _build_kkt(W, sigma, dw, J, dc, dense):
    n = W.shape[0]
    m = J.shape[0]
    if dense:
        K = np.zeros((n + m, n + m))
        K[:n, :n] = W if isinstance(W, np.ndarray) else W.toarray()
        K[np.arange(n), np.arange(n)] += sigma + dw
        Jd = J.toarray()
        K[n:, :n] = Jd
        K[:n, n:] = Jd.T
        K[np.arange(n, n + m), np.arange(n, n + m)] = -dc
        return K
    top = sp.hstack([W + sp.diags(sigma + dw), J.T])
    bot = sp.hstack([J, sp.diags(np.full(m, -dc))])
    return sp.vstack([top, bot], format="csc")


# ---------------------------------------------------------------------------
# the interior-point iteration
# ---------------------------------------------------------------------------


def _resolve_mode(p: NlpProblem, opts: SolverOptions) -> str:
    mode = opts.hessian_mode
    if mode not in ("auto", "exact", "bfgs"):
        raise ValueError(f"unknown hessian_mode {mode!r}")
    needs_qn = isinstance(p.objective, ExternalObjective) or any(not b.block.has_hessian for b in p.blocks)
    if mode == "exact" and needs_qn:
        return "bfgs"
    if mode == "auto":
        return "bfgs" if needs_qn else "exact"
    return mode


def solve(p: NlpProblem, opts: SolverOptions | None = None, warm: SolveResult | None = None) -> SolveResult:
    """Solve ``p``; never raises on nonconvergence (see ``SolveResult.status``).

    ``opts.backend`` may name any callable ``(problem, opts, warm) ->
    SolveResult`` to delegate to another solver implementation.
    """
    opts = opts or SolverOptions()
    if opts.backend is not None:
        return opts.backend(p, opts, warm)
    t0 = time.perf_counter()
    solver = _InteriorPoint(p, opts, warm)
    result = solver.run()
    result.wall_clock_seconds = time.perf_counter() - t0
    if opts.trace_path:
        with open(opts.trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "violation", "step", "wall_clock"])
            w.writerows(result.trace)
    return result


class _InteriorPoint:
    kappa_eps = 10.0
    kappa_mu = 0.2
    theta_mu = 1.5
    tau_min = 0.99
    kappa_sigma = 1e10
    eta = 1e-4
    s_max = 100.0
    gamma_theta = 1e-5
    gamma_phi = 1e-8
    s_theta = 1.1
    s_phi = 2.3

    def __init__(self, p, opts, warm):
        self.p = p
        self.opts = opts
        self.mode = _resolve_mode(p, opts)
        self.model = _Model(p, self.mode, opts)
        md = self.model
        self.dense = self.mode == "bfgs" or (md.n + md.m) <= 200
        self.kkt = _KktSolver(self.dense)
        self.t_start = time.perf_counter()
        self.trace = []
        self.warm = warm

    # -- initialization --------------------------------------------------
    def _push(self, z, kappa):
        md = self.model
        l, u = md.l, md.u
        width = np.where(md.has_l & md.has_u, u - l, np.inf)
        pl = np.minimum(kappa * np.maximum(1.0, np.abs(np.where(md.has_l, l, 0.0))), kappa * width)
        pu = np.minimum(kappa * np.maximum(1.0, np.abs(np.where(md.has_u, u, 0.0))), kappa * width)
        zz = z.copy()
        lo = np.where(md.has_l, l + pl, -np.inf)
        hi = np.where(md.has_u, u - pu, np.inf)
        both = md.has_l & md.has_u & (lo > hi)
        zz = np.minimum(np.maximum(zz, lo), hi)
        zz[both] = 0.5 * (l[both] + u[both])
        return zz

    def _initial_point(self):
        md = self.model
        v = self.p.variables
        warm = self.warm
        if warm is not None and len(warm.x) == v.n:
            x_full = np.asarray(warm.x, float).copy()
        else:
            warm = None
            x_full = v.initial()
        lb, ub = v.bounds()
        x_full = np.minimum(np.maximum(x_full, lb), ub)
        z = md.initial_z(x_full)
        # slacks from the constraint values
        if md.ni:
            vals = md.tape.output_values(md.full_x(z))
            gap = md.rhs[md.ineq] - vals[md.ineq]
            z[md.nf:] = np.maximum(gap, 0.0)
        push = self.opts.warm_bound_push if warm is not None else self.opts.bound_push
        z = self._push(z, push)
        return z, warm

    def _ls_multipliers(self, g, J, zl, zu):
        md = self.model
        if md.m == 0:
            return np.zeros(0)
        n = md.n
        K = _build_kkt(sp.csr_matrix((n, n)) if not self.dense else np.zeros((n, n)),
                       np.ones(n), 0.0, J, 0.0, self.dense)
        solver = _KktSolver(self.dense)
        if not solver.factor(K):
            return np.zeros(md.m)
        rhs = np.concatenate([-(g - zl + zu), np.zeros(md.m)])
        sol = solver.solve(rhs)
        lam = sol[n:]
        if not np.all(np.isfinite(lam)) or np.max(np.abs(lam), initial=0.0) > 1e3:
            return np.zeros(md.m)
        return lam

    # -- helpers -------------------------------------------------------------
    def _slacks(self, z):
        """Distances to the bounds; 1.0 where a bound is absent."""
        md = self.model
        sl = np.where(md.has_l, z - np.where(md.has_l, md.l, 0.0), 1.0)
        su = np.where(md.has_u, np.where(md.has_u, md.u, 0.0) - z, 1.0)
        return sl, su

    def _barrier(self, z, mu):
        md = self.model
        sl, su = self._slacks(z)
        if np.any(sl <= 0) or np.any(su <= 0):
            return np.inf
        return -mu * (np.sum(np.log(sl[md.has_l])) + np.sum(np.log(su[md.has_u])))

    def _barrier_grad(self, z, mu):
        md = self.model
        sl, su = self._slacks(z)
        return np.where(md.has_l, -mu / sl, 0.0) + np.where(md.has_u, mu / su, 0.0)

    def _errors(self, g, J, c, lam, zl, zu, z, mu):
        md = self.model
        sl, su = self._slacks(z)
        dual = g + (J.T @ lam if md.m else 0.0) - zl + zu
        n_mult = md.m + 2 * md.n
        s_d = max(self.s_max, (np.sum(np.abs(lam)) + np.sum(zl) + np.sum(zu)) / max(n_mult, 1)) / self.s_max
        s_c = max(self.s_max, (np.sum(zl) + np.sum(zu)) / max(2 * md.n, 1)) / self.s_max
        compl_l = np.where(md.has_l, sl * zl - mu, 0.0)
        compl_u = np.where(md.has_u, su * zu - mu, 0.0)
        e_dual = float(np.max(np.abs(dual), initial=0.0)) / s_d
        e_primal = float(np.max(np.abs(c), initial=0.0))
        e_compl = max(float(np.max(np.abs(compl_l), initial=0.0)), float(np.max(np.abs(compl_u), initial=0.0))) / s_c
        return max(e_dual, e_primal, e_compl)

    def _fraction_to_boundary(self, v, dv, lo, hi, tau):
        with np.errstate(over="ignore"):
            return self._ftb(v, dv, lo, hi, tau)

    @staticmethod
    def _ftb(v, dv, lo, hi, tau):
        alpha = 1.0
        if lo is not None:
            mask = dv < 0
            if np.any(mask):
                alpha = min(alpha, float(np.min(-tau * (v[mask] - lo[mask]) / dv[mask])))
        if hi is not None:
            mask = dv > 0
            if np.any(mask):
                alpha = min(alpha, float(np.min(tau * (hi[mask] - v[mask]) / dv[mask])))
        return max(alpha, 0.0)

    def _log(self, it, f, viol, step):
        self.trace.append([it, f / self.model.obj_scale, viol, step, time.perf_counter() - self.t_start])

    # -- main loop -------------------------------------------------------
    def run(self) -> SolveResult:
        md = self.model
        opts = self.opts
        tol = opts.tol
        z, warm = self._initial_point()
        try:
            md.compute_scaling(z)
            f, g, c, J = md.evaluate(z)
        except ExprDomainError:
            return self._result(INFEASIBLE, z, np.zeros(md.m), np.zeros(md.n), np.zeros(md.n), 0, np.inf, np.inf, np.nan, 0.0)
        sl, su = self._slacks(z)
        if warm is not None:
            lam = np.asarray(warm.lam, float).copy() if len(warm.lam) == md.m else np.zeros(md.m)
            lam = lam * md.obj_scale / md.row_scale
            zl_full, zu_full = self._warm_bound_mults(warm)
            mu = max(opts.warm_mu_init, tol / 10)
            zl = np.where(md.has_l, np.maximum(zl_full, mu / sl * 1e-2), 0.0)
            zu = np.where(md.has_u, np.maximum(zu_full, mu / su * 1e-2), 0.0)
        else:
            mu = opts.mu_init
            zl = np.where(md.has_l, 1.0, 0.0)
            zu = np.where(md.has_u, 1.0, 0.0)
            lam = self._ls_multipliers(g, J, zl, zu)
        if warm is not None:
            # average complementarity of the warm point sets the barrier
            comp = np.concatenate([(sl * zl)[md.has_l], (su * zu)[md.has_u]])
            if len(comp):
                mu = max(tol / 10, min(opts.warm_mu_init, float(np.mean(comp))))

        dw_last = 0.0
        theta0 = float(np.sum(np.abs(c)))
        self.theta_max = 1e4 * max(1.0, theta0)
        self.theta_min = 1e-4 * max(1.0, theta0)
        filt = []
        B = None
        if self.mode == "bfgs":
            B = np.eye(md.n)
        it = 0
        status = MAX_ITERATIONS
        viol = md.unscaled_violation(z, c)
        self._log(0, f, viol, 0.0)
        while True:
            e0 = self._errors(g, J, c, lam, zl, zu, z, 0.0)
            if e0 <= tol and viol <= tol:
                status = OPTIMAL
                break
            if it >= opts.max_iter:
                status = MAX_ITERATIONS
                break
            # barrier update
            while mu > tol / 10 and self._errors(g, J, c, lam, zl, zu, z, mu) <= self.kappa_eps * mu:
                mu = max(tol / 10, min(self.kappa_mu * mu, mu ** self.theta_mu))
                filt = []
            tau = max(self.tau_min, 1.0 - mu)

            sl, su = self._slacks(z)
            sigma = np.where(md.has_l, zl / sl, 0.0) + np.where(md.has_u, zu / su, 0.0)
            if self.mode == "bfgs":
                W = B
            else:
                try:
                    W = md.hessian(z, lam)
                except ExprDomainError:
                    status = LINE_SEARCH_FAILURE
                    break
            gb = g + self._barrier_grad(z, mu)
            rhs = -np.concatenate([gb + (J.T @ lam if md.m else 0.0), c])
            step = self._newton_step(W, sigma, J, rhs, mu, dw_last)
            accepted = None
            if step is not None:
                dz, dlam, dw_last, dc, _ = step
                dzl = np.where(md.has_l, mu / sl - zl - zl / sl * dz, 0.0)
                dzu = np.where(md.has_u, mu / su - zu + zu / su * dz, 0.0)

                alpha_max = self._fraction_to_boundary(z, dz, np.where(md.has_l, md.l, -np.inf),
                                                       np.where(md.has_u, md.u, np.inf), tau)
                alpha_z = min(self._fraction_to_boundary(zl, dzl, np.zeros(md.n), None, tau),
                              self._fraction_to_boundary(zu, dzu, np.zeros(md.n), None, tau))

                theta = float(np.sum(np.abs(c)))
                phi0 = f + self._barrier(z, mu)
                dphi = float(gb @ dz)
                accepted = self._line_search(z, dz, alpha_max, theta, phi0, dphi, mu, c, rhs, tau, filt)
            if accepted is None:
                # restoration phase
                viol_now = float(np.max(np.abs(c), initial=0.0))
                if viol_now <= tol:
                    status = LINE_SEARCH_FAILURE
                    break
                theta = float(np.sum(np.abs(c)))
                filt.append(((1.0 - self.gamma_theta) * theta,
                             f + self._barrier(z, mu) - self.gamma_phi * theta))
                rest = self._restoration(z, mu, tau)
                if rest is None:
                    status = INFEASIBLE
                    break
                z_new, n_rest = rest
                it += n_rest
                try:
                    f, g, c, J = md.evaluate(z_new)
                except ExprDomainError:
                    status = INFEASIBLE
                    break
                z = z_new
                sl, su = self._slacks(z)
                zl = np.where(md.has_l, np.minimum(mu / sl, self.kappa_sigma), 0.0)
                zu = np.where(md.has_u, np.minimum(mu / su, self.kappa_sigma), 0.0)
                lam = self._ls_multipliers(g, J, zl, zu)
                viol = md.unscaled_violation(z, c)
                self._log(it, f, viol, 0.0)
                if self.mode == "bfgs":
                    B = np.eye(md.n)
                continue
            alpha, z_new, f_new, g_new, c_new, J_new = accepted
            lam_new = lam + alpha * dlam
            zl_new = zl + alpha_z * dzl
            zu_new = zu + alpha_z * dzu
            sl_n, su_n = self._slacks(z_new)
            zl_new = np.where(md.has_l, np.clip(zl_new, mu / (self.kappa_sigma * sl_n), self.kappa_sigma * mu / sl_n), 0.0)
            zu_new = np.where(md.has_u, np.clip(zu_new, mu / (self.kappa_sigma * su_n), self.kappa_sigma * mu / su_n), 0.0)
            if self.mode == "bfgs":
                s_vec = z_new - z
                grad_old = g + (J.T @ lam_new if md.m else 0.0)
                grad_new = g_new + (J_new.T @ lam_new if md.m else 0.0)
                B = _damped_bfgs(B, s_vec, grad_new - grad_old)
            z, f, g, c, J = z_new, f_new, g_new, c_new, J_new
            lam, zl, zu = lam_new, zl_new, zu_new
            it += 1
            viol = md.unscaled_violation(z, c)
            self._log(it, f, viol, alpha)

        e0 = self._errors(g, J, c, lam, zl, zu, z, 0.0)
        return self._result(status, z, lam, zl, zu, it, viol, e0, f, mu)

    def _warm_bound_mults(self, warm):
        md = self.model
        zl = np.zeros(md.n)
        zu = np.zeros(md.n)
        if len(warm.z_L) == md.n_full:
            zl[:md.nf] = np.asarray(warm.z_L, float)[md.free] * md.obj_scale
            zu[:md.nf] = np.asarray(warm.z_U, float)[md.free] * md.obj_scale
        # slack bound multipliers equal the inequality multipliers at optimality
        if md.ni and len(warm.lam) == md.m:
            lam_s = np.asarray(warm.lam, float)[md.ineq] * md.obj_scale / md.row_scale[md.ineq]
            zl[md.nf:] = np.maximum(lam_s, 0.0)
        return zl, zu

    def _newton_step(self, W, sigma, J, rhs, mu, dw_last):
        md = self.model
        n = md.n
        dc = 0.0
        dw = 0.0 if dw_last == 0.0 else max(1e-20, dw_last / 3.0)
        first_try = True
        for _ in range(60):
            K = _build_kkt(W, sigma, dw, J, dc, self.dense)
            ok = self.kkt.factor(K)
            sol = self.kkt.solve(rhs) if ok else None
            if sol is None or not np.all(np.isfinite(sol)):
                if dc == 0.0 and md.m:
                    dc = 1e-8 * mu ** 0.25
                    continue
                dw = self._increase_dw(dw, dw_last, first_try)
                first_try = False
                if dw > 1e40:
                    return None
                continue
            dz = sol[:n]
            dlam = sol[n:]
            Wd = W @ dz
            curv = float(dz @ Wd + dz @ ((sigma + dw) * dz))
            dzz = float(dz @ dz)
            if self.mode == "bfgs" or curv >= 1e-10 * dzz or dzz == 0.0:
                return dz, dlam, dw, dc, curv
            dw = self._increase_dw(dw, dw_last, first_try)
            first_try = False
            if dw > 1e40:
                return None
        return None

    @staticmethod
    def _increase_dw(dw, dw_last, first_try):
        if dw == 0.0:
            return 1e-4 if dw_last == 0.0 else max(1e-20, dw_last / 3.0) * 8.0
        return dw * (100.0 if dw_last == 0.0 else 8.0)

    def _interior(self, z):
        """Nudge components that a near-unit step placed exactly on a bound."""
        md = self.model
        lo = np.where(md.has_l, md.l, -np.inf)
        hi = np.where(md.has_u, md.u, np.inf)
        gap_l = 1e-14 * np.maximum(1.0, np.abs(np.where(md.has_l, md.l, 0.0)))
        gap_u = 1e-14 * np.maximum(1.0, np.abs(np.where(md.has_u, md.u, 0.0)))
        out = np.maximum(z, lo + gap_l)
        return np.minimum(out, hi - gap_u)

    def _acceptable(self, theta_t, phi_t, alpha, theta, phi, dphi, filt):
        """Classify a trial point: "f" (Armijo), "h" (filter) or ``None``."""
        if not np.isfinite(phi_t) or theta_t > self.theta_max:
            return None
        if any(theta_t >= a and phi_t >= b for a, b in filt):
            return None
        switching = dphi < 0 and alpha * (-dphi) ** self.s_phi > theta ** self.s_theta
        if switching and theta <= self.theta_min:
            return "f" if phi_t <= phi + self.eta * alpha * dphi else None
        if theta_t <= (1.0 - self.gamma_theta) * theta or phi_t <= phi - self.gamma_phi * theta:
            return "h"
        return None

    def _alpha_min(self, theta, dphi):
        if dphi >= 0:
            a = self.gamma_theta
        elif theta == 0.0:
            a = 0.0
        else:
            d = -dphi
            a = min(self.gamma_theta, self.gamma_phi * theta / d)
            if theta <= self.theta_min:
                # the power can underflow for vanishing slopes
                a = min(a, theta ** self.s_theta / max(d ** self.s_phi, 1e-300))
        return max(0.05 * a, 1e-12)

    def _trial(self, z_try, mu):
        try:
            f_t, g_t, c_t, J_t = self.model.evaluate(z_try)
            phi_t = f_t + self._barrier(z_try, mu)
        except ExprDomainError:
            return None
        return f_t, g_t, c_t, J_t, float(phi_t), float(np.sum(np.abs(c_t)))

    def _line_search(self, z, dz, alpha_max, theta, phi, dphi, mu, c, rhs, tau, filt):
        """Backtracking filter line search with second-order correction."""
        md = self.model
        alpha = alpha_max
        tiny = np.max(np.abs(dz) / (1.0 + np.abs(z)), initial=0.0) < 1e-14
        a_min = self._alpha_min(theta, dphi)
        first = True
        while alpha > a_min or first:
            z_try = self._interior(z + alpha * dz)
            tr = self._trial(z_try, mu)
            if tr is not None:
                f_t, g_t, c_t, J_t, phi_t, theta_t = tr
                kind = "f" if tiny else self._acceptable(theta_t, phi_t, alpha, theta, phi, dphi, filt)
                if kind is None and first and md.m and theta_t >= theta:
                    soc = self._second_order_correction(z, alpha, c, c_t, theta_t, rhs, mu, tau, theta, phi, dphi, filt)
                    if soc is not None:
                        return soc
                if kind is not None:
                    if kind == "h":
                        filt.append(((1.0 - self.gamma_theta) * theta, phi - self.gamma_phi * theta))
                    return alpha, z_try, f_t, g_t, c_t, J_t
            first = False
            alpha *= 0.5
        return None

    def _second_order_correction(self, z, alpha, c, c_t, theta_t, rhs, mu, tau, theta, phi, dphi, filt):
        md = self.model
        c_soc = alpha * c + c_t
        theta_old = theta_t
        for _ in range(4):
            rhs_soc = rhs.copy()
            rhs_soc[md.n:] = -c_soc
            sol = self.kkt.solve(rhs_soc)
            if not np.all(np.isfinite(sol)):
                return None
            dz_soc = sol[:md.n]
            a_soc = self._fraction_to_boundary(z, dz_soc, np.where(md.has_l, md.l, -np.inf),
                                               np.where(md.has_u, md.u, np.inf), tau)
            z_try = self._interior(z + a_soc * dz_soc)
            tr = self._trial(z_try, mu)
            if tr is None:
                return None
            f_t, g_t, c_n, J_t, phi_t, theta_n = tr
            kind = self._acceptable(theta_n, phi_t, alpha, theta, phi, dphi, filt)
            if kind is not None:
                if kind == "h":
                    filt.append(((1.0 - self.gamma_theta) * theta, phi - self.gamma_phi * theta))
                return alpha, z_try, f_t, g_t, c_n, J_t
            if theta_n > 0.99 * theta_old:
                return None
            theta_old = theta_n
            c_soc = a_soc * c_soc + c_n
        return None

    def _restoration(self, z, mu, tau):
        """Minimize the l1 constraint violation by damped Gauss-Newton steps.

        Returns the new point and the number of iterations, or ``None`` when
        the violation stops decreasing (declared locally infeasible).
        """
        md = self.model
        solver = _KktSolver(self.dense)
        try:
            _, _, c, J = md.evaluate(z)
        except ExprDomainError:
            return None
        theta0 = float(np.sum(np.abs(c)))
        history = [theta0]
        zeta = max(math.sqrt(mu), 1e-4)
        mu_r = max(mu, 1e-8)
        for k in range(1, self.opts.max_restoration_iter + 1):
            sl, su = self._slacks(z)
            sigma = np.where(md.has_l, mu_r / sl ** 2, 0.0) + np.where(md.has_u, mu_r / su ** 2, 0.0)
            n = md.n
            W = np.zeros((n, n)) if self.dense else sp.csr_matrix((n, n))
            K = _build_kkt(W, sigma + zeta, 0.0, J, 1e-10, self.dense)
            if not solver.factor(K):
                return None
            rhs = -np.concatenate([self._barrier_grad(z, mu_r), c])
            sol = solver.solve(rhs)
            if not np.all(np.isfinite(sol)):
                return None
            dz = sol[:n]
            amax = self._fraction_to_boundary(z, dz, np.where(md.has_l, md.l, -np.inf),
                                              np.where(md.has_u, md.u, np.inf), tau)
            alpha = amax
            theta = history[-1]
            moved = False
            while alpha > 1e-12:
                z_try = self._interior(z + alpha * dz)
                try:
                    _, _, c_t, J_t = md.evaluate(z_try)
                    th = float(np.sum(np.abs(c_t)))
                except ExprDomainError:
                    th = np.inf
                if th <= theta * (1.0 - 1e-4 * alpha) or th < theta - 1e-14:
                    z, c, J = z_try, c_t, J_t
                    moved = True
                    break
                alpha *= 0.5
            history.append(float(np.sum(np.abs(c))) if moved else theta)
            if history[-1] <= 0.9 * theta0 or history[-1] <= self.opts.tol * 1e-2:
                return z, k
            if len(history) > 10 and history[-11] - history[-1] < 1e-12:
                return None
            mu_r = max(mu_r * 0.5, 1e-10)
        return None

    def _result(self, status, z, lam, zl, zu, it, viol, kkt, f, mu):
        md = self.model
        x_full = md.full_x(z)
        zl_full = np.zeros(md.n_full)
        zu_full = np.zeros(md.n_full)
        zl_full[md.free] = zl[:md.nf] / md.obj_scale if len(zl) else 0.0
        zu_full[md.free] = zu[:md.nf] / md.obj_scale if len(zu) else 0.0
        obj = f / md.obj_scale if np.isfinite(f) else f
        lam_out = lam * md.row_scale / md.obj_scale if len(lam) else lam
        return SolveResult(status=status, x=x_full, lam=lam_out, z_L=zl_full, z_U=zu_full, iterations=it,
                           wall_clock_seconds=0.0, violation=float(viol), kkt_residual=float(kkt),
                           objective=float(obj), mu=float(mu), hessian_mode=self.mode, trace=self.trace)


def _damped_bfgs(B, s, y):
    """Powell-damped BFGS update keeping ``B`` positive definite."""
    ss = float(s @ s)
    if ss < 1e-300:
        return B
    Bs = B @ s
    sBs = float(s @ Bs)
    sy = float(s @ y)
    if sBs <= 0:
        return B
    if sy >= 0.2 * sBs:
        r = y
    else:
        theta = 0.8 * sBs / (sBs - sy)
        r = theta * y + (1.0 - theta) * Bs
    sr = float(s @ r)
    if sr <= 1e-300:
        return B
    return B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / sr
