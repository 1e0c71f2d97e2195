"""Maximisation of the dual objective D(theta) = int L w dmu dt - int g(sigma' grad w) dmu dt.

The space-time quadrature is fixed once per problem (``DualProblem``) and
shared by objective and gradient, so the gradient is exact for the
discretised objective.

Time boundary.  When the basis keeps the end-point time splines, the linear
part is the continuous extension of w -> int L_t w dmu dt to test functions
that do not vanish at t = 0, T:

    ell(w) = int L_t w dmu dt + int w(0) dmu_0 - int w(T) dmu_T,

the limit of the same functional applied to w times smooth time cut-offs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .basis import DualSolution, TestFunctionBasis, collect_nodes, luxemburg_norm
from .diffusion import DiffusionSpec
from .marginals import MarginalFlow, spacetime_quadrature

log = logging.getLogger(__name__)

TIME_ORDER = 4
SPACE_ORDER = 4
FOC_RELATIVE = 1e-6
# |grad . theta| bounds the gap between the objective and its energy form
PAIRING_RELATIVE = 1e-6
SEGMENT = 100
ACTIVE_REL = 1e-12


class DualSolverError(RuntimeError):
    def __init__(self, message, theta, grad_norm):
        super().__init__(message)
        self.theta = theta
        self.grad_norm = grad_norm


def foc_scale(flow: MarginalFlow):
    """Double integral of 1 + |x| against the flow."""
    return spacetime_quadrature(flow, lambda t, x: 1.0 + np.linalg.norm(x, axis=1))


def _time_nodes(flow, basis):
    if hasattr(flow, "times"):
        # flows tabulated at fixed times: Simpson on the slice grid
        from .marginals import simpson_weights
        times = np.asarray(flow.quadrature_times(), dtype=float)
        return times, simpson_weights(times)
    u, w = np.polynomial.legendre.leggauss(TIME_ORDER)
    brk = basis.time.breaks
    a, b = brk[:-1, None], brk[1:, None]
    return (0.5 * (a + b) + 0.5 * (b - a) * u).ravel(), np.broadcast_to(0.5 * (b - a) * w, (a.size, u.size)).ravel()


CELL_SPREAD = 2.0


def quadrature_cells(basis, flow, spread=CELL_SPREAD):
    """Knot cells split so that no quadrature cell is wider than ``spread`` slice standard deviations."""
    cells = basis.space_cells
    if flow.sigma_finite or hasattr(flow, "times"):
        return cells
    sd = min(np.sqrt(max(np.linalg.eigvalsh(np.atleast_2d(flow.slice(float(t), n=2048, seed=1).cov())).min(),
                         1e-300))
             for t in np.linspace(0.0, flow.T, 9))
    out = []
    for e in cells:
        m = int(np.ceil((e[1] - e[0]) / (spread * sd) - 1e-9))
        if m <= 1:
            out.append(e)
            continue
        fine = e[:-1, None] + (e[1:] - e[:-1])[:, None] * np.arange(m) / m
        out.append(np.append(fine.ravel(), e[-1]))
    return out


class DualProblem:
    """Discretised dual problem on a fixed basis and quadrature.

    Attributes
    ----------
    ell : (K,) linear part, including the time-boundary terms.
    G : list of q sparse ``(N, K)`` matrices, grad_j w at the nodes = G[j] @ theta.
    weights : (N,) space-time quadrature weights.
    """

    def __init__(self, basis: TestFunctionBasis, spec: DiffusionSpec, flow: MarginalFlow, cost,
                 space_order=SPACE_ORDER, drop_below=1e-15):
        if basis.dim != spec.dim or flow.dim != spec.dim:
            raise ValueError("basis, diffusion and flow dimensions differ")
        self.basis, self.spec, self.flow, self.cost = basis, spec, flow, cost
        q, K = spec.dim, basis.size
        self.quad_cells = quadrature_cells(basis, flow)
        tnodes, tweights = _time_nodes(flow, basis)
        ell = np.zeros(K)
        blocks = [[] for _ in range(q)]
        ts, xs, ws = [], [], []
        for t, tw in zip(tnodes, tweights):
            x, w = self._slice_nodes(flow, float(t), space_order)
            keep = basis.inside(x) & (w > drop_below * max(w.max(), 1e-300))
            x, w = x[keep], tw * w[keep]
            if x.shape[0] == 0:
                continue
            bt, dbt = basis.time.eval(float(t))
            v, g, h = basis.space_design(x)
            b = spec.drift(float(t), x)
            a = spec.a_at(float(t), x)
            Lspace = np.einsum("nj,njm->nm", b, g) + 0.5 * np.einsum("nij,nijm->nm", a, h)
            ell += np.kron(dbt, w @ v) + np.kron(bt, w @ Lspace)
            bt_s = sparse.csr_matrix(bt[None, :])
            for j in range(q):
                gj = g[:, j]
                gj[np.abs(gj) < 1e-300] = 0.0
                blocks[j].append(sparse.kron(bt_s, sparse.csr_matrix(gj), format="csr"))
            ts.append(np.full(x.shape[0], t))
            xs.append(x)
            ws.append(w)
        self.G = [sparse.vstack(bl, format="csr") for bl in blocks]
        self.GT = [Gj.T.tocsr() for Gj in self.G]
        self.t = np.concatenate(ts)
        self.x = np.concatenate(xs)
        self.weights = np.concatenate(ws)
        # boundary terms of the extended linear functional
        for tb, sgn in ((0.0, 1.0), (flow.T, -1.0)):
            bt, _ = basis.time.eval(tb)
            if np.any(bt):
                x, w = self._slice_nodes(flow, tb, space_order)
                keep = basis.inside(x) & (w > drop_below * max(w.max(), 1e-300))
                v, _, _ = basis.space_design(x[keep], hessian=False)
                ell += sgn * np.kron(bt, w[keep] @ v)
        self.ell = ell
        self._sigma = None
        if not spec.constant_sigma:
            self._sigma = spec.sigma_at(self.t, self.x)
        self._Gz_sq = None
        if spec.constant_sigma:
            Gz = [sum(spec.sigma[i, j] * self.G[i] for i in range(q)) for j in range(q)]
            self._Gz_sq = [Gz[j].multiply(Gz[j]).T.tocsr() for j in range(q)]
        self.diag_scale = self.curvature_scale(None)
        # elements the quadrature cannot see are frozen at zero
        self.active = self.diag_scale > ACTIVE_REL * self.diag_scale.max()

    def curvature_scale(self, theta):
        """Diagonal scaling sum_n W_n kappa_n |sigma' grad phi_k|^2.

        kappa is the secant curvature |grad g(z)| / |z| at the current iterate
        (1 for the quadratic cost and at theta = None).
        """
        if self._Gz_sq is None:
            return np.ones(self.size)
        w = self.weights
        if theta is not None and self.cost.kind != "quadratic":
            z = self.z_nodes(theta)
            r = np.linalg.norm(z, axis=1)
            if np.any(r > 0):
                floor = 1e-3 * r.max()
                zz = z * (np.maximum(r, floor) / np.where(r > 0, r, 1.0))[:, None]
                zz[r == 0, 0] = floor
                kappa = np.linalg.norm(self.grad_g_nodes(zz), axis=1) / np.maximum(r, floor)
                w = w * kappa
        return np.asarray(sum(m @ w for m in self._Gz_sq)).ravel()

    def _slice_nodes(self, flow, t, order):
        x, w = flow.nodes(t, cells=self.quad_cells, order=order)
        if not flow.sigma_finite and w.sum() > 0:
            # exact slice mass keeps w -> a(t) w(x) with w constant on the mass neutral
            w = w * (flow.mass / w.sum())
        return x, w

    @property
    def size(self):
        return self.basis.size

    def grad_w_nodes(self, theta):
        return np.column_stack([Gj @ theta for Gj in self.G])

    def z_nodes(self, theta):
        """sigma' grad w at the nodes."""
        gw = self.grad_w_nodes(theta)
        if self.spec.constant_sigma:
            return gw @ self.spec.sigma
        return np.einsum("nji,nj->ni", self._sigma, gw)

    def _times_split(self):
        if not hasattr(self, "_tsplit"):
            edges = np.flatnonzero(np.diff(self.t)) + 1
            self._tsplit = np.split(np.arange(self.t.size), edges)
        return self._tsplit

    def _cost_eval(self, fn, z):
        if np.isscalar(self.cost.scale) or self.cost.kind == "quadratic":
            return fn(0.0, self.x, z)
        out = []
        for idx in self._times_split():
            out.append(fn(float(self.t[idx[0]]), self.x[idx], z[idx]))
        return np.concatenate(out)

    def g_nodes(self, z):
        return self._cost_eval(self.cost.g, z)

    def grad_g_nodes(self, z):
        return self._cost_eval(self.cost.grad_g, z)

    def objective(self, theta):
        theta = np.asarray(theta, dtype=float)
        return float(self.ell @ theta - self.weights @ self.g_nodes(self.z_nodes(theta)))

    def gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        dg = self.grad_g_nodes(self.z_nodes(theta)) * self.weights[:, None]
        # back through sigma': d/d(grad w) of g(sigma' grad w) = sigma grad g
        if self.spec.constant_sigma:
            back = dg @ self.spec.sigma.T
        else:
            back = np.einsum("nij,nj->ni", self._sigma, dg)
        return self.ell - sum(self.GT[j] @ back[:, j] for j in range(self.spec.dim))

    def objective_and_gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        z = self.z_nodes(theta)
        gval = self.g_nodes(z)
        dg = self.grad_g_nodes(z) * self.weights[:, None]
        back = dg @ self.spec.sigma.T if self.spec.constant_sigma else np.einsum("nij,nj->ni", self._sigma, dg)
        grad = self.ell - sum(self.GT[j] @ back[:, j] for j in range(self.spec.dim))
        return float(self.ell @ theta - self.weights @ gval), grad

    def energy(self, theta, form="conjugate"):
        """Energy-form value: int g*(grad g(sigma' Psi)), or the Fenchel form."""
        z = self.z_nodes(theta)
        dg = self.grad_g_nodes(z)
        if form == "fenchel" or not self.cost.has_closed_form:
            return float(self.weights @ (np.sum(dg * z, axis=1) - self.g_nodes(z)))
        if np.isscalar(self.cost.scale) or self.cost.kind == "quadratic":
            gs = self.cost.gstar(0.0, self.x, dg)
        else:
            gs = np.concatenate([self.cost.gstar(float(self.t[i[0]]), self.x[i], dg[i])
                                 for i in self._times_split()])
        return float(self.weights @ gs)


_PROBLEMS: dict = {}


def _problem(theta, basis, spec, flow, cost, problem):
    if problem is not None:
        return problem
    key = (id(basis), id(spec), id(flow), id(cost))
    cached = _PROBLEMS.get(key)
    # ids can be recycled; the stored objects must be the same ones
    if cached is None or not (cached.basis is basis and cached.spec is spec and cached.flow is flow
                              and cached.cost is cost):
        if len(_PROBLEMS) > 8:
            _PROBLEMS.clear()
        cached = _PROBLEMS[key] = DualProblem(basis, spec, flow, cost)
    return cached


def dual_objective(theta, basis, spec, flow, cost, problem: Optional[DualProblem] = None):
    return _problem(theta, basis, spec, flow, cost, problem).objective(theta)


def dual_gradient(theta, basis, spec, flow, cost, problem: Optional[DualProblem] = None):
    return _problem(theta, basis, spec, flow, cost, problem).gradient(theta)


@dataclass
class SolverOptions:
    tol_foc: Optional[float] = None
    max_iter: int = 2000
    restarts: int = 3
    memory: int = 20
    seed: int = 0
    theta0: Optional[np.ndarray] = None
    armijo: float = 1e-4
    compute_norm: bool = True


@dataclass
class _RunResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    log: list = field(default_factory=list)


def _certified(value, grad, theta, tol, strict=True):
    if np.max(np.abs(grad)) > tol:
        return False
    return not strict or abs(grad @ theta) <= PAIRING_RELATIVE * abs(value) + 1e-3 * tol


def _lbfgs_ascent(prob: DualProblem, theta0, opts: SolverOptions, tol, log_rows, max_iter, it0=0):
    """Limited-memory BFGS ascent in Jacobi-scaled coordinates with Armijo backtracking."""
    diag = prob.curvature_scale(theta0 if np.any(theta0) else None)
    act = prob.active
    d = np.sqrt(np.where(act & (diag > 0), diag, 1.0))
    # theta = u / d; ascend F(u) = D(u / d) over the active elements
    u = np.where(act, theta0, 0.0) * d

    def evaluate(uu):
        val, grad = prob.objective_and_gradient(uu / d)
        return val, np.where(act, grad, 0.0)

    f, gth = evaluate(u)
    gu = gth / d
    S, Y = [], []
    it = 0
    for it in range(it0 + 1, it0 + max_iter + 1):
        if _certified(f, gth, u / d, tol):
            it -= 1
            break
        # two-loop recursion on -F (convex)
        qv = -gu
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ qv)
            alphas.append(a)
            qv = qv - a * y
        if S:
            gamma = (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            gamma = 1.0 / max(1.0, np.linalg.norm(gu))
        r = gamma * qv
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            rho = 1.0 / (y @ s)
            b = rho * (y @ r)
            r = r + s * (a - b)
        direction = -r
        slope = gu @ direction
        if slope <= 0:
            S, Y = [], []
            direction = gu / max(1.0, np.linalg.norm(gu))
            slope = gu @ direction
        step = 1.0
        while True:
            u_new = u + step * direction
            f_new, g_new = evaluate(u_new)
            if np.isfinite(f_new) and f_new >= f + opts.armijo * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            log_rows.append((it, f, float(np.max(np.abs(gth))), 0.0))
            break
        gu_new = g_new / d
        s = u_new - u
        y = -(gu_new - gu)
        if y @ s > 1e-16 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
        u, f, gth, gu = u_new, f_new, g_new, gu_new
        log_rows.append((it, f, float(np.max(np.abs(gth))), step))
    return _RunResult(u / d, f, gth, it - it0)


def maximize_dual(basis: TestFunctionBasis, spec: DiffusionSpec, flow: MarginalFlow, cost,
                  opts: Optional[SolverOptions] = None, problem: Optional[DualProblem] = None,
                  **kwargs) -> DualSolution:
    """Quasi-Newton ascent of the dual objective with a stationarity certificate.

    Iterates until ``max |dD/dtheta_k| <= tol_foc`` and, within the
    iteration budget, ``|grad . theta| <= 1e-6 |D|`` so that the objective
    and its energy form agree.  Raises ``DualSolverError`` (carrying the
    best iterate) if no restart meets the first condition.
    """
    opts = opts or SolverOptions(**kwargs)
    prob = _problem(None, basis, spec, flow, cost, problem)
    tol = opts.tol_foc if opts.tol_foc is not None else FOC_RELATIVE * foc_scale(flow)
    rng = np.random.default_rng(opts.seed)
    theta = np.zeros(prob.size) if opts.theta0 is None else np.asarray(opts.theta0, dtype=float).copy()
    best = None
    rows = []
    total = 0
    for attempt in range(max(1, opts.restarts)):
        run = None
        budget = opts.max_iter
        while budget > 0:
            # rescale to the local curvature between segments
            seg = _lbfgs_ascent(prob, theta if run is None else run.theta, opts, tol, rows,
                                min(budget, SEGMENT), total)
            total += seg.iterations
            budget -= max(seg.iterations, 1)
            stalled = run is not None and seg.value <= run.value
            run = seg if run is None or seg.value >= run.value else run
            if _certified(run.value, run.grad, run.theta, tol) or stalled:
                break
        if best is None or run.value > best.value:
            best = run
        if _certified(best.value, best.grad, best.theta, tol, strict=False):
            break
        log.info("restart %d: grad norm %.3e > tol %.3e", attempt + 1, np.max(np.abs(run.grad)), tol)
        scale = 1e-3 * max(1.0, np.max(np.abs(best.theta)))
        theta = best.theta + scale * rng.standard_normal(prob.size)
    gnorm = float(np.max(np.abs(best.grad)))
    if gnorm > tol:
        raise DualSolverError(f"dual ascent did not reach tol_foc={tol:.3e} (grad norm {gnorm:.3e}) "
                              f"after {total} iterations", best.theta, gnorm)
    sol = DualSolution(basis=basis, theta=best.theta, dual_value=best.value, grad_norm_at_opt=gnorm,
                       tol_foc=tol, converged=True, iterations=total, log=rows)
    sol.energy_value = prob.energy(best.theta)
    if opts.compute_norm:
        sol.luxemburg_norm_psi = luxemburg_norm(flow, spec, cost, sol.psi,
                                                nodes=(prob.t, prob.x, prob.weights))
    return sol


def dual_value_energy(sol: DualSolution, spec, flow, cost, problem: Optional[DualProblem] = None):
    """int g*(grad g(sigma' Psi)) dmu dt on the solver's quadrature."""
    return _problem(None, sol.basis, spec, flow, cost, problem).energy(sol.theta)


def refinement_delta(sol: DualSolution, spec, flow, cost, opts: Optional[SolverOptions] = None):
    """Change of the optimal value when the knot counts are doubled (attainment diagnostic)."""
    b = sol.basis
    fine = TestFunctionBasis(b.T, b.box_lo, b.box_hi, 2 * b.time_knots - 1, 2 * b.space_knots - 1,
                             b.kind, b.time_boundary)
    fsol = maximize_dual(fine, spec, flow, cost, opts)
    return fsol.dual_value - sol.dual_value, fsol
