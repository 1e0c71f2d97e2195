"""Potential mean-field games: minimise value(mu) + int R_t[mu_t] dt over Gaussian flow families.

``value(mu)`` is obtained from the dual solver (there is no duality gap),
so every evaluation of the objective is one inner dual solve.  All flows in
a problem share one basis so that values are comparable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline

from .basis import TestFunctionBasis
from .diffusion import DiffusionSpec
from .dual import DualSolverError, SolverOptions, maximize_dual
from .marginals import GaussianFlow, MarginalFlow, MixtureFlow, simpson_weights, spacetime_quadrature

log = logging.getLogger(__name__)

R_TIMES = 65
SOLVE_BUDGET_REL = 0.01


class MfgError(RuntimeError):
    pass


# -- interaction functionals ---------------------------------------------------------

def _moment(flow, t, f):
    x, w = flow.nodes(float(t))
    return float(w @ f(x))


@dataclass
class VarianceTarget:
    """R_t[m] = lam (int |y|^2 m(dy) - v*(t))^2, gradient y -> 2 lam (int |y|^2 m - v*) |y|^2."""

    lam: float
    v_star: Callable
    kind: str = "variance_target"

    def statistic(self, flow, t):
        return _moment(flow, t, lambda x: np.sum(x * x, axis=1))

    def value(self, flow, t):
        return self.lam * (self.statistic(flow, t) - self.v_star(t)) ** 2

    def grad(self, flow, t):
        c = 2.0 * self.lam * (self.statistic(flow, t) - self.v_star(t))
        return lambda x: c * np.sum(x * x, axis=1)

    def grad_bound(self, radius):
        """sup of |grad R| over |y| <= radius for the worst time on a grid (unbounded on R^q)."""
        return None if radius is None else float(radius) ** 2


@dataclass
class MeanTarget:
    """R_t[m] = lam |int y m(dy) - m*(t)|^2, gradient y -> 2 lam (mean - m*) . y."""

    lam: float
    m_star: Callable
    kind: str = "mean_field_quadratic"

    def statistic(self, flow, t):
        x, w = flow.nodes(float(t))
        return w @ x

    def value(self, flow, t):
        d = self.statistic(flow, t) - np.atleast_1d(self.m_star(t))
        return self.lam * float(d @ d)

    def grad(self, flow, t):
        c = 2.0 * self.lam * (self.statistic(flow, t) - np.atleast_1d(self.m_star(t)))
        return lambda x: x @ c

    def grad_bound(self, radius):
        return None if radius is None else float(radius)


def integrate_R(R, flow, T, n=R_TIMES):
    ts = np.linspace(0.0, T, n)
    return float(simpson_weights(ts) @ np.array([R.value(flow, t) for t in ts]))


def pairing(R, flow, other, T):
    """int int grad R_t[flow_t](y) other_t(dy) dt."""
    return spacetime_quadrature(other, lambda t, x: R.grad(flow, t)(x),
                                times=np.linspace(0.0, T, R_TIMES))


# -- flow families ---------------------------------------------------------------------

class GaussianFamily:
    """1D flows N(m(t; eta), v_ref(t) exp(sum_i eta_i B_i(t))) with m(t) = sum_j eta'_j B_j(t).

    The B_i are clamped cubic B-splines on [0, T] without the first one, so
    every member starts from the reference initial law.
    """

    def __init__(self, v_ref: Callable, T, n_knots=4, mean_params=False):
        self.v_ref, self.T = v_ref, float(T)
        brk = np.linspace(0.0, self.T, n_knots)
        knots = np.concatenate([[0.0] * 3, brk, [self.T] * 3])
        n_all = knots.size - 4
        self._spl = BSpline(knots, np.eye(n_all)[:, 1:], 3)
        self.n_var = n_all - 1
        self.n_mean = self.n_var if mean_params else 0

    @property
    def size(self):
        return self.n_var + self.n_mean

    def splines(self, t):
        return self._spl(np.clip(t, 0.0, self.T))

    def flow(self, eta) -> GaussianFlow:
        eta = np.asarray(eta, dtype=float)
        ev, em = eta[:self.n_var], eta[self.n_var:]

        def var(t):
            return float(self.v_ref(t) * np.exp(self.splines(t) @ ev))

        def mean(t):
            return np.atleast_1d(self.splines(t) @ em) if self.n_mean else np.zeros(1)

        return GaussianFlow(mean, lambda t: np.array([[var(t)]]), self.T, 1)


# -- problem ---------------------------------------------------------------------------------

@dataclass
class MfgProblem:
    spec: DiffusionSpec
    cost: object
    R: object
    family: GaussianFamily
    basis: TestFunctionBasis
    solver: SolverOptions = field(default_factory=SolverOptions)

    @property
    def T(self):
        return self.spec.T


def variance_target_problem(cost, lam=0.25, factor=2.0, v0=1.0, T=1.0, n_knots=4, time_knots=12,
                            space_knots=16, mean_params=False, solver: Optional[SolverOptions] = None, R=None):
    """Brownian reference from N(0, v0); R targets ``factor`` times the reference variance.

    Another interaction functional can be passed as ``R``; the family and
    the shared basis box stay the same.
    """
    from .diffusion import InitialLaw

    spec = DiffusionSpec(1, T, InitialLaw.gaussian([0.0], v0))

    def v_ref(t):
        return v0 + t

    R = VarianceTarget(lam, lambda t: factor * v_ref(t)) if R is None else R
    family = GaussianFamily(v_ref, T, n_knots, mean_params)
    # one box for every flow the problem will meet
    wide = GaussianFlow.isotropic(lambda t: 1.6 * max(factor, 1.0) * v_ref(t), T)
    basis = TestFunctionBasis.for_flow(wide, time_knots, space_knots)
    return MfgProblem(spec, cost, R, family, basis, solver or SolverOptions(compute_norm=False))


@dataclass
class FlowValue:
    value: float
    solution: object
    flow: MarginalFlow


def flow_value(problem: MfgProblem, flow: MarginalFlow, theta0=None) -> FlowValue:
    """value of the primal problem on ``flow`` via one dual solve."""
    opts = SolverOptions(**{**problem.solver.__dict__, "theta0": theta0, "compute_norm": False})
    sol = maximize_dual(problem.basis, problem.spec, flow, problem.cost, opts)
    return FlowValue(sol.dual_value, sol, flow)


def mkv_objective(eta, problem: MfgProblem, theta0=None, return_parts=False):
    flow = problem.family.flow(eta)
    try:
        fv = flow_value(problem, flow, theta0)
    except DualSolverError as e:
        raise MfgError(f"inner dual solve failed at eta={np.asarray(eta).tolist()}: {e}") from e
    r = integrate_R(problem.R, flow, problem.T)
    total = fv.value + r
    if return_parts:
        return total, fv, r
    return total


@dataclass
class MkvResult:
    eta: np.ndarray
    flow: GaussianFlow
    solution: object
    value: float
    primal_value: float
    r_value: float
    converged: bool
    n_evals: int
    history: list = field(default_factory=list, repr=False)


def minimize_mkv(problem: MfgProblem, eta0=None, step=0.5, min_step=1e-3, max_evals=300) -> MkvResult:
    """Compass search over eta with warm-started inner solves."""
    eta = np.zeros(problem.family.size) if eta0 is None else np.asarray(eta0, dtype=float).copy()
    best, fv, r = mkv_objective(eta, problem, return_parts=True)
    theta = fv.solution.theta
    sol, r_best = fv.solution, r
    n_evals, history = 1, [(eta.tolist(), best)]
    while step >= min_step and n_evals < max_evals:
        improved = False
        for i in range(eta.size):
            for sgn in (1.0, -1.0):
                trial = eta.copy()
                trial[i] += sgn * step
                try:
                    val, fvt, rt = mkv_objective(trial, problem, theta0=theta, return_parts=True)
                except MfgError as e:
                    log.warning("%s", e)
                    continue
                n_evals += 1
                history.append((trial.tolist(), val))
                if val < best:
                    eta, best, theta, sol, r_best, improved = trial, val, fvt.solution.theta, fvt.solution, rt, True
                    break
            if n_evals >= max_evals:
                break
        if not improved:
            step *= 0.5
    return MkvResult(eta, problem.family.flow(eta), sol, best, sol.dual_value, r_best,
                     bool(step < min_step), n_evals, history)


# -- equilibrium certificate --------------------------------------------------------------------

def _bump(t, centre, width):
    u = (t - centre) / width
    return (1.0 - u * u) ** 3 if abs(u) < 1.0 else 0.0


def perturbation_panel(flow: GaussianFlow, T, shift=0.2, scales=(0.8, 1.25), bump=0.3):
    """Five perturbed flows that keep the initial law."""
    m, v = flow.mean, lambda t: flow.cov(t)[0, 0]
    out = {}
    for sgn in (1.0, -1.0):
        out[f"mean_shift_{sgn * shift:+.1f}"] = GaussianFlow(
            lambda t, s=sgn: m(t) + s * shift * t / T, flow.cov_fn, T, 1)
    for k in scales:
        out[f"variance_x{k}"] = GaussianFlow(m, lambda t, k=k: np.array([[v(t) * k ** (t / T)]]), T, 1)
    out[f"variance_bump_{bump}"] = GaussianFlow(
        m, lambda t: np.array([[v(t) * (1.0 + bump * _bump(t, T / 2, T / 4))]]), T, 1)
    return out


@dataclass
class EquilibriumReport:
    lhs: float
    rhs: dict
    slack: float
    passed: bool
    inconclusive: list
    margins: dict

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "pass": self.passed,
                "inconclusive": self.inconclusive, "margins": self.margins}


def equilibrium_slack(*values):
    """Two inner solves, each budgeted 1% of the larger side."""
    return 2.0 * SOLVE_BUDGET_REL * max(abs(v) for v in values)


def verify_equilibrium(flow: MarginalFlow, value: float, problem: MfgProblem, perturbations: dict,
                       theta0=None) -> EquilibriumReport:
    """value(mu) + <grad R[mu], mu> <= value(mu_bar) + <grad R[mu], mu_bar> for each mu_bar."""
    T = problem.T
    lhs = value + pairing(problem.R, flow, flow, T)
    rhs, margins, bad = {}, {}, []
    slack_vals = [lhs]
    for name, pert in perturbations.items():
        try:
            fv = flow_value(problem, pert, theta0)
        except DualSolverError:
            bad.append(name)
            continue
        rhs[name] = fv.value + pairing(problem.R, flow, pert, T)
        slack_vals.append(rhs[name])
    slack = equilibrium_slack(*slack_vals)
    for name, r in rhs.items():
        margins[name] = r + slack - lhs
    passed = bool(rhs) and all(v >= 0 for v in margins.values())
    return EquilibriumReport(float(lhs), rhs, float(slack), passed, bad, margins)
