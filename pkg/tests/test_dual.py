import numpy as np
import pytest
from hypothesis import given, strategies as st

from nelson.basis import TestFunctionBasis, eval_grad_w, eval_Lt_w, eval_w
from nelson.catalog import gaussian_entropic_case
from nelson.cost import CostFunction
from nelson.dual import (DualProblem, DualSolverError, SolverOptions, dual_gradient, dual_objective,
                         dual_value_energy, maximize_dual, refinement_delta)
from nelson.marginals import spacetime_quadrature

QUAD = CostFunction.quadratic()
CUBE = CostFunction.power(3.0, 1.0 / 3.0)


def fine_cells(basis, m=8):
    out = []
    for e in basis.space_cells:
        out.append(np.append((e[:-1, None] + np.diff(e)[:, None] * np.arange(m) / m).ravel(), e[-1]))
    return out


def test_objective_at_zero(small_problem):
    case, basis = small_problem
    assert dual_objective(np.zeros(basis.size), basis, case.spec, case.flow, QUAD) == 0.0


@pytest.mark.parametrize("cost", [QUAD, CUBE, CostFunction.power(1.6, 0.7)])
def test_gradient_matches_fd(small_problem, cost):
    case, basis = small_problem
    prob = DualProblem(basis, case.spec, case.flow, cost)
    rng = np.random.default_rng(0)
    for _ in range(20):
        th = rng.normal(scale=0.3, size=basis.size)
        g = prob.gradient(th)
        k = rng.choice(basis.size, 4, replace=False)
        for j in k:
            h = 1e-6 * max(1.0, abs(th[j]))
            e = np.zeros(basis.size)
            e[j] = h
            fd = (prob.objective(th + e) - prob.objective(th - e)) / (2 * h)
            assert fd == pytest.approx(g[j], rel=1e-5, abs=1e-7 * np.abs(g).max())


def test_gradient_at_zero_is_generator_integral(small_problem):
    # with test functions vanishing at t = 0, T the linear part is int L_t phi_k dmu dt
    case, _ = small_problem
    basis = TestFunctionBasis.for_flow(case.flow, 5, 8, time_boundary="vanishing")
    g0 = dual_gradient(np.zeros(basis.size), basis, case.spec, case.flow, QUAD)
    times = np.linspace(0, 1, 129)
    for k in (3, basis.size // 2, basis.size - 4):
        e = np.zeros(basis.size)
        e[k] = 1.0
        direct = spacetime_quadrature(case.flow, lambda t, x: eval_Lt_w(basis, e, case.spec, t, x),
                                      times=times, cells=fine_cells(basis), order=8)
        assert g0[k] == pytest.approx(direct, rel=1e-3, abs=1e-8)


def test_free_boundary_terms(small_problem):
    case, basis = small_problem
    g0 = dual_gradient(np.zeros(basis.size), basis, case.spec, case.flow, QUAD)
    e = np.zeros(basis.size)
    e[basis.space_size // 2] = 1.0   # first time spline, nonzero at t = 0
    interior = spacetime_quadrature(case.flow, lambda t, x: eval_Lt_w(basis, e, case.spec, t, x),
                                    times=np.linspace(0, 1, 257), cells=fine_cells(basis), order=8)
    x, w = case.flow.nodes(0.0, cells=fine_cells(basis), order=8)
    start = (w / w.sum()) @ eval_w(basis, e, 0.0, x)
    assert g0[basis.space_size // 2] == pytest.approx(interior + start, rel=1e-3)


@given(seed=st.integers(0, 10_000), lam=st.floats(0.05, 0.95))
def test_concave_along_segments(small_problem, seed, lam):
    case, basis = small_problem
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, basis.size))
    for cost in (QUAD, CUBE):
        f = lambda th: dual_objective(th, basis, case.spec, case.flow, cost)
        mid = f(lam * a + (1 - lam) * b)
        assert mid >= lam * f(a) + (1 - lam) * f(b) - 1e-9 * (1 + abs(mid))


def test_concavity_certificate_50_segments(small_problem):
    case, basis = small_problem
    rng = np.random.default_rng(42)
    prob = DualProblem(basis, case.spec, case.flow, CUBE)
    for _ in range(50):
        a, b = rng.normal(size=(2, basis.size))
        mid = prob.objective(0.5 * (a + b))
        assert mid >= 0.5 * (prob.objective(a) + prob.objective(b)) - 1e-9 * (1 + abs(mid))


def test_reference_flow_value_zero():
    case = gaussian_entropic_case("1 + t")
    basis = TestFunctionBasis.for_flow(case.flow, 6, 10)
    sol = maximize_dual(basis, case.spec, case.flow, QUAD)
    assert abs(sol.dual_value) < 1e-8
    assert sol.luxemburg_norm_psi < 1e-4


def test_entropic_optimum(entropic):
    case, cost, sol = entropic
    assert sol.grad_norm_at_opt <= sol.tol_foc
    assert sol.dual_value == pytest.approx(case.oracle_value, rel=0.05)
    # Psi = -c(t) x on the mass region (quadratic cost: drift = -Psi)
    num = spacetime_quadrature(case.flow, lambda t, x: (sol.psi(t, x)[:, 0] + case.c(t) * x[:, 0]) ** 2)
    den = spacetime_quadrature(case.flow, lambda t, x: (case.c(t) * x[:, 0]) ** 2)
    assert np.sqrt(num / den) <= 0.05


def test_foc_recomputed(entropic):
    case, cost, sol = entropic
    g = dual_gradient(sol.theta, sol.basis, case.spec, case.flow, cost)
    assert np.max(np.abs(g)) <= sol.tol_foc


def test_iterates_monotone(entropic):
    vals = np.array([r[1] for r in entropic[2].log])
    assert np.all(np.diff(vals) >= -1e-12 * np.abs(vals[1:]))


def test_energy_identity(entropic):
    case, cost, sol = entropic
    en = dual_value_energy(sol, case.spec, case.flow, cost)
    assert en == pytest.approx(sol.dual_value, rel=1e-4)


def test_energy_quadratic_direct(entropic):
    case, cost, sol = entropic
    direct = spacetime_quadrature(case.flow, lambda t, x: 0.5 * np.sum(sol.psi(t, x) ** 2, axis=1),
                                  times=np.linspace(0, 1, 257), cells=sol.basis.space_cells)
    assert dual_value_energy(sol, case.spec, case.flow, cost) == pytest.approx(direct, rel=1e-3)


def test_energy_zero_field(small_problem):
    case, basis = small_problem
    prob = DualProblem(basis, case.spec, case.flow, CUBE)
    assert prob.energy(np.zeros(basis.size)) == 0.0


@pytest.mark.parametrize("cost", [CUBE, CostFunction.power_log(2.5)])
def test_energy_identity_other_costs(small_problem, cost):
    case, basis = small_problem
    sol = maximize_dual(basis, case.spec, case.flow, cost)
    prob = DualProblem(basis, case.spec, case.flow, cost)
    assert prob.energy(sol.theta) == pytest.approx(sol.dual_value, rel=1e-4)
    assert prob.energy(sol.theta, form="fenchel") == pytest.approx(sol.dual_value, rel=1e-4)


def test_solver_error_carries_iterate(small_problem):
    case, basis = small_problem
    with pytest.raises(DualSolverError) as exc:
        maximize_dual(basis, case.spec, case.flow, QUAD, SolverOptions(max_iter=1, restarts=1))
    assert exc.value.theta.shape == (basis.size,)
    assert exc.value.grad_norm > 0


def test_refinement_does_not_lower_value(small_problem):
    case, basis = small_problem
    sol = maximize_dual(basis, case.spec, case.flow, QUAD)
    delta, fine = refinement_delta(sol, case.spec, case.flow, QUAD)
    assert delta >= -1e-6 * abs(sol.dual_value)
    assert fine.basis.size > basis.size


def test_power_cost_on_two_dimensions():
    case = gaussian_entropic_case("1 + 0.5*t", dim=2)
    basis = TestFunctionBasis.for_flow(case.flow, 4, 8)
    sol = maximize_dual(basis, case.spec, case.flow, CUBE)
    assert sol.converged and sol.dual_value > 0
    prob = DualProblem(basis, case.spec, case.flow, CUBE)
    assert prob.energy(sol.theta) == pytest.approx(sol.dual_value, rel=1e-4)
