"""End-to-end acceptance checks; each test records one verdict line (see the terminal summary)."""
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nelson.basis import TestFunctionBasis, collect_nodes, eval_grad_w, luxemburg_norm
from nelson.catalog import (bessel_case, bessel_integrability, gaussian_entropic_case, nonuniversality_case,
                            radial_bump, separable_bump, simulate_bessel)
from nelson.cost import CostFunction
from nelson.dual import dual_gradient, dual_objective, dual_value_energy, maximize_dual
from nelson.marginals import GaussianFlow, spacetime_quadrature
from nelson.mfg import minimize_mkv, perturbation_panel, variance_target_problem, verify_equilibrium
from nelson.primal import (ControlledDrift, duality_gap_report, girsanov_consistency, markov_statistic,
                           primal_cost_mc, recover_drift, verify_marginals)
from nelson.diffusion import DiffusionSpec, InitialLaw

QUAD = CostFunction.quadratic()
CUBE = CostFunction.power(3.0, 1.0 / 3.0)
N_PATHS, N_STEPS = 100_000, 400


class Timed:
    def __init__(self, fn, *args, **kw):
        t0 = time.perf_counter()
        self.value = fn(*args, **kw)
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="module")
def squared():
    case = gaussian_entropic_case("(1 + t)**2")
    run = Timed(maximize_dual, TestFunctionBasis.for_flow(case.flow), case.spec, case.flow, QUAD)
    return case, run.value, run.seconds


@pytest.fixture(scope="module")
def squared_cube(squared):
    case, sol, _ = squared
    return maximize_dual(sol.basis, case.spec, case.flow, CUBE)


@pytest.fixture(scope="module")
def constant():
    case = gaussian_entropic_case("1")
    return case, maximize_dual(TestFunctionBasis.for_flow(case.flow), case.spec, case.flow, QUAD)


def solved_cases(squared, squared_cube, constant):
    (case, sol, _), (ccase, csol) = squared, constant
    return [("squared/quadratic", case, QUAD, sol), ("squared/cube", case, CUBE, squared_cube),
            ("constant/quadratic", ccase, QUAD, csol)]


def test_c01_zero_duality_gap(squared, acceptance_log):
    case, sol, solve_s = squared
    run = Timed(duality_gap_report, sol, case.spec, case.flow, QUAD, N_PATHS, N_STEPS, seed=11)
    rep, seconds = run.value, solve_s + run.seconds
    oracle_rel = abs(sol.dual_value - case.oracle_value) / case.oracle_value
    gap_ok = abs(rep.primal_mc - rep.dual_value) <= 0.03 * rep.dual_value + 3 * rep.primal_se
    ok = gap_ok and oracle_rel <= 0.05
    acceptance_log(1, "zero duality gap", ok,
                   f"dual {rep.dual_value:.6f}, primal {rep.primal_mc:.6f} +- {rep.primal_se:.1e}, "
                   f"oracle {case.oracle_value:.6f} (rel {oracle_rel:.2%}), {seconds:.0f} s")
    assert ok


def test_c02_energy_identity(squared, squared_cube, constant, acceptance_log):
    worst, parts = 0.0, []
    for name, case, cost, sol in solved_cases(squared, squared_cube, constant):
        energy = dual_value_energy(sol, case.spec, case.flow, cost)
        rel = abs(energy - sol.dual_value) / abs(sol.dual_value)
        worst = max(worst, rel)
        parts.append(f"{name} {rel:.1e}")
    ok = worst <= 1e-4
    acceptance_log(2, "energy identity", ok, ", ".join(parts))
    assert ok


def test_c03_weak_duality(squared, squared_cube, constant, acceptance_log):
    rng = np.random.default_rng(2024)
    violations, total, parts = 0, 0, []
    for k, (name, case, cost, sol) in enumerate(solved_cases(squared, squared_cube, constant)):
        control = ControlledDrift(case.spec, lambda t, x, c=case.c: c(t) * x)
        est = primal_cost_mc(control, case.spec, cost, N_PATHS, N_STEPS, seed=100 + k)
        bound = est.estimate + 3 * est.std_error
        spread = max(1.0, np.max(np.abs(sol.theta)))
        best = -np.inf
        for i in range(50):
            if i % 2:
                theta = sol.theta + 0.1 * spread * rng.standard_normal(sol.theta.size)
            else:
                theta = sol.theta * rng.uniform(0.0, 1.5)
            d = dual_objective(theta, sol.basis, case.spec, case.flow, cost)
            best = max(best, d)
            violations += d > bound
            total += 1
        parts.append(f"{name}: max dual {best:.4f} <= {bound:.4f}")
    ok = violations == 0
    acceptance_log(3, "weak duality", ok, f"{violations}/{total} violations; " + "; ".join(parts))
    assert ok


def test_c04_first_order_certificate(squared, squared_cube, constant, acceptance_log):
    worst = 0.0
    for name, case, cost, sol in solved_cases(squared, squared_cube, constant):
        g = dual_gradient(sol.theta, sol.basis, case.spec, case.flow, cost)
        worst = max(worst, float(np.max(np.abs(g))) / sol.tol_foc)
    case, sol, _ = squared
    rng = np.random.default_rng(4)
    fd_worst = 0.0
    for _ in range(20):
        theta = 0.3 * rng.standard_normal(sol.theta.size)
        g = dual_gradient(theta, sol.basis, case.spec, case.flow, QUAD)
        for _ in range(2):
            d = rng.standard_normal(theta.size)
            d /= np.linalg.norm(d)
            h = 1e-4
            fd = (dual_objective(theta + h * d, sol.basis, case.spec, case.flow, QUAD)
                  - dual_objective(theta - h * d, sol.basis, case.spec, case.flow, QUAD)) / (2 * h)
            an = g @ d
            fd_worst = max(fd_worst, abs(fd - an) / max(abs(an), 1e-3 * np.linalg.norm(g)))
    ok = worst <= 1.0 and fd_worst <= 1e-5
    acceptance_log(4, "first-order certificate", ok,
                   f"max residual / tol_foc {worst:.2f}, finite-difference rel error {fd_worst:.1e}")
    assert ok


def test_c05_marginal_reproduction(squared, acceptance_log):
    case, sol, _ = squared
    drift = recover_drift(sol, case.spec, QUAD)
    run = Timed(verify_marginals, drift, case.spec, case.flow, N_PATHS, N_STEPS, seed=5)
    rep = run.value
    ok = rep.passed and len(rep.slice_times) == 17 and run.seconds <= 60
    acceptance_log(5, "marginal reproduction", ok,
                   f"max W1 {rep.max_w1:.4f} vs tol {rep.tol_marg:.4f} over {len(rep.slice_times)} slices, "
                   f"{run.seconds:.0f} s")
    assert ok


def test_c06_universality(squared, squared_cube, acceptance_log):
    case, sol, _ = squared
    d2 = recover_drift(sol, case.spec, QUAD)
    d3 = recover_drift(squared_cube, case.spec, CUBE)
    num = spacetime_quadrature(case.flow, lambda t, x: (d2(t, x)[:, 0] - d3(t, x)[:, 0]) ** 2)
    den = spacetime_quadrature(case.flow, lambda t, x: d2(t, x)[:, 0] ** 2)
    rel = float(np.sqrt(num / den))
    ok = rel <= 0.05
    acceptance_log(6, "1D universality", ok,
                   f"L2 drift difference {rel:.2%}; values {sol.dual_value:.4f} vs {squared_cube.dual_value:.4f}")
    assert ok


def test_c07_nonuniversality(acceptance_log):
    t0 = time.perf_counter()
    sep = nonuniversality_case(separable_bump())
    rad = nonuniversality_case(radial_bump())
    seconds = time.perf_counter() - t0
    ok = sep.max_residual > 100 * sep.tol_curl and rad.max_residual <= rad.tol_curl
    acceptance_log(7, "2D non-universality", ok,
                   f"separable {sep.max_residual:.3g} vs 100 tol {100 * sep.tol_curl:.3g}; "
                   f"radial {rad.max_residual:.2g} vs tol {rad.tol_curl:.2g}; {seconds:.1f} s")
    assert ok


def test_c08_bessel_integrability(acceptance_log):
    case = bessel_case(1.5)
    t0 = time.perf_counter()
    inside = bessel_integrability(case, 1.2, N_PATHS)
    outside = bessel_integrability(case, 1.8, N_PATHS)
    seconds = time.perf_counter() - t0
    stable = abs(inside.relative_change) <= 0.10
    grows = outside.relative_change >= 0.50
    ok = stable and grows and seconds <= 180
    acceptance_log(8, "Bessel integrability boundary", ok,
                   f"p=1.2 change {inside.relative_change:+.1%} (<= 10%: {stable}); "
                   f"p=1.8 change {outside.relative_change:+.1%} (>= 50%: {grows}); {seconds:.0f} s")
    assert ok


def test_c09_non_markov(acceptance_log):
    ens = simulate_bessel(bessel_case(1.5), N_PATHS, N_STEPS, seed=9)
    stat = markov_statistic(ens, seed=9)
    control = markov_statistic(ens, seed=9, randomize_label=True)
    ok = stat.exceeds and not control.exceeds
    acceptance_log(9, "non-Markov certificate", ok,
                   f"statistic {stat.statistic:.1f} vs band {stat.null_band:.1f}; "
                   f"control {control.statistic:.1f} vs band {control.null_band:.1f}")
    assert ok


def test_c10_girsanov(constant, acceptance_log):
    case, sol = constant
    rep = girsanov_consistency(sol, case.spec, QUAD, seed=10)
    ok = rep.passed and abs(rep.weight_mean - 1.0) <= 3 * rep.weight_se
    acceptance_log(10, "Girsanov consistency", ok,
                   f"max |z| mean {np.max(np.abs(rep.z_mean)):.2f}, var {np.max(np.abs(rep.z_var)):.2f}; "
                   f"mean weight {rep.weight_mean:.4f} +- {rep.weight_se:.1e}")
    assert ok


FLOW = GaussianFlow.isotropic(lambda t: 1.0 + t, 1.0)
SPEC = DiffusionSpec(1, 1.0, InitialLaw.gaussian([0.0], 1.0))
NODES = collect_nodes(FLOW, times=np.linspace(0, 1, 9))
LUX_BASIS = TestFunctionBasis.for_flow(FLOW, 4, 8)
LUX_STATE = {"homogeneity": 0, "triangle": 0}
theta_st = st.lists(st.floats(-2, 2), min_size=LUX_BASIS.size, max_size=LUX_BASIS.size).map(np.array)


def lux(cost, theta):
    return luxemburg_norm(FLOW, SPEC, cost, lambda t, x: eval_grad_w(LUX_BASIS, theta, t, x), nodes=NODES)


@settings(max_examples=25)
@given(theta_st, st.floats(0.1, 10.0))
def test_c11a_luxemburg_homogeneity(theta, c):
    for cost in (QUAD, CUBE):
        assert lux(cost, c * theta) == pytest.approx(c * lux(cost, theta), rel=1e-7, abs=1e-12)
    LUX_STATE["homogeneity"] += 1


@settings(max_examples=25)
@given(theta_st, theta_st)
def test_c11b_luxemburg_triangle(t1, t2):
    for cost in (QUAD, CUBE):
        assert lux(cost, t1 + t2) <= lux(cost, t1) + lux(cost, t2) + 1e-7
    LUX_STATE["triangle"] += 1


def test_c11c_luxemburg_constant(acceptance_log):
    errs = []
    for k in (0.3, -1.0, 2.5, 40.0):
        val = luxemburg_norm(FLOW, SPEC, QUAD, lambda t, x, k=k: np.full_like(x, k))
        errs.append(abs(val - abs(k) / np.sqrt(2)) / (abs(k) / np.sqrt(2)))
    ok = max(errs) <= 1e-7 and LUX_STATE["homogeneity"] > 0 and LUX_STATE["triangle"] > 0
    acceptance_log(11, "Luxemburg norm", ok,
                   f"constant-field rel error {max(errs):.1e}; property suites ran "
                   f"{LUX_STATE['homogeneity']} + {LUX_STATE['triangle']} examples")
    assert ok


def test_c12_mfg_equilibrium(acceptance_log):
    t0 = time.perf_counter()
    prob = variance_target_problem(QUAD)
    res = minimize_mkv(prob)
    rep = verify_equilibrium(res.flow, res.primal_value, prob, perturbation_panel(res.flow, prob.T))
    ref = prob.family.flow(np.zeros(prob.family.size))
    fake = verify_equilibrium(ref, 0.0, prob, {"optimum": res.flow})
    seconds = time.perf_counter() - t0
    ok = rep.passed and not fake.passed and seconds <= 600
    acceptance_log(12, "MFG equilibrium", ok,
                   f"panel min margin {min(rep.margins.values()):.4f} (slack {rep.slack:.4f}); "
                   f"reference flow margin {min(fake.margins.values()):.4f}; {seconds:.0f} s")
    assert ok
