import inspect

import numpy as np
import pytest

from nelson.basis import DualSolution, TestFunctionBasis
from nelson.catalog import bessel_case, gaussian_entropic_case, simulate_bessel
from nelson.cost import CostFunction
from nelson.diffusion import DiffusionSpec, InitialLaw
from nelson.dual import maximize_dual, refinement_delta
from nelson.marginals import GaussianFlow
from nelson.primal import (ControlledDrift, MissingControlError, duality_gap_report, girsanov_consistency,
                           marginal_tolerance, markov_statistic, primal_cost_mc, recover_drift,
                           verify_marginals)

QUAD = CostFunction.quadratic()


def zero_solution(basis):
    return DualSolution(basis, np.zeros(basis.size), 0.0, 0.0, 1e-6)


def test_zero_field_gives_reference_drift():
    spec = DiffusionSpec(1, 1.0, InitialLaw.dirac([0.0]), b=lambda t, x: -2 * x)
    basis = TestFunctionBasis(1.0, [-3], [3], 4, 8)
    drift = recover_drift(zero_solution(basis), spec, CostFunction.power(3.0))
    x = np.linspace(-4, 4, 9)[:, None]
    np.testing.assert_array_equal(drift(0.5, x), -2 * x)


def test_quadratic_drift_is_b_minus_psi(entropic):
    case, cost, sol = entropic
    spec = DiffusionSpec(1, 1.0, case.spec.m0, b=lambda t, x: np.sin(x))
    drift = recover_drift(sol, spec, cost)
    x = np.linspace(-3, 3, 25)[:, None]
    np.testing.assert_allclose(drift(0.4, x), np.sin(x) - sol.psi(0.4, x), atol=1e-14)


def test_drift_is_markov_feedback(entropic):
    case, cost, sol = entropic
    params = list(inspect.signature(recover_drift(sol, case.spec, cost).__call__).parameters)
    assert params == ["t", "x"]


def test_recovered_drift_matches_oracle(entropic):
    case, cost, sol = entropic
    drift = recover_drift(sol, case.spec, cost)
    from nelson.marginals import spacetime_quadrature
    num = spacetime_quadrature(case.flow, lambda t, x: (drift(t, x)[:, 0] - case.oracle_drift(t, x)[:, 0]) ** 2)
    den = spacetime_quadrature(case.flow, lambda t, x: case.oracle_drift(t, x)[:, 0] ** 2)
    assert np.sqrt(num / den) <= 0.05


def test_reference_marginals_pass():
    spec = DiffusionSpec(1, 1.0, InitialLaw.gaussian([0.0], 1.0))
    rep = verify_marginals("reference", spec, GaussianFlow.isotropic(lambda t: 1 + t, 1.0), 20_000, 50, seed=1)
    assert rep.passed


def test_shifted_drift_fails_with_drift_t():
    spec = DiffusionSpec(1, 1.0, InitialLaw.gaussian([0.0], 1.0))
    rep = verify_marginals(lambda t, x: np.ones_like(x), spec, GaussianFlow.isotropic(lambda t: 1 + t, 1.0),
                           20_000, 50, seed=1)
    assert not rep.passed
    for t, w in zip(rep.slice_times, rep.w1):
        assert w == pytest.approx(t, abs=0.03)


def test_tolerance_formula():
    flow = GaussianFlow.isotropic(lambda t: 4.0, 1.0)
    tol, scale, se = marginal_tolerance(flow, [0.0, 1.0], 100)
    assert scale == pytest.approx(2.0, rel=1e-3)
    assert tol == pytest.approx(max(0.04, 3 * 2.0 / 10), rel=1e-3)


def test_zero_control_costs_nothing():
    spec = DiffusionSpec(1, 1.0, InitialLaw.dirac([0.0]))
    est = primal_cost_mc(ControlledDrift(spec, lambda t, x: np.zeros_like(x)), spec, QUAD, 1000, 10)
    assert est.estimate == 0.0 and est.std_error == 0.0
    assert primal_cost_mc("reference", spec, QUAD).estimate == 0.0


def test_plain_callable_needs_control():
    spec = DiffusionSpec(1, 1.0, InitialLaw.dirac([0.0]))
    with pytest.raises(MissingControlError):
        primal_cost_mc(lambda t, x: x, spec, QUAD, 10, 5)


def test_oracle_control_cost():
    case = gaussian_entropic_case("(1 + t)**2")
    beta = ControlledDrift(case.spec, lambda t, x: case.c(t) * x)
    est = primal_cost_mc(beta, case.spec, QUAD, 40_000, 400, seed=3)
    assert abs(est.estimate - case.oracle_value) <= 3 * est.std_error + 0.005 * case.oracle_value


def test_primal_equals_energy(entropic):
    case, cost, sol = entropic
    est = primal_cost_mc(recover_drift(sol, case.spec, cost), case.spec, cost, 40_000, 200, seed=4)
    assert abs(est.estimate - sol.energy_value) <= 3 * est.std_error + 0.02 * sol.energy_value


def test_gap_reference_case():
    case = gaussian_entropic_case("1 + t")
    sol = maximize_dual(TestFunctionBasis.for_flow(case.flow, 6, 10), case.spec, case.flow, QUAD)
    rep = duality_gap_report(sol, case.spec, case.flow, QUAD, 10_000, 100, seed=2)
    assert abs(rep.dual_value) < 1e-8 and abs(rep.primal_mc) < 1e-6 and abs(rep.dual_energy_value) < 1e-8
    assert rep.passed and rep.marginals_pass


def test_coarse_basis_surrogate_gap():
    case = gaussian_entropic_case("(1 + t)**2")
    coarse = maximize_dual(TestFunctionBasis.for_flow(case.flow, 3, 5), case.spec, case.flow, QUAD)
    assert coarse.dual_value < case.oracle_value
    delta, _ = refinement_delta(coarse, case.spec, case.flow, QUAD)
    assert delta > 0


def test_gap_sign_and_small_run(entropic):
    case, cost, sol = entropic
    rep = duality_gap_report(sol, case.spec, case.flow, cost, 20_000, 200, seed=6)
    assert rep.dual_value <= rep.primal_mc + 3 * rep.primal_se
    assert rep.passed
    assert set(rep.to_dict()) >= {"dual_value", "dual_energy_value", "primal_mc", "primal_se", "gap_rel",
                                  "marginal_w1", "pass"}


def test_girsanov_consistency(frozen):
    case, cost, sol = frozen
    rep = girsanov_consistency(sol, case.spec, cost, seed=3)
    assert rep.passed
    assert abs(rep.weight_mean - 1.0) <= 3 * rep.weight_se


# -- Markov statistic ------------------------------------------------------------

@pytest.fixture(scope="module")
def bessel_ensemble():
    return simulate_bessel(bessel_case(1.5), 100_000, 400, seed=0)


def test_markov_y_exceeds_band(bessel_ensemble):
    st = markov_statistic(bessel_ensemble, seed=1)
    assert st.exceeds and st.statistic > st.null_band
    assert st.n_bins_used > 0


def test_markov_random_label_inside(bessel_ensemble):
    st = markov_statistic(bessel_ensemble, seed=1, randomize_label=True)
    assert not st.exceeds


def test_markov_empty_future(bessel_ensemble):
    st = markov_statistic(bessel_ensemble, s=1.0, seed=1)
    assert st.statistic == 0.0 and not st.exceeds
