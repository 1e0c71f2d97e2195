import numpy as np
import pytest
from hypothesis import given, strategies as st

from nelson.basis import (DualSolution, NotInOrliczSpace, SpaceBasis1D, TestFunctionBasis, collect_nodes,
                          coverage, eval_grad_w, eval_Lt_w, eval_w, luxemburg_norm)
from nelson.cost import CostFunction
from nelson.diffusion import DiffusionSpec, InitialLaw
from nelson.marginals import GaussianFlow

FLOW = GaussianFlow.isotropic(lambda t: 1.0 + t, 1.0)
SPEC = DiffusionSpec(1, 1.0, InitialLaw.gaussian([0.0], 1.0))
QUAD = CostFunction.quadratic()


def small_basis(dim=1, **kw):
    return TestFunctionBasis(1.0, [-3.0] * dim, [3.0] * dim, kw.pop("time_knots", 5),
                             kw.pop("space_knots", 9), **kw)


coeff_seeds = st.integers(0, 10_000)


def random_theta(basis, seed):
    return np.random.default_rng(seed).normal(size=basis.size)


def test_zero_theta():
    b = small_basis(2)
    x = np.random.default_rng(0).uniform(-3, 3, size=(50, 2))
    th = np.zeros(b.size)
    assert np.all(eval_w(b, th, 0.4, x) == 0)
    assert np.all(eval_grad_w(b, th, 0.4, x) == 0)
    assert np.all(eval_Lt_w(b, th, DiffusionSpec(2, 1.0, InitialLaw.dirac([0, 0])), 0.4, x) == 0)


@pytest.mark.parametrize("dim", [1, 2])
def test_gradient_matches_fd(dim):
    rng = np.random.default_rng(dim)
    b = small_basis(dim)
    x = rng.uniform(-2.5, 2.5, size=(100, dim))
    for k in rng.choice(b.size, 3, replace=False):
        th = np.zeros(b.size)
        th[k] = 1.0
        t = float(rng.uniform(0, 1))
        g = eval_grad_w(b, th, t, x)
        h = 1e-5
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = h
            fd = (eval_w(b, th, t, x + e) - eval_w(b, th, t, x - e)) / (2 * h)
            np.testing.assert_allclose(g[:, j], fd, atol=1e-6)


def test_dense_and_local_gradients_agree():
    b = small_basis(2)
    th = random_theta(b, 3)
    x = np.random.default_rng(1).uniform(-3.5, 3.5, size=(200, 2))
    _, g, _ = b.space_design(x, hessian=False)
    c = np.asarray(b.time.eval(0.3)[0]) @ b.coeff_matrix(th)
    dense = np.where(b.inside(x)[:, None], g @ c, 0.0)
    np.testing.assert_allclose(eval_grad_w(b, th, 0.3, x), dense, atol=1e-12)


@given(s1=coeff_seeds, s2=coeff_seeds, t=st.floats(0, 1))
def test_linearity(s1, s2, t):
    b = small_basis(2)
    x = np.random.default_rng(s1 + s2).uniform(-3, 3, size=(20, 2))
    t1, t2 = random_theta(b, s1), random_theta(b, s2)
    for fn in (eval_w, eval_grad_w):
        np.testing.assert_allclose(fn(b, t1 + t2, t, x), fn(b, t1, t, x) + fn(b, t2, t, x),
                                   rtol=1e-12, atol=1e-12)


@given(seed=coeff_seeds, x=st.floats(-5, 5))
def test_vanishing_mode_zero_at_ends(seed, x):
    b = small_basis(time_boundary="vanishing")
    th = random_theta(b, seed)
    xx = np.array([[x]])
    assert eval_w(b, th, 0.0, xx)[0] == 0.0
    assert eval_w(b, th, 1.0, xx)[0] == 0.0


def test_time_basis_sizes():
    assert small_basis(time_knots=12).time.size == 14
    assert small_basis(time_knots=12, time_boundary="vanishing").time.size == 12


@given(seed=coeff_seeds)
def test_compact_support_in_space(seed):
    b = small_basis()
    th = random_theta(b, seed)
    edge = np.array([[-3.0], [3.0], [-10.0], [7.0]])
    np.testing.assert_allclose(eval_w(b, th, 0.5, edge), 0.0, atol=1e-14)
    np.testing.assert_allclose(eval_grad_w(b, th, 0.5, edge), 0.0, atol=1e-14)


def test_generator_of_basis_matches_fd():
    b = small_basis()
    th = random_theta(b, 7)
    # off the knots, where the third derivative jumps
    x = np.linspace(-2.5, 2.5, 31)[:, None] + 0.01
    t, h = 0.45, 1e-4
    dt = (eval_w(b, th, t + h, x) - eval_w(b, th, t - h, x)) / (2 * h)
    dxx = (eval_w(b, th, t, x + h) - 2 * eval_w(b, th, t, x) + eval_w(b, th, t, x - h)) / h ** 2
    np.testing.assert_allclose(eval_Lt_w(b, th, SPEC, t, x), dt + 0.5 * dxx, atol=1e-5)


def test_splines_are_c2():
    s = SpaceBasis1D(-1, 1, 9)
    knots = s.edges[1:-1]
    for d in range(3):
        left = s.eval(knots - 1e-9)[d]
        right = s.eval(knots + 1e-9)[d]
        np.testing.assert_allclose(left, right, atol=1e-6 * (10 ** (2 * d)))


def test_box_covers_mass_and_centres_knot():
    b = TestFunctionBasis.for_flow(FLOW)
    lo, hi = FLOW.mass_box(0.999)
    assert np.all(b.box_lo < lo) and np.all(b.box_hi > hi)
    assert np.min(np.abs(b.space[0].edges)) < 1e-12
    x = FLOW.sample(1.0, 100_000, np.random.default_rng(0))
    assert coverage(b, x) > 0.999


def test_solution_roundtrip(tmp_path):
    b = small_basis(2)
    sol = DualSolution(b, random_theta(b, 1), 0.5, 1e-9, 1e-6, True, 12, 0.3, 0.5)
    sol.save(tmp_path / "s.json")
    back = DualSolution.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.theta, sol.theta)
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(back.psi(0.3, x), sol.psi(0.3, x))


# -- Luxemburg norm -----------------------------------------------------------

def test_norm_of_zero():
    assert luxemburg_norm(FLOW, SPEC, QUAD, lambda t, x: np.zeros_like(x)) == 0.0


@pytest.mark.parametrize("k", [0.3, -1.0, 2.5, 40.0])
def test_norm_constant_field(k):
    val = luxemburg_norm(FLOW, SPEC, QUAD, lambda t, x: np.full_like(x, k))
    assert val == pytest.approx(abs(k) / np.sqrt(2.0), rel=1e-7)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0, -3.0])
@pytest.mark.parametrize("cost", [QUAD, CostFunction.power(3.0, 1 / 3), CostFunction.power_log(2.5)])
def test_norm_homogeneous(c, cost):
    nodes = collect_nodes(FLOW, times=np.linspace(0, 1, 9))
    psi = lambda t, x: np.sin(x) + t
    base = luxemburg_norm(FLOW, SPEC, cost, psi, nodes=nodes)
    scaled = luxemburg_norm(FLOW, SPEC, cost, lambda t, x: c * psi(t, x), nodes=nodes)
    assert scaled == pytest.approx(abs(c) * base, rel=1e-7)


NODES = collect_nodes(FLOW, times=np.linspace(0, 1, 9))
TRI_BASIS = TestFunctionBasis.for_flow(FLOW, 4, 8)


@given(s1=coeff_seeds, s2=coeff_seeds, p=st.sampled_from([1.5, 2.0, 3.0]))
def test_norm_triangle(s1, s2, p):
    cost = CostFunction.power(p, 1.0 / p)
    t1, t2 = random_theta(TRI_BASIS, s1), random_theta(TRI_BASIS, s2)

    def norm(th):
        return luxemburg_norm(FLOW, SPEC, cost, lambda t, x: eval_grad_w(TRI_BASIS, th, t, x), nodes=NODES)

    assert norm(t1 + t2) <= norm(t1) + norm(t2) + 1e-7


def test_norm_infinite_field():
    with pytest.raises(NotInOrliczSpace):
        luxemburg_norm(FLOW, SPEC, QUAD, lambda t, x: np.full_like(x, np.inf))


def test_projection_error_decreases_under_refinement():
    # least-squares fit of grad w*, w* = (1 + t) exp(-x^2/2), in L2(mu); error in the Orlicz norm
    target = lambda t, x: -(1 + t) * x * np.exp(-0.5 * x ** 2)
    errs = []
    for tk, sk in ((3, 8), (5, 14), (9, 26)):
        b = TestFunctionBasis.for_flow(FLOW, tk, sk)
        ts, xs, ws = collect_nodes(FLOW, cells=b.space_cells)
        A = np.empty((ts.size, b.size))
        for k in range(b.size):
            e = np.zeros(b.size)
            e[k] = 1.0
            for t in np.unique(ts):
                m = ts == t
                A[m, k] = eval_grad_w(b, e, t, xs[m])[:, 0]
        y = np.concatenate([target(t, xs[ts == t])[:, 0] for t in np.unique(ts)])
        sw = np.sqrt(ws)
        th = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)[0]
        resid = lambda t, x, th=th, b=b: target(t, x) - eval_grad_w(b, th, t, x)
        errs.append(luxemburg_norm(FLOW, SPEC, QUAD, resid, nodes=(ts, xs, ws)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.1 * errs[0]
