"""Prescribed flows of marginals t -> mu_t, space-time quadrature, W1 diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, stats
from scipy.special import ndtri

GH_ORDER = 20
DEFAULT_SLICES = 17


class QuadratureError(ValueError):
    pass


@dataclass
class MeasureSlice:
    """A discrete measure: points ``(n, q)`` with weights summing to the slice mass."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.weights = np.asarray(self.weights, dtype=float)
        if self.points.shape[0] == 0:
            raise ValueError("empty measure slice")

    @classmethod
    def uniform(cls, points):
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def mass(self):
        return float(self.weights.sum())

    def mean(self):
        return self.weights @ self.points / self.mass

    def cov(self):
        c = self.points - self.mean()
        return (c * self.weights[:, None]).T @ c / self.mass


def _gl_cells(edges, order):
    """Gauss-Legendre nodes/weights on consecutive cells of a 1D partition."""
    u, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (a + b) + 0.5 * (b - a) * u
    weights = 0.5 * (b - a) * w
    return nodes.ravel(), np.broadcast_to(weights, nodes.shape).ravel()


def tensor_cells(edges_per_dim, order):
    pts, wts = zip(*(_gl_cells(np.asarray(e, dtype=float), order) for e in edges_per_dim))
    mesh = np.meshgrid(*pts, indexing="ij")
    wmesh = np.meshgrid(*wts, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    weights = np.prod(np.column_stack([w.ravel() for w in wmesh]), axis=1)
    return points, weights


class MarginalFlow:
    """Base class.  Subclasses provide ``nodes``, ``sample`` and ``slice``."""

    T: float
    dim: int
    mass: float = 1.0
    sigma_finite = False

    def nodes(self, t, cells=None, order=4):
        """Spatial quadrature nodes and weights for mu_t.

        With ``cells`` (a list of per-dimension cell edges) the integral is
        restricted to the box and computed cell-wise.
        """
        raise NotImplementedError

    def sample(self, t, n, rng):
        raise NotImplementedError

    def slice(self, t, n=4096, seed=0) -> MeasureSlice:
        raise NotImplementedError

    def quadrature_times(self, n=65):
        return np.linspace(0.0, self.T, n)

    def moment(self, t, f):
        x, w = self.nodes(t)
        return float(w @ f(x))

    def mass_box(self, coverage=0.999, n_times=9):
        """Smallest per-dimension box holding ``coverage`` of the mass at every probed time."""
        los, his = [], []
        tail = 0.5 * (1.0 - coverage)
        for t in np.linspace(0.0, self.T, n_times):
            s = self.slice(t, n=4096, seed=1)
            lo, hi = [], []
            for j in range(self.dim):
                order = np.argsort(s.points[:, j])
                cw = np.cumsum(s.weights[order]) / s.mass
                lo.append(s.points[order, j][np.searchsorted(cw, tail)])
                hi.append(s.points[order, j][min(np.searchsorted(cw, 1.0 - tail), len(cw) - 1)])
            los.append(lo)
            his.append(hi)
        return np.min(los, axis=0), np.max(his, axis=0)


class GaussianFlow(MarginalFlow):
    """mu_t = N(mean(t), cov(t)) with user-supplied paths."""

    def __init__(self, mean: Callable, cov: Callable, T: float, dim: int = 1):
        self.mean_fn = mean
        self.cov_fn = cov
        self.T = float(T)
        self.dim = dim

    @classmethod
    def isotropic(cls, variance: Callable, T, dim=1, mean: Optional[Callable] = None):
        mean = mean if mean is not None else (lambda t: np.zeros(dim))
        return cls(lambda t: np.atleast_1d(np.asarray(mean(t), dtype=float)),
                   lambda t: float(variance(t)) * np.eye(dim), T, dim)

    def mean(self, t):
        return np.atleast_1d(np.asarray(self.mean_fn(t), dtype=float))

    def cov(self, t):
        c = np.asarray(self.cov_fn(t), dtype=float)
        return c.reshape(self.dim, self.dim) if c.ndim else c * np.eye(self.dim)

    def density(self, t, x):
        m, c = self.mean(t), self.cov(t)
        d = x - m
        ci = np.linalg.inv(c)
        quad = np.einsum("ni,ij,nj->n", d, ci, d)
        norm = np.sqrt((2 * np.pi) ** self.dim * np.linalg.det(c))
        return np.exp(-0.5 * quad) / norm

    def nodes(self, t, cells=None, order=4):
        if cells is not None:
            x, w = tensor_cells(cells, order)
            return x, w * self.density(t, x)
        u, w = np.polynomial.hermite_e.hermegauss(GH_ORDER)
        w = w / w.sum()
        grid = np.meshgrid(*([u] * self.dim), indexing="ij")
        z = np.column_stack([g.ravel() for g in grid])
        wz = np.prod(np.column_stack([g.ravel() for g in np.meshgrid(*([w] * self.dim), indexing="ij")]), axis=1)
        vals, vecs = np.linalg.eigh(self.cov(t))
        root = vecs * np.sqrt(np.maximum(vals, 0.0))
        return self.mean(t) + z @ root.T, wz

    def sample(self, t, n, rng):
        L = np.linalg.cholesky(self.cov(t))
        return self.mean(t) + rng.standard_normal((n, self.dim)) @ L.T

    def slice(self, t, n=4096, seed=0):
        if self.dim == 1:
            u = (np.arange(n) + 0.5) / n
            pts = self.mean(t)[0] + np.sqrt(self.cov(t)[0, 0]) * ndtri(u)
            return MeasureSlice.uniform(pts[:, None])
        return MeasureSlice.uniform(self.sample(t, n, np.random.default_rng(seed)))


class MixtureFlow(MarginalFlow):
    """Slice-wise mixture (1 - eps) mu_t + eps nu_t of two flows."""

    def __init__(self, first: MarginalFlow, second: MarginalFlow, eps: float):
        if first.dim != second.dim or abs(first.T - second.T) > 1e-12:
            raise ValueError("mixture components must share dim and horizon")
        self.first, self.second, self.eps = first, second, float(eps)
        self.T, self.dim = first.T, first.dim

    def density(self, t, x):
        return (1 - self.eps) * self.first.density(t, x) + self.eps * self.second.density(t, x)

    def nodes(self, t, cells=None, order=4):
        if cells is not None:
            x, w = tensor_cells(cells, order)
            return x, w * self.density(t, x)
        x1, w1 = self.first.nodes(t)
        x2, w2 = self.second.nodes(t)
        return np.concatenate([x1, x2]), np.concatenate([(1 - self.eps) * w1, self.eps * w2])

    def sample(self, t, n, rng):
        k = rng.binomial(n, self.eps)
        return rng.permutation(np.concatenate([self.first.sample(t, n - k, rng),
                                               self.second.sample(t, k, rng)]))

    def slice(self, t, n=4096, seed=0):
        a, b = self.first.slice(t, n, seed), self.second.slice(t, n, seed)
        return MeasureSlice(np.concatenate([a.points, b.points]),
                            np.concatenate([(1 - self.eps) * a.weights, self.eps * b.weights]))


class GridDensityFlow(MarginalFlow):
    """Densities tabulated on a regular spatial grid at a list of times.

    ``axes`` are cell-centre coordinates per dimension; ``density`` has shape
    ``(n_times, *grid_shape)``.  Slices between tabulated times are linearly
    interpolated.
    """

    def __init__(self, times, axes: Sequence[np.ndarray], density, check_mass=True):
        self.times = np.asarray(times, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.density_values = np.asarray(density, dtype=float)
        self.T = float(self.times[-1])
        self.dim = len(self.axes)
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("grid times must start at 0 and increase")
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self._points = np.column_stack([m.ravel() for m in mesh])
        self._cell = np.prod([a[1] - a[0] for a in self.axes])
        if np.any(self.density_values < 0):
            raise ValueError("negative density values")
        if check_mass:
            masses = self.density_values.reshape(len(self.times), -1).sum(axis=1) * self._cell
            if np.any(np.abs(masses - 1.0) > 1e-6):
                raise ValueError(f"grid slices must integrate to 1 (got {masses.min():.8f}..{masses.max():.8f})")

    def _values(self, t):
        k = np.searchsorted(self.times, t, side="right") - 1
        k = min(max(k, 0), len(self.times) - 2)
        lam = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        lam = min(max(lam, 0.0), 1.0)
        v = (1 - lam) * self.density_values[k] + lam * self.density_values[k + 1]
        return v.ravel()

    def nodes(self, t, cells=None, order=4):
        # cell-midpoint rule on the tabulation grid
        return self._points, self._values(t) * self._cell

    def quadrature_times(self, n=None):
        return self.times

    def sample(self, t, n, rng):
        w = self._values(t)
        idx = rng.choice(w.size, size=n, p=w / w.sum())
        h = np.array([a[1] - a[0] for a in self.axes])
        return self._points[idx] + (rng.random((n, self.dim)) - 0.5) * h

    def slice(self, t, n=None, seed=0):
        return MeasureSlice(self._points, self._values(t) * self._cell)

    @classmethod
    def from_csv(cls, path):
        """Rows ``t, x_1..x_q, density``; spatial grid row-major, identical for every t."""
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times = np.unique(data[:, 0])
        q = data.shape[1] - 2
        first = data[data[:, 0] == times[0]]
        axes = [np.unique(first[:, 1 + j]) for j in range(q)]
        shape = tuple(len(a) for a in axes)
        dens = np.stack([data[data[:, 0] == t][:, -1].reshape(shape) for t in times])
        return cls(times, axes, dens)


class EmpiricalFlow(MarginalFlow):
    """Particle approximations at a list of slice times (nearest-slice lookup)."""

    def __init__(self, times, particles: Sequence[np.ndarray], weights=None):
        self.times = np.asarray(times, dtype=float)
        self.particles = [np.asarray(p, dtype=float).reshape(len(p), -1) for p in particles]
        if any(p.shape[0] == 0 for p in self.particles):
            raise ValueError("empty particle slice")
        if weights is None:
            weights = [np.full(p.shape[0], 1.0 / p.shape[0]) for p in self.particles]
        self.weights = [np.asarray(w, dtype=float) / np.sum(w) for w in weights]
        self.T = float(self.times[-1])
        self.dim = self.particles[0].shape[1]

    def _k(self, t):
        return int(np.argmin(np.abs(self.times - t)))

    def nodes(self, t, cells=None, order=4):
        k = self._k(t)
        return self.particles[k], self.weights[k]

    def quadrature_times(self, n=None):
        return self.times

    def sample(self, t, n, rng):
        k = self._k(t)
        idx = rng.choice(len(self.weights[k]), size=n, p=self.weights[k])
        return self.particles[k][idx]

    def slice(self, t, n=None, seed=0):
        k = self._k(t)
        return MeasureSlice(self.particles[k], self.weights[k])

    @classmethod
    def from_csv(cls, path):
        """Rows ``t, x_1..x_q[, weight]`` with a header naming a ``weight`` column if present."""
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        has_w = header[-1].strip() == "weight"
        times = np.unique(data[:, 0])
        xs, ws = [], []
        for t in times:
            rows = data[data[:, 0] == t]
            if has_w:
                xs.append(rows[:, 1:-1])
                ws.append(rows[:, -1])
            else:
                xs.append(rows[:, 1:])
        return cls(times, xs, ws if has_w else None)


class LebesgueBoxFlow(MarginalFlow):
    """Stationary Lebesgue measure restricted to a box (sigma-finite mode, truncated)."""

    sigma_finite = True

    def __init__(self, lo, hi, T):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.T = float(T)
        self.dim = self.lo.size
        self.mass = float(np.prod(self.hi - self.lo))

    def density(self, t, x):
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=1)
        return inside.astype(float)

    def nodes(self, t, cells=None, order=4):
        if cells is None:
            cells = [np.linspace(a, b, 33) for a, b in zip(self.lo, self.hi)]
        x, w = tensor_cells(cells, order)
        return x, w * self.density(t, x)

    def sample(self, t, n, rng):
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def slice(self, t, n=4096, seed=0):
        pts = self.sample(t, n, np.random.default_rng(seed))
        return MeasureSlice(pts, np.full(n, self.mass / n))

    def mass_box(self, coverage=0.999, n_times=9):
        return self.lo.copy(), self.hi.copy()


def spacetime_quadrature(flow: MarginalFlow, f, times=None, cells=None, order=4):
    """Approximate the double integral of f(t, x) against mu_t(dx) dt.

    Time: composite Simpson on the flow's slice grid (or ``times``).  Space:
    Gauss-Hermite for Gaussian flows, cell sums for grids, particle averages
    for empirical flows.
    """
    times = flow.quadrature_times() if times is None else np.asarray(times, dtype=float)
    vals = np.empty(times.size)
    for i, t in enumerate(times):
        x, w = flow.nodes(float(t), cells=cells, order=order)
        fx = np.asarray(f(float(t), x), dtype=float)
        fx = np.broadcast_to(fx, (x.shape[0],))
        bad = ~np.isfinite(fx)
        if bad.any():
            j = int(np.argmax(bad))
            raise QuadratureError(f"integrand not finite at node t={t:.6g}, x={x[j].tolist()}")
        vals[i] = w @ fx
    if times.size == 1:
        return float(vals[0]) * flow.T
    return float(integrate.simpson(vals, x=times))


def w1_slice_distance(a: MeasureSlice, b: MeasureSlice, n_directions=64, seed=0):
    """W1 between two slices; exact quantile coupling in 1D, sliced-W1 otherwise."""
    if a.points.shape[0] == 0 or b.points.shape[0] == 0:
        raise ValueError("empty slice")
    if a.dim != b.dim:
        raise ValueError("slices differ in dimension")
    if a.dim == 1:
        return float(stats.wasserstein_distance(a.points[:, 0], b.points[:, 0], a.weights, b.weights))
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_directions, a.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([stats.wasserstein_distance(a.points @ d, b.points @ d, a.weights, b.weights)
                          for d in dirs]))


def flow_from_ensemble(ensemble, slice_times) -> EmpiricalFlow:
    """Empirical flow from the ensemble's states at the recorded times nearest to ``slice_times``."""
    slice_times = np.asarray(slice_times, dtype=float)
    if np.any(slice_times < -1e-12) or np.any(slice_times > ensemble.times[-1] + 1e-12):
        raise ValueError("slice times outside [0, T]")
    parts = [ensemble.at(t) for t in slice_times]
    times = np.array([ensemble.times[int(np.argmin(np.abs(ensemble.times - t)))] for t in slice_times])
    return EmpiricalFlow(times, parts)


def simpson_weights(times):
    """Composite Simpson weights on an arbitrary increasing grid."""
    times = np.asarray(times, dtype=float)
    if times.size == 1:
        return np.ones(1)
    return integrate.simpson(np.eye(times.size), x=times, axis=1)


def default_slice_times(T, n=DEFAULT_SLICES):
    return np.linspace(0.0, T, n)


def continuity_constant(flow: MarginalFlow, times=None, n=4096):
    """max over adjacent slices of W1(mu_s, mu_t) / (t - s); a weak-continuity proxy."""
    times = default_slice_times(flow.T) if times is None else np.asarray(times, dtype=float)
    sl = [flow.slice(float(t), n=n, seed=0) for t in times]
    ratios = [w1_slice_distance(a, b) / (t1 - t0) for a, b, t0, t1 in zip(sl, sl[1:], times, times[1:])]
    return float(max(ratios))


def initial_consistency(flow: MarginalFlow, m0, n=20_000, seed=0):
    """(W1(mu_0, samples of m0), sampling threshold); the distance should stay below the threshold.

    The threshold is 4 sqrt(tr Cov / n), a generous multiple of the
    n^(-1/2) fluctuation of an empirical W1.
    """
    pts = m0.sample(np.random.default_rng(seed), n)
    s0 = flow.slice(0.0, n=n, seed=seed + 1)
    d = w1_slice_distance(MeasureSlice.uniform(pts), s0)
    spread = np.sqrt(np.trace(np.atleast_2d(s0.cov())))
    return float(d), float(4.0 * max(spread, 1e-12) / np.sqrt(n) + 1e-12)
