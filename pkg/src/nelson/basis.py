"""Finite-dimensional test functions w(t, x) = sum_k theta_k phi_k(t, x) and the Orlicz norm.

Elements are tensor products of a cubic B-spline in time with a tensor
product of 1D spatial functions (cardinal cubic B-splines supported inside a
box, or Gaussian bumps).  Coefficients are stored time-major: index
``k = i_t * M_space + i_space`` with the spatial index in C order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import bisect

from .diffusion import DiffusionSpec, apply_generator
from .marginals import MarginalFlow, simpson_weights

BOX_COVERAGE = 0.999
BOX_PAD_KNOTS = 3


class NotInOrliczSpace(ValueError):
    pass


class SpaceBasis1D:
    """Uniform 1D functions on ``[lo, hi]`` with ``n_knots`` equispaced knots.

    ``bspline``: cardinal cubic B-splines whose whole support lies inside the
    interval (``n_knots - 4`` functions).  ``rbf``: Gaussian bumps of width
    one knot spacing centred on the interior knots.
    """

    def __init__(self, lo, hi, n_knots, kind="bspline"):
        if n_knots < 5:
            raise ValueError("need at least 5 spatial knots")
        self.lo, self.hi, self.n_knots, self.kind = float(lo), float(hi), int(n_knots), kind
        self.h = (self.hi - self.lo) / (self.n_knots - 1)
        if kind == "bspline":
            self.centers = self.lo + (np.arange(self.n_knots - 4) + 2) * self.h
        elif kind == "rbf":
            self.centers = self.lo + np.arange(1, self.n_knots - 1) * self.h
        else:
            raise ValueError(f"unknown basis kind {kind!r}")

    @property
    def size(self):
        return self.centers.size

    @property
    def edges(self):
        return np.linspace(self.lo, self.hi, self.n_knots)

    def eval(self, x, deriv=2):
        """Values and first/second derivatives, each ``(n, size)``."""
        s = (np.asarray(x, dtype=float)[:, None] - self.centers) / self.h
        h = self.h
        if self.kind == "rbf":
            e = np.exp(-0.5 * s * s)
            return e, -s * e / h, (s * s - 1.0) * e / h ** 2
        return self._local_bspline(np.asarray(x, dtype=float), deriv)

    def local(self, x):
        """Cardinal B-splines in compact form.

        Returns ``cols (n, 4)``, a validity mask and values / first / second
        derivatives ``(n, 4)`` of the four splines that can be nonzero at each
        point.  On cell j these are m = j-3 .. j, taking pieces 3 .. 0.
        """
        M = self.size
        pos = (x - self.lo) / self.h
        inside = (pos >= 0.0) & (pos < self.n_knots - 1)
        j = np.clip(np.floor(pos).astype(int), 0, self.n_knots - 2)
        u = pos - j
        w = 1.0 - u
        u2, u3 = u * u, u * u * u
        v = np.empty((x.size, 4))
        d1 = np.empty((x.size, 4))
        d2 = np.empty((x.size, 4))
        v[:, 0], v[:, 1], v[:, 2], v[:, 3] = w * w * w, 3 * u3 - 6 * u2 + 4, -3 * u3 + 3 * u2 + 3 * u + 1, u3
        v /= 6.0
        d1[:, 0], d1[:, 1], d1[:, 2], d1[:, 3] = -w * w, 3 * u2 - 4 * u, -3 * u2 + 2 * u + 1, u2
        d1 /= 2.0 * self.h
        d2[:, 0], d2[:, 1], d2[:, 2], d2[:, 3] = w, 3 * u - 2, 1 - 3 * u, u
        d2 /= self.h ** 2
        cols = j[:, None] - 3 + np.arange(4)
        ok = inside[:, None] & (cols >= 0) & (cols < M)
        v[~ok] = 0.0
        d1[~ok] = 0.0
        d2[~ok] = 0.0
        return np.clip(cols, 0, M - 1), ok, v, d1, d2

    def _local_bspline(self, x, deriv):
        cols, ok, v, d1, d2 = self.local(x)
        n, M = x.size, self.size
        rows = np.broadcast_to(np.arange(n)[:, None], cols.shape)

        def scatter(vals):
            out = np.zeros((n, M))
            out[rows[ok], cols[ok]] = vals[ok]
            return out

        if deriv == 0:
            return scatter(v), None, None
        return scatter(v), scatter(d1), scatter(d2)


class TimeBasis:
    """Clamped cubic B-splines on ``[0, T]`` with ``n_knots`` breakpoints.

    ``boundary="vanishing"`` drops the first and last function so that every
    element is zero at t = 0 and t = T; ``"free"`` keeps them.
    """

    def __init__(self, T, n_knots, boundary="free"):
        if n_knots < 2:
            raise ValueError("need at least 2 time knots")
        if boundary not in ("free", "vanishing"):
            raise ValueError(f"unknown time boundary mode {boundary!r}")
        self.T, self.n_knots, self.boundary = float(T), int(n_knots), boundary
        brk = np.linspace(0.0, self.T, self.n_knots)
        self.knots = np.concatenate([[0.0] * 3, brk, [self.T] * 3])
        n_all = self.knots.size - 4
        self._keep = slice(1, n_all - 1) if boundary == "vanishing" else slice(0, n_all)
        self._spl = BSpline(self.knots, np.eye(n_all), 3, extrapolate=False)
        self._dspl = self._spl.derivative()
        self.breaks = brk

    @property
    def size(self):
        return len(range(*self._keep.indices(self.knots.size - 4)))

    def eval(self, t):
        """Values and time derivatives at scalar or vector ``t``: ``(..., size)``."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.T)
        v = np.nan_to_num(self._spl(t))[..., self._keep]
        d = np.nan_to_num(self._dspl(t))[..., self._keep]
        return v, d


@dataclass
class TestFunctionBasis:
    """Tensor basis on ``[0, T] x box``."""

    __test__ = False

    T: float
    box_lo: np.ndarray
    box_hi: np.ndarray
    time_knots: int = 12
    space_knots: int = 16
    kind: str = "bspline"
    time_boundary: str = "free"
    time: TimeBasis = field(init=False, repr=False)
    space: list = field(init=False, repr=False)

    def __post_init__(self):
        self.box_lo = np.atleast_1d(np.asarray(self.box_lo, dtype=float))
        self.box_hi = np.atleast_1d(np.asarray(self.box_hi, dtype=float))
        if np.any(self.box_hi <= self.box_lo):
            raise ValueError("empty basis box")
        self.time = TimeBasis(self.T, self.time_knots, self.time_boundary)
        self.space = [SpaceBasis1D(a, b, self.space_knots, self.kind)
                      for a, b in zip(self.box_lo, self.box_hi)]

    @classmethod
    def for_flow(cls, flow: MarginalFlow, time_knots=12, space_knots=16, kind="bspline",
                 time_boundary="free", box=None):
        """Box holding 99.9% of the mass at every slice, padded by at least three knot spacings.

        The knot grid is shifted so that a knot sits on the time-averaged
        centre of the flow.
        """
        if box is None or box == "auto":
            lo, hi = flow.mass_box(BOX_COVERAGE)
            centre = np.mean([flow.slice(t, n=2048, seed=1).mean()
                              for t in np.linspace(0.0, flow.T, 9)], axis=0)
            # one spare cell so that a knot can sit on the flow's centre
            pad = min(BOX_PAD_KNOTS, (space_knots - 3) // 2)
            h = (hi - lo) / (space_knots - 2 - 2 * pad)
            first = centre + h * np.floor((lo - pad * h - centre) / h)
            lo, hi = first, first + (space_knots - 1) * h
        return cls(flow.T, lo, hi, time_knots, space_knots, kind, time_boundary)

    @property
    def dim(self):
        return self.box_lo.size

    @property
    def space_shape(self):
        return tuple(s.size for s in self.space)

    @property
    def space_size(self):
        return int(np.prod(self.space_shape))

    @property
    def size(self):
        return self.time.size * self.space_size

    @property
    def space_cells(self):
        return [s.edges for s in self.space]

    def inside(self, x):
        return np.all((x >= self.box_lo) & (x <= self.box_hi), axis=1)

    # -- dense spatial design matrices ---------------------------------------
    def space_design(self, x, hessian=True):
        """Spatial values ``(n, M)``, gradients ``(n, q, M)`` and Hessians ``(n, q, q, M)``."""
        x = np.atleast_2d(x)
        n, q = x.shape
        per = [s.eval(x[:, j]) for j, s in enumerate(self.space)]

        def tensor(factors):
            out = factors[0]
            for f in factors[1:]:
                out = (out[:, :, None] * f[:, None, :]).reshape(n, -1)
            return out

        vals = tensor([p[0] for p in per])
        grads = np.empty((n, q, vals.shape[1]))
        for j in range(q):
            grads[:, j] = tensor([per[i][1] if i == j else per[i][0] for i in range(q)])
        hess = None
        if hessian:
            hess = np.empty((n, q, q, vals.shape[1]))
            for i in range(q):
                for j in range(i, q):
                    if i == j:
                        fs = [per[k][2] if k == i else per[k][0] for k in range(q)]
                    else:
                        fs = [per[k][1] if k in (i, j) else per[k][0] for k in range(q)]
                    hess[:, i, j] = tensor(fs)
                    hess[:, j, i] = hess[:, i, j]
        return vals, grads, hess

    def coeff_matrix(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"theta has length {theta.size}, basis has {self.size}")
        return theta.reshape(self.time.size, self.space_size)

    def to_dict(self):
        return {"T": self.T, "box_lo": self.box_lo.tolist(), "box_hi": self.box_hi.tolist(),
                "time_knots": self.time_knots, "space_knots": self.space_knots, "kind": self.kind,
                "time_boundary": self.time_boundary}

    @classmethod
    def from_dict(cls, d):
        return cls(d["T"], d["box_lo"], d["box_hi"], d["time_knots"], d["space_knots"],
                   d.get("kind", "bspline"), d.get("time_boundary", "free"))


def _time_coeffs(basis, theta, t):
    bt, dbt = basis.time.eval(float(t))
    C = basis.coeff_matrix(theta)
    return bt @ C, dbt @ C


def eval_w(basis: TestFunctionBasis, theta, t, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c, _ = _time_coeffs(basis, theta, t)
    v, _, _ = basis.space_design(x, hessian=False)
    return np.where(basis.inside(x), v @ c, 0.0)


def eval_grad_w(basis: TestFunctionBasis, theta, t, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c, _ = _time_coeffs(basis, theta, t)
    if basis.kind == "bspline":
        return _grad_local(basis, c, x)
    _, g, _ = basis.space_design(x, hessian=False)
    return np.where(basis.inside(x)[:, None], g @ c, 0.0)


def _grad_local(basis, c, x):
    # gather the 4^q active coefficients per point instead of dense designs
    q = x.shape[1]
    C = c.reshape(basis.space_shape)
    loc = [s.local(x[:, j]) for j, s in enumerate(basis.space)]
    out = np.zeros_like(x)
    for combo in np.ndindex(*([4] * q)):
        coef = C[tuple(loc[j][0][:, combo[j]] for j in range(q))]
        vals = [loc[j][2][:, combo[j]] for j in range(q)]
        ders = [loc[j][3][:, combo[j]] for j in range(q)]
        for i in range(q):
            term = coef.copy()
            for j in range(q):
                term *= ders[j] if j == i else vals[j]
            out[:, i] += term
    return out


def eval_Lt_w(basis: TestFunctionBasis, theta, spec: DiffusionSpec, t, x):
    """L_t w at (t, x), with the Hessian contraction delegated to the generator."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c, dc = _time_coeffs(basis, theta, t)
    v, g, h = basis.space_design(x)
    inside = basis.inside(x)
    out = apply_generator(spec, v @ dc, g @ c, h @ c, t, x)
    return np.where(inside, out, 0.0)


def coverage(basis: TestFunctionBasis, x):
    """Fraction of points lying inside the basis box."""
    return float(np.mean(basis.inside(np.atleast_2d(x))))


# -- Luxemburg norm ------------------------------------------------------------

def collect_nodes(flow: MarginalFlow, times=None, cells=None, order=4):
    """Flattened space-time quadrature: times ``(N,)``, points ``(N, q)``, weights ``(N,)``."""
    times = flow.quadrature_times() if times is None else np.asarray(times, dtype=float)
    tw = simpson_weights(times) if times.size > 1 else np.array([flow.T])
    ts, xs, ws = [], [], []
    for t, a in zip(times, tw):
        x, w = flow.nodes(float(t), cells=cells, order=order)
        ts.append(np.full(x.shape[0], t))
        xs.append(x)
        ws.append(a * w)
    return np.concatenate(ts), np.concatenate(xs), np.concatenate(ws)


def _orlicz_modular(spec, cost, nodes, psi):
    ts, xs, ws = nodes
    z = np.empty_like(xs)
    for t in np.unique(ts):
        m = ts == t
        val = np.asarray(psi(float(t), xs[m]), dtype=float).reshape(-1, xs.shape[1])
        z[m] = spec.sigma_T_apply(float(t), xs[m], val)
    if not np.all(np.isfinite(z)):
        raise NotInOrliczSpace("field is not finite on the flow support")

    def modular(ell):
        with np.errstate(over="ignore"):
            out = 0.0
            for t in np.unique(ts):
                m = ts == t
                out += ws[m] @ cost.g(float(t), xs[m], z[m] / ell)
            return out

    return modular, z


def luxemburg_norm(flow: MarginalFlow, spec: DiffusionSpec, cost, psi: Callable, *, nodes=None,
                   rtol=1e-8, cap=1e12):
    """inf{l > 0 : double integral of g(sigma' psi / l) <= 1}, by bisection."""
    nodes = collect_nodes(flow) if nodes is None else nodes
    modular, z = _orlicz_modular(spec, cost, nodes, psi)
    if not np.any(z):
        return 0.0
    lo, hi = 1.0, 1.0
    while not modular(hi) <= 1.0:
        hi *= 2.0
        if hi > cap:
            raise NotInOrliczSpace(f"modular exceeds 1 for every scale up to {cap:g}; field not in L^g")
    while modular(lo) <= 1.0 and lo > 1e-300:
        lo *= 0.5
    if hi == lo:
        hi = 2 * lo
    return float(bisect(lambda ell: modular(ell) - 1.0, lo, hi, xtol=1e-300, rtol=max(rtol, 4e-16),
                        maxiter=2000))


# -- solutions -------------------------------------------------------------------

@dataclass
class DualSolution:
    """Optimal coefficients with their certificate."""

    basis: TestFunctionBasis
    theta: np.ndarray
    dual_value: float
    grad_norm_at_opt: float
    tol_foc: float
    converged: bool = True
    iterations: int = 0
    luxemburg_norm_psi: Optional[float] = None
    energy_value: Optional[float] = None
    log: list = field(default_factory=list, repr=False)

    def psi(self, t, x):
        return eval_grad_w(self.basis, self.theta, t, x)

    def w(self, t, x):
        return eval_w(self.basis, self.theta, t, x)

    def to_dict(self):
        return {"theta": np.asarray(self.theta).tolist(), "basis": self.basis.to_dict(),
                "dual_value": self.dual_value, "grad_norm": self.grad_norm_at_opt,
                "tol_foc": self.tol_foc, "converged": self.converged, "iterations": self.iterations,
                "luxemburg_norm_psi": self.luxemburg_norm_psi, "energy_value": self.energy_value}

    @classmethod
    def from_dict(cls, d):
        return cls(TestFunctionBasis.from_dict(d["basis"]), np.asarray(d["theta"], dtype=float),
                   d["dual_value"], d["grad_norm"], d.get("tol_foc", np.inf), d.get("converged", True),
                   d.get("iterations", 0), d.get("luxemburg_norm_psi"), d.get("energy_value"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
