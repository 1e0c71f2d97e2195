"""Generalized entropy densities g*, their convex conjugates g and gradients.

All evaluators are vectorised: ``t`` is a scalar or an array broadcastable to
the leading dimension of ``x``; ``x`` and ``y``/``z`` have shape ``(n, q)``.
Return values have shape ``(n,)`` (scalars) or ``(n, q)`` (gradients).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

ScalarField = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_BRACKET_WIDTH = 1e-10
_MAX_DOUBLINGS = 200
_MAX_GOLDEN_ITER = 400


class CostError(ValueError):
    pass


class ConjugationError(RuntimeError):
    """Numerical conjugation did not converge."""

    def __init__(self, message, bracket_width):
        super().__init__(f"{message} (achieved bracket width {bracket_width:.3e})")
        self.bracket_width = bracket_width


def _as_points(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _field_values(fld: ScalarField, t, x):
    if callable(fld):
        return np.broadcast_to(np.asarray(fld(t, x), dtype=float), (x.shape[0],))
    return np.full(x.shape[0], float(fld))


def _check_exponent(p):
    if not float(p) > 1.0:
        raise CostError(f"growth exponent p must exceed 1, got {p}")


def _norm(v):
    """Row norms without underflow for tiny entries."""
    if v.shape[1] == 1:
        return np.abs(v[:, 0])
    m = np.max(np.abs(v), axis=1)
    safe = np.where(m > 0, m, 1.0)
    return m * np.sqrt(np.sum((v / safe[:, None]) ** 2, axis=1))


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[0]
        raise CostError(f"non-finite {name} at index {tuple(int(i) for i in bad)}")


@dataclass(frozen=True)
class CostFunction:
    """A generalized entropy density g*(t, x, y) and its witnesses.

    ``kind`` is one of ``quadratic`` (g* = |y|^2/2), ``power``
    (g* = R(t,x)|y|^p), ``power_log`` (g* = R(t,x)|y|^p (1 + |log|y||)) or
    ``custom``.  Custom densities are conjugated numerically; they are radial
    (a function of |y| only) unless ``radial=False``.
    """

    kind: str
    p: float = 2.0
    scale: ScalarField = 1.0
    gstar_fn: Optional[Callable] = field(default=None, compare=False)
    radial: bool = True
    doubling_C: Optional[float] = None
    doubling_h: ScalarField = 0.0
    ell: Optional[float] = None
    H: ScalarField = 0.0

    def __post_init__(self):
        if self.kind not in ("quadratic", "power", "power_log", "custom"):
            raise CostError(f"unknown cost kind {self.kind!r}")
        _check_exponent(self.p)
        if self.kind == "custom" and self.gstar_fn is None:
            raise CostError("custom cost needs gstar_fn")
        if self.kind == "quadratic" and self.p != 2.0:
            raise CostError("quadratic cost has p = 2")
        if self.doubling_C is not None and not self.doubling_C > 1.0:
            raise CostError("doubling constant C must exceed 1")
        if self.ell is not None and not self.ell > 1.0:
            raise CostError("ell must exceed 1")

    # -- constructors -----------------------------------------------------
    @classmethod
    def quadratic(cls):
        return cls("quadratic", p=2.0, doubling_C=4.0, ell=2.0)

    @classmethod
    def power(cls, p, scale: ScalarField = 1.0):
        _check_exponent(p)
        return cls("power", p=float(p), scale=scale, doubling_C=2.0 ** p,
                   ell=4.0 ** (1.0 / (p - 1.0)))

    @classmethod
    def power_log(cls, p, scale: ScalarField = 1.0):
        _check_exponent(p)
        return cls("power_log", p=float(p), scale=scale,
                   doubling_C=2.0 ** p * (1.0 + math.log(2.0)),
                   ell=_power_log_ell(p))

    @classmethod
    def custom(cls, gstar_fn, p_growth=2.0, radial=True, **witnesses):
        return cls("custom", p=float(p_growth), gstar_fn=gstar_fn, radial=radial,
                   **witnesses)

    @property
    def conjugate_exponent(self):
        return self.p / (self.p - 1.0)

    @property
    def has_closed_form(self):
        return self.kind in ("quadratic", "power")

    # -- g* ---------------------------------------------------------------
    def gstar(self, t, x, y):
        x = _as_points(x)
        y = _as_points(y)
        _check_finite("y", y)
        r = _norm(y)
        if self.kind == "quadratic":
            return 0.5 * r ** 2
        if self.kind == "power":
            return _field_values(self.scale, t, x) * r ** self.p
        if self.kind == "power_log":
            with np.errstate(divide="ignore", invalid="ignore"):
                logterm = np.where(r > 0, np.abs(np.log(np.where(r > 0, r, 1.0))), 0.0)
            return _field_values(self.scale, t, x) * r ** self.p * (1.0 + logterm)
        out = np.asarray(self.gstar_fn(t, x, y), dtype=float)
        return np.broadcast_to(out, (y.shape[0],)).copy()

    # -- g ----------------------------------------------------------------
    def g(self, t, x, z):
        x = _as_points(x)
        z = _as_points(z)
        _check_finite("z", z)
        r = _norm(z)
        if self.kind == "quadratic":
            return 0.5 * r ** 2
        if self.kind == "power":
            R = _field_values(self.scale, t, x)
            p, q = self.p, self.conjugate_exponent
            return (p - 1.0) / p * (R * p) ** (-1.0 / (p - 1.0)) * r ** q
        if self.radial:
            return self._radial_conjugate(t, x, r)[0]
        return self._coordinate_conjugate(t, x, z)

    def grad_g(self, t, x, z):
        x = _as_points(x)
        z = _as_points(z)
        _check_finite("z", z)
        if self.kind == "quadratic":
            return z.copy()
        r = _norm(z)
        if self.kind == "power":
            R = _field_values(self.scale, t, x)
            p, q = self.p, self.conjugate_exponent
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(r > 0, (R * p) ** (-1.0 / (p - 1.0)) * r ** (q - 2.0), 0.0)
            return fac[:, None] * z
        if self.radial:
            # radial g: grad = g'(|z|) z/|z|, g'(|z|) = argmax radius
            rstar = self._radial_conjugate(t, x, r)[1]
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(r > 0, rstar / np.where(r > 0, r, 1.0), 0.0)
            return fac[:, None] * z
        return self._fd_gradient(t, x, z)

    # -- numerical conjugation ---------------------------------------------
    def _profile(self, t, x, rad, direction):
        return self.gstar(t, x, rad[:, None] * direction)

    def _radial_conjugate(self, t, x, r):
        """sup_{rho >= 0} rho |z| - g*(rho e); returns (value, argmax)."""
        n = r.shape[0]
        e = np.zeros((n, x.shape[1]))
        e[:, 0] = 1.0

        def h(rho):
            return rho * r - self._profile(t, x, rho, e)

        hi = np.ones(n)
        h_hi = h(hi)
        h_2hi = h(2.0 * hi)
        active = h_2hi > h_hi
        for _ in range(_MAX_DOUBLINGS):
            if not active.any():
                break
            hi = np.where(active, 2.0 * hi, hi)
            h_hi = np.where(active, h_2hi, h_hi)
            h_2hi = h(2.0 * hi)
            active = h_2hi > h_hi
        else:
            raise ConjugationError("could not bracket conjugate maximiser", float(hi.max()))
        a = np.zeros(n)
        b = 2.0 * hi
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        hc, hd = h(c), h(d)
        for _ in range(_MAX_GOLDEN_ITER):
            if np.all(b - a <= _BRACKET_WIDTH * np.maximum(1.0, b)):
                break
            left = hc >= hd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            new_c = b - _GOLDEN * (b - a)
            new_d = a + _GOLDEN * (b - a)
            # reuse one interior point per element
            c, d = np.where(left, new_c, d), np.where(left, c, new_d)
            hc, hd = np.where(left, h(c), hd), np.where(left, hc, h(d))
        else:
            raise ConjugationError("golden-section search did not converge",
                                   float(np.max(b - a)))
        rho = 0.5 * (a + b)
        val = np.maximum(h(rho), 0.0)
        return np.where(r > 0, val, 0.0), np.where(r > 0, rho, 0.0)

    def _coordinate_conjugate(self, t, x, z, sweeps=200):
        """Alternating coordinate ascent for non-radial densities (approximate)."""
        n, q = z.shape
        out = np.empty(n)
        for i in range(n):
            ti = t if np.ndim(t) == 0 else np.asarray(t).reshape(-1)[i]
            xi, zi = x[i:i + 1], z[i]
            y = np.zeros(q)

            def obj(yv):
                return float(zi @ yv - self.gstar(ti, xi, yv[None, :])[0])

            best = obj(y)
            for _ in range(sweeps):
                prev = best
                for k in range(q):
                    y[k] = _line_max(lambda s: obj(_with(y, k, s)), y[k])
                best = obj(y)
                if best - prev <= 1e-15 * max(1.0, abs(best)):
                    break
            out[i] = max(best, 0.0)
        return out

    def _fd_gradient(self, t, x, z):
        n, q = z.shape
        grad = np.empty_like(z)
        for k in range(q):
            step = 6e-6 * np.maximum(1.0, np.abs(z[:, k]))
            zp, zm = z.copy(), z.copy()
            zp[:, k] += step
            zm[:, k] -= step
            grad[:, k] = (self.g(t, x, zp) - self.g(t, x, zm)) / (2.0 * step)
        return grad


def _power_log_ell(p):
    # the log factor can shrink by 1 + log(ell) under y -> ell y
    ell = 4.0 ** (1.0 / (p - 1.0))
    while ell ** (p - 1.0) < 2.0 * (1.0 + math.log(ell)):
        ell *= 2.0
    return ell


def _with(y, k, s):
    out = y.copy()
    out[k] = s
    return out


def _line_max(f, s0):
    """Maximise a concave scalar function starting near s0."""
    step = 1.0
    lo, hi = s0 - step, s0 + step
    for _ in range(_MAX_DOUBLINGS):
        if f(hi) >= f(hi - 1e-3 * step):
            hi += step
            step *= 2.0
        elif f(lo) >= f(lo + 1e-3 * step):
            lo -= step
            step *= 2.0
        else:
            break
    else:
        raise ConjugationError("could not bracket coordinate maximiser", hi - lo)
    a, b = lo, hi
    while b - a > _BRACKET_WIDTH * max(1.0, abs(b)):
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        if f(c) >= f(d):
            b = d
        else:
            a = c
    return 0.5 * (a + b)


# -- module-level API mirrors the method names ---------------------------------

def eval_gstar(cost: CostFunction, t, x, y):
    return cost.gstar(t, x, y)


def eval_g(cost: CostFunction, t, x, z):
    return cost.g(t, x, z)


def grad_g(cost: CostFunction, t, x, z):
    return cost.grad_g(t, x, z)


@dataclass
class ValidationReport:
    checks: dict = field(default_factory=dict)

    def add(self, name, passed, detail=""):
        self.checks[name] = {"pass": None if passed is None else bool(passed), "detail": detail}

    @property
    def passed(self):
        return all(c["pass"] for c in self.checks.values() if c["pass"] is not None)

    def failed(self):
        return [k for k, c in self.checks.items() if c["pass"] is False]

    def to_dict(self):
        return {"pass": self.passed, "checks": self.checks}


def validate_assumption_C(cost: CostFunction, flow, n_samples=64, seed=0) -> ValidationReport:
    """Probe the growth, symmetry and convexity conditions on sampled points.

    Failures are recorded in the report; nothing is raised.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    ts = rng.uniform(0.0, flow.T, n_samples)
    x = np.concatenate([flow.sample(float(ti), 1, rng) for ti in ts])
    q = x.shape[1]
    dirs = rng.standard_normal((n_samples, q))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), n_samples))
    y = radii[:, None] * dirs
    rep = ValidationReport()

    def gs(yy):
        return cost.gstar(ts, x, yy)

    vals = gs(y)
    zero = gs(np.zeros_like(y))
    rep.add("zero_at_zero", np.all(zero == 0.0) and np.all(vals > 0.0),
            f"max g*(0)={zero.max():.3e}, min g*(y!=0)={vals.min():.3e}")
    rep.add("nonnegative", np.all(vals >= 0.0), f"min={vals.min():.3e}")
    diff = np.abs(gs(-y) - vals)
    rep.add("even", np.all(diff <= 1e-12 * np.maximum(1.0, np.abs(vals))),
            f"max |g*(-y)-g*(y)|={diff.max():.3e}")

    y2 = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), n_samples))[:, None] * \
        rng.standard_normal((n_samples, q))
    mid = gs(0.5 * (y + y2))
    avg = 0.5 * (vals + gs(y2))
    gapc = avg - mid
    rep.add("strictly_convex_midpoint", np.all(gapc > 0.0), f"min gap={gapc.min():.3e}")

    # superlinear growth at infinity, relative to |y|^p
    big = [1e2, 1e3, 1e4]
    ratios = [float(np.min(gs(r * dirs) / r ** cost.p)) for r in big]
    rep.add("growth_at_infinity", ratios[-1] > 0.0 and ratios[-1] >= 0.5 * ratios[0],
            f"min g*/|y|^p at |y|={big}: {ratios}")
    small = [1.0, 1e-4, 1e-8]
    sr = [float(np.max(gs(r * dirs) / r)) for r in small]
    rep.add("sublinear_at_zero", sr[2] < sr[1] < sr[0] and sr[2] < 0.5 * sr[0],
            f"max g*/|y| at |y|={small}: {sr}")

    if cost.doubling_C is not None:
        h = _field_values(cost.doubling_h, ts, x)
        lhs = gs(2.0 * y)
        rhs = cost.doubling_C * vals + h
        ok = np.all(lhs <= rhs * (1.0 + 1e-12))
        rep.add("doubling", ok, f"max (lhs - rhs)={float(np.max(lhs - rhs)):.3e}, C={cost.doubling_C}")
    else:
        rep.add("doubling", None, "no witness C supplied; not checked")
    if cost.ell is not None:
        H = _field_values(cost.H, ts, x)
        rhs = gs(cost.ell * y) / (2.0 * cost.ell) + H
        ok = np.all(vals <= rhs * (1.0 + 1e-12))
        rep.add("ell_condition", ok, f"max (lhs - rhs)={float(np.max(vals - rhs)):.3e}, ell={cost.ell}")
    else:
        rep.add("ell_condition", None, "no witness ell supplied; not checked")
    return rep
