"""Worked examples with independent oracles.

* Gaussian flows N(0, s(t)^2) for Brownian motion, whose optimal drift is
  linear, c(t) x with c = (d s^2/dt - 1) / (2 s^2).
* Bessel(delta) processes and the sign-flipped process Y built from them.
* The curl obstruction to a cost-independent optimiser in two dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import sympy as sp
from scipy import integrate

from .cost import CostFunction
from .diffusion import CHUNK_SIZE, DiffusionSpec, InitialLaw, chunk_rng
from .marginals import GaussianFlow

_t = sp.Symbol("t", real=True)


class CatalogError(ValueError):
    pass


# -- Gaussian flows -------------------------------------------------------------------

@dataclass
class GaussianCase:
    spec: DiffusionSpec
    flow: GaussianFlow
    variance: Callable
    c: Callable
    oracle_value: float
    expression: str

    def oracle_drift(self, t, x):
        return self.c(t) * x


def gaussian_entropic_case(variance="(1 + t)**2", T=1.0, dim=1, dvariance: Optional[Callable] = None):
    """Brownian reference (b = 0, sigma = I) with prescribed marginals N(0, s(t)^2 I).

    ``variance`` is a sympy-parsable expression in ``t`` (differentiated
    symbolically) or a callable together with ``dvariance``.
    """
    if callable(variance):
        if dvariance is None:
            raise CatalogError("a callable variance needs its derivative dvariance")
        v, dv = variance, dvariance
        expr = getattr(variance, "__name__", "callable")
    else:
        e = sp.sympify(variance, locals={"t": _t})
        v = sp.lambdify(_t, e, "numpy")
        dv = sp.lambdify(_t, sp.diff(e, _t), "numpy")
        expr = str(e)
    grid = np.linspace(0.0, T, 1001)
    vals = np.broadcast_to(np.asarray(v(grid), dtype=float), grid.shape)
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
        raise CatalogError("variance path must stay positive on [0, T]")

    def c(t):
        return (dv(t) - 1.0) / (2.0 * v(t))

    value = dim * integrate.quad(lambda s: c(s) ** 2 * v(s) / 2.0, 0.0, T, epsabs=1e-13, epsrel=1e-12)[0]
    flow = GaussianFlow.isotropic(lambda s: float(v(s)), T, dim)
    spec = DiffusionSpec(dim, T, InitialLaw.gaussian(np.zeros(dim), float(v(0.0)) * np.eye(dim)))
    return GaussianCase(spec, flow, lambda s: float(v(s)), c, float(value), expr)


# -- Bessel processes ----------------------------------------------------------------

DEFAULT_CLIP = 1.0


@dataclass
class BesselCase:
    delta: float
    p: float
    T: float
    x0: float = 1.0

    @property
    def nu(self):
        return self.delta / 2.0 - 1.0

    @property
    def p_max(self):
        return 2.0 * self.nu + 2.0

    @property
    def admissible(self):
        return 1.0 < self.p < self.p_max

    @property
    def q(self):
        return self.p / (self.p - 1.0)

    def cost(self):
        """g*(y) = |y|^p / p, so that grad g(z) = sign(z) |z|^(q-1)."""
        return CostFunction.power(self.p, 1.0 / self.p)

    def drift(self, x, clip=0.0):
        return (self.delta - 1.0) / (2.0 * np.maximum(np.abs(x), clip))

    def psi(self, t, x):
        """Closed-form dual optimiser -((delta-1)/(2|x|))^(1/(q-1)) sign(x)."""
        x = np.asarray(x, dtype=float)
        return -((self.delta - 1.0) / (2.0 * np.abs(x))) ** (1.0 / (self.q - 1.0)) * np.sign(x)

    def spec(self, clip_radius=0.0):
        def b(t, x):
            return self.drift(x, clip_radius)
        return DiffusionSpec(1, self.T, InitialLaw.dirac([self.x0]), b=b, reflect=True)


def bessel_case(delta, p=1.2, T=1.0, x0=1.0) -> BesselCase:
    if not 1.0 < delta < 2.0:
        raise CatalogError(f"delta must lie in (1, 2), got {delta}")
    if not p > 1.0:
        raise CatalogError("p must exceed 1")
    return BesselCase(float(delta), float(p), float(T), float(x0))


@dataclass
class BesselYEnsemble:
    """Bessel paths X (recorded every ``stride`` steps) with hitting data for Y.

    ``tau`` is the first grid time with X <= clip radius (inf if none),
    ``x_half`` the state at the grid time nearest tau/2, and ``flip`` the
    sign sign(X_{tau/2} - 1) applied to X from tau on.
    """

    times: np.ndarray
    x_paths: np.ndarray
    tau: np.ndarray
    x_half: np.ndarray
    flip: np.ndarray
    dt: float
    clip_radius: float
    T: float
    running: Optional[np.ndarray] = None

    @property
    def n_paths(self):
        return self.x_paths.shape[0]

    def _k(self, t):
        return int(np.argmin(np.abs(self.times - t)))

    def x_at(self, t):
        return self.x_paths[:, self._k(t)].astype(float)

    def y_at(self, t):
        k = self._k(t)
        x = self.x_paths[:, k].astype(float)
        return np.where(self.times[k] >= self.tau, self.flip * x, x)

    def y_paths(self):
        x = self.x_paths.astype(float)
        after = self.times[None, :] >= self.tau[:, None]
        return np.where(after, self.flip[:, None] * x, x)


def simulate_bessel(case: BesselCase, n_paths=100_000, n_steps=400, seed=0, clip_factor=DEFAULT_CLIP,
                    stride=4, power: Optional[float] = None, track_y=True) -> BesselYEnsemble:
    """Reflected Euler scheme for Bessel(delta) with the drift floored at the clip radius.

    The clip radius is ``clip_factor * sqrt(dt)``.  With ``power`` the
    running integral of max(X, r)^(-power) dt (left-point rule) is
    accumulated.  The full history of each chunk is held in float32 to read
    off X at tau/2.
    """
    if n_steps % stride:
        raise ValueError("stride must divide n_steps")
    dt = case.T / n_steps
    r = clip_factor * np.sqrt(dt)
    kr = np.arange(0, n_steps + 1, stride)
    xs, taus, halves, run = [], [], [], []
    for c in range(-(-n_paths // CHUNK_SIZE)):
        m = min(CHUNK_SIZE, n_paths - c * CHUNK_SIZE)
        rng = chunk_rng(seed, c)
        hist = np.empty((n_steps + 1, m), dtype=np.float32) if track_y else None
        x = np.full(m, case.x0)
        tau_k = np.full(m, -1)
        acc = np.zeros(m)
        rec = np.empty((m, kr.size), dtype=np.float32)
        j = 0
        for k in range(n_steps + 1):
            if track_y:
                hist[k] = x
            if j < kr.size and kr[j] == k:
                rec[:, j] = x
                j += 1
            hit = (tau_k < 0) & (x <= r)
            tau_k[hit] = k
            if k == n_steps:
                break
            xc = np.maximum(x, r)
            if power is not None:
                acc += xc ** (-power) * dt
            x = np.abs(x + (case.delta - 1.0) / (2.0 * xc) * dt + np.sqrt(dt) * rng.standard_normal(m))
        tau = np.where(tau_k >= 0, tau_k * dt, np.inf)
        if track_y:
            kh = np.where(tau_k >= 0, np.rint(tau_k / 2.0).astype(int), 0)
            half = hist[kh, np.arange(m)].astype(float)
            half[tau_k < 0] = np.nan
        else:
            half = np.full(m, np.nan)
        xs.append(rec)
        taus.append(tau)
        halves.append(half)
        run.append(acc)
    tau = np.concatenate(taus)
    x_half = np.concatenate(halves)
    flip = np.where(np.isfinite(tau), np.sign(x_half - 1.0), 1.0)
    flip[flip == 0] = 1.0
    return BesselYEnsemble(kr * dt, np.concatenate(xs), tau, x_half, flip, dt, r, case.T,
                           np.concatenate(run) if power is not None else None)


@dataclass
class IntegrabilityStudy:
    p: float
    steps: list
    estimates: list
    std_errors: list
    relative_change: float
    admissible: bool


def bessel_integrability(case: BesselCase, p, n_paths=100_000, steps=(200, 400), seed=0,
                         clip_factor=DEFAULT_CLIP) -> IntegrabilityStudy:
    """MC estimates of E int_0^T X_t^(-p) dt under step refinement."""
    est, se = [], []
    for n in steps:
        ens = simulate_bessel(case, n_paths, n, seed, clip_factor, stride=n, power=p, track_y=False)
        est.append(float(ens.running.mean()))
        se.append(float(ens.running.std(ddof=1) / np.sqrt(n_paths)))
    rel = (est[-1] - est[0]) / est[0]
    return IntegrabilityStudy(float(p), list(steps), est, se, float(rel), 1.0 < p < case.p_max)


# -- curl obstruction in two dimensions ---------------------------------------------------

def bump(u):
    """(1 - u^2)^3 on [-1, 1] with first and second derivatives."""
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1.0
    w = np.where(inside, 1.0 - u * u, 0.0)
    v = w ** 3
    d1 = np.where(inside, -6.0 * u * w ** 2, 0.0)
    d2 = np.where(inside, -6.0 * w ** 2 + 24.0 * u * u * w, 0.0)
    return v, d1, d2


@dataclass
class ScalarField2D:
    """B(x, y) with derivatives: ``fn(x, y) -> (B, Bx, By, Bxx, Bxy, Byy)``."""

    fn: Callable
    label: str = "custom"

    def __call__(self, x, y):
        return self.fn(x, y)


def separable_bump(ax=1.0, ay=1.0, shift=(0.0, 0.0)):
    def fn(x, y):
        p, p1, p2 = bump((x - shift[0]) / ax)
        q, q1, q2 = bump((y - shift[1]) / ay)
        p1, p2 = p1 / ax, p2 / ax ** 2
        q1, q2 = q1 / ay, q2 / ay ** 2
        return p * q, p1 * q, p * q1, p2 * q, p1 * q1, p * q2
    return ScalarField2D(fn, "separable")


def radial_bump(radius=1.0):
    """(1 - r^2/R^2)^3 inside the disc of radius R."""
    def fn(x, y):
        s = (x * x + y * y) / radius ** 2
        inside = s < 1.0
        w = np.where(inside, 1.0 - s, 0.0)
        rho, rho1, rho2 = w ** 3, -3.0 * w ** 2, 6.0 * w
        rho1, rho2 = np.where(inside, rho1, 0.0), np.where(inside, rho2, 0.0)
        k = 1.0 / radius ** 2
        sx, sy = 2 * x * k, 2 * y * k
        return (rho, rho1 * sx, rho1 * sy, rho2 * sx * sx + rho1 * 2 * k, rho2 * sx * sy,
                rho2 * sy * sy + rho1 * 2 * k)
    return ScalarField2D(fn, "radial")


def zero_field():
    return ScalarField2D(lambda x, y: tuple(np.zeros_like(np.asarray(x, dtype=float)) for _ in range(6)), "zero")


def curl_residual(B: ScalarField2D, x, y):
    """d_x F_2 - d_y F_1 for F = |grad B| grad B (0 where grad B = 0)."""
    _, bx, by, bxx, bxy, byy = B(x, y)
    nrm = np.hypot(bx, by)
    num = by * (bx * bxx + by * bxy) - bx * (bx * bxy + by * byy)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(nrm > 0, num / np.where(nrm > 0, nrm, 1.0), 0.0)


@dataclass
class NonUniversalityReport:
    label: str
    max_residual: float
    tol_curl: float
    scale: float
    fails_universality: bool
    grid: dict = field(default_factory=dict)
    residual: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self):
        return {"label": self.label, "max_residual": self.max_residual, "tol_curl": self.tol_curl,
                "scale": self.scale, "fails_universality": self.fails_universality, "grid": self.grid}


def nonuniversality_case(B: Optional[ScalarField2D] = None, half_width=1.5, n=201, rel_tol=1e-6):
    """Curl of |grad B| grad B on a grid; a nonzero curl rules out a common optimiser.

    ``tol_curl = rel_tol * scale`` with scale = max|grad B| * max|Hess B|.
    """
    B = separable_bump() if B is None else B
    g = np.linspace(-half_width, half_width, n)
    X, Y = np.meshgrid(g, g, indexing="ij")
    _, bx, by, bxx, bxy, byy = B(X, Y)
    r = curl_residual(B, X, Y)
    hess = np.sqrt(bxx ** 2 + 2 * bxy ** 2 + byy ** 2)
    scale = float(np.max(np.hypot(bx, by)) * np.max(hess))
    scale = scale if scale > 0 else 1.0
    tol = rel_tol * scale
    mx = float(np.max(np.abs(r)))
    return NonUniversalityReport(B.label, mx, tol, scale, bool(mx > tol),
                                 {"half_width": half_width, "n": n}, r)
