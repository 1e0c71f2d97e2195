"""Reference diffusions dX = b dt + sigma dW: generator, Euler-Maruyama, Girsanov."""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# fixed so that results do not depend on the worker count
CHUNK_SIZE = 8192
FLAGGED_LIMIT = 0.01


class SimulationError(RuntimeError):
    pass


class SingularDiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class InitialLaw:
    """m0: a point mass, a Gaussian, or an arbitrary sampler ``f(rng, n) -> (n, q)``."""

    kind: str
    mean: np.ndarray
    cov: Optional[np.ndarray] = None
    sampler: Optional[Callable] = field(default=None, compare=False)

    @classmethod
    def dirac(cls, at):
        return cls("dirac", np.atleast_1d(np.asarray(at, dtype=float)))

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        return cls("gaussian", mean, cov)

    @classmethod
    def from_sampler(cls, sampler, dim):
        return cls("sampler", np.zeros(dim), sampler=sampler)

    @property
    def dim(self):
        return self.mean.size

    def sample(self, rng, n):
        q = self.dim
        if self.kind == "dirac":
            return np.broadcast_to(self.mean, (n, q)).copy()
        if self.kind == "gaussian":
            L = np.linalg.cholesky(self.cov)
            return self.mean + rng.standard_normal((n, q)) @ L.T
        return np.asarray(self.sampler(rng, n), dtype=float).reshape(n, q)


def zero_drift(t, x):
    return np.zeros_like(x)


@dataclass(frozen=True)
class DiffusionSpec:
    """Coefficients of the reference diffusion and its initial law.

    ``sigma`` is either a constant ``(q, q)`` matrix or a callable
    ``(t, x) -> (n, q, q)``.  ``reflect`` folds the state to ``|X|`` after
    each Euler step (used for the Bessel construction only).
    """

    dim: int
    T: float
    m0: InitialLaw
    b: Callable = zero_drift
    sigma: object = None
    domain: Optional[np.ndarray] = None
    reflect: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.m0.dim != self.dim:
            raise ValueError("m0 dimension does not match dim")
        if self.sigma is None:
            object.__setattr__(self, "sigma", np.eye(self.dim))
        if not callable(self.sigma):
            s = np.asarray(self.sigma, dtype=float)
            if s.ndim == 0:
                s = s * np.eye(self.dim)
            if s.shape != (self.dim, self.dim):
                raise ValueError(f"sigma must be {self.dim}x{self.dim}")
            object.__setattr__(self, "sigma", s)
            self._check_invertible(s[None])

    @property
    def constant_sigma(self):
        return not callable(self.sigma)

    def drift(self, t, x):
        return np.asarray(self.b(t, x), dtype=float).reshape(x.shape)

    def sigma_at(self, t, x):
        if self.constant_sigma:
            return np.broadcast_to(self.sigma, (x.shape[0], self.dim, self.dim))
        return np.asarray(self.sigma(t, x), dtype=float).reshape(x.shape[0], self.dim, self.dim)

    def a_at(self, t, x):
        s = self.sigma_at(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def sigma_T_apply(self, t, x, v):
        """sigma(t,x)' v for v of shape (n, q)."""
        if self.constant_sigma:
            return v @ self.sigma
        return np.einsum("nji,nj->ni", self.sigma_at(t, x), v)

    def sigma_apply(self, t, x, v):
        if self.constant_sigma:
            return v @ self.sigma.T
        return np.einsum("nij,nj->ni", self.sigma_at(t, x), v)

    def _check_invertible(self, s, tol=1e12):
        cond = np.linalg.cond(s)
        if not np.all(np.isfinite(cond)) or np.any(cond > tol):
            raise SingularDiffusionError(
                "diffusion matrix sigma must be invertible "
                f"(condition number {float(np.max(cond)):.3e})")
        return cond

    def condition_numbers(self, t, x):
        """Condition numbers of sigma at the given points; raises if singular."""
        return self._check_invertible(self.sigma_at(t, x))


def apply_generator(spec: DiffusionSpec, dt_w, grad_w, hess_w, t, x):
    """L_t w = d_t w + b' grad w + 1/2 tr(a Hess w), evaluated pointwise."""
    x = np.atleast_2d(x)
    b = spec.drift(t, x)
    a = spec.a_at(t, x)
    return (np.asarray(dt_w) + np.sum(b * grad_w, axis=-1)
            + 0.5 * np.einsum("nij,nij->n", a, hess_w))


@dataclass
class PathEnsemble:
    """Simulated trajectories on a uniform grid.

    ``paths[i, k]`` is the state of path ``i`` at ``times[k]``; only the
    recorded grid indices ``steps`` are stored.  ``increments`` holds the
    Brownian increments dW (all steps) when requested.
    """

    times: np.ndarray
    steps: np.ndarray
    paths: np.ndarray
    dt: float
    n_steps: int
    seed: int
    drift_label: str
    valid: np.ndarray
    increments: Optional[np.ndarray] = None
    running: Optional[np.ndarray] = None

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def n_flagged(self):
        return int(np.sum(~self.valid))

    def at(self, t):
        """States at the recorded time nearest to t (valid paths only)."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.paths[self.valid, k]

    def to_csv(self, path):
        q = self.paths.shape[2]
        n, m = self.paths.shape[:2]
        cols = [np.repeat(np.arange(n), m), np.tile(self.times, n)]
        cols += [self.paths[:, :, j].reshape(-1) for j in range(q)]
        header = "path_id,t," + ",".join(f"x_{j + 1}" for j in range(q))
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header,
                   comments="", fmt=["%d"] + ["%.10g"] * (q + 1))


def chunk_rng(seed, chunk):
    return np.random.default_rng([int(seed), int(chunk)])


def _resolve_drift(spec, drift):
    if drift is None or (isinstance(drift, str) and drift == "reference"):
        return spec.drift, "reference"
    if isinstance(drift, str):
        raise ValueError(f"unknown drift label {drift!r}")
    return drift, getattr(drift, "label", type(drift).__name__)


def simulate(spec: DiffusionSpec, drift="reference", n_paths=1000, n_steps=100, seed=0, *,
             record_every: Optional[int] = 1, record_steps: Optional[Sequence[int]] = None,
             keep_increments=False, integrand=None, workers=1) -> PathEnsemble:
    """Euler-Maruyama with step T/n_steps.

    ``drift`` is ``"reference"`` (use b) or a callable ``(t, x) -> (n, q)``.
    ``integrand(t, x) -> (n,)`` is accumulated along each path with the
    left-point rule into ``ensemble.running``.
    """
    if n_paths < 1 or n_steps < 1:
        raise ValueError("n_paths and n_steps must be >= 1")
    fn, label = _resolve_drift(spec, drift)
    if record_steps is None:
        if n_steps % record_every:
            raise ValueError("record_every must divide n_steps")
        record_steps = np.arange(0, n_steps + 1, record_every)
    record_steps = np.unique(np.asarray(record_steps, dtype=int))
    if record_steps[0] < 0 or record_steps[-1] > n_steps:
        raise ValueError("record_steps out of range")
    dt = spec.T / n_steps
    sqdt = np.sqrt(dt)
    q = spec.dim
    n_chunks = -(-n_paths // CHUNK_SIZE)

    def run_chunk(c):
        lo = c * CHUNK_SIZE
        m = min(CHUNK_SIZE, n_paths - lo)
        rng = chunk_rng(seed, c)
        x = spec.m0.sample(rng, m)
        rec = np.empty((m, record_steps.size, q))
        inc = np.empty((m, n_steps, q)) if keep_increments else None
        acc = np.zeros(m) if integrand is not None else None
        ok = np.ones(m, dtype=bool)
        r = 0
        for k in range(n_steps + 1):
            if r < record_steps.size and record_steps[r] == k:
                rec[:, r] = x
                r += 1
            if k == n_steps:
                break
            t = k * dt
            dw = sqdt * rng.standard_normal((m, q))
            mu = fn(t, x)
            if acc is not None:
                val = integrand(t, x)
                ok &= np.isfinite(val)
                acc += np.where(np.isfinite(val), val, 0.0) * dt
            bad = ~np.all(np.isfinite(mu), axis=1)
            if bad.any():
                ok &= ~bad
                mu = np.where(bad[:, None], 0.0, mu)
            x = x + mu * dt + spec.sigma_apply(t, x, dw)
            if spec.reflect:
                x = np.abs(x)
            if inc is not None:
                inc[:, k] = dw
        return rec, inc, acc, ok

    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run_chunk, range(n_chunks)))
    else:
        parts = [run_chunk(c) for c in range(n_chunks)]
    paths = np.concatenate([p[0] for p in parts])
    inc = np.concatenate([p[1] for p in parts]) if keep_increments else None
    running = np.concatenate([p[2] for p in parts]) if integrand is not None else None
    valid = np.concatenate([p[3] for p in parts]) & np.all(np.isfinite(paths), axis=(1, 2))
    n_bad = int(np.sum(~valid))
    if n_bad > FLAGGED_LIMIT * n_paths:
        raise SimulationError(f"{n_bad} of {n_paths} paths produced non-finite drift or state")
    if n_bad:
        warnings.warn(f"{n_bad} paths flagged and excluded", RuntimeWarning)
    return PathEnsemble(times=record_steps * dt, steps=record_steps, paths=paths, dt=dt,
                        n_steps=n_steps, seed=seed, drift_label=label, valid=valid,
                        increments=inc, running=running)


@dataclass
class GirsanovWeights:
    weights: np.ndarray
    flagged: np.ndarray
    mean: float
    std_error: float


def girsanov_weight(ensemble: PathEnsemble, spec: DiffusionSpec, psi_field, cost) -> GirsanovWeights:
    """Discretised stochastic exponential of -int grad g(sigma' Psi)' sigma^{-1} dM.

    The ensemble must be simulated under the reference drift with every step
    recorded and increments kept.  With dM = sigma dW the exponent is
    sum_k h_k . dW_k - |h_k|^2 dt / 2, h_k = -grad g(t_k, X_k, sigma' Psi).
    """
    if ensemble.increments is None:
        raise ValueError("ensemble was simulated without increments")
    if ensemble.drift_label != "reference":
        raise ValueError("weights require an ensemble simulated under the reference drift")
    if not np.array_equal(ensemble.steps, np.arange(ensemble.n_steps + 1)):
        raise ValueError("weights require every grid step to be recorded")
    n = ensemble.n_paths
    logw = np.zeros(n)
    dt = ensemble.dt
    for k in range(ensemble.n_steps):
        t = k * dt
        x = ensemble.paths[:, k]
        psi = psi_field(t, x)
        h = -cost.grad_g(t, x, spec.sigma_T_apply(t, x, psi))
        logw += np.sum(h * ensemble.increments[:, k], axis=1) - 0.5 * np.sum(h * h, axis=1) * dt
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.exp(logw)
    flagged = ~np.isfinite(w) | ~ensemble.valid
    if flagged.any():
        warnings.warn(f"{int(flagged.sum())} Girsanov weights overflowed or invalid", RuntimeWarning)
    good = w[~flagged]
    mean = float(good.mean())
    se = float(good.std(ddof=1) / np.sqrt(good.size)) if good.size > 1 else float("nan")
    if abs(mean - 1.0) > 5.0 * se:
        warnings.warn(f"mean Girsanov weight {mean:.4f} deviates from 1 by more than 5 s.e. ({se:.2e})",
                      RuntimeWarning)
    return GirsanovWeights(weights=np.where(flagged, np.nan, w), flagged=flagged, mean=mean,
                           std_error=se)
