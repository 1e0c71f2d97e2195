"""Optimal controlled diffusion from a dual solution, and its Monte Carlo verification."""
from __future__ import annotations

import threading
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import DualSolution
from .diffusion import DiffusionSpec, PathEnsemble, simulate
from .marginals import (MarginalFlow, MeasureSlice, default_slice_times, w1_slice_distance)

EXIT_SUPPORT_LIMIT = 0.005


class MissingControlError(ValueError):
    pass


class RecoveredDrift:
    """(t, x) -> b - sigma grad g(sigma' Psi), with Psi = grad w_theta.

    Outside the basis box Psi = 0 and the drift falls back to b.  The last
    Psi evaluation is cached per thread so that the running-cost integrand
    at the same (t, x) reuses it.
    """

    label = "recovered"

    def __init__(self, sol: DualSolution, spec: DiffusionSpec, cost):
        self.sol, self.spec, self.cost = sol, spec, cost
        self._local = threading.local()
        self.points_seen = 0
        self.points_outside = 0

    def _control(self, t, x):
        """sigma' beta = -grad g(sigma' Psi) at (t, x)."""
        cache = getattr(self._local, "last", None)
        if cache is not None and cache[0] == t and cache[1] is x:
            return cache[2]
        psi = self.sol.psi(t, x)
        self.points_seen += x.shape[0]
        self.points_outside += int(np.sum(~self.sol.basis.inside(x)))
        u = -self.cost.grad_g(t, x, self.spec.sigma_T_apply(t, x, psi))
        self._local.last = (t, x, u)
        return u

    def psi(self, t, x):
        return self.sol.psi(t, x)

    def sigma_beta(self, t, x):
        return self._control(t, x)

    def __call__(self, t, x):
        return self.spec.drift(t, x) + self.spec.sigma_apply(t, x, self._control(t, x))

    @property
    def exit_fraction(self):
        return self.points_outside / max(self.points_seen, 1)


class ControlledDrift:
    """b + a beta for a user-supplied control beta(t, x)."""

    label = "controlled"

    def __init__(self, spec: DiffusionSpec, beta: Callable):
        self.spec, self.beta = spec, beta

    def sigma_beta(self, t, x):
        return self.spec.sigma_T_apply(t, x, np.asarray(self.beta(t, x), dtype=float).reshape(x.shape))

    def __call__(self, t, x):
        return self.spec.drift(t, x) + self.spec.sigma_apply(t, x, self.sigma_beta(t, x))


def recover_drift(sol: DualSolution, spec: DiffusionSpec, cost) -> RecoveredDrift:
    return RecoveredDrift(sol, spec, cost)


# -- marginals -------------------------------------------------------------------

@dataclass
class MarginalReport:
    slice_times: list
    w1: list
    tol_marg: float
    scale: float
    std_error: float
    max_w1: float
    passed: bool
    exit_fraction: float = 0.0

    def to_dict(self):
        return asdict(self)


def marginal_tolerance(flow: MarginalFlow, slice_times, n_paths):
    """max(0.02 scale, 3 s.e.); scale is the RMS slice spread sqrt(tr Cov)."""
    spreads = np.array([np.sqrt(np.trace(np.atleast_2d(flow.slice(float(t), n=2048).cov())))
                        for t in slice_times])
    scale = float(np.sqrt(np.mean(spreads ** 2)))
    se = float(spreads.max() / np.sqrt(n_paths))
    return max(0.02 * scale, 3.0 * se), scale, se


def _record_steps(slice_times, T, n_steps):
    return np.unique(np.rint(np.asarray(slice_times) / T * n_steps).astype(int))


def marginal_report_from_ensemble(ens: PathEnsemble, flow: MarginalFlow, slice_times,
                                  exit_fraction=0.0) -> MarginalReport:
    n = int(ens.valid.sum())
    tol, scale, se = marginal_tolerance(flow, slice_times, n)
    w1 = [w1_slice_distance(MeasureSlice.uniform(ens.at(float(t))), flow.slice(float(t)))
          for t in slice_times]
    mx = float(max(w1))
    return MarginalReport([float(t) for t in slice_times], [float(v) for v in w1], tol, scale, se, mx,
                          bool(mx <= tol), exit_fraction)


def verify_marginals(drift, spec: DiffusionSpec, flow: MarginalFlow, n_paths=100_000, n_steps=400,
                     seed=0, slice_times=None, workers=1) -> MarginalReport:
    """Simulate under ``drift`` and compare W1 per slice with the prescribed flow."""
    slice_times = default_slice_times(spec.T) if slice_times is None else np.asarray(slice_times)
    ens = simulate(spec, drift, n_paths, n_steps, seed,
                   record_steps=_record_steps(slice_times, spec.T, n_steps), workers=workers)
    return marginal_report_from_ensemble(ens, flow, slice_times, getattr(drift, "exit_fraction", 0.0))


# -- primal cost -----------------------------------------------------------------

@dataclass
class PrimalEstimate:
    estimate: float
    std_error: float
    n_paths: int
    ensemble: Optional[PathEnsemble] = field(default=None, repr=False)


def _running_cost(drift, cost):
    if not hasattr(drift, "sigma_beta"):
        raise MissingControlError("primal cost needs the control beta; pass a RecoveredDrift or "
                                  "ControlledDrift (drift = b + a beta)")

    def integrand(t, x):
        return cost.gstar(t, x, drift.sigma_beta(t, x))

    return integrand


def primal_cost_mc(drift, spec: DiffusionSpec, cost, n_paths=100_000, n_steps=400, seed=0, *,
                   record_steps=None, workers=1) -> PrimalEstimate:
    """E int_0^T g*(t, X_t, sigma' beta_t) dt along paths simulated under ``drift``."""
    if isinstance(drift, str) and drift == "reference":
        return PrimalEstimate(0.0, 0.0, n_paths)
    integrand = _running_cost(drift, cost)
    ens = simulate(spec, drift, n_paths, n_steps, seed, integrand=integrand,
                   record_steps=record_steps if record_steps is not None else [0, n_steps],
                   workers=workers)
    vals = ens.running[ens.valid]
    return PrimalEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size)), vals.size, ens)


# -- duality gap -----------------------------------------------------------------

GAP_REL = 0.03
GAP_ABS = 1e-9


@dataclass
class GapReport:
    dual_value: float
    dual_energy_value: float
    primal_mc: float
    primal_se: float
    gap_rel: float
    marginal_w1: list
    marginal_tol: float
    marginals_pass: bool
    exit_fraction: float
    passed: bool

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def duality_gap_report(sol: DualSolution, spec: DiffusionSpec, flow: MarginalFlow, cost, n_paths=100_000,
                       n_steps=400, seed=0, slice_times=None, workers=1, energy=None) -> GapReport:
    """Dual value, energy value and primal MC estimate of the recovered law, in one simulation.

    Passes when |primal - dual| <= 3% |dual| + 3 s.e.
    """
    from .dual import dual_value_energy

    slice_times = default_slice_times(spec.T) if slice_times is None else np.asarray(slice_times)
    drift = recover_drift(sol, spec, cost)
    est = primal_cost_mc(drift, spec, cost, n_paths, n_steps, seed,
                         record_steps=_record_steps(slice_times, spec.T, n_steps), workers=workers)
    marg = marginal_report_from_ensemble(est.ensemble, flow, slice_times, drift.exit_fraction)
    dual = float(sol.dual_value)
    en = float(energy if energy is not None else dual_value_energy(sol, spec, flow, cost))
    diff = abs(est.estimate - dual)
    gap_rel = diff / abs(dual) if dual != 0 else (0.0 if diff == 0 else float("inf"))
    ok = diff <= GAP_REL * abs(dual) + 3.0 * est.std_error + GAP_ABS
    if drift.exit_fraction > EXIT_SUPPORT_LIMIT:
        warnings.warn(f"{100 * drift.exit_fraction:.2f}% of simulated states left the basis box",
                      RuntimeWarning)
    return GapReport(dual, en, est.estimate, est.std_error, float(gap_rel), marg.w1, marg.tol_marg,
                     marg.passed, drift.exit_fraction, bool(ok))


# -- Markov-property statistic ------------------------------------------------------

@dataclass
class MarkovStatistic:
    statistic: float
    null_band: float
    exceeds: bool
    n_bins_used: int
    n_bins_dropped: int
    n_eligible: int
    null_samples: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        d = asdict(self)
        d.pop("null_samples")
        return d


def _binned_chi2(bin_idx, label, response, n_bins, min_count):
    used = dropped = 0
    stat = 0.0
    for b in range(n_bins):
        m = bin_idx == b
        r1, r0 = response[m & label], response[m & ~label]
        if r1.size < min_count or r0.size < min_count:
            dropped += 1
            continue
        used += 1
        diff = r1.mean() - r0.mean()
        var = r1.var(ddof=1) / r1.size + r0.var(ddof=1) / r0.size
        if diff != 0.0:
            stat += diff * diff / max(var, 1e-300)
    return stat, used, dropped


def markov_statistic(ens, s: Optional[float] = None, bins=20, n_shuffles=200, seed=0, min_count=30,
                     randomize_label=False, quantile=0.99) -> MarkovStatistic:
    """Conditional dependence of the future sign on a past label, given the present state.

    Among paths that have not reached the origin by time ``s``, the present
    state Y_s is binned by quantiles.  Within each bin the label
    Z = 1{X_u > 1 for all u in [s/2, s]} splits the paths, and the difference
    of the mean of sign(Y_T) between the two groups is standardised.  The
    statistic is the sum of squared standardised differences; the null band is
    the ``quantile`` of the same statistic after shuffling Z within bins.

    For a Markov process the future given Y_s does not depend on Z, so the
    statistic stays inside the band.  ``randomize_label`` replaces Z by an
    independent fair coin (a negative control).
    """
    s = ens.T / 2 if s is None else float(s)
    rng = np.random.default_rng(seed)
    eligible = ens.tau > s
    ks = int(np.argmin(np.abs(ens.times - s)))
    y_s = ens.y_at(s)[eligible]
    resp = np.sign(ens.y_at(ens.T))[eligible]
    if randomize_label:
        label = rng.random(y_s.size) < 0.5
    else:
        window = (ens.times >= s / 2 - 1e-12) & (np.arange(ens.times.size) <= ks)
        label = np.all(ens.x_paths[eligible][:, window] > 1.0, axis=1)
    n = y_s.size
    if n == 0:
        return MarkovStatistic(0.0, 0.0, False, 0, bins, 0, np.zeros(n_shuffles))
    edges = np.quantile(y_s, np.linspace(0, 1, bins + 1))
    bin_idx = np.clip(np.searchsorted(edges, y_s, side="right") - 1, 0, bins - 1)
    stat, used, dropped = _binned_chi2(bin_idx, label, resp, bins, min_count)
    null = np.empty(n_shuffles)
    order = np.argsort(bin_idx, kind="stable")
    starts = np.searchsorted(bin_idx[order], np.arange(bins + 1))
    for i in range(n_shuffles):
        perm = order.copy()
        for b in range(bins):
            seg = perm[starts[b]:starts[b + 1]]
            perm[starts[b]:starts[b + 1]] = rng.permutation(seg)
        shuffled = np.empty_like(label)
        shuffled[order] = label[perm]
        null[i] = _binned_chi2(bin_idx, shuffled, resp, bins, min_count)[0]
    band = float(np.quantile(null, quantile))
    return MarkovStatistic(float(stat), band, bool(stat > band), used, dropped, int(n), null)


# -- change of measure ----------------------------------------------------------------

@dataclass
class GirsanovReport:
    slice_times: list
    weighted_mean: list
    direct_mean: list
    weighted_var: list
    direct_var: list
    z_mean: list
    z_var: list
    weight_mean: float
    weight_se: float
    n_flagged: int
    passed: bool

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _weighted_moment(w, f):
    """Self-normalised estimate of E[w f] / E[w] with its delta-method s.e."""
    m = np.sum(w * f) / np.sum(w)
    se = np.sqrt(np.mean((w * (f - m)) ** 2)) / np.mean(w) / np.sqrt(w.size)
    return float(m), float(se)


def girsanov_consistency(sol: DualSolution, spec: DiffusionSpec, cost, n_paths=40_000, n_steps=200, seed=0,
                         slice_times=None, z=3.0) -> GirsanovReport:
    """Reweighted reference paths against direct simulation under the recovered drift.

    Per slice and coordinate, the weighted and direct means and variances
    must agree within ``z`` combined standard errors, and the mean weight
    must be 1 within ``z`` s.e.  The two ensembles use independent seeds.
    """
    from .diffusion import girsanov_weight

    slice_times = np.linspace(spec.T / 4, spec.T, 4) if slice_times is None else np.asarray(slice_times)
    ref = simulate(spec, "reference", n_paths, n_steps, seed, keep_increments=True)
    gw = girsanov_weight(ref, spec, sol.psi, cost)
    drift = recover_drift(sol, spec, cost)
    steps = _record_steps(slice_times, spec.T, n_steps)
    direct = simulate(spec, drift, n_paths, n_steps, seed + 1, record_steps=steps)
    ok = ~gw.flagged
    w = gw.weights[ok]
    out = {k: [] for k in ("wm", "dm", "wv", "dv", "zm", "zv")}
    for t in slice_times:
        k = int(np.argmin(np.abs(ref.times - t)))
        xw = ref.paths[ok, k]
        xd = direct.at(float(t))
        for j in range(spec.dim):
            m1, se1 = _weighted_moment(w, xw[:, j])
            m2, se2 = _weighted_moment(w, (xw[:, j] - m1) ** 2)
            d1 = float(xd[:, j].mean())
            dd = (xd[:, j] - d1) ** 2
            d2 = float(dd.mean())
            sd1 = float(xd[:, j].std(ddof=1) / np.sqrt(xd.shape[0]))
            sd2 = float(dd.std(ddof=1) / np.sqrt(xd.shape[0]))
            out["wm"].append(m1)
            out["dm"].append(d1)
            out["wv"].append(m2)
            out["dv"].append(d2)
            out["zm"].append(abs(m1 - d1) / np.hypot(se1, sd1))
            out["zv"].append(abs(m2 - d2) / np.hypot(se2, sd2))
    weight_ok = abs(gw.mean - 1.0) <= z * gw.std_error
    passed = weight_ok and max(out["zm"]) <= z and max(out["zv"]) <= z
    return GirsanovReport([float(t) for t in slice_times], out["wm"], out["dm"], out["wv"], out["dv"],
                          [float(v) for v in out["zm"]], [float(v) for v in out["zv"]],
                          gw.mean, gw.std_error, int(gw.flagged.sum()), bool(passed))
