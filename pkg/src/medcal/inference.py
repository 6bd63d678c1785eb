"""Influence-function variance for the series estimator and bootstrap bands.

The series estimator is asymptotically linear with influence function
``u(t)' Phi^-1 d_i`` where ``Phi = E[u(T) u(T)']`` and ``d_i`` collects the
first-order effect of estimating both weighting functions. Every nuisance
quantity inside ``d_i`` is replaced by a plug-in: calibration weights,
Gaussian-kernel conditional densities, least-squares sieve projections and
sample means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .basis import TreatmentKind
from .data import Dataset
from .estimators import (
    PANELS,
    EffectCurve,
    EstimationError,
    MediationFit,
    Method,
    _pairs,
    panel_pairs,
    panels_from_mu,
)
from .kernels import KernelFamily, KernelSpec, conditional_density_floored, silverman_bandwidths
from .linops import least_squares, solve_spd

log = logging.getLogger(__name__)

Z_NAMES = ("X", "MX")


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class PluginSettings:
    """Plug-in choices for the influence-function nuisances.

    ``projection_dim`` is the per-coordinate dimension of the cubic B-spline
    sieve used for the conditional-mean projections; ``"auto"`` picks
    ``max(4, round(N^(1/4)))`` and ``None`` reuses the calibration sieves.
    """

    density_kernel: KernelFamily = KernelFamily.GAUSSIAN
    density_constant: float = 1.06
    projection_dim: int | str | None = "auto"


def projection_dim_for(n: int, setting: int | str | None = "auto") -> int | None:
    if setting == "auto":
        return max(4, int(round(n**0.25)))
    return None if setting is None else int(setting)


def projection_sieves(fit: MediationFit, which: str, dim: int | None):
    """Designs on ``(T, Z)`` and on ``Z`` for the conditional-mean projections.

    The treatment factor keeps the calibration basis for a discrete
    treatment and is a B-spline otherwise. Dimensions shrink until the
    ``(T, Z)`` design has at most ``N / 4`` columns.
    """
    from .basis import Family, covariate_basis

    cal = fit.fit_x if which == "X" else fit.fit_mx
    if dim is None:
        return cal.problem.features(), cal.problem.design_v
    d = fit.dataset
    z = d.x if which == "X" else d.mx
    discrete = d.kind is not TreatmentKind.CONTINUOUS
    while True:
        vz = covariate_basis(z, dim, Family.BSPLINE).evaluate(z)
        ut = cal.problem.design_u if discrete else covariate_basis(d.t, dim, Family.BSPLINE).evaluate(d.t)
        if ut.shape[1] * vz.shape[1] <= d.n / 4 or dim <= 4:
            break
        dim -= 1
    return np.einsum("ni,nj->nij", ut, vz).reshape(d.n, -1), vz


class Nuisances:
    """Weighting functions and density ratios evaluated at the sample rows."""

    def pi(self, which: str, t) -> np.ndarray:  # pragma: no cover - interface
        """``pi_Z(t_i, Z_i)`` for every row ``i``."""
        raise NotImplementedError

    def density_ratio(self, which: str, delta: float) -> tuple[np.ndarray, int]:  # pragma: no cover
        """``f_{T|Z}(T_i - delta | Z_i) / f_{T|Z}(T_i | Z_i)`` and a floored count."""
        raise NotImplementedError

    projection_setting: int | str | None = "auto"

    def projection_designs(self, fit: MediationFit, which: str):
        """Designs for the projections on ``(T, Z)`` and on ``Z`` (cached)."""
        cache = self.__dict__.setdefault("_projection_cache", {})
        if which not in cache:
            dim = projection_dim_for(fit.dataset.n, self.projection_setting)
            cache[which] = projection_sieves(fit, which, dim)
        return cache[which]


class PluginNuisances(Nuisances):
    def __init__(self, fit: MediationFit, settings: PluginSettings | None = None):
        self.fit = fit
        self.settings = settings or PluginSettings()
        self.projection_setting = self.settings.projection_dim
        self._ratio_cache: dict = {}

    def _z(self, which):
        d = self.fit.dataset
        return d.x if which == "X" else d.mx

    def pi(self, which, t):
        cal = self.fit.fit_x if which == "X" else self.fit.fit_mx
        return cal.weight(np.asarray(t, float), self._z(which))

    def _specs(self, which):
        d = self.fit.dataset
        z = self._z(which)
        s = self.settings
        hz = silverman_bandwidths(z, s.density_constant, extra_dims=1)
        ht = silverman_bandwidths(d.t, s.density_constant, extra_dims=z.shape[1])[0]
        return [KernelSpec(s.density_kernel, h) for h in [ht, *hz]]

    def density_ratio(self, which, delta):
        key = (which, float(delta))
        if key not in self._ratio_cache:
            d = self.fit.dataset
            z = self._z(which)
            discrete = d.kind is TreatmentKind.DISCRETE
            if delta == 0:
                self._ratio_cache[key] = (np.ones(d.n), 0)
            else:
                specs = self._specs(which)
                num, _ = conditional_density_floored(d.t, z, d.t - delta, z, specs, discrete)
                den, floored = conditional_density_floored(d.t, z, d.t, z, specs, discrete)
                ratio = num / den
                if not discrete:
                    # no density outside the observed treatment range
                    shifted = d.t - delta
                    ratio = np.where((shifted < d.t.min()) | (shifted > d.t.max()), 0.0, ratio)
                self._ratio_cache[key] = (ratio, floored)
        return self._ratio_cache[key]


@dataclass(frozen=True)
class InfluenceParts:
    """The five pieces of ``d_i``, each ``N x K0``."""

    if_x: np.ndarray
    if_mx_zero: np.ndarray
    if_mx_delta: np.ndarray
    conditional_mean: np.ndarray
    centering: np.ndarray
    floored: int = 0

    @property
    def d(self) -> np.ndarray:
        return self.if_x + self.if_mx_zero - self.if_mx_delta - self.conditional_mean + self.centering


@dataclass(frozen=True)
class VarianceReport:
    v_hat: float
    se: float
    diagnostics: dict = field(default_factory=dict)


def _project(design: np.ndarray, response: np.ndarray) -> np.ndarray:
    return design @ least_squares(design, response)


def _finite(a) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.asarray(a() if callable(a) else a, float)
        return np.where(np.isfinite(a), a, 0.0)


def influence_term(
    fit: MediationFit,
    which: str,
    delta: float,
    phi: Callable[[np.ndarray], np.ndarray],
    nuisances: Nuisances | None = None,
) -> tuple[np.ndarray, int]:
    """Linear representation of ``N^-1 sum_i pi_hat_Z(T_i + delta, Z_i) phi_i``.

    ``phi(s)`` returns the ``N x p`` matrix of ``phi`` with the treatment of
    every row replaced by ``s``; covariates, mediators and outcomes stay
    fixed. Returns the ``N x p`` matrix of influence values and the number of
    floored density evaluations.
    """
    which = which.upper()
    if which not in Z_NAMES:
        raise ValueError("which must be 'X' or 'MX'")
    nuis = nuisances or PluginNuisances(fit)
    d = fit.dataset
    t = d.t
    base = np.atleast_2d(np.asarray(phi(t), float).T).T
    if not np.any(base) and not np.any(phi(t - delta)):
        return np.zeros_like(base), 0
    with np.errstate(invalid="ignore"):
        first = _finite(nuis.pi(which, t + delta)[:, None] * base)
    r, floored = nuis.density_ratio(which, delta)
    pr = nuis.pi(which, t) * r
    shifted = np.atleast_2d(np.asarray(phi(t - delta), float).T).T
    # rows where the shifted treatment has no density contribute nothing
    shifted = np.where(pr[:, None] > 0, _finite(shifted), 0.0)
    pr = np.where(pr > 0, pr, 0.0)
    g = pr[:, None] * shifted
    tz, vz = nuis.projection_designs(fit, which)
    ut = fit.outcome_design
    mean_g = g.mean(axis=0)
    out = (
        first
        - pr[:, None] * _project(tz, shifted)
        + _project(vz, g)
        - mean_g
        + _project(ut, g)
        - mean_g
    )
    return out, floored


def assemble_d(fit: MediationFit, delta: float, nuisances: Nuisances | None = None) -> InfluenceParts:
    """The ``N x K0`` matrix ``d_i`` for the shift ``delta = t' - t``."""
    nuis = nuisances or PluginNuisances(fit)
    d = fit.dataset
    y = d.y[:, None]
    u = fit.outcome_basis.evaluate

    def pmx(s):
        return nuis.pi("MX", s)

    def px(s):
        return nuis.pi("X", s)

    # Ratios can be undefined where a shifted treatment leaves the support;
    # those rows never reach the queried cell of the outcome basis.
    def phi_x(s):
        return _finite(lambda: (pmx(s) / pmx(s + delta))[:, None] * u(s) * y)

    def phi_mx_zero(s):
        return _finite(lambda: (px(s + delta) / pmx(s + delta))[:, None] * u(s) * y)

    def phi_mx_delta(s):
        return _finite(lambda: (pmx(s) * px(s + delta) / pmx(s + delta) ** 2)[:, None] * u(s) * y)

    if_x, f1 = influence_term(fit, "X", delta, phi_x, nuis)
    if_mx0, f2 = influence_term(fit, "MX", 0.0, phi_mx_zero, nuis)
    if_mxd, f3 = influence_term(fit, "MX", delta, phi_mx_delta, nuis)
    t = d.t
    with np.errstate(divide="ignore", invalid="ignore"):
        w = pmx(t) / pmx(t + delta) * px(t + delta)
    wuy = _finite(w[:, None] * fit.outcome_design * y)
    cond = _project(fit.outcome_design, wuy)
    centering = np.broadcast_to(wuy.mean(axis=0), wuy.shape)
    return InfluenceParts(if_x, if_mx0, if_mxd, cond, centering, f1 + f2 + f3)


def influence_functions(fit: MediationFit, t, t_prime, nuisances: Nuisances | None = None):
    """Per-observation influence values of ``mu_hat(t, t')``, shape ``N x P``.

    Also returns a diagnostics dict.
    """
    t, tp = _pairs(t, t_prime)
    nuis = nuisances or PluginNuisances(fit)
    u = fit.outcome_design
    n = u.shape[0]
    phi_hat = u.T @ u / n
    out = np.empty((n, t.size))
    deltas = np.round(tp - t, 12)
    floored = 0
    ridge = False
    for delta in np.unique(deltas):
        sel = np.flatnonzero(deltas == delta)
        parts = assemble_d(fit, float(delta), nuis)
        floored += parts.floored
        ut = fit.outcome_basis.evaluate(t[sel])
        a, diag = solve_spd(phi_hat, ut.T)
        ridge |= diag.ridge_applied
        out[:, sel] = parts.d @ a
    return out, {"floored_densities": floored, "ridge_applied": bool(ridge)}


def variance_cbs(fit: MediationFit, t: float, t_prime: float, nuisances: Nuisances | None = None) -> VarianceReport:
    """Plug-in sandwich variance ``u(t)' Phi^-1 [mean d d'] Phi^-1 u(t)``."""
    psi, diag = influence_functions(fit, [t], [t_prime], nuisances)
    v = float(np.mean(psi[:, 0] ** 2))
    return VarianceReport(v, float(np.sqrt(v / psi.shape[0])), diag)


def cbs_panels_with_se(fit: MediationFit, grid, t_prime: float, level: float = 0.95, nuisances=None):
    """CBS effect panels with plug-in standard errors and normal intervals.

    Panel standard errors come from differences of the pointwise influence
    values, so the covariance between the two terms is accounted for.
    """
    from scipy.stats import norm

    from .estimators import cbs_mu_many

    grid = np.atleast_1d(np.asarray(grid, float))
    ts, tps = panel_pairs(grid, t_prime)
    mu = cbs_mu_many(fit, ts, tps)
    psi, diag = influence_functions(fit, ts, tps, nuisances)
    n = psi.shape[0]
    g = grid.size
    blocks = {"tt": slice(0, g), "pt": slice(g, 2 * g), "tp": slice(2 * g, 3 * g), "pp": slice(3 * g, 4 * g)}
    combos = {
        "direct_at_t": ("tt", "pt"),
        "direct_at_tprime": ("tp", "pp"),
        "indirect_at_t": ("tt", "tp"),
        "indirect_at_tprime": ("pt", "pp"),
    }
    est = panels_from_mu(mu, g)
    z = norm.ppf(0.5 + level / 2)
    curves = {}
    for name, (a, b) in combos.items():
        se = np.sqrt(np.mean((psi[:, blocks[a]] - psi[:, blocks[b]]) ** 2, axis=0) / n)
        curves[name] = EffectCurve(Method.CBS, t_prime, grid, est[name], se, est[name] - z * se, est[name] + z * se, name)
    se_mu = np.sqrt(np.mean(psi[:, blocks["tp"]] ** 2, axis=0) / n)
    m = mu[blocks["tp"]]
    curves["mu"] = EffectCurve(Method.CBS, t_prime, grid, m, se_mu, m - z * se_mu, m + z * se_mu, "mu")
    return curves, diag


def bootstrap_ci(
    estimator: Callable[[Dataset], Callable],
    data: Dataset,
    grid,
    t_prime: float,
    B: int = 200,
    seed: int = 0,
    method: Method | str = Method.CBS,
    level: float = 0.95,
    max_drop: float = 0.10,
):
    """Pairs-bootstrap percentile intervals for ``mu(t, t')`` and the four panels.

    ``estimator(data)`` must return a vectorized ``mu(t, t')``; it is re-run
    from scratch (calibration included) on every resample. Returns a dict of
    :class:`EffectCurve` keyed by ``"mu"`` and the panel names, plus the
    number of dropped replicates.
    """
    from .simlab import rng_for

    if B < 50:
        raise ValueError("the bootstrap needs B >= 50")
    grid = np.atleast_1d(np.asarray(grid, float))
    ts, tps = panel_pairs(grid, t_prime)
    g = grid.size

    def curves_of(mu_fn):
        vals = np.asarray(mu_fn(ts, tps), float)
        pan = panels_from_mu(vals, g)
        pan["mu"] = vals[2 * g : 3 * g]
        return pan

    point = curves_of(estimator(data))
    reps = {k: [] for k in point}
    dropped = 0
    for b in range(B):
        idx = rng_for(seed, b).integers(0, data.n, data.n)
        try:
            res = curves_of(estimator(data.subset(idx)))
            if not all(np.all(np.isfinite(v)) for v in res.values()):
                raise FloatingPointError("non-finite replicate")
        except (EstimationError, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            log.debug("bootstrap replicate %d dropped: %s", b, exc)
            dropped += 1
            continue
        for k, v in res.items():
            reps[k].append(v)
    if dropped > max_drop * B:
        raise BootstrapError(f"{dropped} of {B} bootstrap replicates failed")
    alpha = (1 - level) / 2
    out = {}
    for k, v in point.items():
        arr = np.array(reps[k])
        lo, hi = np.quantile(arr, [alpha, 1 - alpha], axis=0)
        se = arr.std(axis=0, ddof=1)
        out[k] = EffectCurve(method, t_prime, grid, v, se, np.minimum(lo, v), np.maximum(hi, v), k)
    return out, dropped
