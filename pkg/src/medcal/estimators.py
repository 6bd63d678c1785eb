"""Estimators of ``mu(t, t') = E[Y{t, M(t')}]`` and the effect decomposition.

``delta = t' - t`` throughout. Both covariate-balancing estimators reweight
observation ``i`` by

    w_i(delta) = pi_MX(T_i, M_i, X_i) / pi_MX(T_i + delta, M_i, X_i) * pi_X(T_i + delta, X_i)

and then regress ``w_i Y_i`` on the treatment: a series regression for CBS,
a Nadaraya-Watson ratio for CBK.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .basis import (
    Basis,
    BasisSpec,
    Family,
    IndicatorBasis,
    MixedBasis,
    TreatmentKind,
    covariate_basis,
    power_basis_for,
)
from .calibration import CalibrationFit, SolverOptions, calibrate, weight_ratio
from .data import Dataset
from .kernels import KernelSpec, kernel_eval
from .linops import least_squares, solve_spd

log = logging.getLogger(__name__)

PANELS = ("direct_at_t", "direct_at_tprime", "indirect_at_t", "indirect_at_tprime")


class Method(str, enum.Enum):
    CBS = "cbs"
    CBK = "cbk"
    OLS = "ols"
    IPW = "ipw"
    ORACLE = "oracle"


class EstimationError(RuntimeError):
    pass


class UnsupportedMethodError(EstimationError):
    pass


@dataclass(frozen=True)
class EffectCurve:
    method: Method
    t_prime: float
    grid: np.ndarray
    mu_hat: np.ndarray
    se: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    panel: str = "mu"

    def __post_init__(self):
        grid = np.atleast_1d(np.asarray(self.grid, float))
        mu = np.atleast_1d(np.asarray(self.mu_hat, float))
        if grid.shape != mu.shape:
            raise ValueError("grid and estimates differ in length")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "mu_hat", mu)
        object.__setattr__(self, "method", Method(self.method))
        for name in ("se", "ci_low", "ci_high"):
            val = getattr(self, name)
            if val is not None:
                val = np.atleast_1d(np.asarray(val, float))
                if val.shape != grid.shape:
                    raise ValueError(f"{name} has the wrong length")
                object.__setattr__(self, name, val)


def treatment_basis_for(data: Dataset, dimension: int, family: Family | str = Family.POWER) -> Basis:
    """Sieve in T matching the treatment kind (indicators for discrete T)."""
    if data.kind is TreatmentKind.DISCRETE:
        levels = data.levels
        return IndicatorBasis(BasisSpec(Family.INDICATOR, len(levels), discrete_levels=levels))
    if data.kind is TreatmentKind.MIXED:
        pos = data.t[data.t != 0]
        dom = (float(pos.min()), float(pos.max())) if pos.size > 1 else (0.0, 1.0)
        return MixedBasis(BasisSpec(Family.MIXED, dimension, dom))
    family = Family(family)
    dom = (float(data.t.min()), float(data.t.max()))
    if family is Family.POWER:
        return power_basis_for(data.t, dimension, dom)
    from .basis import make_basis

    return make_basis(BasisSpec(family, dimension, dom))


@dataclass(frozen=True, eq=False)
class MediationFit:
    fit_x: CalibrationFit
    fit_mx: CalibrationFit
    outcome_basis: Basis
    dataset: Dataset

    @property
    def converged(self) -> bool:
        return self.fit_x.converged and self.fit_mx.converged

    @cached_property
    def outcome_design(self) -> np.ndarray:
        return self.outcome_basis.evaluate(self.dataset.t)

    @cached_property
    def _gram(self) -> np.ndarray:
        u = self.outcome_design
        return u.T @ u

    def weight_product(self, delta: float) -> np.ndarray:
        """``w_i(delta)`` for every observation."""
        d = self.dataset
        if delta == 0:
            return self.fit_x.in_sample_weights.copy()
        shifted = d.t + delta
        ratio = weight_ratio(self.fit_mx, None, d.t, shifted, d.mx)
        return ratio * self.fit_x.weight(shifted, d.x)

    def extrapolation_count(self, delta: float) -> int:
        d = self.dataset
        shifted = d.t + delta
        return int(np.sum(self.fit_mx.extrapolated(shifted, d.mx) | self.fit_x.extrapolated(shifted, d.x)))

    def series_coefficients(self, response) -> np.ndarray:
        u = self.outcome_design
        coef, diag = solve_spd(self._gram, u.T @ np.asarray(response, float))
        if diag.ridge_applied:
            log.debug("outcome Gram matrix ridged (cond %.3g)", diag.condition_estimate)
        return coef


def fit_mediation(
    data: Dataset,
    k1: int = 3,
    kx: int = 3,
    kmx: int = 3,
    k0: int = 4,
    family: Family | str = Family.POWER,
    options: SolverOptions | None = None,
    require_convergence: bool = True,
) -> MediationFit:
    """Calibrate ``pi_X`` and ``pi_MX`` and set up the outcome sieve.

    ``kx`` and ``kmx`` are per-coordinate dimensions; the covariate sieves are
    full tensor products. For a discrete treatment ``k1`` and ``k0`` are set to
    the number of levels.
    """
    u = treatment_basis_for(data, k1, family)
    v_x = covariate_basis(data.x, kx)
    v_mx = covariate_basis(data.mx, kmx)
    fit_x = calibrate(u, v_x, data.t, data.x, options)
    fit_mx = calibrate(u, v_mx, data.t, data.mx, options)
    if require_convergence and not (fit_x.converged and fit_mx.converged):
        raise EstimationError(
            f"calibration did not converge (grad {fit_x.grad_norm:.2e}, {fit_mx.grad_norm:.2e})"
        )
    outcome = u if data.kind is not TreatmentKind.CONTINUOUS else treatment_basis_for(data, k0, family)
    return MediationFit(fit_x, fit_mx, outcome, data)


def _pairs(t, t_prime):
    t = np.atleast_1d(np.asarray(t, float))
    tp = np.broadcast_to(np.asarray(t_prime, float), t.shape)
    return t, tp


def cbs_mu_many(fit: MediationFit, t, t_prime) -> np.ndarray:
    """Series estimator at many ``(t, t')`` pairs (one solve per distinct delta)."""
    t, tp = _pairs(t, t_prime)
    out = np.empty(t.shape)
    deltas = np.round(tp - t, 12)
    y = fit.dataset.y
    for delta in np.unique(deltas):
        sel = deltas == delta
        coef = fit.series_coefficients(fit.weight_product(float(delta)) * y)
        out[sel] = fit.outcome_basis.evaluate(t[sel]) @ coef
    return out


def cbs_mu(fit: MediationFit, t: float, t_prime: float) -> float:
    return float(cbs_mu_many(fit, [t], [t_prime])[0])


def cbk_mu_many(fit: MediationFit, t, t_prime, kernel: KernelSpec) -> np.ndarray:
    """Weighted Nadaraya-Watson ratio at many ``(t, t')`` pairs."""
    if fit.dataset.kind is not TreatmentKind.CONTINUOUS:
        raise UnsupportedMethodError("the kernel estimator needs a continuous treatment")
    t, tp = _pairs(t, t_prime)
    out = np.empty(t.shape)
    deltas = np.round(tp - t, 12)
    d = fit.dataset
    for delta in np.unique(deltas):
        sel = np.flatnonzero(deltas == delta)
        w = fit.weight_product(float(delta))
        k = kernel_eval(kernel, d.t[None, :] - t[sel, None]) * w[None, :]
        den = k.sum(axis=1)
        if np.any(den <= 0):
            bad = t[sel][den <= 0][0]
            raise EstimationError(f"no kernel mass near t={bad:g}")
        out[sel] = (k @ d.y) / den
    return out


def cbk_mu(fit: MediationFit, t: float, t_prime: float, kernel: KernelSpec) -> float:
    return float(cbk_mu_many(fit, [t], [t_prime], kernel)[0])


def effect_decomposition(mu: Callable[[float, float], float], t: float, t_prime: float):
    """``(total, direct, indirect)`` for a change in treatment from ``t'`` to ``t``.

    direct = mu(t, t) - mu(t', t); indirect = mu(t', t) - mu(t', t').
    """
    mtt = mu(t, t)
    mpt = mu(t_prime, t)
    mpp = mu(t_prime, t_prime)
    direct = mtt - mpt
    indirect = mpt - mpp
    return direct + indirect, direct, indirect


def panel_pairs(grid, t_prime: float):
    """The four ``(t, t')`` argument vectors needed for the effect panels."""
    grid = np.atleast_1d(np.asarray(grid, float))
    tp = np.full_like(grid, t_prime)
    # mu(t,t), mu(t',t), mu(t,t'), mu(t',t')
    ts = np.concatenate([grid, tp, grid, tp])
    tps = np.concatenate([grid, grid, tp, tp])
    return ts, tps


def panels_from_mu(values, n: int) -> dict[str, np.ndarray]:
    mtt, mpt, mtp, mpp = (values[i * n : (i + 1) * n] for i in range(4))
    return {
        "direct_at_t": mtt - mpt,
        "direct_at_tprime": mtp - mpp,
        "indirect_at_t": mtt - mtp,
        "indirect_at_tprime": mpt - mpp,
    }


def ols_baseline(data: Dataset):
    """Product-of-coefficients linear mediation formula.

    Fits ``M ~ 1 + T + X`` and ``Y ~ 1 + T + M + X`` and returns a vectorized
    ``mu(t, t')``.
    """
    n = data.n
    zm = np.column_stack([np.ones(n), data.t, data.x])
    zy = np.column_stack([np.ones(n), data.t, data.m, data.x])
    for name, z in (("mediator", zm), ("outcome", zy)):
        if np.linalg.matrix_rank(z) < z.shape[1]:
            raise EstimationError(f"{name} regression design is rank deficient")
    gm = least_squares(zm, data.m)  # (2 + r) x s
    gy = least_squares(zy, data.y)
    s = data.s
    a, b_t, b_m, b_x = gy[0], gy[1], gy[2 : 2 + s], gy[2 + s :]
    alpha, beta_t, beta_x = gm[0], gm[1], gm[2:]
    xbar = data.x.mean(axis=0)
    m_const = alpha + xbar @ beta_x

    def mu(t, t_prime):
        t = np.asarray(t, float)
        tp = np.asarray(t_prime, float)
        m_mean = m_const + np.multiply.outer(tp, beta_t)
        return a + b_t * t + m_mean @ b_m + xbar @ b_x

    return mu


def _series_logit(z_basis: Basis, z, target, eps: float):
    from sklearn.linear_model import LogisticRegression

    design = z_basis.evaluate(z)
    clf = LogisticRegression(penalty=None, fit_intercept=False, solver="newton-cholesky", max_iter=200)
    clf.fit(design, target)
    p = clf.predict_proba(design)[:, 1]
    clipped = int(np.sum((p < eps) | (p > 1 - eps)))
    return np.clip(p, eps, 1 - eps), clipped


@dataclass(frozen=True)
class IpwFit:
    p1_mx: np.ndarray
    p1_x: np.ndarray
    data: Dataset
    normalized: bool = True
    clipped: int = 0

    def mu(self, t, t_prime) -> np.ndarray:
        t, tp = _pairs(t, t_prime)
        out = np.empty(t.shape)
        d = self.data
        for j, (a, b) in enumerate(zip(t, tp)):
            if a not in (0.0, 1.0) or b not in (0.0, 1.0):
                raise EstimationError("IPW baseline is defined on {0, 1} only")
            p_a_mx = self.p1_mx if a == 1 else 1 - self.p1_mx
            p_b_mx = self.p1_mx if b == 1 else 1 - self.p1_mx
            p_b_x = self.p1_x if b == 1 else 1 - self.p1_x
            w = (d.t == a) / p_a_mx * p_b_mx / p_b_x
            out[j] = np.mean(w * d.y) / (np.mean(w) if self.normalized else 1.0)
        return out


def ipw_binary_baseline(data: Dataset, degree: int = 2, normalized: bool = True, eps: float = 1e-6):
    """Inverse propensity weighting with series-logit propensities.

    Propensities ``P(T=1 | M, X)`` and ``P(T=1 | X)`` come from unpenalized
    logistic regressions on per-coordinate polynomials of ``degree`` (tensor
    products across coordinates).
    """
    levels = set(np.unique(data.t).tolist())
    if not levels <= {0.0, 1.0}:
        raise UnsupportedMethodError("IPW baseline needs a binary 0/1 treatment")
    target = (data.t == 1).astype(int)
    p_mx, c1 = _series_logit(covariate_basis(data.mx, degree + 1), data.mx, target, eps)
    p_x, c2 = _series_logit(covariate_basis(data.x, degree + 1), data.x, target, eps)
    if c1 + c2:
        log.info("IPW: clipped %d propensities", c1 + c2)
    return IpwFit(p_mx, p_x, data, normalized, c1 + c2)


def ipw_from_propensities(data: Dataset, p1_mx, p1_x, normalized: bool = False) -> IpwFit:
    return IpwFit(np.asarray(p1_mx, float), np.asarray(p1_x, float), data, normalized)


def method_mu(fit: MediationFit | None, data: Dataset, method: Method | str, kernel: KernelSpec | None = None):
    """Vectorized ``mu(t, t')`` for ``method``."""
    method = Method(method)
    if method is Method.CBS:
        return lambda t, tp: cbs_mu_many(fit, t, tp)
    if method is Method.CBK:
        if kernel is None:
            raise ValueError("CBK needs a kernel")
        return lambda t, tp: cbk_mu_many(fit, t, tp, kernel)
    if method is Method.OLS:
        return ols_baseline(data)
    if method is Method.IPW:
        return ipw_binary_baseline(data).mu
    raise UnsupportedMethodError(f"method {method.value} needs simulation-only nuisances")


def effect_curve(mu, grid, t_prime: float, method: Method | str) -> EffectCurve:
    grid = np.atleast_1d(np.asarray(grid, float))
    if grid.size == 0:
        raise ValueError("empty grid")
    return EffectCurve(method, float(t_prime), grid, mu(grid, np.full_like(grid, t_prime)))


def effect_panels(mu, grid, t_prime: float, method: Method | str) -> dict[str, EffectCurve]:
    """The four direct/indirect effect curves against the benchmark ``t'``."""
    grid = np.atleast_1d(np.asarray(grid, float))
    if grid.size == 0:
        raise ValueError("empty grid")
    ts, tps = panel_pairs(grid, t_prime)
    panels = panels_from_mu(np.asarray(mu(ts, tps), float), grid.size)
    return {
        name: EffectCurve(method, float(t_prime), grid, vals, panel=name) for name, vals in panels.items()
    }
