"""Entropy calibration of the stabilized weights ``f_T(t) / f_{T|Z}(t|z)``.

The weights are ``exp(-u(t)' L v(z) - 1)`` where the coefficient matrix ``L``
maximizes the concave dual

    G(L) = mean_i rho(u_i' L v_i) - ubar' L vbar,   rho(s) = -exp(-s - 1).

Its first-order condition is the sample balancing equation
``mean_i pi_i u_i v_i' = ubar vbar'``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .basis import Basis, design_matrix
from .linops import least_squares, solve_spd

log = logging.getLogger(__name__)

# Scores below this are floored inside exp(-s - 1); exp(39) is still finite.
SCORE_FLOOR = -40.0
# Scores above this are capped so exp(-s - 1) stays a positive normal number.
SCORE_CEIL = 700.0


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iterations: int = 100
    armijo_slope: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    hessian_ridge: float = 1e-10
    polish_steps: int = 3


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    treatment_basis: Basis
    z_basis: Basis
    design_u: np.ndarray
    design_v: np.ndarray
    mean_u: np.ndarray
    mean_v: np.ndarray

    @classmethod
    def from_data(cls, treatment_basis: Basis, z_basis: Basis, t, z) -> "CalibrationProblem":
        du = design_matrix(treatment_basis, t)
        dv = design_matrix(z_basis, z)
        if du.shape[0] != dv.shape[0]:
            raise ValueError("treatment and covariate samples differ in length")
        return cls(treatment_basis, z_basis, du, dv, du.mean(axis=0), dv.mean(axis=0))

    @property
    def n(self) -> int:
        return self.design_u.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.design_u.shape[1], self.design_v.shape[1]

    def features(self) -> np.ndarray:
        """Row i is ``kron(u_i, v_i)``, matching ``L.ravel()`` ordering."""
        du, dv = self.design_u, self.design_v
        return np.einsum("ni,nj->nij", du, dv).reshape(self.n, -1)

    def target(self) -> np.ndarray:
        return np.outer(self.mean_u, self.mean_v).ravel()


@dataclass(frozen=True, eq=False)
class CalibrationFit:
    lam: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    in_sample_weights: np.ndarray
    problem: CalibrationProblem
    ridge_events: int = 0
    clipped_scores: int = 0

    @property
    def balance_residual(self) -> float:
        p = self.problem
        w = self.in_sample_weights
        lhs = (p.design_u * w[:, None]).T @ p.design_v / p.n
        return float(np.max(np.abs(lhs - np.outer(p.mean_u, p.mean_v))))

    def scores(self, t, z) -> np.ndarray:
        u = self.problem.treatment_basis.evaluate(t)
        v = self.problem.z_basis.evaluate(z)
        return np.einsum("ni,ij,nj->n", u, self.lam, v)

    def weight(self, t, z) -> np.ndarray:
        """Estimated ``pi(t, z)``, vectorized over rows of ``(t, z)``."""
        return np.exp(-np.clip(self.scores(t, z), SCORE_FLOOR, SCORE_CEIL) - 1.0)

    def extrapolated(self, t, z) -> np.ndarray:
        p = self.problem
        return p.treatment_basis.extrapolates(t) | p.z_basis.extrapolates(z)


def _objective(feats, target, theta):
    s = feats @ theta
    if np.any(s < SCORE_FLOOR):
        return -np.inf, None, s
    w = np.exp(-s - 1.0)
    value = -w.mean() - target @ theta
    grad = feats.T @ w / feats.shape[0] - target
    return value, grad, s


def dual_objective(problem: CalibrationProblem, lam):
    """Value and gradient (``k1 x kz``) of the dual at ``lam``.

    Returns ``-inf`` (and a gradient computed with floored scores) when some
    score drops below :data:`SCORE_FLOOR`, so line searches reject the point.
    """
    lam = np.asarray(lam, dtype=float).reshape(problem.shape)
    feats = problem.features()
    value, grad, s = _objective(feats, problem.target(), lam.ravel())
    if grad is None:
        w = np.exp(-np.clip(s, SCORE_FLOOR, SCORE_CEIL) - 1.0)
        grad = feats.T @ w / problem.n - problem.target()
    return value, grad.reshape(problem.shape)


def _initial_lambda(problem: CalibrationProblem) -> np.ndarray:
    # Lambda = -a b' with a'u == 1 and b'v == 1 gives unit starting weights.
    ones = np.ones(problem.n)
    a = least_squares(problem.design_u, ones)
    b = least_squares(problem.design_v, ones)
    if (
        np.max(np.abs(problem.design_u @ a - 1.0)) > 1e-8
        or np.max(np.abs(problem.design_v @ b - 1.0)) > 1e-8
    ):
        log.warning("constant function not in the span of the calibration bases")
        return np.zeros(problem.shape)
    return -np.outer(a, b)


def solve_dual(problem: CalibrationProblem, options: SolverOptions | None = None, init=None) -> CalibrationFit:
    """Maximize the dual by damped Newton with Armijo backtracking."""
    opts = options or SolverOptions()
    feats = problem.features()
    target = problem.target()
    n = problem.n
    theta = (_initial_lambda(problem) if init is None else np.asarray(init, float)).ravel().copy()

    value, grad, s = _objective(feats, target, theta)
    if grad is None:
        theta = _initial_lambda(problem).ravel()
        value, grad, s = _objective(feats, target, theta)
    ridge_events = 0
    converged = False
    it = 0
    for it in range(1, opts.max_iterations + 1):
        if np.max(np.abs(grad)) <= opts.tol:
            converged = True
            it -= 1
            break
        w = np.exp(-s - 1.0)
        neg_hess = (feats * w[:, None]).T @ feats / n
        step, diag = solve_spd(neg_hess, grad, opts.hessian_ridge)
        ridge_events += diag.ridge_applied
        slope = float(grad @ step)
        if slope <= 0:
            # numerically flat direction; fall back to the gradient
            step, slope = grad, float(grad @ grad)
        alpha = 1.0
        for _ in range(opts.max_backtracks):
            cand = theta + alpha * step
            c_value, c_grad, c_s = _objective(feats, target, cand)
            if c_value >= value + opts.armijo_slope * alpha * slope:
                break
            alpha *= opts.backtrack
        else:
            log.debug("line search stalled at iteration %d", it)
            break
        theta, value, grad, s = cand, c_value, c_grad, c_s
    else:
        converged = bool(np.max(np.abs(grad)) <= opts.tol)
    if converged:
        theta, grad, s = _polish(feats, target, theta, grad, s, opts)

    weights = np.exp(-np.clip(s, SCORE_FLOOR, SCORE_CEIL) - 1.0)
    return CalibrationFit(
        lam=theta.reshape(problem.shape),
        grad_norm=float(np.max(np.abs(grad))),
        iterations=it,
        converged=converged,
        in_sample_weights=weights,
        problem=problem,
        ridge_events=ridge_events,
        clipped_scores=int(np.sum(s < SCORE_FLOOR)),
    )


def _polish(feats, target, theta, grad, s, opts):
    """Full Newton steps past the stopping rule, kept only while the gradient shrinks.

    Exact reproduction results (constant outcomes, counting weights) rest on the
    balancing equations, so the residual is pushed to rounding level.
    """
    n = feats.shape[0]
    for _ in range(opts.polish_steps):
        size = np.max(np.abs(grad))
        if size < 1e-14:
            break
        w = np.exp(-s - 1.0)
        step, _ = solve_spd((feats * w[:, None]).T @ feats / n, grad, opts.hessian_ridge)
        _, c_grad, c_s = _objective(feats, target, theta + step)
        if c_grad is None or np.max(np.abs(c_grad)) >= size:
            break
        theta, grad, s = theta + step, c_grad, c_s
    return theta, grad, s


def calibrate(treatment_basis: Basis, z_basis: Basis, t, z, options: SolverOptions | None = None) -> CalibrationFit:
    return solve_dual(CalibrationProblem.from_data(treatment_basis, z_basis, t, z), options)


def evaluate_weight(fit: CalibrationFit, problem: CalibrationProblem | None, t, z):
    """``pi_hat(t, z) = exp(-u(t)' L v(z) - 1)``; scalar in, scalar out."""
    if problem is not None and problem is not fit.problem:
        fit = CalibrationFit(fit.lam, fit.grad_norm, fit.iterations, fit.converged,
                             fit.in_sample_weights, problem)
    scalar = np.ndim(t) == 0
    z = np.asarray(z, dtype=float)
    if scalar:
        z = z.reshape(1, -1)
    out = fit.weight(np.atleast_1d(t), z)
    return float(out[0]) if scalar else out


def weight_ratio(fit: CalibrationFit, problem: CalibrationProblem | None, t, t_shift, z):
    """``pi_hat(t, z) / pi_hat(t_shift, z)``; exactly 1 when ``t == t_shift``."""
    if problem is None:
        problem = fit.problem
    scalar = np.ndim(t) == 0 and np.ndim(t_shift) == 0
    z = np.asarray(z, dtype=float)
    if scalar:
        z = z.reshape(1, -1)
    t = np.atleast_1d(np.asarray(t, float))
    t_shift = np.atleast_1d(np.asarray(t_shift, float))
    v = problem.z_basis.evaluate(z)
    du = problem.treatment_basis.evaluate(t) - problem.treatment_basis.evaluate(t_shift)
    out = np.exp(-np.einsum("ni,ij,nj->n", du, fit.lam, v))
    return float(out[0]) if scalar else out
