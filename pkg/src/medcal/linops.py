"""Small dense linear-algebra helpers shared by the estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


class NotSymmetricError(ValueError):
    pass


@dataclass(frozen=True)
class SolveDiagnostics:
    ridge_applied: bool
    condition_estimate: float
    residual_norm: float
    ridge: float = 0.0


# Cholesky pivots this lopsided mean the Gram matrix is numerically singular.
_COND_LIMIT = 1e13


def solve_spd(a, b, ridge_floor: float = 1e-10):
    """Solve ``(A + lam I) x = b`` for symmetric positive (semi)definite ``A``.

    ``lam`` is zero unless the Cholesky factorization fails or the matrix is
    too badly conditioned, in which case ``lam = ridge_floor * trace(A) / dim``.

    Returns
    -------
    x : ndarray
        Solution with the shape of ``b``.
    diagnostics : SolveDiagnostics
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    dim = a.shape[0]
    scale = max(1.0, float(np.max(np.abs(a))))
    if a.shape != (dim, dim) or np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise NotSymmetricError("matrix is not symmetric within 1e-10")

    lam = 0.0
    factor = None
    cond = np.inf
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
        piv = np.abs(np.diag(factor[0]))
        cond = float((piv.max() / piv.min()) ** 2) if piv.min() > 0 else np.inf
    except linalg.LinAlgError:
        factor = None
    if factor is None or cond > _COND_LIMIT:
        trace = float(np.trace(a))
        lam = ridge_floor * (trace / dim if trace > 0 else 1.0)
        shifted = a + lam * np.eye(dim)
        try:
            factor = linalg.cho_factor(shifted, lower=True)
        except linalg.LinAlgError:
            # indefinite beyond the ridge: fall back to a least-squares solve
            x = linalg.lstsq(shifted, b)[0]
            resid = float(np.linalg.norm(shifted @ x - b))
            return x, SolveDiagnostics(True, np.inf, resid, lam)
        piv = np.abs(np.diag(factor[0]))
        cond = float((piv.max() / piv.min()) ** 2)

    x = linalg.cho_solve(factor, b)
    resid = float(np.linalg.norm((a + lam * np.eye(dim)) @ x - b))
    return x, SolveDiagnostics(lam > 0, cond, resid, lam)


def least_squares(design, response, ridge_floor: float = 1e-10, return_diagnostics: bool = False):
    """Least-squares coefficients via the normal equations.

    ``response`` may be a vector or an ``N x p`` matrix; the coefficients
    have shape ``K`` or ``K x p`` accordingly.
    """
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    response = np.asarray(response, dtype=float)
    if design.shape[0] < 1:
        raise ValueError("least_squares needs at least one observation")
    gram = design.T @ design
    coef, diag = solve_spd(gram, design.T @ response, ridge_floor)
    if return_diagnostics:
        return coef, diag
    return coef


def hat_diagonal(design, ridge_floor: float = 1e-10) -> np.ndarray:
    """Diagonal of ``X (X'X)^{-1} X'`` (leverages)."""
    design = np.asarray(design, dtype=float)
    inv_gram, _ = solve_spd(design.T @ design, np.eye(design.shape[1]), ridge_floor)
    return np.einsum("ij,jk,ik->i", design, inv_gram, design)
