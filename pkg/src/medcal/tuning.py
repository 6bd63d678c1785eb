"""Smoothing-parameter selection for the weights, the outcome sieve and the bandwidth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import TreatmentKind, covariate_basis
from .calibration import SolverOptions, calibrate
from .data import Dataset
from .estimators import MediationFit, fit_mediation, treatment_basis_for
from .kernels import KernelFamily, default_constant
from .linops import solve_spd

log = logging.getLogger(__name__)


class TuningError(RuntimeError):
    pass


def _check_candidates(name: str, values) -> tuple[int, ...]:
    values = tuple(sorted(int(v) for v in values))
    if not values:
        raise TuningError(f"{name} candidate list is empty")
    if values[0] < 1:
        raise TuningError(f"{name} candidates must be positive")
    return values


@dataclass(frozen=True)
class TuningGrid:
    k1_candidates: tuple[int, ...] = (2, 3, 4, 5, 6)
    kx_candidates: tuple[int, ...] = (2, 3, 4, 5)
    kmx_candidates: tuple[int, ...] = (2, 3, 4, 5)
    k0_candidates: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8)
    bandwidth_constant: float | None = None
    kernel: KernelFamily = KernelFamily.EPANECHNIKOV2

    def __post_init__(self):
        for name in ("k1_candidates", "kx_candidates", "kmx_candidates", "k0_candidates"):
            object.__setattr__(self, name, _check_candidates(name, getattr(self, name)))
        object.__setattr__(self, "kernel", KernelFamily(self.kernel))


@dataclass(frozen=True)
class TuningResult:
    k1: int
    kx: int
    kmx: int
    k0: int
    h: float | None = None
    criteria: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        crit = {
            name: [{"candidate": list(k) if isinstance(k, tuple) else k, "criterion": v} for k, v in table.items()]
            for name, table in self.criteria.items()
        }
        return {"k1": self.k1, "kx": self.kx, "kmx": self.kmx, "k0": self.k0, "h": self.h, "criteria": crit}


def gcv_score(weights, n_params: int) -> float:
    """``(1 - n_params / N)^-2 * mean((w - 1)^2)``."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    if n_params >= n:
        raise TuningError(f"GCV needs fewer parameters ({n_params}) than observations ({n})")
    return float((1.0 - n_params / n) ** -2 * np.mean((w - 1.0) ** 2))


def gcv_weights(data: Dataset, k1: int, kz: int, which: str = "X", options: SolverOptions | None = None) -> float:
    """GCV criterion of the calibration weights for ``pi_X`` or ``pi_MX``.

    ``kz`` is the per-coordinate dimension; the penalty counts every dual
    parameter, ``k1`` times the full tensor dimension. Returns ``inf`` when the
    solver does not converge.
    """
    which = which.upper()
    if which not in ("X", "MX"):
        raise ValueError("which must be 'X' or 'MX'")
    z = data.x if which == "X" else data.mx
    u = treatment_basis_for(data, k1)
    v = covariate_basis(z, kz)
    n_params = u.dimension * v.dimension
    if n_params >= data.n:
        raise TuningError(f"k1*kz = {n_params} must be below N = {data.n}")
    fit = calibrate(u, v, data.t, z, options)
    if not fit.converged:
        log.info("GCV candidate (k1=%d, kz=%d, %s) did not converge", k1, kz, which)
        return float("inf")
    return gcv_score(fit.in_sample_weights, n_params)


def _argmin(table: dict):
    # keys are sorted ascending, so the first minimum is the smallest dimension
    best_key, best = None, np.inf
    for key in sorted(table):
        if table[key] < best:
            best_key, best = key, table[key]
    if best_key is None:
        raise TuningError("every tuning candidate failed")
    return best_key


def select_weight_dims(data: Dataset, grid: TuningGrid | None = None, options: SolverOptions | None = None):
    """Two-stage GCV: joint ``(k1, kx)`` for ``pi_X``, then ``kmx`` given ``k1``.

    Returns ``(k1, kx, kmx, criteria)``.
    """
    grid = grid or TuningGrid()
    discrete = data.kind is TreatmentKind.DISCRETE
    k1_cands = (len(data.levels),) if discrete else grid.k1_candidates
    table_x = {}
    for k1 in k1_cands:
        for kx in grid.kx_candidates:
            try:
                table_x[(k1, kx)] = gcv_weights(data, k1, kx, "X", options)
            except TuningError as exc:
                log.info("skipping (k1=%d, kx=%d): %s", k1, kx, exc)
    k1, kx = _argmin(table_x)
    table_mx = {}
    for kmx in grid.kmx_candidates:
        try:
            table_mx[kmx] = gcv_weights(data, k1, kmx, "MX", options)
        except TuningError as exc:
            log.info("skipping kmx=%d: %s", kmx, exc)
    kmx = _argmin(table_mx)
    return k1, kx, kmx, {"k1_kx": table_x, "kmx": table_mx}


def loo_criterion(fit: MediationFit, k0: int, deltas: Sequence[float] = (0.0,), brute_force: bool = False) -> float:
    """Leave-one-out error of the outcome series regression, averaged over ``deltas``.

    Calibration weights are held fixed when observation ``i`` is dropped, so
    the hat-matrix identity applies exactly.
    """
    data = fit.dataset
    basis = treatment_basis_for(data, k0)
    u = basis.evaluate(data.t)
    n = data.n
    if u.shape[1] >= n - 1:
        raise TuningError(f"K0={k0} too large for N={n}")
    responses = np.column_stack([fit.weight_product(float(d)) * data.y for d in deltas])
    if brute_force:
        loo = np.empty_like(responses)
        for i in range(n):
            keep = np.arange(n) != i
            ui = u[keep]
            coef, _ = solve_spd(ui.T @ ui, ui.T @ responses[keep])
            loo[i] = u[i] @ coef
        resid = responses - loo
    else:
        inv_gram, _ = solve_spd(u.T @ u, np.eye(u.shape[1]))
        lev = np.einsum("ij,jk,ik->i", u, inv_gram, u)
        fitted = u @ (inv_gram @ (u.T @ responses))
        resid = (responses - fitted) / (1.0 - lev)[:, None]
    return float(np.mean(resid**2))


def loocv_k0(fit: MediationFit, k0_candidates: Sequence[int], deltas: Sequence[float] = (0.0,)):
    """Select the outcome sieve dimension; returns ``(k0, criteria)``."""
    data = fit.dataset
    if data.kind is not TreatmentKind.CONTINUOUS:
        k = fit.outcome_basis.dimension
        return k, {k: float("nan")}
    table = {}
    for k0 in _check_candidates("k0", k0_candidates):
        try:
            table[k0] = loo_criterion(fit, k0, deltas)
        except TuningError as exc:
            log.info("skipping K0=%d: %s", k0, exc)
    return _argmin(table), table


def select_bandwidth(data: Dataset, constant: float | None = None, family: KernelFamily | str = KernelFamily.EPANECHNIKOV2) -> float:
    """Undersmoothed bandwidth ``C * N^(-1/4)``."""
    n = data.n if isinstance(data, Dataset) else int(np.size(data))
    if n < 2:
        raise TuningError("bandwidth selection needs N >= 2")
    c = default_constant(family) if constant is None else float(constant)
    return c * n ** -0.25


def panel_deltas(grid, t_prime: float) -> np.ndarray:
    """Distinct ``t' - t`` shifts needed for the four effect panels."""
    grid = np.asarray(grid, float)
    return np.unique(np.round(np.concatenate([[0.0], t_prime - grid, grid - t_prime]), 12))


def tune(
    data: Dataset,
    grid: TuningGrid | None = None,
    deltas: Sequence[float] = (0.0,),
    overrides: dict | None = None,
    options: SolverOptions | None = None,
) -> TuningResult:
    """Full data-driven selection of ``(k1, kx, kmx, K0, h)``.

    ``overrides`` pins any of ``k1, kx, kmx, k0, h``; pinned values skip
    their search.
    """
    grid = grid or TuningGrid()
    ov = dict(overrides or {})
    if {"k1", "kx", "kmx"} <= ov.keys():
        k1, kx, kmx, crit = ov["k1"], ov["kx"], ov["kmx"], {}
    else:
        sub = TuningGrid(
            k1_candidates=(ov["k1"],) if "k1" in ov else grid.k1_candidates,
            kx_candidates=(ov["kx"],) if "kx" in ov else grid.kx_candidates,
            kmx_candidates=(ov["kmx"],) if "kmx" in ov else grid.kmx_candidates,
            k0_candidates=grid.k0_candidates,
        )
        k1, kx, kmx, crit = select_weight_dims(data, sub, options)
    if data.kind is TreatmentKind.DISCRETE:
        k1 = k0 = len(data.levels)
    fit = fit_mediation(data, k1, kx, kmx, k0=max(grid.k0_candidates[0], 1), options=options)
    if data.kind is TreatmentKind.DISCRETE:
        k0 = len(data.levels)
    elif "k0" in ov:
        k0 = int(ov["k0"])
    else:
        k0, crit["k0"] = loocv_k0(fit, grid.k0_candidates, deltas)
    h = None
    if data.kind is TreatmentKind.CONTINUOUS:
        h = float(ov["h"]) if "h" in ov else select_bandwidth(data, grid.bandwidth_constant, grid.kernel)
    return TuningResult(int(k1), int(kx), int(kmx), int(k0), h, crit)
