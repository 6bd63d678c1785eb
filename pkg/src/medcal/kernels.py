"""Univariate kernels, bandwidth rules and kernel density plug-ins."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DENSITY_FLOOR = 1e-12


class KernelFamily(str, enum.Enum):
    EPANECHNIKOV2 = "epanechnikov2"
    EPANECHNIKOV4 = "epanechnikov4"
    GAUSSIAN = "gaussian"


# Rule-of-thumb constants C in h = C * sd(T) * N^(-1/5).
RULE_OF_THUMB_CONSTANT = {
    KernelFamily.EPANECHNIKOV2: 2.34,
    KernelFamily.EPANECHNIKOV4: 3.03,
    KernelFamily.GAUSSIAN: 1.06,
}


class SparseRegionError(ValueError):
    """No kernel mass at the conditioning point."""


def default_constant(family) -> float:
    return RULE_OF_THUMB_CONSTANT[KernelFamily(family)]


def _profile(family: KernelFamily, u: np.ndarray) -> np.ndarray:
    if family is KernelFamily.EPANECHNIKOV2:
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    if family is KernelFamily.EPANECHNIKOV4:
        u2 = u * u
        return np.where(np.abs(u) <= 1.0, (15.0 / 32.0) * (3.0 - 10.0 * u2 + 7.0 * u2 * u2), 0.0)
    if family is KernelFamily.GAUSSIAN:
        return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    raise ValueError(f"unknown kernel family {family!r}")


# Support half-width that gives the second-order Epanechnikov profile unit variance.
UNIT_VARIANCE_SCALE = np.sqrt(5.0)


@dataclass(frozen=True)
class KernelSpec:
    """A kernel with bandwidth ``h``.

    With ``standardized=True`` the Epanechnikov profiles are stretched to the
    support ``[-sqrt(5), sqrt(5)]`` (unit variance for the second-order one),
    so that ``h`` is on the standard-deviation scale, as for the Gaussian.
    The Gaussian kernel is unaffected.
    """

    family: KernelFamily = KernelFamily.EPANECHNIKOV2
    bandwidth: float = 1.0
    standardized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    def __call__(self, x):
        return kernel_eval(self, x)


def kernel_eval(spec: KernelSpec, x):
    """``K(x / h) / h``; works elementwise on arrays."""
    h = spec.bandwidth
    if spec.standardized and spec.family is not KernelFamily.GAUSSIAN:
        h = h * UNIT_VARIANCE_SCALE
    out = _profile(spec.family, np.asarray(x, dtype=float) / h) / h
    return float(out) if np.ndim(out) == 0 else out


def rule_of_thumb_bandwidth(t, constant: float, undersmooth: bool = False) -> float:
    t = np.asarray(t, dtype=float)
    n = t.size
    if n < 2:
        raise ValueError("bandwidth rule needs at least two observations")
    sd = float(np.std(t, ddof=1))
    if not sd > 0:
        raise ValueError("treatment has zero variance; kernel regression is meaningless")
    if undersmooth:
        return constant * n ** -0.25
    return constant * sd * n ** -0.2


def silverman_bandwidths(z, constant: float = 1.06, extra_dims: int = 0) -> list[float]:
    """Per-column ``C * sd(z_j) * N^(-1/(4 + d))`` with ``d = ncol + extra_dims``."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n, d = z.shape
    d += extra_dims
    sds = np.std(z, axis=0, ddof=1) if n > 1 else np.ones(z.shape[1])
    sds = np.where(sds > 0, sds, 1.0)
    return [float(constant * s * n ** (-1.0 / (4 + d))) for s in sds]


def _product_kernel(z_data: np.ndarray, z0: np.ndarray, specs: Sequence[KernelSpec]) -> np.ndarray:
    """Matrix ``[j, i] = prod_c K_c(z_data[i, c] - z0[j, c])``."""
    out = np.ones((z0.shape[0], z_data.shape[0]))
    for c, spec in enumerate(specs):
        out *= kernel_eval(spec, z_data[None, :, c] - z0[:, None, c])
    return out


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def conditional_density(t_data, z_data, t0, z0, specs: Sequence[KernelSpec], discrete_t: bool = False):
    """Kernel estimate of ``f_{T|Z}(t0 | z0)``.

    ``specs[0]`` smooths the treatment and ``specs[1:]`` the columns of
    ``z``. With ``discrete_t`` the treatment kernel is an exact-match
    indicator, giving a conditional probability mass. Vectorized over rows
    of ``(t0, z0)``; raises :class:`SparseRegionError` when the denominator
    is below the density floor at any row.
    """
    scalar = np.ndim(t0) == 0
    t_data = np.asarray(t_data, dtype=float).ravel()
    z_data = _as_2d(z_data)
    t0 = np.atleast_1d(np.asarray(t0, dtype=float))
    z0 = np.asarray(z0, dtype=float)
    z0 = z0.reshape(1, -1) if scalar else _as_2d(z0)
    num, den = _conditional_parts(t_data, z_data, t0, z0, specs, discrete_t)
    if np.any(den <= DENSITY_FLOOR):
        j = int(np.flatnonzero(den <= DENSITY_FLOOR)[0])
        raise SparseRegionError(f"no kernel mass near z0={z0[j].tolist()}")
    out = num / den
    return float(out[0]) if scalar else out


def _conditional_parts(t_data, z_data, t0, z0, specs, discrete_t):
    wz = _product_kernel(z_data, z0, specs[1:])
    if discrete_t:
        kt = (np.abs(t_data[None, :] - t0[:, None]) < 1e-9).astype(float)
    else:
        kt = kernel_eval(specs[0], t_data[None, :] - t0[:, None])
    return np.sum(wz * kt, axis=1), np.sum(wz, axis=1)


def conditional_density_floored(t_data, z_data, t0, z0, specs, discrete_t: bool = False):
    """Like :func:`conditional_density` but floors instead of raising.

    Returns ``(density, n_floored)``.
    """
    t_data = np.asarray(t_data, dtype=float).ravel()
    num, den = _conditional_parts(
        t_data, _as_2d(z_data), np.atleast_1d(np.asarray(t0, float)), _as_2d(z0), specs, discrete_t
    )
    bad = den <= DENSITY_FLOOR
    dens = np.where(bad, 0.0, num / np.where(bad, 1.0, den))
    low = dens < DENSITY_FLOOR
    return np.maximum(dens, DENSITY_FLOOR), int(np.sum(bad | low))


def marginal_density(t_data, t0, spec: KernelSpec):
    """``N^-1 sum_i K_h(t_i - t0)``; vectorized over ``t0``."""
    t_data = np.asarray(t_data, dtype=float).ravel()
    if t_data.size < 1:
        raise ValueError("marginal_density needs data")
    t0a = np.atleast_1d(np.asarray(t0, dtype=float))
    out = kernel_eval(spec, t_data[None, :] - t0a[:, None]).mean(axis=1)
    return float(out[0]) if np.ndim(t0) == 0 else out
