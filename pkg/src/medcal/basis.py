"""Sieve bases for the treatment, the confounders and the mediators.

Continuous coordinates are mapped affinely onto ``[-1, 1]`` using the
declared domain before evaluation. Power bases extrapolate freely outside
that domain (callers can check :meth:`Basis.extrapolates`); B-splines refuse.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline


class Family(str, enum.Enum):
    POWER = "power"
    BSPLINE = "bspline"
    INDICATOR = "indicator"
    MIXED = "mixed"


class TreatmentKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"
    MIXED = "mixed"


class BasisError(ValueError):
    pass


class DomainError(BasisError):
    """A point fell outside the support of a bounded-support basis."""


@dataclass(frozen=True)
class BasisSpec:
    family: Family
    dimension: int
    domain: tuple[float, float] | None = None
    discrete_levels: tuple[float, ...] | None = None
    spline_degree: int = 3

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.dimension < 1:
            raise BasisError("basis dimension must be >= 1")
        if self.discrete_levels is not None:
            object.__setattr__(self, "discrete_levels", tuple(float(v) for v in self.discrete_levels))
        if self.family is Family.INDICATOR:
            if not self.discrete_levels:
                raise BasisError("indicator basis needs discrete_levels")
            if self.dimension != len(self.discrete_levels):
                raise BasisError(
                    f"indicator basis dimension {self.dimension} != "
                    f"number of levels {len(self.discrete_levels)}"
                )
        if self.family is Family.MIXED and self.dimension < 2:
            raise BasisError("mixed basis needs dimension >= 2 to hold constants")
        if self.domain is not None:
            lo, hi = map(float, self.domain)
            if not hi > lo:
                raise BasisError(f"empty domain {self.domain}")
            object.__setattr__(self, "domain", (lo, hi))


def _as_matrix(x, arity: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None] if arity == 1 else x[None, :]
    if x.shape[1] != arity:
        raise BasisError(f"expected {arity} input column(s), got {x.shape[1]}")
    return x


class Basis:
    """A vector of basis functions of ``input_arity`` real arguments."""

    input_arity: int = 1
    dimension: int = 1
    spec: BasisSpec | None = None

    def evaluate(self, x) -> np.ndarray:
        """Evaluate at ``N`` points; returns an ``N x dimension`` matrix."""
        raise NotImplementedError

    def extrapolates(self, x) -> np.ndarray:
        """Boolean mask of points outside the declared domain."""
        return np.zeros(_as_matrix(x, self.input_arity).shape[0], dtype=bool)

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)


def _scale(x: np.ndarray, domain: tuple[float, float]) -> np.ndarray:
    lo, hi = domain
    return 2.0 * (x - lo) / (hi - lo) - 1.0


@dataclass(frozen=True, eq=False)
class PowerBasis(Basis):
    spec: BasisSpec
    input_arity: int = 1

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    def evaluate(self, x) -> np.ndarray:
        s = _scale(_as_matrix(x, 1)[:, 0], self.spec.domain)
        return np.vander(s, self.spec.dimension, increasing=True)

    def extrapolates(self, x) -> np.ndarray:
        x = _as_matrix(x, 1)[:, 0]
        lo, hi = self.spec.domain
        tol = 1e-12 * (hi - lo)
        return (x < lo - tol) | (x > hi + tol)


@dataclass(frozen=True, eq=False)
class BSplineBasis(Basis):
    spec: BasisSpec
    input_arity: int = 1
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = self.spec.spline_degree
        n_interior = self.spec.dimension - k - 1
        if n_interior < 0:
            raise BasisError(
                f"B-spline of degree {k} needs dimension >= {k + 1}, got {self.spec.dimension}"
            )
        inner = np.linspace(-1.0, 1.0, n_interior + 2)
        knots = np.concatenate([np.full(k, -1.0), inner, np.full(k, 1.0)])
        object.__setattr__(self, "knots", knots)

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    def evaluate(self, x) -> np.ndarray:
        x = _as_matrix(x, 1)[:, 0]
        bad = self.extrapolates(x)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"point {x[i]!r} (row {i}) outside B-spline domain {self.spec.domain}")
        s = np.clip(_scale(x, self.spec.domain), -1.0, 1.0)
        return BSpline.design_matrix(s, self.knots, self.spec.spline_degree).toarray()

    def extrapolates(self, x) -> np.ndarray:
        x = _as_matrix(x, 1)[:, 0]
        lo, hi = self.spec.domain
        tol = 1e-12 * (hi - lo)
        return (x < lo - tol) | (x > hi + tol)


@dataclass(frozen=True, eq=False)
class IndicatorBasis(Basis):
    """One-hot encoding of a discrete variable; unknown values map to zeros."""

    spec: BasisSpec
    input_arity: int = 1

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    def evaluate(self, x) -> np.ndarray:
        x = _as_matrix(x, 1)[:, 0]
        levels = np.asarray(self.spec.discrete_levels)
        return (np.abs(x[:, None] - levels[None, :]) < 1e-9).astype(float)

    def extrapolates(self, x) -> np.ndarray:
        return ~self.evaluate(x).any(axis=1)


@dataclass(frozen=True, eq=False)
class MixedBasis(Basis):
    """``(1(T=a), w_1(T) 1(T!=a), ..., w_{K-1}(T) 1(T!=a))`` for a mass point ``a``.

    ``w`` is a power basis with intercept on the continuous part, so the
    constant function stays in the span.
    """

    spec: BasisSpec
    mass_point: float = 0.0
    input_arity: int = 1

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    def _continuous(self) -> PowerBasis:
        return PowerBasis(BasisSpec(Family.POWER, self.spec.dimension - 1, self.spec.domain))

    def evaluate(self, x) -> np.ndarray:
        x = _as_matrix(x, 1)[:, 0]
        at_mass = np.abs(x - self.mass_point) < 1e-12
        out = np.zeros((x.size, self.spec.dimension))
        out[:, 0] = at_mass
        if self.spec.dimension > 1:
            out[:, 1:] = self._continuous().evaluate(x) * (~at_mass)[:, None]
        return out

    def extrapolates(self, x) -> np.ndarray:
        x = _as_matrix(x, 1)[:, 0]
        at_mass = np.abs(x - self.mass_point) < 1e-12
        return ~at_mass & self._continuous().extrapolates(x)


@dataclass(frozen=True, eq=False)
class TensorBasis(Basis):
    """Full tensor (row-wise Kronecker) product of univariate or smaller bases."""

    parts: tuple[Basis, ...]

    def __post_init__(self):
        if not self.parts:
            raise BasisError("tensor basis needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def input_arity(self) -> int:
        return sum(p.input_arity for p in self.parts)

    @property
    def dimension(self) -> int:
        return int(np.prod([p.dimension for p in self.parts]))

    def _split(self, x):
        x = _as_matrix(x, self.input_arity)
        cols = np.cumsum([0] + [p.input_arity for p in self.parts])
        return [x[:, a:b] for a, b in zip(cols[:-1], cols[1:])]

    def evaluate(self, x) -> np.ndarray:
        out = None
        for part, cols in zip(self.parts, self._split(x)):
            block = part.evaluate(cols)
            out = block if out is None else np.einsum("ni,nj->nij", out, block).reshape(block.shape[0], -1)
        return out

    def extrapolates(self, x) -> np.ndarray:
        flags = [p.extrapolates(c) for p, c in zip(self.parts, self._split(x))]
        return np.logical_or.reduce(flags)


def _domain_of(values, domain) -> tuple[float, float]:
    if domain is not None:
        return domain
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def make_basis(spec: BasisSpec) -> Basis:
    if spec.family is Family.POWER:
        return PowerBasis(spec)
    if spec.family is Family.BSPLINE:
        return BSplineBasis(spec)
    if spec.family is Family.INDICATOR:
        return IndicatorBasis(spec)
    if spec.family is Family.MIXED:
        return MixedBasis(spec)
    raise BasisError(f"unknown basis family {spec.family!r}")


def make_treatment_basis(spec: BasisSpec, kind: TreatmentKind | str = TreatmentKind.CONTINUOUS) -> Basis:
    """Treatment basis for a continuous, discrete or mixed (mass at 0) treatment."""
    try:
        family = Family(spec.family)
    except ValueError:
        raise BasisError(f"unknown basis family {spec.family!r}") from None
    kind = TreatmentKind(kind)
    if kind is TreatmentKind.DISCRETE and family is not Family.INDICATOR:
        raise BasisError("a discrete treatment needs the indicator family")
    if kind is TreatmentKind.MIXED and family is not Family.MIXED:
        raise BasisError("a mixed treatment needs the mixed family")
    if kind is TreatmentKind.CONTINUOUS and family in (Family.INDICATOR, Family.MIXED):
        raise BasisError(f"family {family.value} does not suit a continuous treatment")
    if family in (Family.POWER, Family.BSPLINE, Family.MIXED) and spec.domain is None:
        raise BasisError("continuous bases need a domain")
    return make_basis(spec)


def make_tensor_basis(parts: Sequence[Basis]) -> Basis:
    parts = tuple(parts)
    if len(parts) == 1:
        return parts[0]
    return TensorBasis(parts)


def power_basis_for(values, dimension: int, domain=None) -> PowerBasis:
    """Power basis whose domain defaults to the empirical range of ``values``."""
    return PowerBasis(BasisSpec(Family.POWER, dimension, _domain_of(values, domain)))


def covariate_basis(z, dimension: int, family: Family | str = Family.POWER, domains=None) -> Basis:
    """Tensor basis over the columns of ``z`` with ``dimension`` functions per column."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    parts = []
    for j in range(z.shape[1]):
        dom = _domain_of(z[:, j], None if domains is None else domains[j])
        parts.append(make_basis(BasisSpec(family, dimension, dom)))
    return make_tensor_basis(parts)


def design_matrix(basis: Basis, data) -> np.ndarray:
    """Evaluate ``basis`` at every row of ``data``."""
    out = basis.evaluate(data)
    if not np.all(np.isfinite(out)):
        raise BasisError("non-finite basis evaluation")
    return out


def gram_matrix(design) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    if design.shape[0] < 1:
        raise ValueError("gram_matrix needs at least one row")
    return design.T @ design / design.shape[0]
