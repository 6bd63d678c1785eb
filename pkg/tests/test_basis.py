import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medcal.basis import (
    BasisError,
    BasisSpec,
    DomainError,
    Family,
    IndicatorBasis,
    MixedBasis,
    PowerBasis,
    TensorBasis,
    TreatmentKind,
    covariate_basis,
    design_matrix,
    gram_matrix,
    make_basis,
    make_treatment_basis,
    power_basis_for,
)
from medcal.linops import least_squares


def indicator(levels):
    return IndicatorBasis(BasisSpec(Family.INDICATOR, len(levels), discrete_levels=levels))


def test_binary_indicator_at_one():
    assert np.array_equal(indicator((0, 1)).evaluate(1.0), [[0.0, 1.0]])


def test_power_center_point():
    b = PowerBasis(BasisSpec(Family.POWER, 3, (-2.0, 2.0)))
    assert np.allclose(b.evaluate(0.0), [[1.0, 0.0, 0.0]])


def test_mixed_basis_values():
    b = MixedBasis(BasisSpec(Family.MIXED, 3, (0.0, 1.0)))
    assert np.array_equal(b.evaluate(0.0), [[1.0, 0.0, 0.0]])
    # 0.5 is the centre of the continuous domain, so the power part is (1, 0)
    assert np.allclose(b.evaluate(0.5), [[0.0, 1.0, 0.0]])


def test_tensor_dimension_is_product():
    a = PowerBasis(BasisSpec(Family.POWER, 2, (0.0, 1.0)))
    b = PowerBasis(BasisSpec(Family.POWER, 3, (0.0, 1.0)))
    assert TensorBasis((a, b)).dimension == 6


def test_tensor_of_constants_is_one():
    c = PowerBasis(BasisSpec(Family.POWER, 1, (0.0, 1.0)))
    out = TensorBasis((c, c)).evaluate(np.random.default_rng(0).normal(size=(4, 2)))
    assert np.array_equal(out, np.ones((4, 1)))


def test_tensor_hand_kronecker():
    # 1 on the domain [-2, 2] scales to 0.5
    part = PowerBasis(BasisSpec(Family.POWER, 2, (-2.0, 2.0)))
    out = TensorBasis((part, part)).evaluate(np.array([[1.0, 1.0]]))
    assert np.allclose(out, [[1.0, 0.5, 0.5, 0.25]])


def test_indicator_design():
    d = design_matrix(indicator((0, 1)), np.array([0.0, 1.0, 1.0]))
    assert np.array_equal(d, [[1, 0], [0, 1], [0, 1]])


def test_constant_design():
    b = power_basis_for(np.arange(4.0), 1)
    assert np.array_equal(design_matrix(b, np.arange(4.0)), np.ones((4, 1)))


def test_power_scaling_rows():
    b = PowerBasis(BasisSpec(Family.POWER, 2, (-1.5, 1.5)))
    assert np.allclose(b.evaluate(np.array([-1.5, 0.0, 1.5])), [[1, -1], [1, 0], [1, 1]])


def test_gram_indicator():
    g = gram_matrix(indicator((0, 1)).evaluate(np.array([0.0, 1.0, 1.0])))
    assert np.allclose(g, np.diag([1 / 3, 2 / 3]))


def test_gram_constant_and_orthonormal():
    assert np.allclose(gram_matrix(np.ones((5, 1))), [[1.0]])
    q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(10, 3)))
    assert np.allclose(gram_matrix(q * np.sqrt(10)), np.eye(3), atol=1e-12)


def test_bspline_refuses_out_of_domain():
    b = make_basis(BasisSpec(Family.BSPLINE, 5, (0.0, 1.0)))
    with pytest.raises(DomainError):
        b.evaluate(np.array([0.5, 1.2]))


def test_power_flags_extrapolation():
    b = PowerBasis(BasisSpec(Family.POWER, 3, (0.0, 1.0)))
    assert b.extrapolates(np.array([-0.1, 0.5, 1.1])).tolist() == [True, False, True]
    assert np.all(np.isfinite(b.evaluate(np.array([-0.1, 1.1]))))


def test_bad_specs():
    with pytest.raises(BasisError):
        BasisSpec(Family.POWER, 0, (0.0, 1.0))
    with pytest.raises(BasisError):
        BasisSpec(Family.INDICATOR, 3, discrete_levels=(0, 1))
    with pytest.raises(BasisError):
        BasisSpec(Family.MIXED, 1, (0.0, 1.0))
    with pytest.raises(BasisError):
        make_treatment_basis(BasisSpec(Family.POWER, 2, (0.0, 1.0)), TreatmentKind.DISCRETE)
    with pytest.raises(BasisError):
        make_treatment_basis(BasisSpec(Family.POWER, 2), TreatmentKind.CONTINUOUS)


def _basis_for(family, dim):
    if family == "indicator":
        return indicator(tuple(range(dim)))
    if family == "mixed":
        return MixedBasis(BasisSpec(Family.MIXED, max(dim, 2), (0.0, 3.0)))
    if family == "bspline":
        return make_basis(BasisSpec(Family.BSPLINE, max(dim, 4), (0.0, 3.0)))
    return PowerBasis(BasisSpec(Family.POWER, dim, (0.0, 3.0)))


@pytest.mark.property
@given(st.sampled_from(["power", "bspline", "indicator", "mixed"]), st.integers(1, 6), st.integers(0, 999))
def test_constant_reproduction(family, dim, seed):
    rng = np.random.default_rng(seed)
    b = _basis_for(family, dim)
    if family == "indicator":
        t = rng.integers(0, dim, 30).astype(float)
    elif family == "mixed":
        t = np.where(rng.uniform(size=30) < 0.3, 0.0, rng.uniform(0, 3, 30))
    else:
        t = rng.uniform(0, 3, 30)
    design = b.evaluate(t)
    coef = np.linalg.lstsq(design, np.ones(30), rcond=None)[0]
    assert np.max(np.abs(design @ coef - 1.0)) < 1e-9


@pytest.mark.property
@given(st.integers(1, 5), st.integers(0, 999))
def test_indicator_partition(levels, seed):
    t = np.random.default_rng(seed).integers(0, levels, 25).astype(float)
    d = indicator(tuple(range(levels))).evaluate(t)
    assert np.array_equal(d.sum(axis=1), np.ones(25))
    assert set(np.unique(d)) <= {0.0, 1.0}


@pytest.mark.property
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 999))
def test_tensor_is_rowwise_kronecker(da, db, dc, seed):
    z = np.random.default_rng(seed).uniform(-1, 1, size=(7, 3))
    parts = [PowerBasis(BasisSpec(Family.POWER, d, (-1.0, 1.0))) for d in (da, db, dc)]
    out = TensorBasis(tuple(parts)).evaluate(z)
    ref = np.stack([np.kron(np.kron(parts[0].evaluate(z[i, 0])[0], parts[1].evaluate(z[i, 1])[0]),
                            parts[2].evaluate(z[i, 2])[0]) for i in range(7)])
    assert np.array_equal(out, ref)


@pytest.mark.property
@given(st.floats(-1.0, 0.0), st.floats(1.0, 2.0), st.integers(2, 5), st.integers(0, 999))
def test_power_fit_invariant_to_domain_scaling(lo, hi, dim, seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1, 30)
    y = rng.normal(size=30)
    b1 = PowerBasis(BasisSpec(Family.POWER, dim, (0.0, 1.0)))
    b2 = PowerBasis(BasisSpec(Family.POWER, dim, (lo, hi)))
    f1 = b1.evaluate(t) @ least_squares(b1.evaluate(t), y)
    f2 = b2.evaluate(t) @ least_squares(b2.evaluate(t), y)
    assert np.allclose(f1, f2, atol=1e-8 * max(1.0, np.abs(f1).max()))


def test_covariate_basis_tensor_dimension():
    z = np.random.default_rng(0).normal(size=(10, 2))
    assert covariate_basis(z, 3).dimension == 9
