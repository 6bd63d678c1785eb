import numpy as np
import pytest

from medcal.data import Dataset
from medcal.simlab import (
    DEFAULT_GRID,
    DgpSpec,
    McConfig,
    McFailure,
    Scenario,
    TrueNuisances,
    armse,
    binary_eta,
    eif_binary,
    generate,
    oracle_series_mu,
    rng_for,
    run_mc,
    true_mu,
    true_pi_x,
    true_weight_product,
)


@pytest.mark.property
def test_generation_is_deterministic():
    a = generate(DgpSpec(Scenario.III, 50, seed=4))
    b = generate(DgpSpec(Scenario.III, 50, seed=4))
    for col in ("y", "t", "m", "x"):
        assert np.array_equal(getattr(a, col), getattr(b, col))


def test_treatment_spread():
    d = generate(DgpSpec(Scenario.I, 100_000, seed=1))
    # Var(T) = 0.09 * 0.75 + 16/12
    assert np.std(d.t) == pytest.approx(np.sqrt(0.0675 + 4 / 3), rel=0.03)
    assert np.std(d.t) == pytest.approx(1.18, rel=0.03)


def test_binary_design():
    d = generate(DgpSpec(Scenario.BINARY, 100_000, seed=2))
    assert set(np.unique(d.t)) == {0.0, 1.0}
    assert d.t.mean() == pytest.approx(0.5, abs=0.01)
    assert d.levels == (0.0, 1.0)


def test_true_curves():
    assert true_mu("binary", 1, 1) == pytest.approx(0.79)
    assert true_mu("I", 0, 0) == 0.0
    assert true_mu("III", 1, 1) == pytest.approx(0.79)
    corners = true_mu("binary", np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]))
    assert np.allclose(corners, [0.0, 0.09, 0.55, 0.79])


def test_true_weight_means():
    # E[pi_X(T, X)] is the probability that an independent (T, X) pair lies in
    # the conditional support |T - 0.3 X| <= 2, which is below one here.
    d = generate(DgpSpec(Scenario.II, 200_000, seed=3))
    other = generate(DgpSpec(Scenario.II, 200_000, seed=4))
    inside = np.mean(np.abs(d.t - 0.3 * other.x[:, 0]) <= 2)
    assert true_pi_x(d.t, d.x[:, 0], False).mean() == pytest.approx(inside, abs=0.01)
    assert np.allclose(true_weight_product(d, 0.0), true_pi_x(d.t, d.x[:, 0], False))
    nuis = TrueNuisances(d)
    assert np.allclose(nuis.pi("X", d.t), true_pi_x(d.t, d.x[:, 0], False))


def test_true_weights_reject_points_off_support():
    d = Dataset([0.0], [0.0], [5.0], [0.0])
    with pytest.raises(ValueError, match="observation 0"):
        true_weight_product(d, 0.0)


# Exact weights do not satisfy the sample balancing equations, so a constant
# outcome is only reproduced in the limit; K0=8 is the largest default candidate.
def test_oracle_constant_outcome():
    d = generate(DgpSpec(Scenario.I, 50_000, seed=5)).with_outcome(np.full(50_000, -1.25))
    got = oracle_series_mu(d, [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], k0=8)
    assert np.allclose(got, -1.25, rtol=0.05)


def test_oracle_large_sample_scenario2():
    d = generate(DgpSpec(Scenario.II, 50_000, seed=6))
    assert oracle_series_mu(d, [1.0], [0.0], k0=8)[0] == pytest.approx(0.55, abs=0.05)


def test_eif_is_mean_zero():
    d = generate(DgpSpec(Scenario.BINARY, 100_000, seed=7))
    s = eif_binary(d, 1.0, 0.0)
    assert abs(s.mean()) < 3 * s.std() / np.sqrt(s.size)


def test_eif_degenerate_noise():
    rng = np.random.default_rng(8)
    x = rng.uniform(-1.5, 1.5, 200)
    t = rng.integers(0, 2, 200).astype(float)
    m = 0.3 * t + 0.3 * x
    y = 0.3 * t + 0.3 * m + 0.3 * x + 0.5 * t * m + 0.25 * t**3
    d = Dataset(y, t, m, x, "discrete", (0.0, 1.0))
    for tt, tp in ((1.0, 0.0), (0.0, 1.0), (1.0, 1.0)):
        s = eif_binary(d, tt, tp)
        assert np.allclose(s, binary_eta(tt, tp, x) - true_mu("binary", tt, tp), atol=1e-12)


def test_armse_hand_example():
    assert armse([[0.3], [-0.4]], 0.0) == pytest.approx(np.sqrt(0.125), abs=1e-12)
    assert armse(np.zeros((3, 5)), np.zeros(5)) == 0.0


def test_grid():
    assert DEFAULT_GRID.size == 30 and 0.0 not in DEFAULT_GRID
    assert DEFAULT_GRID.min() == -1.5 and DEFAULT_GRID.max() == 1.5


def test_perfect_stub_has_zero_armse():
    def perfect(data, tuning):
        return lambda t, tp: true_mu(Scenario.II, t, tp)

    rep = run_mc(McConfig(scenarios=("II",), sizes=(100,), trials=3, methods=(perfect, "truth")))
    assert all(v == 0.0 for v in rep.armse.values())


def test_failing_estimator_trips_the_harness():
    def broken(data, tuning):
        raise RuntimeError("nope")

    cfg = McConfig(scenarios=("I",), sizes=(60,), trials=4, methods=("ols", broken))
    with pytest.raises(McFailure):
        run_mc(cfg)
    rep = run_mc(cfg, strict=False)
    assert rep.failure_rate("I", 60, "broken") == 1.0
    assert rep.failure_rate("I", 60, "ols") == 0.0


@pytest.mark.property
def test_report_is_deterministic():
    cfg = McConfig(scenarios=("I", "binary"), sizes=(150,), trials=3, methods=("cbs", "ols"), grid=(-0.5, 1.0))
    a, b = run_mc(cfg).as_dict(), run_mc(cfg).as_dict()
    assert a == b


@pytest.mark.property
def test_trial_seeds_do_not_depend_on_order():
    a = rng_for(1, 0, 500, 7).uniform(size=3)
    _ = rng_for(1, 0, 500, 6).uniform(size=3)
    assert np.array_equal(a, rng_for(1, 0, 500, 7).uniform(size=3))


@pytest.mark.property
def test_ols_is_inconsistent_in_scenario2():
    rep = run_mc(McConfig(scenarios=("II",), sizes=(500, 1000), trials=200, methods=("ols",)))
    small = rep.value("II", 500, "ols", "direct_at_t")
    large = rep.value("II", 1000, "ols", "direct_at_t")
    assert large >= 0.95 * small
