"""Simulation designs, true effect curves, oracle estimators and the Monte Carlo harness.

Continuous designs: ``X ~ U[-1.5, 1.5]``, ``T = 0.3 X + e``, ``M = 0.3 T + 0.3 X + V``
with ``e, U, V ~ U[-2, 2]``. The binary design draws ``T ~ Bernoulli(logit^-1(X))``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .basis import TreatmentKind
from .data import Dataset
from .inference import Nuisances
from .linops import solve_spd

log = logging.getLogger(__name__)

X_HALF = 1.5
NOISE_HALF = 2.0
DEFAULT_GRID = np.round(np.concatenate([np.arange(-15, 0), np.arange(1, 16)]) / 10.0, 10)


class Scenario(str, enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    BINARY = "binary"


@dataclass(frozen=True)
class DgpSpec:
    scenario: Scenario
    n: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.n < 1:
            raise ValueError("sample size must be positive")


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Generator for one work item; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def outcome(scenario: Scenario, t, m, x, u):
    scenario = Scenario(scenario)
    base = 0.3 * t + 0.3 * m + 0.3 * x + u
    if scenario is Scenario.I:
        return base + 0.5 * t * m
    if scenario is Scenario.II:
        return base + 0.25 * t**3
    return base + 0.5 * t * m + 0.25 * t**3


def generate(spec: DgpSpec, rng: np.random.Generator | None = None) -> Dataset:
    rng = rng_for(spec.seed) if rng is None else rng
    n = spec.n
    x = rng.uniform(-X_HALF, X_HALF, n)
    eps = rng.uniform(-NOISE_HALF, NOISE_HALF, n)
    u = rng.uniform(-NOISE_HALF, NOISE_HALF, n)
    v = rng.uniform(-NOISE_HALF, NOISE_HALF, n)
    if spec.scenario is Scenario.BINARY:
        t = (rng.uniform(size=n) < expit(x)).astype(float)
        kind = TreatmentKind.DISCRETE
        levels = (0.0, 1.0)
    else:
        t = 0.3 * x + eps
        kind = TreatmentKind.CONTINUOUS
        levels = None
    m = 0.3 * t + 0.3 * x + v
    y = outcome(spec.scenario, t, m, x, u)
    return Dataset(y, t, m, x, kind, levels)


def true_mu(scenario: Scenario | str, t, t_prime):
    scenario = Scenario(scenario)
    t = np.asarray(t, float)
    tp = np.asarray(t_prime, float)
    if scenario is Scenario.I:
        out = 0.3 * t + 0.09 * tp + 0.15 * t * tp
    elif scenario is Scenario.II:
        out = 0.3 * t + 0.09 * tp + 0.25 * t**3
    else:
        # the binary design uses the Scenario III outcome equation
        out = 0.3 * t + 0.09 * tp + 0.15 * t * tp + 0.25 * t**3
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# True nuisances of the designs above


def _box(z):
    """Indicator of ``|z| <= NOISE_HALF``."""
    return (np.abs(z) <= NOISE_HALF).astype(float)


def treatment_marginal_density(t):
    """Exact ``f_T`` for the continuous designs (uniform X convolved with uniform noise)."""
    t = np.asarray(t, float)
    lo = np.maximum(-X_HALF, (t - NOISE_HALF) / 0.3)
    hi = np.minimum(X_HALF, (t + NOISE_HALF) / 0.3)
    return np.maximum(hi - lo, 0.0) / (2 * X_HALF * 2 * NOISE_HALF)


def treatment_conditional_density(t, x, binary: bool):
    """``f_{T|X}(t | x)``: a probability mass for the binary design."""
    t = np.asarray(t, float)
    x = np.asarray(x, float)
    if binary:
        p1 = expit(x)
        return np.where(t == 1, p1, np.where(t == 0, 1 - p1, 0.0))
    return _box(t - 0.3 * x) / (2 * NOISE_HALF)


def mediator_density(m, t, x):
    """``f_{M|T,X}(m | t, x)``, a box of height 1/4."""
    return _box(np.asarray(m, float) - 0.3 * np.asarray(t, float) - 0.3 * np.asarray(x, float)) / (2 * NOISE_HALF)


def true_pi_x(t, x, binary: bool):
    """``f_T(t) / f_{T|X}(t | x)``."""
    ft = np.where(np.isin(t, (0.0, 1.0)), 0.5, 0.0) if binary else treatment_marginal_density(t)
    cond = treatment_conditional_density(t, x, binary)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(cond > 0, ft / np.where(cond > 0, cond, 1.0), np.nan)


def true_weight_product(data: Dataset, delta: float) -> np.ndarray:
    """Exact ``pi_MX(T) / pi_MX(T+delta) * pi_X(T+delta)`` at every observation.

    By Bayes' rule this equals ``f_T(T) f(M | T+delta, X) / {f(M | T, X) f(T | X)}``,
    which only involves the observed treatment.
    """
    x = data.x[:, 0]
    m = data.m[:, 0]
    t = data.t
    binary = data.kind is TreatmentKind.DISCRETE
    ft = np.full(t.shape, 0.5) if binary else treatment_marginal_density(t)
    den = mediator_density(m, t, x) * treatment_conditional_density(t, x, binary)
    bad = np.flatnonzero(den <= 0)
    if bad.size:
        raise ValueError(f"observation {int(bad[0])} lies outside the design support")
    return ft * mediator_density(m, t + delta, x) / den


def oracle_series_mu(data: Dataset, t, t_prime, k0: int | None = None) -> np.ndarray:
    """Series regression of ``w_i Y_i`` on the treatment with the exact weights.

    For a binary treatment the basis is the two cell indicators and ``k0`` is
    ignored.
    """
    from .estimators import _pairs, treatment_basis_for

    t, tp = _pairs(t, t_prime)
    if data.kind is TreatmentKind.DISCRETE:
        basis = treatment_basis_for(data, len(data.levels))
    else:
        if k0 is None:
            raise ValueError("a continuous treatment needs k0")
        basis = treatment_basis_for(data, k0)
    u = basis.evaluate(data.t)
    gram = u.T @ u
    out = np.empty(t.shape)
    deltas = np.round(tp - t, 12)
    for delta in np.unique(deltas):
        sel = deltas == delta
        coef, _ = solve_spd(gram, u.T @ (true_weight_product(data, float(delta)) * data.y))
        out[sel] = basis.evaluate(t[sel]) @ coef
    return out


def binary_eta(t: float, t_prime: float, x):
    """``E[E(Y | X, M, T=t) | T=t', X]`` for the binary design."""
    x = np.asarray(x, float)
    return 0.3 * t + 0.25 * t**3 + 0.3 * x + (0.3 + 0.5 * t) * (0.3 * t_prime + 0.3 * x)


def binary_outcome_mean(t: float, m, x):
    m = np.asarray(m, float)
    x = np.asarray(x, float)
    return 0.3 * t + 0.25 * t**3 + 0.3 * x + (0.3 + 0.5 * t) * m


def eif_binary(data: Dataset, t: float, t_prime: float) -> np.ndarray:
    """Efficient influence function of ``mu(t, t')`` at each row of a binary-design dataset."""
    if data.kind is not TreatmentKind.DISCRETE:
        raise ValueError("eif_binary needs the binary design")
    x = data.x[:, 0]
    m = data.m[:, 0]
    tt = data.t
    if np.any(mediator_density(m, tt, x) <= 0):
        raise ValueError("row outside the analytic support")
    q = binary_outcome_mean(t, m, x)
    eta = binary_eta(t, t_prime, x)
    ft = treatment_conditional_density(t, x, True)
    ftp = treatment_conditional_density(t_prime, x, True)
    at_t = tt == t
    ratio = np.where(at_t, mediator_density(m, t_prime, x) / np.where(at_t, mediator_density(m, t, x), 1.0), 0.0)
    first = at_t * ratio / ft * (data.y - q)
    second = (tt == t_prime) / ftp * (q - eta)
    return first + second + eta - float(true_mu(Scenario.BINARY, t, t_prime))


# ---------------------------------------------------------------------------
# Monte Carlo harness


class McFailure(RuntimeError):
    """An estimator failed in more than the tolerated share of trials."""


FAILURE_TOLERANCE = 0.05


def armse(estimates, truth) -> float:
    """Root mean squared error over trials at each grid point, averaged over the grid.

    ``estimates`` is trials x grid; ``truth`` is broadcast against it.
    """
    est = np.atleast_2d(np.asarray(estimates, float))
    if est.shape[0] == 0:
        return float("nan")
    return float(np.mean(np.sqrt(np.mean((est - truth) ** 2, axis=0))))


@dataclass(frozen=True)
class McConfig:
    """One Monte Carlo study.

    ``methods`` may mix built-in names (cbs, cbk, ols, ipw, oracle, truth)
    with callables ``f(data, tuning) -> mu`` where ``mu(t, t')`` is vectorized.
    ``points`` are extra ``(t, t')`` pairs whose per-trial estimates are kept.
    With ``retune=False`` the smoothing parameters are chosen once on the
    first trial of each design and reused.
    """

    scenarios: tuple = (Scenario.I,)
    sizes: tuple = (500,)
    trials: int = 100
    methods: tuple = ("cbs", "cbk")
    grid: tuple | None = None
    t_prime: float = 0.0
    seed: int = 20240101
    retune: bool = True
    points: tuple = ()
    threads: int = 1
    overrides: tuple = ()
    kernel: str = "epanechnikov2"
    bandwidth_constant: float | None = None
    standardized_kernel: bool = True
    keep_trials: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        object.__setattr__(self, "scenarios", tuple(Scenario(s) for s in self.scenarios))
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        object.__setattr__(self, "points", tuple((float(a), float(b)) for a, b in self.points))
        if isinstance(self.overrides, dict):
            object.__setattr__(self, "overrides", tuple(sorted(self.overrides.items())))

    def grid_for(self, scenario: Scenario) -> np.ndarray:
        if self.grid is not None:
            return np.asarray(self.grid, float)
        if scenario is Scenario.BINARY:
            return np.array([1.0])
        return DEFAULT_GRID.copy()

    def method_names(self) -> list[str]:
        return [m if isinstance(m, str) else getattr(m, "__name__", repr(m)) for m in self.methods]


@dataclass
class McReport:
    """ARMSE table keyed by ``(scenario, n, method, panel)``; values are 10^3 x ARMSE."""

    config: McConfig
    armse: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    trials: dict = field(default_factory=dict)
    point_estimates: dict = field(default_factory=dict)
    panel_estimates: dict = field(default_factory=dict)
    tuning: dict = field(default_factory=dict)

    def value(self, scenario, n, method, panel) -> float:
        return self.armse[(Scenario(scenario).value, int(n), method, panel)]

    def failure_rate(self, scenario, n, method) -> float:
        key = (Scenario(scenario).value, int(n), method)
        return self.failures.get(key, 0) / self.config.trials

    def rows(self) -> list[dict]:
        return [
            {"scenario": s, "n": n, "method": m, "panel": p, "armse_x1000": v}
            for (s, n, m, p), v in sorted(self.armse.items())
        ]

    def as_dict(self) -> dict:
        return {
            "trials": self.config.trials,
            "armse": self.rows(),
            "failures": [
                {"scenario": s, "n": n, "method": m, "count": c} for (s, n, m), c in sorted(self.failures.items())
            ],
            "tuning": {f"{s}/{n}": v for (s, n), v in sorted(self.tuning.items())},
        }


def _builtin_mu(name: str, data: Dataset, tuning, cfg: McConfig, fit_cache: dict):
    from .estimators import cbk_mu_many, cbs_mu_many, fit_mediation, ipw_binary_baseline, ols_baseline
    from .kernels import KernelSpec

    if name == "truth":
        scenario = fit_cache["scenario"]
        return lambda t, tp: true_mu(scenario, t, tp)
    if name == "ols":
        return ols_baseline(data)
    if name == "ipw":
        return ipw_binary_baseline(data).mu
    if name == "oracle":
        return lambda t, tp: oracle_series_mu(data, t, tp, tuning.k0)
    if "fit" not in fit_cache:
        fit_cache["fit"] = fit_mediation(data, tuning.k1, tuning.kx, tuning.kmx, tuning.k0)
    fit = fit_cache["fit"]
    if name == "cbs":
        return lambda t, tp: cbs_mu_many(fit, t, tp)
    if name == "cbk":
        kernel = KernelSpec(cfg.kernel, tuning.h, standardized=cfg.standardized_kernel)
        return lambda t, tp: cbk_mu_many(fit, t, tp, kernel)
    raise ValueError(f"unknown Monte Carlo method {name!r}")


def _tuning_for(data: Dataset, cfg: McConfig):
    from .tuning import TuningGrid, tune

    grid = TuningGrid(kernel=cfg.kernel, bandwidth_constant=cfg.bandwidth_constant)
    return tune(data, grid, overrides=dict(cfg.overrides))


def _run_trial(cfg: McConfig, scenario: Scenario, n: int, trial: int, fixed_tuning=None):
    """Panels and recorded points for every method in one trial."""
    from .estimators import panel_pairs, panels_from_mu

    data = generate(DgpSpec(scenario, n), rng_for(cfg.seed, _scenario_index(scenario), n, trial))
    grid = cfg.grid_for(scenario)
    ts, tps = panel_pairs(grid, cfg.t_prime)
    pts = np.array(cfg.points, float).reshape(-1, 2)
    all_t = np.concatenate([ts, pts[:, 0]])
    all_tp = np.concatenate([tps, pts[:, 1]])
    out = {}
    needs_tuning = any(isinstance(m, str) and m not in ("ols", "ipw", "truth") for m in cfg.methods) or any(
        callable(m) for m in cfg.methods
    )
    tuning = fixed_tuning
    tuning_error = None
    if tuning is None and needs_tuning:
        try:
            tuning = _tuning_for(data, cfg)
        except Exception as exc:  # noqa: BLE001 - recorded as a trial failure
            tuning_error = exc
    cache = {"scenario": scenario}
    for method, name in zip(cfg.methods, cfg.method_names()):
        try:
            if tuning_error is not None and name not in ("ols", "ipw", "truth"):
                raise tuning_error
            mu = method(data, tuning) if callable(method) else _builtin_mu(method, data, tuning, cfg, cache)
            vals = np.asarray(mu(all_t, all_tp), float)
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError("non-finite estimate")
            out[name] = (panels_from_mu(vals[: ts.size], grid.size), vals[ts.size :])
        except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal per trial
            log.debug("trial %d, %s failed: %s", trial, name, exc)
            out[name] = exc
    return out, (tuning.as_dict() if tuning is not None else None)


def _scenario_index(scenario: Scenario) -> int:
    return list(Scenario).index(scenario)


def _trial_job(args):
    return _run_trial(*args)


def run_mc(cfg: McConfig, strict: bool = True) -> McReport:
    """Run the study; trials are seeded by ``(seed, scenario, n, trial)``.

    With ``strict`` an estimator that fails in more than 5% of the trials of
    a design raises :class:`McFailure` after the report is assembled.
    """
    from .estimators import PANELS, panel_pairs, panels_from_mu

    report = McReport(cfg)
    names = cfg.method_names()
    for scenario in cfg.scenarios:
        grid = cfg.grid_for(scenario)
        ts, tps = panel_pairs(grid, cfg.t_prime)
        truth = panels_from_mu(true_mu(scenario, ts, tps), grid.size)
        for n in cfg.sizes:
            fixed = None
            if not cfg.retune:
                first = generate(DgpSpec(scenario, n), rng_for(cfg.seed, _scenario_index(scenario), n, 0))
                fixed = _tuning_for(first, cfg)
            jobs = [(cfg, scenario, n, r, fixed) for r in range(cfg.trials)]
            if cfg.threads > 1:
                from concurrent.futures import ProcessPoolExecutor

                with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
                    results = list(pool.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * cfg.threads))))
            else:
                results = [_trial_job(j) for j in jobs]
            key_sn = (scenario.value, n)
            report.tuning[key_sn] = [tr for _, tr in results]
            for name in names:
                good = [res[name] for res, _ in results if not isinstance(res[name], Exception)]
                report.failures[(scenario.value, n, name)] = cfg.trials - len(good)
                report.trials[(scenario.value, n, name)] = len(good)
                panel_arrays = {p: np.array([g[0][p] for g in good]).reshape(len(good), grid.size) for p in PANELS}
                for p in PANELS:
                    report.armse[(scenario.value, n, name, p)] = 1e3 * armse(panel_arrays[p], truth[p])
                if cfg.points:
                    report.point_estimates[(scenario.value, n, name)] = np.array([g[1] for g in good])
                if cfg.keep_trials:
                    report.panel_estimates[(scenario.value, n, name)] = panel_arrays
    if strict:
        bad = [k for k, c in report.failures.items() if c > FAILURE_TOLERANCE * cfg.trials]
        if bad:
            raise McFailure(f"estimators failed in more than 5% of trials: {bad}")
    return report


def _mediator_given_x(m, x, binary: bool):
    """``f_{M|X}(m | x)``."""
    m = np.asarray(m, float)
    x = np.asarray(x, float)
    if binary:
        p1 = expit(x)
        return p1 * mediator_density(m, 1.0, x) + (1 - p1) * mediator_density(m, 0.0, x)
    # M - 0.39 X = 0.3 e + V: a uniform of half-width 0.6 plus one of half-width 2
    s = m - 0.39 * x
    a, b = 0.3 * NOISE_HALF, NOISE_HALF
    overlap = np.minimum(s + a, b) - np.maximum(s - a, -b)
    return np.maximum(overlap, 0.0) / (2 * a * 2 * b)


class TrueNuisances(Nuisances):
    """Exact weighting functions and density ratios of the simulation designs.

    Plugs into the influence-function code in place of the estimated
    nuisances. The conditional means stay least-squares projections, on the
    sieves selected by ``projection_dim`` (see ``PluginSettings``).
    """

    def __init__(self, data: Dataset, projection_dim: int | str | None = "auto"):
        self.data = data
        self.projection_setting = projection_dim
        self.binary = data.kind is TreatmentKind.DISCRETE
        self._x = data.x[:, 0]
        self._m = data.m[:, 0]

    def _cond_t(self, which, t):
        x, m = self._x, self._m
        ftx = treatment_conditional_density(t, x, self.binary)
        if which == "X":
            return ftx
        return mediator_density(m, t, x) * ftx / _mediator_given_x(m, x, self.binary)

    def pi(self, which, t):
        t = np.asarray(t, float)
        ft = np.where(np.isin(t, (0.0, 1.0)), 0.5, 0.0) if self.binary else treatment_marginal_density(t)
        cond = self._cond_t(which.upper(), t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(cond > 0, ft / np.where(cond > 0, cond, 1.0), np.nan)

    def density_ratio(self, which, delta):
        t = self.data.t
        num = self._cond_t(which.upper(), t - delta)
        den = self._cond_t(which.upper(), t)
        return num / den, 0
