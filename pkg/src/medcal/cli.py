"""Command-line front end: ``medcal {estimate,tune,simulate,weights}``.

Every output file carries the fully resolved configuration, seed included.
Settings come from built-in defaults, then ``--config`` (JSON), then flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import TreatmentKind
from .data import DataError, Dataset, ingest_csv
from .estimators import PANELS, EffectCurve, Method, fit_mediation, method_mu, effect_panels
from .kernels import KernelFamily, KernelSpec

log = logging.getLogger(__name__)

SUBCOMMANDS = ("estimate", "tune", "simulate", "weights")

DEFAULTS = {
    "input": None,
    "output": None,
    "format": None,
    "y": "y",
    "t": "t",
    "m": "m",
    "x": "x",
    "kind": "continuous",
    "method": "cbs",
    "grid": None,
    "tprime": 0.0,
    "force_grid": False,
    "k1": None,
    "kx": None,
    "kmx": None,
    "k0": None,
    "bandwidth_constant": None,
    "kernel": "epanechnikov2",
    "kernel_scale": "unit-variance",
    "bootstrap": 0,
    "seed": 0,
    "threads": 1,
    # simulate only
    "scenario": "I",
    "n": "500",
    "trials": 100,
    "retune": True,
}


_SIM_ONLY = {"scenario", "n", "trials", "retune"}
_DATA_ONLY = {"input", "y", "t", "m", "x", "kind", "force_grid"}
_IRRELEVANT = {
    "estimate": _SIM_ONLY,
    "tune": _SIM_ONLY | {"bootstrap", "method", "grid", "tprime"},
    "weights": _SIM_ONLY | {"bootstrap", "method", "grid", "tprime", "kernel", "kernel_scale", "bandwidth_constant"},
    "simulate": _DATA_ONLY | {"bootstrap"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    settings: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["settings"][name]
        except KeyError:
            raise AttributeError(name) from None

    def resolved(self) -> dict:
        skip = _IRRELEVANT[self.subcommand]
        return {"subcommand": self.subcommand, **{k: v for k, v in self.settings.items() if k not in skip}}


def parse_grid(spec: str) -> np.ndarray:
    """``"a:b:step"`` to the inclusive grid ``a, a+step, ..., b``."""
    try:
        a, b, step = (float(v) for v in spec.split(":"))
    except ValueError:
        raise ConfigError(f"grid must look like 'a:b:step', got {spec!r}") from None
    if step <= 0 or b < a:
        raise ConfigError(f"grid {spec!r} needs step > 0 and a <= b")
    count = int(np.floor((b - a) / step + 1e-9)) + 1
    return np.round(a + step * np.arange(count), 10)


def _split(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="medcal", description="Covariate-balancing estimation of mediation effects.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="subcommand", required=True)
    common = argparse.ArgumentParser(add_help=False)
    s = argparse.SUPPRESS
    common.add_argument("--config", default=s, help="JSON file with settings (flags win)")
    common.add_argument("--output", default=s, help="output path (.json or .csv)")
    common.add_argument("--format", choices=("json", "csv"), default=s)
    common.add_argument("--seed", type=int, default=s)
    common.add_argument("--threads", type=int, default=s)
    common.add_argument("--method", default=s, help="comma list of cbs, cbk, ols, ipw (simulate: also oracle, truth)")
    common.add_argument("--grid", default=s, help="treatment grid 'a:b:step'")
    common.add_argument("--tprime", type=float, default=s)
    for k in ("k1", "kx", "kmx", "k0"):
        common.add_argument(f"--{k}", type=int, default=s, help=f"fix {k} instead of tuning it")
    common.add_argument("--bandwidth-constant", type=float, default=s, dest="bandwidth_constant")
    common.add_argument("--kernel", choices=[f.value for f in KernelFamily], default=s)
    common.add_argument(
        "--kernel-scale",
        choices=("unit-variance", "support"),
        default=s,
        dest="kernel_scale",
        help="bandwidth on the kernel's standard-deviation scale or its support half-width",
    )
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", default=s, help="CSV file with a header row")
    data.add_argument("--y", default=s, help="outcome column")
    data.add_argument("--t", default=s, help="treatment column")
    data.add_argument("--m", default=s, help="comma list of mediator columns")
    data.add_argument("--x", default=s, help="comma list of covariate columns")
    data.add_argument("--kind", choices=[k.value for k in TreatmentKind], default=s)
    data.add_argument("--force-grid", action="store_true", default=s, dest="force_grid")

    est = sub.add_parser("estimate", parents=[common, data], help="effect curves with SEs and CIs")
    est.add_argument("--bootstrap", type=int, default=s, help="bootstrap replicates (0: plug-in SEs only)")
    sub.add_parser("tune", parents=[common, data], help="data-driven smoothing parameters")
    sub.add_parser("weights", parents=[common, data], help="calibration weight diagnostics")
    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo ARMSE study")
    sim.add_argument("--scenario", default=s, help="comma list of I, II, III, binary")
    sim.add_argument("--n", default=s, help="comma list of sample sizes")
    sim.add_argument("--trials", type=int, default=s)
    sim.add_argument("--no-retune", action="store_false", dest="retune", default=s)
    return p


def resolve_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("subcommand", "verbose")}
    settings = dict(DEFAULTS)
    if "config" in flags:
        path = Path(flags.pop("config"))
        try:
            from_file = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
        from_file = {k.replace("-", "_"): v for k, v in from_file.items()}
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        settings.update(from_file)
    settings.update(flags)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    return RunConfig(args.subcommand, settings)


# ---------------------------------------------------------------------------
# helpers


def _load(cfg: RunConfig) -> Dataset:
    if not cfg.input:
        raise ConfigError("--input is required")
    return ingest_csv(cfg.input, cfg.y, cfg.t, _split(cfg.m), _split(cfg.x), cfg.kind)


def _overrides(cfg: RunConfig) -> dict:
    return {k: int(cfg.settings[k]) for k in ("k1", "kx", "kmx", "k0") if cfg.settings.get(k) is not None}


def _grid(cfg: RunConfig, data: Dataset | None) -> np.ndarray:
    if cfg.grid is None:
        if data is not None and data.kind is TreatmentKind.DISCRETE:
            return np.array(data.levels, float)
        from .simlab import DEFAULT_GRID

        grid = DEFAULT_GRID.copy()
        if data is not None:
            lo, hi = np.quantile(data.t, [0.05, 0.95])
            grid = np.round(np.linspace(lo, hi, 21), 10)
        return grid
    grid = parse_grid(cfg.grid) if isinstance(cfg.grid, str) else np.asarray(cfg.grid, float)
    if data is not None and not cfg.force_grid:
        lo, hi = float(data.t.min()), float(data.t.max())
        if grid.min() < lo or grid.max() > hi or not lo <= cfg.tprime <= hi:
            raise ConfigError(f"grid or t' outside the observed treatment range [{lo:g}, {hi:g}]; use --force-grid")
    return grid


def _kernel_spec(cfg: RunConfig, h: float) -> KernelSpec:
    return KernelSpec(cfg.kernel, h, standardized=cfg.kernel_scale == "unit-variance")


def _tune(cfg: RunConfig, data: Dataset):
    from .tuning import TuningGrid, tune

    grid = TuningGrid(kernel=cfg.kernel, bandwidth_constant=cfg.bandwidth_constant)
    return tune(data, grid, overrides=_overrides(cfg))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "value") and not isinstance(obj, (str, int)):
        return obj.value
    return obj


def _curve_rows(curves: list[EffectCurve]) -> list[dict]:
    rows = []
    for c in curves:
        for j, t in enumerate(c.grid):
            rows.append(
                {
                    "method": c.method.value,
                    "panel": c.panel,
                    "t": float(t),
                    "estimate": float(c.mu_hat[j]),
                    "se": None if c.se is None else float(c.se[j]),
                    "ci_low": None if c.ci_low is None else float(c.ci_low[j]),
                    "ci_high": None if c.ci_high is None else float(c.ci_high[j]),
                }
            )
    return rows


def _output_format(cfg: RunConfig) -> str:
    if cfg.format:
        return cfg.format
    if cfg.output and str(cfg.output).lower().endswith(".csv"):
        return "csv"
    return "json"


def write_output(cfg: RunConfig, payload: dict, rows: list[dict] | None = None) -> str:
    """Serialize ``payload`` (JSON) or ``rows`` (CSV with a config header)."""
    payload = {"config": cfg.resolved(), **payload}
    if _output_format(cfg) == "csv":
        buf = io.StringIO()
        buf.write("# config: " + json.dumps(_jsonable(payload["config"]), sort_keys=True) + "\n")
        rows = rows or []
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        text = buf.getvalue()
    else:
        text = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
    if cfg.output:
        Path(cfg.output).write_text(text)
    else:
        sys.stdout.write(text)
    return text


# ---------------------------------------------------------------------------
# subcommands


def _estimator_for(method: Method, cfg: RunConfig, tuning):
    """``data -> mu`` closure re-running calibration, for the bootstrap."""

    def est(d: Dataset):
        fit = None
        if method in (Method.CBS, Method.CBK):
            fit = fit_mediation(d, tuning.k1, tuning.kx, tuning.kmx, tuning.k0)
        kernel = _kernel_spec(cfg, tuning.h) if method is Method.CBK else None
        return method_mu(fit, d, method, kernel)

    return est


def cmd_estimate(cfg: RunConfig) -> dict:
    from .inference import bootstrap_ci, cbs_panels_with_se

    data = _load(cfg)
    grid = _grid(cfg, data)
    methods = [Method(m) for m in _split(cfg.method)]
    tuning = _tune(cfg, data)
    fit = fit_mediation(data, tuning.k1, tuning.kx, tuning.kmx, tuning.k0)
    curves: list[EffectCurve] = []
    diagnostics = {"tuning": tuning.as_dict(), "n": data.n, "converged": fit.converged}
    for method in methods:
        if cfg.bootstrap:
            out, dropped = bootstrap_ci(
                _estimator_for(method, cfg, tuning), data, grid, cfg.tprime, int(cfg.bootstrap), cfg.seed, method
            )
            diagnostics[f"{method.value}_bootstrap_dropped"] = dropped
            curves.extend(out[k] for k in ("mu", *PANELS))
        elif method is Method.CBS:
            out, diag = cbs_panels_with_se(fit, grid, cfg.tprime)
            diagnostics["cbs_variance"] = diag
            curves.extend(out[k] for k in ("mu", *PANELS))
        else:
            kernel = _kernel_spec(cfg, tuning.h) if method is Method.CBK else None
            mu = method_mu(fit, data, method, kernel)
            pans = effect_panels(mu, grid, cfg.tprime, method)
            mu_curve = EffectCurve(method, cfg.tprime, grid, mu(grid, np.full_like(grid, cfg.tprime)), panel="mu")
            curves.extend([mu_curve, *(pans[k] for k in PANELS)])
    rows = _curve_rows(curves)
    write_output(cfg, {"grid": grid, "curves": rows, "diagnostics": diagnostics}, rows)
    return {"curves": rows}


def cmd_tune(cfg: RunConfig) -> dict:
    data = _load(cfg)
    result = _tune(cfg, data).as_dict()
    rows = [{k: result[k] for k in ("k1", "kx", "kmx", "k0", "h")}]
    write_output(cfg, {"tuning": result}, rows)
    return result


def cmd_weights(cfg: RunConfig) -> dict:
    data = _load(cfg)
    tuning = _tune(cfg, data)
    fit = fit_mediation(data, tuning.k1, tuning.kx, tuning.kmx, tuning.k0, require_convergence=False)
    summary = {}
    for name, cal in (("pi_x", fit.fit_x), ("pi_mx", fit.fit_mx)):
        w = cal.in_sample_weights
        summary[name] = {
            "min": float(w.min()),
            "max": float(w.max()),
            "mean": float(w.mean()),
            "balance_residual": cal.balance_residual,
            "converged": bool(cal.converged),
            "iterations": int(cal.iterations),
        }
    rows = [
        {"row": i + 1, "pi_x": float(a), "pi_mx": float(b)}
        for i, (a, b) in enumerate(zip(fit.fit_x.in_sample_weights, fit.fit_mx.in_sample_weights))
    ]
    write_output(cfg, {"summary": summary, "tuning": tuning.as_dict(), "weights": rows}, rows)
    return summary


def cmd_simulate(cfg: RunConfig) -> dict:
    from .simlab import McConfig, run_mc

    grid = None if cfg.grid is None else (parse_grid(cfg.grid) if isinstance(cfg.grid, str) else cfg.grid)
    mc = McConfig(
        scenarios=tuple(_split(cfg.scenario)),
        sizes=tuple(int(v) for v in _split(cfg.n)),
        trials=int(cfg.trials),
        methods=tuple(_split(cfg.method)),
        grid=None if grid is None else tuple(float(g) for g in grid),
        t_prime=float(cfg.tprime),
        seed=int(cfg.seed),
        retune=bool(cfg.retune),
        threads=int(cfg.threads),
        overrides=_overrides(cfg),
        kernel=cfg.kernel,
        bandwidth_constant=cfg.bandwidth_constant,
        standardized_kernel=cfg.kernel_scale == "unit-variance",
    )
    report = run_mc(mc)
    payload = report.as_dict()
    write_output(cfg, {"report": payload}, payload["armse"])
    return payload


COMMANDS = {"estimate": cmd_estimate, "tune": cmd_tune, "simulate": cmd_simulate, "weights": cmd_weights}


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
        COMMANDS[cfg.subcommand](cfg)
    except SystemExit:
        raise
    except (ConfigError, DataError) as exc:
        _report_error("input", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        log.debug("failure", exc_info=True)
        _report_error("runtime", exc)
        return 1
    return 0


def _report_error(kind: str, exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
