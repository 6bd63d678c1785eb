"""Nonparametric mediation analysis with covariate-balancing calibration weights.

Typical use::

    from medcal import fit_mediation, cbs_mu, tune

    tr = tune(data)
    fit = fit_mediation(data, tr.k1, tr.kx, tr.kmx, tr.k0)
    cbs_mu(fit, t=1.0, t_prime=0.0)
"""

from .basis import BasisSpec, Family, TreatmentKind
from .calibration import CalibrationFit, SolverOptions, calibrate
from .data import Dataset, ingest_csv, write_csv
from .estimators import (
    PANELS,
    EffectCurve,
    MediationFit,
    Method,
    cbk_mu,
    cbs_mu,
    effect_decomposition,
    effect_panels,
    fit_mediation,
)
from .inference import VarianceReport, bootstrap_ci, variance_cbs
from .kernels import KernelFamily, KernelSpec
from .tuning import TuningGrid, TuningResult, tune

__all__ = [
    "PANELS",
    "BasisSpec",
    "CalibrationFit",
    "Dataset",
    "EffectCurve",
    "Family",
    "KernelFamily",
    "KernelSpec",
    "MediationFit",
    "Method",
    "SolverOptions",
    "TreatmentKind",
    "TuningGrid",
    "TuningResult",
    "VarianceReport",
    "bootstrap_ci",
    "calibrate",
    "cbk_mu",
    "cbs_mu",
    "effect_decomposition",
    "effect_panels",
    "fit_mediation",
    "ingest_csv",
    "tune",
    "variance_cbs",
    "write_csv",
]

__version__ = "0.1.0"
