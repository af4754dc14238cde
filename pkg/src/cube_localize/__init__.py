"""Measures on the discrete cube {-1, 1}^n: log-Laplace analysis, stochastic
localization, reflection coupling, and audits of variance and entropy bounds."""

from __future__ import annotations

from .measure_core import (
    DiscreteMeasure,
    MeasureSpecError,
    TestFunction,
    build_measure,
    covariance,
    dirac,
    entropy,
    explicit,
    hadamard_rows,
    hamming_distance_to_set,
    ising,
    marginal_entropy_sum,
    mean,
    product,
    slice_measure,
    two_point,
    uniform,
    variance,
)
from .log_laplace import (
    CertificationReport,
    Condition,
    SearchConfig,
    certify,
    log_laplace,
    tilt,
    tilt_cov,
    tilt_mean,
)
from .fourier import walsh_fourier, multilinear_eval, g_identity_check
from .localization import SDEConfig, Scheme, run_localization, sample_tilted, simulate_paths
from .coupling import CouplingConfig, reflection_coupling, w1_dual, w1_exact
from .report import AuditReport, canonical_json

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "CertificationReport",
    "Condition",
    "CouplingConfig",
    "DiscreteMeasure",
    "MeasureSpecError",
    "SDEConfig",
    "Scheme",
    "SearchConfig",
    "TestFunction",
    "build_measure",
    "canonical_json",
    "certify",
    "covariance",
    "dirac",
    "entropy",
    "explicit",
    "g_identity_check",
    "hadamard_rows",
    "hamming_distance_to_set",
    "ising",
    "log_laplace",
    "marginal_entropy_sum",
    "mean",
    "multilinear_eval",
    "product",
    "reflection_coupling",
    "run_localization",
    "sample_tilted",
    "simulate_paths",
    "slice_measure",
    "tilt",
    "tilt_cov",
    "tilt_mean",
    "two_point",
    "uniform",
    "variance",
    "w1_dual",
    "w1_exact",
    "walsh_fourier",
]
