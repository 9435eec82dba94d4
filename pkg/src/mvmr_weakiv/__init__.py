"""Weak-instrument-robust inference for multivariable Mendelian randomization
with two-sample summary data."""

from .core_stats import (
    ConditionalFReport,
    Estimate,
    NumericalError,
    conditional_f,
    conditional_f_report,
    gmm_criterion,
    gmm_estimate,
    ivw_estimate,
    moment_function,
    omega,
    wald_stat,
)
from .robust import (
    ConfidenceSetResult,
    LcCalibration,
    MixtureDraws,
    OverdispersionFit,
    ThetaGrid,
    andrews_wald_stat,
    ar_stat,
    crit_value,
    distortion_cutoff,
    evaluate_statistics,
    invert_confidence_set,
    kleibergen_D,
    kleibergen_oh_stat,
    kstar_stat,
    lc_stat,
    select_instruments,
    solve_a,
    solve_kappa2,
)
from .summary_data import (
    MultivariableSummary,
    SummaryDataError,
    UnivariableGwasTables,
    build_multivariable_summary,
    example_paths,
    harmonize_variants,
    load_gwas_tables,
    write_gwas_tables,
)
from .report import AnalysisReport, run_analysis

__version__ = "0.1.0"
