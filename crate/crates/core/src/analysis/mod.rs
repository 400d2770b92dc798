//! Per-trial metrics, the random-intercept mixed model and cohort reports.

pub mod lmm;
pub mod metrics;
pub mod report;

pub use lmm::{
    fit_at_lambda, fit_random_intercept, fit_random_intercept_with, normal_two_sided_p,
    reml_profile, wald_test, FitOptions, LmmError, LmmFit, ModelSpec, WaldRow,
};
pub use metrics::{
    compute_metrics, metrics_csv, parse_trial_csv, ParseError, TrialCsv, TrialMetrics,
};
pub use report::{
    coefficients_csv, cohorts_by_prefix, plot_data, session_report, term_agreement, write_report,
    CoefRow, Cohort, CohortFit, PlotData, ReportError, SessionReport, ALPHA, COHORT_SIZE_NOTE,
};
