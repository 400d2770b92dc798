use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::lmm::{fit_random_intercept, wald_test, LmmError, LmmFit, ModelSpec, WaldRow};
use super::metrics::{metrics_csv, TrialMetrics};

pub const ALPHA: f64 = 0.05;

pub const COHORT_SIZE_NOTE: &str =
    "cohort sizes (n_obs) count trial observations, not participants";

#[derive(Debug, Clone)]
pub struct Cohort {
    pub name: String,
    pub metrics: Vec<TrialMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub cohort: String,
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFit {
    pub cohort: String,
    pub fit: LmmFit,
    pub wald: Vec<WaldRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub note: String,
    pub alpha: f64,
    pub cohorts: Vec<CohortFit>,
    pub coefficients: Vec<CoefRow>,
    /// `None` for a single cohort.
    pub agreement: Option<bool>,
    /// Per treatment term, whether the cohorts agree on it.
    pub agreement_by_term: BTreeMap<String, bool>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no cohorts to report")]
    Empty,
    #[error("cohort {cohort}: {source}")]
    Fit { cohort: String, source: LmmError },
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn significant(w: &WaldRow, alpha: f64) -> bool {
    w.p < alpha
}

/// Cohorts agree on a treatment term when all of them call it significant
/// or all of them do not, and where all call it significant the estimates
/// share a sign.
pub fn term_agreement(fits: &[CohortFit], alpha: f64) -> BTreeMap<String, bool> {
    let mut terms: Vec<&str> = fits
        .iter()
        .flat_map(|f| f.wald.iter().map(|w| w.term.as_str()))
        .filter(|t| *t != "(Intercept)")
        .collect();
    terms.sort_unstable();
    terms.dedup();
    terms
        .into_iter()
        .map(|term| {
            let rows: Option<Vec<&WaldRow>> = fits
                .iter()
                .map(|f| f.wald.iter().find(|w| w.term == term))
                .collect();
            let ok = rows.is_some_and(|rows| {
                let sig: Vec<bool> = rows.iter().map(|w| significant(w, alpha)).collect();
                let same_sig = sig.iter().all(|s| *s == sig[0]);
                let same_sign = !sig[0]
                    || rows
                        .iter()
                        .all(|w| w.estimate.signum() == rows[0].estimate.signum());
                same_sig && same_sign
            });
            (term.to_string(), ok)
        })
        .collect()
}

pub fn session_report(cohorts: &[Cohort], spec: &ModelSpec) -> Result<SessionReport, ReportError> {
    if cohorts.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut fits = Vec::with_capacity(cohorts.len());
    for c in cohorts {
        let fit = fit_random_intercept(&c.metrics, spec).map_err(|source| ReportError::Fit {
            cohort: c.name.clone(),
            source,
        })?;
        let wald = wald_test(&fit);
        fits.push(CohortFit {
            cohort: c.name.clone(),
            fit,
            wald,
        });
    }
    let coefficients = fits
        .iter()
        .flat_map(|f| {
            f.wald.iter().map(|w| CoefRow {
                cohort: f.cohort.clone(),
                term: w.term.clone(),
                estimate: w.estimate,
                se: w.se,
                z: w.z,
                p: w.p,
                significant: significant(w, ALPHA),
            })
        })
        .collect();
    let agreement_by_term = term_agreement(&fits, ALPHA);
    let agreement = (fits.len() >= 2).then(|| agreement_by_term.values().all(|v| *v));
    Ok(SessionReport {
        note: COHORT_SIZE_NOTE.to_string(),
        alpha: ALPHA,
        cohorts: fits,
        coefficients,
        agreement,
        agreement_by_term,
    })
}

pub fn coefficients_csv(report: &SessionReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.coefficients {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSummary {
    pub treatment: String,
    pub n_obs: usize,
    pub n_participants: usize,
    pub mean: f64,
    pub sd: f64,
    /// Model estimate of the treatment mean.
    pub fitted_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPlot {
    pub cohort: String,
    pub n_obs: usize,
    pub response: String,
    pub treatments: Vec<TreatmentSummary>,
    /// Treatment coefficients with 95% Wald intervals.
    pub effects: Vec<Effect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub term: String,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub note: String,
    pub cohorts: Vec<CohortPlot>,
}

pub fn plot_data(cohorts: &[Cohort], report: &SessionReport) -> PlotData {
    let z = 1.959_963_984_540_054;
    let plots = cohorts
        .iter()
        .zip(&report.cohorts)
        .map(|(c, f)| {
            let response = f.fit.response.as_str();
            let mut groups: BTreeMap<&str, (Vec<f64>, Vec<&str>)> = BTreeMap::new();
            for m in &c.metrics {
                let y = if response == "duration_s" {
                    m.duration_s
                } else {
                    m.path_length_m
                };
                let g = groups.entry(&m.treatment).or_default();
                g.0.push(y);
                g.1.push(&m.participant_id);
            }
            let treatments = groups
                .into_iter()
                .map(|(t, (ys, mut pids))| {
                    pids.sort_unstable();
                    pids.dedup();
                    let n = ys.len() as f64;
                    let mean = ys.iter().sum::<f64>() / n;
                    let sd = if ys.len() > 1 {
                        (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                    } else {
                        0.0
                    };
                    let fitted_mean = f.fit.beta[0] + f.fit.coef(t).map(|c| c.0).unwrap_or(0.0);
                    TreatmentSummary {
                        treatment: t.to_string(),
                        n_obs: ys.len(),
                        n_participants: pids.len(),
                        mean,
                        sd,
                        fitted_mean,
                    }
                })
                .collect();
            let effects = f
                .wald
                .iter()
                .filter(|w| w.term != "(Intercept)")
                .map(|w| Effect {
                    term: w.term.clone(),
                    estimate: w.estimate,
                    lo: w.estimate - z * w.se,
                    hi: w.estimate + z * w.se,
                    p: w.p,
                })
                .collect();
            CohortPlot {
                cohort: c.name.clone(),
                n_obs: c.metrics.len(),
                response: response.to_string(),
                treatments,
                effects,
            }
        })
        .collect();
    PlotData {
        note: COHORT_SIZE_NOTE.to_string(),
        cohorts: plots,
    }
}

/// Writes `metrics.csv`, `fit_{cohort}.json`, `report.json`,
/// `coefficients.csv` and `plot_data.json` into `dir`.
pub fn write_report(
    dir: &Path,
    cohorts: &[Cohort],
    report: &SessionReport,
) -> Result<Vec<PathBuf>, ReportError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<(), ReportError> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };
    let all: Vec<TrialMetrics> = cohorts
        .iter()
        .flat_map(|c| c.metrics.iter().cloned())
        .collect();
    put("metrics.csv".into(), metrics_csv(&all))?;
    for f in &report.cohorts {
        put(format!("fit_{}.json", f.cohort), pretty(&f.fit))?;
    }
    put("report.json".into(), pretty(report))?;
    put("coefficients.csv".into(), coefficients_csv(report))?;
    put("plot_data.json".into(), pretty(&plot_data(cohorts, report)))?;
    Ok(written)
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

/// Splits metrics into cohorts by the prefix of the participant id before
/// the last `-`, which is how simulated cohorts are named.
pub fn cohorts_by_prefix(metrics: Vec<TrialMetrics>) -> Vec<Cohort> {
    let mut groups: BTreeMap<String, Vec<TrialMetrics>> = BTreeMap::new();
    for m in metrics {
        let key = m
            .participant_id
            .rsplit_once('-')
            .map(|(a, _)| a.to_string())
            .unwrap_or_else(|| "all".to_string());
        groups.entry(key).or_default().push(m);
    }
    groups
        .into_iter()
        .map(|(name, metrics)| Cohort { name, metrics })
        .collect()
}
