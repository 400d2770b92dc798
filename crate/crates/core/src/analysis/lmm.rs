//! Random-intercept linear mixed model fitted by restricted maximum
//! likelihood.
//!
//! The model is `y = Xβ + Zu + e` with one fixed treatment factor, a random
//! intercept per participant, `u ~ N(0, σ_u² I)` and `e ~ N(0, σ_e² I)`.
//! Writing `λ = σ_u²/σ_e²` and `H = I + λZZ'`, generalized least squares
//! gives `β(λ)` and `σ_e²(λ)` in closed form, leaving a one-dimensional
//! profile in `λ`:
//!
//! ```text
//! ℓ(λ) = -½ [ (n-p) ln σ²(λ) + ln|H| + ln|X'H⁻¹X| ] - (n-p)/2 (1 + ln 2π)
//! σ²(λ) = r'H⁻¹r / (n-p),   r = y - Xβ(λ)
//! ```
//!
//! `H` is block diagonal with `H_i⁻¹ = I - c_i J`, `c_i = λ/(1+λn_i)` and
//! `ln|H| = Σ ln(1+λn_i)`, so each evaluation is linear in the data.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::metrics::TrialMetrics;

pub const LAMBDA_MAX: f64 = 1e6;
pub const LAMBDA_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `path_length_m` or `duration_s`.
    pub response: String,
    /// Reference level of the treatment factor.
    pub reference: String,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            response: "path_length_m".into(),
            reference: "Control".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub response: String,
    pub reference: String,
    /// `(Intercept)` followed by the non-reference treatments in sorted order.
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    pub lambda: f64,
    pub converged: bool,
    pub loglik_reml: f64,
    pub n_obs: usize,
    pub n_participants: usize,
    pub participants_per_treatment: BTreeMap<String, usize>,
}

impl LmmFit {
    pub fn coef(&self, term: &str) -> Option<(f64, f64)> {
        let i = self.terms.iter().position(|t| t == term)?;
        Some((self.beta[i], self.se[i]))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmmError {
    #[error("degenerate design: {0}")]
    Degenerate(String),
    #[error("REML optimum not bracketed below lambda = {LAMBDA_MAX}")]
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Shifts the log10 bracketing grid; 0 gives decades 1e-8 ... 1e6.
    pub grid_offset: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { grid_offset: 0.0 }
    }
}

struct Group {
    x: DVector<f64>,
    y: Vec<f64>,
}

/// Design with one row pattern per participant, since treatment is constant
/// within a participant.
pub(crate) struct Design {
    terms: Vec<String>,
    groups: Vec<Group>,
    n: usize,
    p: usize,
    per_treatment: BTreeMap<String, usize>,
}

fn response_of(m: &TrialMetrics, response: &str) -> Option<f64> {
    match response {
        "path_length_m" => Some(m.path_length_m),
        "duration_s" => Some(m.duration_s),
        _ => None,
    }
}

impl Design {
    pub(crate) fn build(data: &[TrialMetrics], spec: &ModelSpec) -> Result<Self, LmmError> {
        let degenerate = |m: String| Err(LmmError::Degenerate(m));
        let mut by_participant: BTreeMap<&str, (&str, Vec<f64>)> = BTreeMap::new();
        for m in data {
            let Some(y) = response_of(m, &spec.response) else {
                return degenerate(format!("unknown response {:?}", spec.response));
            };
            if !y.is_finite() {
                return degenerate(format!("non-finite response for {}", m.participant_id));
            }
            let entry = by_participant
                .entry(&m.participant_id)
                .or_insert((&m.treatment, Vec::new()));
            if entry.0 != m.treatment {
                return degenerate(format!(
                    "participant {} appears under several treatments",
                    m.participant_id
                ));
            }
            entry.1.push(y);
        }
        let levels: BTreeSet<&str> = by_participant.values().map(|(t, _)| *t).collect();
        if !levels.contains(spec.reference.as_str()) {
            return degenerate(format!("reference level {:?} has no data", spec.reference));
        }
        let mut per_treatment: BTreeMap<String, usize> = BTreeMap::new();
        for (t, _) in by_participant.values() {
            *per_treatment.entry(t.to_string()).or_default() += 1;
        }
        if let Some((t, n)) = per_treatment.iter().find(|(_, n)| **n < 2) {
            return degenerate(format!(
                "treatment {t} has {n} participant(s); at least 2 are needed"
            ));
        }
        let others: Vec<&str> = levels
            .iter()
            .copied()
            .filter(|l| *l != spec.reference)
            .collect();
        let p = 1 + others.len();
        let mut terms = vec!["(Intercept)".to_string()];
        terms.extend(others.iter().map(|s| s.to_string()));
        let groups: Vec<Group> = by_participant
            .into_values()
            .map(|(t, y)| {
                let mut x = DVector::zeros(p);
                x[0] = 1.0;
                if let Some(j) = others.iter().position(|o| *o == t) {
                    x[j + 1] = 1.0;
                }
                Group { x, y }
            })
            .collect();
        let n: usize = groups.iter().map(|g| g.y.len()).sum();
        if n <= p {
            return degenerate(format!("{n} observations for {p} coefficients"));
        }
        Ok(Self {
            terms,
            groups,
            n,
            p,
            per_treatment,
        })
    }
}

pub(crate) struct Profile {
    pub ll: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub cov_unscaled: DMatrix<f64>,
}

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// GLS at a fixed variance ratio.
pub(crate) fn profile(d: &Design, lambda: f64) -> Result<Profile, LmmError> {
    let p = d.p;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut logdet_h = 0.0;
    for g in &d.groups {
        let ni = g.y.len() as f64;
        // every row of X_i equals x, so X_i'H_i⁻¹X_i = n_i/(1+λn_i) xx'
        let w = ni / (1.0 + lambda * ni);
        let sum_y: f64 = g.y.iter().sum();
        xtx += &g.x * g.x.transpose() * w;
        xty += &g.x * (sum_y / (1.0 + lambda * ni));
        logdet_h += (lambda * ni).ln_1p();
    }
    let chol = nalgebra::Cholesky::new(xtx)
        .ok_or_else(|| LmmError::Degenerate("X'H⁻¹X is not positive definite".into()))?;
    let beta = chol.solve(&xty);
    let logdet_xtx = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut rss = 0.0;
    for g in &d.groups {
        let ni = g.y.len() as f64;
        let fitted = g.x.dot(&beta);
        let mut ss = 0.0;
        let mut s = 0.0;
        for y in &g.y {
            let r = y - fitted;
            ss += r * r;
            s += r;
        }
        rss += ss - lambda / (1.0 + lambda * ni) * s * s;
    }
    let dof = (d.n - p) as f64;
    let sigma2 = rss / dof;
    let ll = -0.5 * (dof * sigma2.ln() + logdet_h + logdet_xtx) - 0.5 * dof * (1.0 + ln_2pi());
    Ok(Profile {
        ll,
        beta,
        sigma2,
        cov_unscaled: chol.inverse(),
    })
}

/// Derivative of the profiled log-likelihood in `lambda`. `β` drops out by
/// the envelope theorem.
fn score(d: &Design, lambda: f64) -> Result<f64, LmmError> {
    let pr = profile(d, lambda)?;
    let mut d_rss = 0.0;
    let mut d_logdet_h = 0.0;
    let mut d_logdet_xtx = 0.0;
    for g in &d.groups {
        let ni = g.y.len() as f64;
        let q = 1.0 / (1.0 + lambda * ni);
        let fitted = g.x.dot(&pr.beta);
        let s: f64 = g.y.iter().map(|y| y - fitted).sum();
        d_rss -= (s * q).powi(2);
        d_logdet_h += ni * q;
        d_logdet_xtx -= (ni * q).powi(2) * (g.x.transpose() * &pr.cov_unscaled * &g.x)[(0, 0)];
    }
    let dof = (d.n - d.p) as f64;
    let rss = pr.sigma2 * dof;
    Ok(-0.5 * (dof * d_rss / rss + d_logdet_h + d_logdet_xtx))
}

/// Bisection on the score around an interior optimum located by the
/// golden-section search.
fn polish(d: &Design, lambda: f64) -> Result<f64, LmmError> {
    let mut lo = lambda * (1.0 - 1e-3);
    let mut hi = lambda * (1.0 + 1e-3);
    let mut widen = 0;
    while !(score(d, lo)? > 0.0 && score(d, hi)? < 0.0) {
        widen += 1;
        if widen > 20 {
            return Ok(lambda);
        }
        lo *= 0.5;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 4.0 * f64::EPSILON * mid {
            break;
        }
        if score(d, mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn golden_max(d: &Design, mut a: f64, mut b: f64) -> Result<f64, LmmError> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |x: f64| profile(d, x).map(|p| p.ll);
    let mut c = b - inv_phi * (b - a);
    let mut e = a + inv_phi * (b - a);
    let (mut fc, mut fe) = (f(c)?, f(e)?);
    for _ in 0..400 {
        let mid = 0.5 * (a + b);
        if b - a <= LAMBDA_TOL * mid.min(1.0) || b - a <= f64::EPSILON * mid {
            break;
        }
        if fc >= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + inv_phi * (b - a);
            fe = f(e)?;
        }
    }
    Ok(if fc >= fe { c } else { e })
}

fn finish(d: &Design, spec: &ModelSpec, lambda: f64, converged: bool) -> Result<LmmFit, LmmError> {
    let pr = profile(d, lambda)?;
    let se = (0..d.p)
        .map(|i| (pr.sigma2 * pr.cov_unscaled[(i, i)]).max(0.0).sqrt())
        .collect();
    Ok(LmmFit {
        response: spec.response.clone(),
        reference: spec.reference.clone(),
        terms: d.terms.clone(),
        beta: pr.beta.iter().copied().collect(),
        se,
        sigma_u2: lambda * pr.sigma2,
        sigma_e2: pr.sigma2,
        lambda,
        converged,
        loglik_reml: pr.ll,
        n_obs: d.n,
        n_participants: d.groups.len(),
        participants_per_treatment: d.per_treatment.clone(),
    })
}

/// GLS fit at a fixed variance ratio; `lambda = 0` is ordinary least squares.
pub fn fit_at_lambda(
    data: &[TrialMetrics],
    spec: &ModelSpec,
    lambda: f64,
) -> Result<LmmFit, LmmError> {
    let d = Design::build(data, spec)?;
    finish(&d, spec, lambda, true)
}

/// Profiled REML log-likelihood at `lambda`.
pub fn reml_profile(data: &[TrialMetrics], spec: &ModelSpec, lambda: f64) -> Result<f64, LmmError> {
    let d = Design::build(data, spec)?;
    profile(&d, lambda).map(|p| p.ll)
}

pub fn fit_random_intercept(data: &[TrialMetrics], spec: &ModelSpec) -> Result<LmmFit, LmmError> {
    fit_random_intercept_with(data, spec, FitOptions::default())
}

/// Brackets the REML optimum on `{0} ∪ {10^(k+offset)}` capped at
/// [`LAMBDA_MAX`], then refines by golden-section search. The boundary
/// `λ = 0` wins whenever it is at least as good as the interior optimum.
pub fn fit_random_intercept_with(
    data: &[TrialMetrics],
    spec: &ModelSpec,
    opts: FitOptions,
) -> Result<LmmFit, LmmError> {
    let d = Design::build(data, spec)?;
    let ols = profile(&d, 0.0)?;
    let scale: f64 = d
        .groups
        .iter()
        .flat_map(|g| g.y.iter())
        .map(|y| y * y)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    if ols.sigma2 <= 1e-24 * scale {
        // every observation sits on its treatment mean
        let mut fit = finish(&d, spec, 0.0, false)?;
        fit.sigma_e2 = 0.0;
        fit.sigma_u2 = 0.0;
        fit.se = vec![0.0; d.p];
        return Ok(fit);
    }
    let mut grid = vec![0.0];
    for k in -8..=6 {
        let v = 10f64.powf(k as f64 + opts.grid_offset);
        if v < LAMBDA_MAX {
            grid.push(v);
        }
    }
    grid.push(LAMBDA_MAX);
    let lls = grid
        .iter()
        .map(|l| profile(&d, *l).map(|p| p.ll))
        .collect::<Result<Vec<_>, _>>()?;
    let best = (0..grid.len())
        .max_by(|a, b| lls[*a].total_cmp(&lls[*b]))
        .expect("grid is non-empty");
    if best == grid.len() - 1 {
        return Err(LmmError::NotConverged);
    }
    let lo = if best == 0 { 0.0 } else { grid[best - 1] };
    let hi = grid[best + 1];
    let mut lambda = golden_max(&d, lo, hi)?;
    if lo == 0.0 && score(&d, 0.0)? <= 0.0 {
        lambda = 0.0;
    }
    if lambda > 0.0 {
        lambda = polish(&d, lambda)?;
    }
    if lls[0] >= profile(&d, lambda)?.ll {
        lambda = 0.0;
    }
    finish(&d, spec, lambda, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

/// Two-sided normal test of each coefficient against zero.
pub fn wald_test(fit: &LmmFit) -> Vec<WaldRow> {
    fit.terms
        .iter()
        .zip(fit.beta.iter().zip(&fit.se))
        .map(|(term, (b, se))| {
            let z = if *b == 0.0 { 0.0 } else { b / se };
            WaldRow {
                term: term.clone(),
                estimate: *b,
                se: *se,
                z,
                p: normal_two_sided_p(z),
            }
        })
        .collect()
}

pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(pid: &str, t: &str, y: f64, trial: u32) -> TrialMetrics {
        TrialMetrics {
            participant_id: pid.into(),
            treatment: t.into(),
            trial,
            path_length_m: y,
            duration_s: 1.0,
            sample_count: 2,
        }
    }

    #[test]
    fn noiseless_hits_boundary() {
        let mut data = Vec::new();
        for (t, mean) in [("Control", 10.0), ("A", 10.0), ("B", 7.5)] {
            for p in 0..3 {
                for k in 1..=4 {
                    data.push(obs(&format!("{t}{p}"), t, mean, k));
                }
            }
        }
        let fit = fit_random_intercept(&data, &ModelSpec::default()).unwrap();
        assert_eq!(fit.terms, vec!["(Intercept)", "A", "B"]);
        assert!((fit.beta[0] - 10.0).abs() < 1e-12);
        assert!(fit.beta[1].abs() < 1e-12);
        assert!((fit.beta[2] + 2.5).abs() < 1e-12);
        assert_eq!(fit.sigma_u2, 0.0);
        assert_eq!(fit.sigma_e2, 0.0);
        assert!(!fit.converged);
    }

    #[test]
    fn degenerate_designs() {
        let data = vec![
            obs("c1", "Control", 1.0, 1),
            obs("c2", "Control", 2.0, 1),
            obs("b1", "B", 3.0, 1),
        ];
        assert!(matches!(
            fit_random_intercept(&data, &ModelSpec::default()),
            Err(LmmError::Degenerate(_))
        ));
        let mixed = vec![obs("c1", "Control", 1.0, 1), obs("c1", "B", 1.0, 2)];
        assert!(matches!(
            fit_random_intercept(&mixed, &ModelSpec::default()),
            Err(LmmError::Degenerate(_))
        ));
        let spec = ModelSpec {
            reference: "Nope".into(),
            ..ModelSpec::default()
        };
        assert!(matches!(
            fit_random_intercept(&data, &spec),
            Err(LmmError::Degenerate(_))
        ));
    }

    #[test]
    fn wald_reference_values() {
        assert_eq!(normal_two_sided_p(0.0), 1.0);
        assert!((normal_two_sided_p(1.96) - 0.05).abs() < 5e-4);
        assert!((normal_two_sided_p(-1.96) - 0.05).abs() < 5e-4);
        let fit = LmmFit {
            response: "y".into(),
            reference: "Control".into(),
            terms: vec!["(Intercept)".into(), "B".into()],
            beta: vec![3.0, 0.0],
            se: vec![1.0, 1.0],
            sigma_u2: 1.0,
            sigma_e2: 1.0,
            lambda: 1.0,
            converged: true,
            loglik_reml: 0.0,
            n_obs: 10,
            n_participants: 4,
            participants_per_treatment: BTreeMap::new(),
        };
        let rows = wald_test(&fit);
        assert_eq!(rows[1].p, 1.0);
        assert_eq!(rows[0].z, 3.0);
    }
}
