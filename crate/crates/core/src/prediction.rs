//! Conditional survival for responders without a reported TTP.
//!
//! Parameter uncertainty is propagated by drawing `theta` from the normal
//! approximation `N(theta_hat, Sigma)` on the unconstrained scale and
//! evaluating `S(u) / S(t)` under every draw.

use crate::estimation::FitResult;
use crate::model::{dot, log_frailty_survival, sigmoid, BaselineCumulative, ModelError, ParameterVector};
use crate::rng::{self, Purpose};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of Monte Carlo draws.
pub const DEFAULT_DRAWS: usize = 1000;
/// Largest tolerated fraction of rejected draws.
pub const MAX_REJECTED_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("fit has no covariance matrix")]
    MissingCovariance,
    #[error("fit did not converge")]
    NotConverged,
    #[error("at least 2 draws are required, got {0}")]
    TooFewDraws(usize),
    #[error("invalid evaluation grid: {0}")]
    InvalidGrid(String),
    #[error("missing covariates at positions {0:?}")]
    MissingCovariates(Vec<usize>),
    #[error("{rejected} of {total} draws had zero survival at the conditioning time")]
    TooManyRejected { rejected: usize, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentionClass {
    pub planned: bool,
    pub probability: f64,
}

/// Planning probability `sigmoid(gamma_hat' z)`, labelled planned when it is
/// at least `threshold`.
pub fn classify_intention(z: &[f64], fit: &FitResult, threshold: f64) -> Result<IntentionClass, PredictionError> {
    if !fit.converged {
        return Err(PredictionError::NotConverged);
    }
    check_covariates(z, fit.theta_hat.gamma.len())?;
    let probability = sigmoid(dot(z, &fit.theta_hat.gamma)?);
    Ok(IntentionClass {
        planned: probability >= threshold,
        probability,
    })
}

fn check_covariates(z: &[f64], expected: usize) -> Result<(), PredictionError> {
    let missing: Vec<usize> = (0..expected).filter(|&i| z.get(i).is_none_or(|v| !v.is_finite())).collect();
    if !missing.is_empty() {
        return Err(PredictionError::MissingCovariates(missing));
    }
    if z.len() != expected {
        return Err(ModelError::DimensionMismatch {
            expected,
            actual: z.len(),
        }
        .into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCurve {
    pub subject_id: String,
    pub t_condition: u32,
    pub u_grid: Vec<u32>,
    /// Median over draws.
    pub point: Vec<f64>,
    pub mean: Vec<f64>,
    /// Sample standard deviation over draws divided by `sqrt(draws_used)`.
    pub mc_se: Vec<f64>,
    pub draws_used: usize,
    pub rejected: usize,
}

/// A responder awaiting prediction. `planned` is `None` when the intention is
/// unknown and must be classified first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTarget {
    pub id: String,
    pub covariates: Vec<f64>,
    pub planned: Option<bool>,
}

/// Parameter draws shared by every subject predicted from one fit.
#[derive(Debug, Clone)]
pub struct ParameterDraws {
    pub draws: Vec<ParameterVector>,
    cumulative: Vec<BaselineCumulative>,
}

impl ParameterDraws {
    /// Draws `l` parameter vectors; draw `i` uses its own random stream so the
    /// set does not depend on thread scheduling.
    pub fn new(fit: &FitResult, l: usize, seed: u64) -> Result<Self, PredictionError> {
        if l < 2 {
            return Err(PredictionError::TooFewDraws(l));
        }
        let cov = fit.covariance.as_ref().ok_or(PredictionError::MissingCovariance)?;
        let factor = psd_factor(cov);
        let layout = fit.layout();
        let mean = DVector::from_vec(fit.theta_hat.to_unconstrained());
        let draws: Vec<ParameterVector> = (0..l)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::stream(seed, 0, Purpose::Draw, i as u64);
                let e = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(&mut rng));
                let x = &mean + &factor * e;
                ParameterVector::from_unconstrained(layout, x.as_slice())
            })
            .collect();
        let cumulative = draws.iter().map(|d| BaselineCumulative::new(&d.rho)).collect();
        Ok(Self { draws, cumulative })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// `log S(t)` for each time in `times` under draw `i`.
    fn log_survival(&self, i: usize, z: &[f64], planned: bool, times: &[u32]) -> Result<Vec<f64>, ModelError> {
        let th = &self.draws[i];
        let scale = dot(th.stratum_coeffs(planned), z)?.exp();
        Ok(times
            .iter()
            .map(|&t| log_frailty_survival(scale * self.cumulative[i].at(t), th.nu))
            .collect())
    }
}

/// `F` with `F F' = Sigma`, clipping negative eigenvalues from rounding to zero.
fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

fn check_grid(t: u32, u_grid: &[u32]) -> Result<(), PredictionError> {
    if u_grid.is_empty() {
        return Err(PredictionError::InvalidGrid("empty".into()));
    }
    if u_grid.iter().any(|&u| u < t) {
        return Err(PredictionError::InvalidGrid(format!("every u must be at least t_condition = {t}")));
    }
    if u_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PredictionError::InvalidGrid("u values must be strictly increasing".into()));
    }
    Ok(())
}

/// `S` below this is treated as zero.
const LOG_SURVIVAL_FLOOR: f64 = -700.0;

/// Per-draw conditional curves `S(u)/S(t)`; `None` for rejected draws.
fn conditional_draws(
    draws: &ParameterDraws,
    z: &[f64],
    planned: bool,
    t: u32,
    u_grid: &[u32],
) -> Result<Vec<Option<Vec<f64>>>, ModelError> {
    (0..draws.len())
        .into_par_iter()
        .map(|i| {
            let ls_t = draws.log_survival(i, z, planned, &[t])?[0];
            if !(ls_t > LOG_SURVIVAL_FLOOR) {
                return Ok(None);
            }
            let ls_u = draws.log_survival(i, z, planned, u_grid)?;
            Ok(Some(ls_u.iter().map(|l| (l - ls_t).exp().min(1.0)).collect()))
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn summarise(id: &str, t: u32, u_grid: &[u32], per_draw: Vec<Option<Vec<f64>>>) -> Result<PredictionCurve, PredictionError> {
    let total = per_draw.len();
    let kept: Vec<Vec<f64>> = per_draw.into_iter().flatten().collect();
    let rejected = total - kept.len();
    if rejected as f64 > MAX_REJECTED_FRACTION * total as f64 || kept.len() < 2 {
        return Err(PredictionError::TooManyRejected { rejected, total });
    }
    let l = kept.len();
    let mut point = Vec::with_capacity(u_grid.len());
    let mut mean = Vec::with_capacity(u_grid.len());
    let mut mc_se = Vec::with_capacity(u_grid.len());
    for k in 0..u_grid.len() {
        let mut col: Vec<f64> = kept.iter().map(|d| d[k]).collect();
        let m = col.iter().sum::<f64>() / l as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (l - 1) as f64;
        col.sort_by(f64::total_cmp);
        point.push(median(&col));
        mean.push(m);
        mc_se.push((var / l as f64).sqrt());
    }
    Ok(PredictionCurve {
        subject_id: id.to_string(),
        t_condition: t,
        u_grid: u_grid.to_vec(),
        point,
        mean,
        mc_se,
        draws_used: l,
        rejected,
    })
}

/// Conditional survival curve `P(T > u | T > t)` for a known intention stratum.
pub fn predict_survival_with(
    id: &str,
    z: &[f64],
    planned: bool,
    t_condition: u32,
    u_grid: &[u32],
    draws: &ParameterDraws,
) -> Result<PredictionCurve, PredictionError> {
    check_grid(t_condition, u_grid)?;
    check_covariates(z, draws.draws[0].beta.len())?;
    let per = conditional_draws(draws, z, planned, t_condition, u_grid)?;
    summarise(id, t_condition, u_grid, per)
}

/// Intention mixture `p pi_planned + (1 - p) pi_unplanned`, with `p` evaluated
/// under the same draw as the curves.
pub fn predict_unconditional_with(
    id: &str,
    z: &[f64],
    t_condition: u32,
    u_grid: &[u32],
    draws: &ParameterDraws,
) -> Result<PredictionCurve, PredictionError> {
    check_grid(t_condition, u_grid)?;
    check_covariates(z, draws.draws[0].beta.len())?;
    let planned = conditional_draws(draws, z, true, t_condition, u_grid)?;
    let unplanned = conditional_draws(draws, z, false, t_condition, u_grid)?;
    let mut per = Vec::with_capacity(draws.len());
    for (i, (a, b)) in planned.into_iter().zip(unplanned).enumerate() {
        per.push(match (a, b) {
            (Some(a), Some(b)) => {
                let p = sigmoid(dot(z, &draws.draws[i].gamma)?);
                Some(a.iter().zip(&b).map(|(x, y)| p * x + (1.0 - p) * y).collect())
            }
            _ => None,
        });
    }
    summarise(id, t_condition, u_grid, per)
}

pub fn predict_survival(
    z: &[f64],
    planned: bool,
    t_condition: u32,
    u_grid: &[u32],
    fit: &FitResult,
    l: usize,
    seed: u64,
) -> Result<PredictionCurve, PredictionError> {
    let draws = ParameterDraws::new(fit, l, seed)?;
    predict_survival_with("", z, planned, t_condition, u_grid, &draws)
}

pub fn predict_unconditional(
    z: &[f64],
    t_condition: u32,
    u_grid: &[u32],
    fit: &FitResult,
    l: usize,
    seed: u64,
) -> Result<PredictionCurve, PredictionError> {
    let draws = ParameterDraws::new(fit, l, seed)?;
    predict_unconditional_with("", z, t_condition, u_grid, &draws)
}

/// Plug-in `S(u)/S(t)` at a single parameter value.
pub fn plug_in_conditional(
    z: &[f64],
    planned: bool,
    t_condition: u32,
    u: u32,
    theta: &ParameterVector,
) -> Result<f64, ModelError> {
    let cum = BaselineCumulative::new(&theta.rho);
    let scale = dot(theta.stratum_coeffs(planned), z)?.exp();
    let ls = |t: u32| log_frailty_survival(scale * cum.at(t), theta.nu);
    Ok((ls(u) - ls(t_condition)).exp().min(1.0))
}

/// Predicts every target: the stratum curve when the intention is known
/// (`intention_given`), otherwise the curve for the classified stratum.
pub fn predict_targets(
    targets: &[PredictionTarget],
    fit: &FitResult,
    t_condition: u32,
    u_grid: &[u32],
    draws: &ParameterDraws,
    threshold: f64,
    intention_given: bool,
) -> Result<Vec<PredictionCurve>, PredictionError> {
    targets
        .iter()
        .map(|t| {
            let planned = match (intention_given, t.planned) {
                (true, Some(p)) => p,
                _ => classify_intention(&t.covariates, fit, threshold)?.planned,
            };
            predict_survival_with(&t.id, &t.covariates, planned, t_condition, u_grid, draws)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::CovarianceMethod;
    use crate::likelihood::LikelihoodOptions;
    use crate::model::ParameterLayout;

    fn fake_fit(cov_scale: f64) -> FitResult {
        let layout = ParameterLayout::new(4, 2, 3);
        let mut theta = ParameterVector::zeros(layout, 0.5);
        theta.rho = vec![-1.0, -1.2, -1.4, -1.5];
        theta.beta = vec![-0.02, 0.1];
        theta.phi = vec![-0.03, -0.2];
        theta.gamma = vec![0.04, -0.75];
        let n = layout.len();
        FitResult {
            theta_hat: theta,
            options: LikelihoodOptions::recall(4, 3),
            covariance: Some(DMatrix::identity(n, n) * cov_scale),
            covariance_method: CovarianceMethod::ObservedInformation,
            pseudo_inverse: false,
            std_errors: vec![cov_scale.sqrt(); n],
            estimated: vec![true; n],
            loglik_at_max: -100.0,
            converged: true,
            iterations: 1,
            gradient_norm: 0.0,
            trace: vec![],
            n_subjects: 10,
        }
    }

    #[test]
    fn tie_goes_to_planned() {
        let fit = fake_fit(0.0);
        let c = classify_intention(&[0.0, 0.0], &fit, 0.5).unwrap();
        assert_eq!(c.probability, 0.5);
        assert!(c.planned);
        match classify_intention(&[f64::NAN], &fit, 0.5) {
            Err(PredictionError::MissingCovariates(m)) => assert_eq!(m, vec![0, 1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_covariance_gives_plug_in() {
        let fit = fake_fit(0.0);
        let z = [30.0, 1.0];
        let grid = [2, 3, 6, 12, 20];
        let c = predict_survival(&z, true, 2, &grid, &fit, 50, 9).unwrap();
        assert_eq!(c.point[0], 1.0);
        assert_eq!(c.mc_se[0], 0.0);
        for (k, &u) in grid.iter().enumerate() {
            let p = plug_in_conditional(&z, true, 2, u, &fit.theta_hat).unwrap();
            assert_eq!(c.point[k], p);
        }
        let m = predict_unconditional(&z, 0, &grid, &fit, 50, 9).unwrap();
        let p = sigmoid(dot(&z, &fit.theta_hat.gamma).unwrap());
        for (k, &u) in grid.iter().enumerate() {
            let a = plug_in_conditional(&z, true, 0, u, &fit.theta_hat).unwrap();
            let b = plug_in_conditional(&z, false, 0, u, &fit.theta_hat).unwrap();
            assert!((m.point[k] - (p * a + (1.0 - p) * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn curves_are_monotone_and_seeded() {
        let fit = fake_fit(0.01);
        let grid: Vec<u32> = (0..=24).collect();
        let a = predict_survival(&[25.0, 0.0], false, 0, &grid, &fit, 200, 3).unwrap();
        let b = predict_survival(&[25.0, 0.0], false, 0, &grid, &fit, 200, 3).unwrap();
        assert_eq!(a, b);
        for w in a.point.windows(2).chain(a.mean.windows(2)) {
            assert!(w[1] <= w[0]);
        }
        assert!(a.point.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn grid_and_draw_errors() {
        let fit = fake_fit(0.01);
        assert!(matches!(predict_survival(&[1.0, 0.0], true, 5, &[4, 6], &fit, 10, 1), Err(PredictionError::InvalidGrid(_))));
        assert!(matches!(predict_survival(&[1.0, 0.0], true, 0, &[4, 4], &fit, 10, 1), Err(PredictionError::InvalidGrid(_))));
        assert!(matches!(predict_survival(&[1.0, 0.0], true, 0, &[4], &fit, 1, 1), Err(PredictionError::TooFewDraws(1))));
        let mut f = fit.clone();
        f.covariance = None;
        assert!(matches!(predict_survival(&[1.0, 0.0], true, 0, &[4], &f, 10, 1), Err(PredictionError::MissingCovariance)));
    }

    #[test]
    fn huge_hazard_draws_are_rejected() {
        let mut fit = fake_fit(0.0);
        fit.theta_hat.beta = vec![30.0, 0.0];
        fit.theta_hat.nu = 1e-6;
        let r = predict_survival(&[30.0, 0.0], true, 3, &[4], &fit, 10, 1);
        assert!(matches!(r, Err(PredictionError::TooManyRejected { rejected: 10, total: 10 })));
    }
}
