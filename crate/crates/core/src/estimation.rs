//! Maximum likelihood fitting with observed-information standard errors.
//!
//! The log-likelihood is a sum of three parameter-disjoint blocks (TTP,
//! intention, certainty), so its maximiser is found block by block with the
//! quasi-Newton routine in [`crate::optimize`]. The cross-block second
//! derivatives vanish identically, so the observed information is block
//! diagonal and each block's Hessian is obtained by central differences of the
//! analytic block gradient.

use crate::likelihood::{
    block_value_and_gradient, subject_scores, total_loglik, Block, LikelihoodError,
    LikelihoodOptions,
};
use crate::model::{ModelError, ParameterLayout, ParameterVector, SubjectRecord};
use crate::optimize::{self, relative_grad_norm, LbfgsSettings, Termination, TracePoint};
use crate::rng::{self, Purpose};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Intercept assigned to a certainty level that never occurs in the data.
pub const EMPTY_LEVEL_INTERCEPT: f64 = -10.0;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("record {index} has no reported TTP; only complete responders can be fitted")]
    IncompleteRecord { index: usize },
    #[error("initial value is invalid: {0}")]
    InvalidInit(ModelError),
    #[error("initial value has zero likelihood for subjects {0:?}")]
    InfeasibleInit(Vec<usize>),
    #[error("covariance is unavailable (singular or indefinite information matrix)")]
    MissingCovariance,
    #[error("fit did not converge")]
    NotConverged,
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMethod {
    /// Inverse of the observed information of the weighted log-likelihood.
    #[default]
    ObservedInformation,
    /// `A^-1 B A^-1` with `B` the sum of outer products of subject scores.
    Sandwich,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitControls {
    pub lbfgs: LbfgsSettings,
    /// Extra jittered starts per block (0 disables multi-start).
    pub restarts: usize,
    pub restart_seed: u64,
    pub covariance: CovarianceMethod,
    /// Fall back to a pseudo-inverse when the information matrix is singular.
    pub allow_pseudo_inverse: bool,
}

impl Default for FitControls {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsSettings::default(),
            restarts: 0,
            restart_seed: 0,
            covariance: CovarianceMethod::ObservedInformation,
            allow_pseudo_inverse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub block: Block,
    pub points: Vec<TracePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    pub options: LikelihoodOptions,
    /// Covariance over the unconstrained layout; rows of fixed coordinates are zero.
    pub covariance: Option<DMatrix<f64>>,
    pub covariance_method: CovarianceMethod,
    pub pseudo_inverse: bool,
    /// Natural-scale standard errors (delta method for `nu`); NaN without covariance.
    pub std_errors: Vec<f64>,
    /// `false` for coordinates held fixed (not identified or not part of the likelihood).
    pub estimated: Vec<bool>,
    pub loglik_at_max: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Relative gradient norm `|g|_inf / max(1, |loglik|)` over estimated coordinates.
    pub gradient_norm: f64,
    pub trace: Vec<BlockTrace>,
    pub n_subjects: usize,
}

impl FitResult {
    pub fn layout(&self) -> ParameterLayout {
        self.theta_hat.layout()
    }

    /// Standard error of unconstrained coordinate `i`.
    pub fn unconstrained_se(&self, i: usize) -> Option<f64> {
        self.covariance.as_ref().map(|c| c[(i, i)].max(0.0).sqrt())
    }
}

fn check_dataset(dataset: &[SubjectRecord]) -> Result<(), EstimationError> {
    if dataset.is_empty() {
        return Err(EstimationError::EmptyDataset);
    }
    if let Some(index) = dataset.iter().position(|r| r.ttp.is_none()) {
        return Err(EstimationError::IncompleteRecord { index });
    }
    Ok(())
}

fn clamp_hazard(h: f64) -> f64 {
    h.clamp(1e-4, 1.0 - 1e-4)
}

/// Starting values: empirical cloglog hazards for `rho`, zero regressions,
/// `nu = 0.5`, and certainty intercepts from the observed level frequencies.
pub fn default_init(
    dataset: &[SubjectRecord],
    opts: &LikelihoodOptions,
) -> Result<ParameterVector, EstimationError> {
    check_dataset(dataset)?;
    let n_cov = dataset[0].covariates.len();
    let layout = opts.layout(n_cov);
    let mut theta = ParameterVector::zeros(layout, 0.5);
    let cutoff = opts.baseline_cutoff;

    let ttps: Vec<(u32, f64)> = dataset
        .iter()
        .map(|r| (r.ttp.unwrap_or(1), r.weight))
        .collect();
    let first = ttps[0].0;
    if ttps.iter().all(|(t, _)| *t == first) {
        log::warn!("all subjects share TTP {first}; starting baseline at rho = 0");
    } else {
        let cloglog = |h: f64| (-(1.0 - clamp_hazard(h)).ln()).ln();
        let mut last = 0.0;
        for j in 1..cutoff as u32 {
            let at_risk: f64 = ttps.iter().filter(|(t, _)| *t >= j).map(|(_, w)| w).sum();
            let events: f64 = ttps.iter().filter(|(t, _)| *t == j).map(|(_, w)| w).sum();
            if at_risk > 0.0 {
                last = cloglog(events / at_risk);
            }
            theta.rho[j as usize - 1] = last;
        }
        let j = cutoff as u32;
        let events: f64 = ttps.iter().filter(|(t, _)| *t >= j).map(|(_, w)| w).sum();
        let exposure: f64 = ttps
            .iter()
            .filter(|(t, _)| *t >= j)
            .map(|(t, w)| w * (t - j + 1) as f64)
            .sum();
        theta.rho[cutoff - 1] = if exposure > 0.0 {
            cloglog(events / exposure)
        } else {
            last
        };
    }

    if opts.use_recall_model {
        let mut counts = vec![0.0; opts.certainty_levels];
        for r in dataset {
            if let Some(e) = r.certainty {
                if (e as usize) <= counts.len() && e >= 1 {
                    counts[e as usize - 1] += r.weight;
                }
            }
        }
        if counts[0] > 0.0 {
            for k in 1..counts.len() {
                theta.eta.intercepts[k - 1] = if counts[k] > 0.0 {
                    (counts[k] / counts[0]).ln().clamp(EMPTY_LEVEL_INTERCEPT, 10.0)
                } else {
                    EMPTY_LEVEL_INTERCEPT
                };
            }
        }
    }
    Ok(theta)
}

/// Which coordinates are optimised. Everything else stays at its starting value.
fn free_mask(dataset: &[SubjectRecord], opts: &LikelihoodOptions, theta: &mut ParameterVector) -> Vec<bool> {
    let layout = theta.layout();
    let mut free = vec![true; layout.len()];
    let planned = dataset.iter().filter(|r| r.planned).count();
    if planned == 0 {
        layout.beta().for_each(|i| free[i] = false);
    }
    if planned == dataset.len() {
        layout.phi().for_each(|i| free[i] = false);
    }
    if !opts.use_recall_model {
        layout.certainty_block().for_each(|i| free[i] = false);
        return free;
    }
    let mut counts = vec![0usize; opts.certainty_levels];
    for r in dataset {
        if let Some(e) = r.certainty {
            counts[e as usize - 1] += 1;
        }
    }
    let observed_nonref = counts[1..].iter().filter(|c| **c > 0).count();
    if observed_nonref == 0 || counts[0] == 0 {
        if counts.iter().sum::<usize>() > 0 {
            log::warn!("certainty levels {counts:?} do not identify the certainty model; holding it fixed");
        }
        layout.certainty_block().for_each(|i| free[i] = false);
        return free;
    }
    for k in 1..opts.certainty_levels {
        if counts[k] == 0 {
            let a0 = layout.intercepts().start + k - 1;
            let a1 = layout.gap_slopes().start + k - 1;
            free[a0] = false;
            free[a1] = false;
            theta.eta.intercepts[k - 1] = EMPTY_LEVEL_INTERCEPT;
            theta.eta.gap_slopes[k - 1] = 0.0;
        }
    }
    free
}

struct BlockProblem<'a> {
    dataset: &'a [SubjectRecord],
    opts: &'a LikelihoodOptions,
    layout: ParameterLayout,
    block: Block,
    /// Layout indices being optimised.
    free: Vec<usize>,
    base: Vec<f64>,
}

impl BlockProblem<'_> {
    fn full(&self, sub: &[f64]) -> Vec<f64> {
        let mut x = self.base.clone();
        for (&i, v) in self.free.iter().zip(sub) {
            x[i] = *v;
        }
        x
    }

    /// Block log-likelihood and its gradient over the free coordinates.
    fn eval(&self, sub: &[f64]) -> Result<Option<(f64, Vec<f64>)>, LikelihoodError> {
        let theta = ParameterVector::from_unconstrained(self.layout, &self.full(sub));
        if theta.validate().is_err() {
            return Ok(None);
        }
        let (eval, grad) = block_value_and_gradient(self.dataset, &theta, self.opts, self.block)?;
        if !eval.value.is_finite() {
            return Ok(None);
        }
        let start = self.block.range(&self.layout).start;
        Ok(Some((eval.value, self.free.iter().map(|&i| grad[i - start]).collect())))
    }

    /// Plain L-BFGS in the coordinates `x = origin + t * y`.
    fn minimize_transformed(
        &self,
        origin: &[f64],
        t: &DMatrix<f64>,
        settings: &LbfgsSettings,
    ) -> Result<Option<optimize::LbfgsOutcome>, LikelihoodError> {
        let m = origin.len();
        let to_x = |y: &[f64]| -> Vec<f64> {
            let dy = t * DVector::from_column_slice(y);
            origin.iter().zip(dy.iter()).map(|(a, b)| a + b).collect()
        };
        let mut failure = None;
        let outcome = optimize::minimize(
            |y| match self.eval(&to_x(y)) {
                Ok(v) => v.map(|(f, g)| {
                    let gy = t.tr_mul(&DVector::from_column_slice(&g));
                    (-f, gy.iter().map(|v| -v).collect())
                }),
                Err(e) => {
                    failure = Some(e);
                    None
                }
            },
            &vec![0.0; m],
            settings,
            |_| {},
        );
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(outcome.map(|mut o| {
            o.x = to_x(&o.x);
            o
        }))
    }

    /// Maximises the block log-likelihood. Each pass rescales the problem by the
    /// inverse square root of the (regularised) information at the current
    /// point, which removes the strong baseline/covariate collinearity that
    /// otherwise stalls the quasi-Newton iteration.
    fn maximize(&self, x0: &[f64], settings: &LbfgsSettings) -> Result<Option<optimize::LbfgsOutcome>, LikelihoodError> {
        const PASSES: usize = 4;
        let Some((f0, g0)) = self.eval(x0)? else {
            return Ok(None);
        };
        let mut best = optimize::LbfgsOutcome {
            x: x0.to_vec(),
            value: -f0,
            grad: g0.iter().map(|v| -v).collect(),
            iterations: 0,
            evaluations: 1,
            converged: relative_grad_norm(f0, &g0) <= settings.gtol,
            termination: Termination::Gradient,
            trace: vec![TracePoint {
                iteration: 0,
                value: -f0,
                grad_norm: relative_grad_norm(f0, &g0),
            }],
        };
        for _ in 0..PASSES {
            if best.converged {
                break;
            }
            let (t, t_inv) = match self.information(&best.x)? {
                Some(info) => preconditioner(&info),
                None => (DMatrix::identity(x0.len(), x0.len()), DMatrix::identity(x0.len(), x0.len())),
            };
            // |g_x|_inf <= |T^-T|_inf |g_y|_inf, so this tolerance carries over.
            let row_norm = t_inv
                .column_iter()
                .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
                .fold(1.0_f64, f64::max);
            let inner = LbfgsSettings {
                gtol: settings.gtol / row_norm,
                ..*settings
            };
            let Some(out) = self.minimize_transformed(&best.x, &t, &inner)? else {
                break;
            };
            let offset = best.iterations;
            best.trace.extend(out.trace.iter().skip(1).map(|p| TracePoint {
                iteration: p.iteration + offset,
                ..*p
            }));
            let improved = out.value <= best.value;
            best.iterations += out.iterations;
            best.evaluations += out.evaluations;
            best.termination = out.termination;
            if improved {
                best.x = out.x;
                best.value = out.value;
                best.grad = out.grad;
            }
            // Judge convergence on the original scale.
            let (_, g) = self.eval(&best.x)?.expect("accepted iterate is feasible");
            best.grad = g.iter().map(|v| -v).collect();
            best.converged = relative_grad_norm(best.value, &g) <= settings.gtol;
            if let Some(last) = best.trace.last_mut() {
                last.grad_norm = relative_grad_norm(best.value, &g);
            }
            if !improved || out.iterations == 0 {
                break;
            }
        }
        if best.converged {
            best.termination = Termination::Gradient;
        }
        Ok(Some(best))
    }

    /// Negative Hessian over the free coordinates by central differences of the gradient.
    fn information(&self, sub: &[f64]) -> Result<Option<DMatrix<f64>>, LikelihoodError> {
        let m = sub.len();
        let mut info = DMatrix::zeros(m, m);
        for j in 0..m {
            let h = 1e-4 * sub[j].abs().max(1.0);
            let mut xp = sub.to_vec();
            xp[j] += h;
            let mut xm = sub.to_vec();
            xm[j] -= h;
            let (Some((_, gp)), Some((_, gm))) = (self.eval(&xp)?, self.eval(&xm)?) else {
                return Ok(None);
            };
            for i in 0..m {
                info[(i, j)] = -(gp[i] - gm[i]) / (2.0 * h);
            }
        }
        Ok(Some(0.5 * (&info + info.transpose())))
    }
}

/// `T = V |L|^{-1/2}` from the eigen-decomposition of the information (with
/// eigenvalues floored relative to the largest), and its inverse `T^-1`.
fn preconditioner(info: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = info.nrows();
    let eig = SymmetricEigen::new(info.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(max > 0.0) || !max.is_finite() {
        return (DMatrix::identity(m, m), DMatrix::identity(m, m));
    }
    let floor = max * 1e-10;
    let root = eig.eigenvalues.map(|v| v.abs().max(floor).sqrt());
    let t = &eig.eigenvectors * DMatrix::from_diagonal(&root.map(|v| 1.0 / v));
    let t_inv = DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    (t, t_inv)
}

fn invert_information(info: &DMatrix<f64>, allow_pseudo: bool) -> (Option<DMatrix<f64>>, bool) {
    if info.nrows() == 0 {
        return (Some(info.clone()), false);
    }
    if let Some(chol) = info.clone().cholesky() {
        return (Some(chol.inverse()), false);
    }
    if !allow_pseudo {
        return (None, false);
    }
    let eig = SymmetricEigen::new(info.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = max * 1e-10 * info.nrows() as f64;
    let inv_vals = eig
        .eigenvalues
        .map(|v| if v > tol { 1.0 / v } else { 0.0 });
    let v = &eig.eigenvectors;
    (Some(v * DMatrix::from_diagonal(&inv_vals) * v.transpose()), true)
}

/// Fits the model to complete responders.
pub fn fit(
    dataset: &[SubjectRecord],
    opts: &LikelihoodOptions,
    init: Option<&ParameterVector>,
    controls: &FitControls,
) -> Result<FitResult, EstimationError> {
    check_dataset(dataset)?;
    let mut theta0 = match init {
        Some(t) => t.clone(),
        None => default_init(dataset, opts)?,
    };
    theta0.validate().map_err(EstimationError::InvalidInit)?;
    let layout = theta0.layout();
    let free = free_mask(dataset, opts, &mut theta0);
    let start_eval = total_loglik(dataset, &theta0, opts)?;
    if !start_eval.infeasible.is_empty() {
        return Err(EstimationError::InfeasibleInit(start_eval.infeasible));
    }

    let mut x = theta0.to_unconstrained();
    let mut converged = true;
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut problems = Vec::new();
    for block in Block::ALL {
        let idx: Vec<usize> = block.range(&layout).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            continue;
        }
        let problem = BlockProblem {
            dataset,
            opts,
            layout,
            block,
            free: idx.clone(),
            base: x.clone(),
        };
        let x0: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let mut best = problem.maximize(&x0, &controls.lbfgs)?;
        for k in 0..controls.restarts {
            let mut rng = rng::stream(controls.restart_seed, block as u64, Purpose::Restart, k as u64);
            let jittered: Vec<f64> = x0
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + 0.1 * v.abs().max(1.0) * e
                })
                .collect();
            if let Some(out) = problem.maximize(&jittered, &controls.lbfgs)? {
                let better = match &best {
                    None => true,
                    Some(b) => (out.converged && !b.converged) || (out.converged == b.converged && out.value < b.value),
                };
                if better {
                    best = Some(out);
                }
            }
        }
        let Some(outcome) = best else {
            return Err(EstimationError::InfeasibleInit(start_eval.infeasible));
        };
        converged &= outcome.converged;
        iterations += outcome.iterations;
        trace.push(BlockTrace {
            block,
            points: outcome
                .trace
                .iter()
                .map(|p| TracePoint {
                    value: -p.value,
                    ..*p
                })
                .collect(),
        });
        for (&i, v) in idx.iter().zip(&outcome.x) {
            x[i] = *v;
        }
        problems.push((block, idx));
    }

    let theta_hat = ParameterVector::from_unconstrained(layout, &x);
    let ll = total_loglik(dataset, &theta_hat, opts)?.value;

    // Gradient check over all estimated coordinates at the final point.
    let mut grad_inf: f64 = 0.0;
    for (block, idx) in &problems {
        let (_, g) = block_value_and_gradient(dataset, &theta_hat, opts, *block)?;
        let start = block.range(&layout).start;
        for &i in idx {
            grad_inf = grad_inf.max(g[i - start].abs());
        }
    }
    let gradient_norm = grad_inf / ll.abs().max(1.0);
    converged &= gradient_norm <= controls.lbfgs.gtol;

    // Block-diagonal observed information.
    let mut covariance = Some(DMatrix::zeros(layout.len(), layout.len()));
    let mut pseudo = false;
    let mut info_inverses = Vec::new();
    for (block, idx) in &problems {
        let problem = BlockProblem {
            dataset,
            opts,
            layout,
            block: *block,
            free: idx.clone(),
            base: x.clone(),
        };
        let sub: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let inv = match problem.information(&sub)? {
            Some(info) => {
                let (inv, p) = invert_information(&info, controls.allow_pseudo_inverse);
                pseudo |= p;
                inv
            }
            None => None,
        };
        match inv {
            Some(inv) => info_inverses.push((idx.clone(), inv)),
            None => {
                covariance = None;
                break;
            }
        }
    }
    if let Some(cov) = covariance.as_mut() {
        for (idx, inv) in &info_inverses {
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    cov[(i, j)] = inv[(a, b)];
                }
            }
        }
        if controls.covariance == CovarianceMethod::Sandwich {
            let scores = subject_scores(dataset, &theta_hat, opts)?;
            let mut meat = DMatrix::<f64>::zeros(layout.len(), layout.len());
            for s in &scores {
                for i in 0..layout.len() {
                    if !free[i] || s[i] == 0.0 {
                        continue;
                    }
                    for j in 0..layout.len() {
                        if free[j] {
                            meat[(i, j)] += s[i] * s[j];
                        }
                    }
                }
            }
            let bread = cov.clone();
            *cov = &bread * meat * &bread;
        }
        let t = cov.transpose();
        *cov = 0.5 * (&*cov + t);
    }

    let std_errors = (0..layout.len())
        .map(|i| match &covariance {
            Some(c) if free[i] => {
                let se = c[(i, i)].max(0.0).sqrt();
                if i == ParameterLayout::LOG_NU {
                    theta_hat.nu * se
                } else {
                    se
                }
            }
            Some(_) => 0.0,
            None => f64::NAN,
        })
        .collect();

    Ok(FitResult {
        theta_hat,
        options: *opts,
        covariance,
        covariance_method: controls.covariance,
        pseudo_inverse: pseudo,
        std_errors,
        estimated: free,
        loglik_at_max: ll,
        converged,
        iterations,
        gradient_norm,
        trace,
        n_subjects: dataset.len(),
    })
}

/// Standard normal quantile `z_{(1 + level) / 2}`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 * (1.0 + level))
}

/// Wald intervals on the unconstrained scale, mapped back to the natural
/// scale (`nu` through exponentiation of the log-scale endpoints).
pub fn wald_intervals(fit: &FitResult, level: f64) -> Result<Vec<(f64, f64)>, EstimationError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimationError::InvalidLevel(level));
    }
    if !fit.converged {
        return Err(EstimationError::NotConverged);
    }
    let cov = fit.covariance.as_ref().ok_or(EstimationError::MissingCovariance)?;
    let z = normal_quantile(level);
    let x = fit.theta_hat.to_unconstrained();
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let half = z * cov[(i, i)].max(0.0).sqrt();
            let (lo, hi) = (v - half, v + half);
            if i == ParameterLayout::LOG_NU {
                (lo.exp(), hi.exp())
            } else {
                (lo, hi)
            }
        })
        .collect())
}

/// Delta-method standard error of a scalar function with gradient `grad`
/// (unconstrained scale).
pub fn delta_se(fit: &FitResult, grad: &[f64]) -> Option<f64> {
    let cov = fit.covariance.as_ref()?;
    let g = DMatrix::from_column_slice(grad.len(), 1, grad);
    Some((g.transpose() * cov * g)[(0, 0)].max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CertaintyParams;

    fn geometric_data(n: usize, p: f64) -> Vec<SubjectRecord> {
        // Deterministic quantiles of a geometric(p) distribution.
        (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                let t = ((1.0 - u).ln() / (1.0 - p).ln()).ceil().max(1.0) as u32;
                SubjectRecord {
                    id: i.to_string(),
                    ttp: Some(t),
                    obs_time: t as f64 + 40.0 + (i % 7) as f64,
                    certainty: Some(1 + (i % 2) as u8),
                    planned: i % 3 != 0,
                    covariates: vec![],
                    weight: 1.0,
                }
            })
            .collect()
    }

    fn frailty_data(n: usize, nu: f64, lambda: f64) -> Vec<SubjectRecord> {
        use rand::Rng;
        use rand_distr::Gamma;
        let mut rng = rng::stream(11, 0, Purpose::Subject, 0);
        let gamma = Gamma::new(1.0 / nu, nu).unwrap();
        (0..n)
            .map(|i| {
                let r: f64 = gamma.sample(&mut rng);
                let q = (-r * lambda).exp();
                let mut t = 1;
                while t < 500 && rng.random::<f64>() < q {
                    t += 1;
                }
                SubjectRecord {
                    id: i.to_string(),
                    ttp: Some(t),
                    obs_time: t as f64 + 40.0 + (i % 7) as f64,
                    certainty: Some(1 + (i % 2) as u8),
                    planned: i % 3 != 0,
                    covariates: vec![],
                    weight: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn init_recovers_geometric_hazard() {
        let data = geometric_data(4000, 0.2);
        let th = default_init(&data, &LikelihoodOptions::recall(6, 3)).unwrap();
        let target = (-(0.8f64).ln()).ln();
        for r in &th.rho {
            assert!((r - target).abs() < 0.05, "{r} vs {target}");
        }
        assert_eq!(th.nu, 0.5);
        assert_eq!(th.eta.intercepts[1], EMPTY_LEVEL_INTERCEPT);
        let again = default_init(&data, &LikelihoodOptions::recall(6, 3)).unwrap();
        assert_eq!(th, again);
    }

    #[test]
    fn init_caps_empty_levels_and_handles_degenerate_times() {
        let mut data = geometric_data(50, 0.3);
        for r in &mut data {
            r.certainty = Some(1);
            r.ttp = Some(2);
            r.obs_time = 40.0;
        }
        let th = default_init(&data, &LikelihoodOptions::recall(4, 4)).unwrap();
        assert!(th.eta.intercepts.iter().all(|&a| a == EMPTY_LEVEL_INTERCEPT));
        assert!(th.rho.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn wald_interval_degenerate_and_positive_nu() {
        let data = frailty_data(1500, 1.0, 0.3);
        let opts = LikelihoodOptions::recall(4, 3);
        let mut f = fit(&data, &opts, None, &FitControls::default()).unwrap();
        assert!(f.converged);
        let ci = wald_intervals(&f, 0.95).unwrap();
        assert!(ci[0].0 > 0.0 && ci[0].0 < f.theta_hat.nu && f.theta_hat.nu < ci[0].1);
        let x = f.theta_hat.to_unconstrained();
        f.covariance = Some(DMatrix::zeros(x.len(), x.len()));
        let ci = wald_intervals(&f, 0.95).unwrap();
        for (i, (lo, hi)) in ci.iter().enumerate() {
            let est = if i == 0 { f.theta_hat.nu } else { x[i] };
            assert!((lo - est).abs() < 1e-15 && (hi - est).abs() < 1e-15);
        }
        assert!(wald_intervals(&f, 1.0).is_err());
        f.covariance = None;
        assert!(matches!(wald_intervals(&f, 0.9), Err(EstimationError::MissingCovariance)));
    }

    #[test]
    fn rejects_incomplete_and_empty() {
        assert!(matches!(
            fit(&[], &LikelihoodOptions::default(), None, &FitControls::default()),
            Err(EstimationError::EmptyDataset)
        ));
        let mut data = geometric_data(10, 0.3);
        data[4].ttp = None;
        assert!(matches!(
            fit(&data, &LikelihoodOptions::recall(3, 3), None, &FitControls::default()),
            Err(EstimationError::IncompleteRecord { index: 4 })
        ));
    }

    #[test]
    fn empty_certainty_level_is_frozen() {
        let data = geometric_data(400, 0.3);
        let opts = LikelihoodOptions::recall(3, 3);
        let f = fit(&data, &opts, None, &FitControls::default()).unwrap();
        let layout = f.layout();
        let a0 = layout.intercepts().start + 1;
        assert!(!f.estimated[a0]);
        assert_eq!(f.theta_hat.eta.intercepts[1], EMPTY_LEVEL_INTERCEPT);
        let cov = f.covariance.as_ref().unwrap();
        assert_eq!(cov[(a0, a0)], 0.0);
        // certainty levels alternate 1,2 with gap independent of level
        assert!(f.theta_hat.eta.intercepts[0].abs() < 1.0);
        let _ = CertaintyParams::zeros(3, 0);
    }
}
