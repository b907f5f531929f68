//! Model primitives: discrete proportional hazards with a gamma frailty,
//! the multinomial certainty model and the planning-intention logistic.
//!
//! Everything here is a pure function of parameters and covariates.
//!
//! The hazard for subject `i` at discrete time `t` is
//! `1 - exp(-exp(rho(min(t, J)) + b'z))` with `b = beta` for planned and
//! `b = phi` for unplanned pregnancies. Integrating a gamma frailty with mean 1
//! and variance `nu` out of the conditional survival `exp(-R H(t))` gives the
//! marginal survival `S(t) = (1 + nu H(t))^(-1/nu)`, where
//! `H(t) = sum_{j<=t} exp(rho(min(j, J)) + b'z)`.

use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("frailty variance must be positive, got {0}")]
    NonPositiveNu(f64),
    #[error("discrete time must be at least {min}, got {t}")]
    InvalidTime { t: u32, min: u32 },
    #[error("gap time must be non-negative and finite, got {0}")]
    InvalidGap(f64),
    #[error("need at least two certainty levels, got {0}")]
    TooFewLevels(usize),
    #[error("parameter vector is not finite at {0}")]
    NonFinite(String),
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

/// One responder's observed tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Reported time-to-pregnancy in cycles; `None` for non-responders.
    pub ttp: Option<u32>,
    /// Months since the common origin at which the survey was answered.
    pub obs_time: f64,
    /// Reported certainty level in `1..=K` (1 = very sure); `None` when not reported.
    pub certainty: Option<u8>,
    pub planned: bool,
    pub covariates: Vec<f64>,
    pub weight: f64,
}

impl SubjectRecord {
    pub fn certainty_reported(&self) -> bool {
        self.certainty.is_some()
    }

    /// Recall lag `obs_time - ttp`, when TTP is known.
    pub fn gap(&self) -> Option<f64> {
        self.ttp.map(|t| self.obs_time - t as f64)
    }

    pub fn validate(&self, levels: usize) -> Result<(), ModelError> {
        let bad = |reason: String| ModelError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(bad(format!("weight must be positive, got {}", self.weight)));
        }
        if !self.obs_time.is_finite() {
            return Err(bad("observation time is not finite".into()));
        }
        if let Some(t) = self.ttp {
            if t < 1 {
                return Err(bad("ttp must be at least 1".into()));
            }
            if self.obs_time <= t as f64 {
                return Err(bad(format!(
                    "observation time {} must exceed ttp {t}",
                    self.obs_time
                )));
            }
        }
        if let Some(e) = self.certainty {
            if e < 1 || e as usize > levels {
                return Err(bad(format!("certainty level {e} outside 1..={levels}")));
            }
        }
        if self.covariates.iter().any(|v| !v.is_finite()) {
            return Err(bad("covariates must be finite".into()));
        }
        Ok(())
    }
}

/// Certainty model coefficients. Category 1 is the reference; entry `k - 2`
/// of `intercepts` and `gap_slopes` belongs to category `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyParams {
    pub intercepts: Vec<f64>,
    pub gap_slopes: Vec<f64>,
    /// Covariate coefficients shared by all non-reference categories.
    pub alpha: Vec<f64>,
}

impl CertaintyParams {
    pub fn zeros(levels: usize, n_cov: usize) -> Self {
        Self {
            intercepts: vec![0.0; levels - 1],
            gap_slopes: vec![0.0; levels - 1],
            alpha: vec![0.0; n_cov],
        }
    }

    pub fn levels(&self) -> usize {
        self.intercepts.len() + 1
    }
}

/// Full model parameter on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub nu: f64,
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
    pub phi: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: CertaintyParams,
}

/// Index map between [`ParameterVector`] and the flat unconstrained vector
/// `(log nu, rho, beta, phi, gamma, alpha0, alpha1, alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub cutoff: usize,
    pub n_cov: usize,
    pub levels: usize,
}

impl ParameterLayout {
    pub fn new(cutoff: usize, n_cov: usize, levels: usize) -> Self {
        Self {
            cutoff,
            n_cov,
            levels,
        }
    }

    pub fn len(&self) -> usize {
        1 + self.cutoff + 4 * self.n_cov + 2 * (self.levels - 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub const LOG_NU: usize = 0;

    pub fn rho(&self) -> Range<usize> {
        1..1 + self.cutoff
    }
    pub fn beta(&self) -> Range<usize> {
        let s = 1 + self.cutoff;
        s..s + self.n_cov
    }
    pub fn phi(&self) -> Range<usize> {
        let s = self.beta().end;
        s..s + self.n_cov
    }
    pub fn gamma(&self) -> Range<usize> {
        let s = self.phi().end;
        s..s + self.n_cov
    }
    pub fn intercepts(&self) -> Range<usize> {
        let s = self.gamma().end;
        s..s + self.levels - 1
    }
    pub fn gap_slopes(&self) -> Range<usize> {
        let s = self.intercepts().end;
        s..s + self.levels - 1
    }
    pub fn alpha(&self) -> Range<usize> {
        let s = self.gap_slopes().end;
        s..s + self.n_cov
    }

    /// Coordinates of the TTP block (log nu, rho, beta, phi).
    pub fn ttp_block(&self) -> Range<usize> {
        0..self.phi().end
    }
    pub fn intention_block(&self) -> Range<usize> {
        self.gamma()
    }
    pub fn certainty_block(&self) -> Range<usize> {
        self.intercepts().start..self.len()
    }

    /// Human-readable coordinate names on the natural scale.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["nu".to_string()];
        out.extend((1..=self.cutoff).map(|j| format!("rho[{j}]")));
        for prefix in ["beta", "phi", "gamma"] {
            out.extend((1..=self.n_cov).map(|j| format!("{prefix}[{j}]")));
        }
        out.extend((2..=self.levels).map(|k| format!("alpha0[{k}]")));
        out.extend((2..=self.levels).map(|k| format!("alpha1[{k}]")));
        out.extend((1..=self.n_cov).map(|j| format!("alpha[{j}]")));
        out
    }
}

impl ParameterVector {
    /// All-zero regression parts with the given frailty variance.
    pub fn zeros(layout: ParameterLayout, nu: f64) -> Self {
        Self {
            nu,
            rho: vec![0.0; layout.cutoff],
            beta: vec![0.0; layout.n_cov],
            phi: vec![0.0; layout.n_cov],
            gamma: vec![0.0; layout.n_cov],
            eta: CertaintyParams::zeros(layout.levels, layout.n_cov),
        }
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::new(self.rho.len(), self.beta.len(), self.eta.levels())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(ModelError::NonPositiveNu(self.nu));
        }
        if self.rho.is_empty() {
            return Err(ModelError::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if self.eta.levels() < 2 {
            return Err(ModelError::TooFewLevels(self.eta.levels()));
        }
        let r = self.beta.len();
        for (name, len) in [
            ("phi", self.phi.len()),
            ("gamma", self.gamma.len()),
            ("alpha", self.eta.alpha.len()),
        ] {
            if len != r {
                log::debug!("{name} has length {len}, expected {r}");
                return Err(ModelError::DimensionMismatch {
                    expected: r,
                    actual: len,
                });
            }
        }
        if self.eta.gap_slopes.len() != self.eta.intercepts.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.eta.intercepts.len(),
                actual: self.eta.gap_slopes.len(),
            });
        }
        if let Some(i) = self.to_unconstrained().iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(self.layout().names()[i].clone()));
        }
        Ok(())
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.layout().len());
        x.push(self.nu.ln());
        x.extend_from_slice(&self.rho);
        x.extend_from_slice(&self.beta);
        x.extend_from_slice(&self.phi);
        x.extend_from_slice(&self.gamma);
        x.extend_from_slice(&self.eta.intercepts);
        x.extend_from_slice(&self.eta.gap_slopes);
        x.extend_from_slice(&self.eta.alpha);
        x
    }

    pub fn from_unconstrained(layout: ParameterLayout, x: &[f64]) -> Self {
        assert_eq!(x.len(), layout.len(), "unconstrained vector length");
        Self {
            nu: x[ParameterLayout::LOG_NU].exp(),
            rho: x[layout.rho()].to_vec(),
            beta: x[layout.beta()].to_vec(),
            phi: x[layout.phi()].to_vec(),
            gamma: x[layout.gamma()].to_vec(),
            eta: CertaintyParams {
                intercepts: x[layout.intercepts()].to_vec(),
                gap_slopes: x[layout.gap_slopes()].to_vec(),
                alpha: x[layout.alpha()].to_vec(),
            },
        }
    }

    /// Natural-scale values in layout order (nu instead of log nu).
    pub fn to_natural(&self) -> Vec<f64> {
        let mut x = self.to_unconstrained();
        x[ParameterLayout::LOG_NU] = self.nu;
        x
    }

    /// TTP regression coefficients for the given stratum.
    pub fn stratum_coeffs(&self, planned: bool) -> &[f64] {
        if planned {
            &self.beta
        } else {
            &self.phi
        }
    }
}

/// Multinomial certainty probabilities, index `k - 1` for level `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyProbabilities {
    pub probs: Vec<f64>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> Result<f64, ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Baseline log-hazard level in effect at time `t` (tail-pooled beyond `J`).
#[inline]
pub fn baseline_level(rho: &[f64], t: u32) -> f64 {
    rho[(t as usize).min(rho.len()) - 1]
}

/// Discrete complementary log-log hazard at time `t`.
pub fn discrete_hazard(t: u32, z: &[f64], coeffs: &[f64], rho: &[f64]) -> Result<f64, ModelError> {
    if t < 1 {
        return Err(ModelError::InvalidTime { t, min: 1 });
    }
    let eta = baseline_level(rho, t) + dot(coeffs, z)?;
    Ok(-(-eta.exp()).exp_m1())
}

/// Prefix sums `C(t) = sum_{j<=t} exp(rho(min(j, J)))` with a closed-form tail.
#[derive(Debug, Clone)]
pub struct BaselineCumulative {
    prefix: Vec<f64>,
    tail_rate: f64,
}

impl BaselineCumulative {
    pub fn new(rho: &[f64]) -> Self {
        let mut acc = 0.0;
        let prefix = rho
            .iter()
            .map(|r| {
                acc += r.exp();
                acc
            })
            .collect();
        Self {
            prefix,
            tail_rate: rho[rho.len() - 1].exp(),
        }
    }

    pub fn cutoff(&self) -> usize {
        self.prefix.len()
    }

    #[inline]
    pub fn at(&self, t: u32) -> f64 {
        let t = t as usize;
        let j = self.prefix.len();
        if t == 0 {
            0.0
        } else if t <= j {
            self.prefix[t - 1]
        } else {
            self.prefix[j - 1] + (t - j) as f64 * self.tail_rate
        }
    }
}

/// `log S` for cumulative hazard `h` under a gamma frailty of variance `nu`.
#[inline]
pub fn log_frailty_survival(h: f64, nu: f64) -> f64 {
    if h == 0.0 {
        0.0
    } else {
        -(nu * h).ln_1p() / nu
    }
}

/// Cumulative hazard `H(t)` for one subject.
fn cumulative_hazard(t: u32, z: &[f64], planned: bool, theta: &ParameterVector) -> Result<f64, ModelError> {
    if !(theta.nu > 0.0) {
        return Err(ModelError::NonPositiveNu(theta.nu));
    }
    let lp = dot(theta.stratum_coeffs(planned), z)?;
    Ok(lp.exp() * BaselineCumulative::new(&theta.rho).at(t))
}

/// Marginal survival `P(T > t)` with the frailty integrated out.
pub fn marginal_survival(t: u32, z: &[f64], planned: bool, theta: &ParameterVector) -> Result<f64, ModelError> {
    let h = cumulative_hazard(t, z, planned, theta)?;
    Ok(log_frailty_survival(h, theta.nu).exp())
}

static CLAMPED_PMF: AtomicU64 = AtomicU64::new(0);

/// Number of times a survival difference came out negative by rounding and
/// was clamped to zero.
pub fn clamped_pmf_count() -> u64 {
    CLAMPED_PMF.load(Ordering::Relaxed)
}

/// Marginal pmf `P(T = t) = S(t - 1) - S(t)`.
pub fn marginal_pmf(t: u32, z: &[f64], planned: bool, theta: &ParameterVector) -> Result<f64, ModelError> {
    if t < 1 {
        return Err(ModelError::InvalidTime { t, min: 1 });
    }
    let before = marginal_survival(t - 1, z, planned, theta)?;
    let after = marginal_survival(t, z, planned, theta)?;
    let d = before - after;
    if d < 0.0 {
        if d > -1e-14 {
            CLAMPED_PMF.fetch_add(1, Ordering::Relaxed);
        }
        return Ok(0.0);
    }
    Ok(d)
}

/// `log P(T = t)` computed as `log S(t-1) + log(1 - S(t)/S(t-1))`.
pub fn log_marginal_pmf(t: u32, z: &[f64], planned: bool, theta: &ParameterVector) -> Result<f64, ModelError> {
    if t < 1 {
        return Err(ModelError::InvalidTime { t, min: 1 });
    }
    let before = log_frailty_survival(cumulative_hazard(t - 1, z, planned, theta)?, theta.nu);
    let after = log_frailty_survival(cumulative_hazard(t, z, planned, theta)?, theta.nu);
    Ok(before + log1m_exp(after - before))
}

/// `log(1 - exp(d))` for `d <= 0`.
#[inline]
pub fn log1m_exp(d: f64) -> f64 {
    if d > -std::f64::consts::LN_2 {
        (-d.exp_m1()).ln()
    } else {
        (-d.exp()).ln_1p()
    }
}

/// Non-reference linear predictors `alpha0k + alpha1k * gap + alpha'z`.
pub(crate) fn certainty_logits(gap: f64, z: &[f64], eta: &CertaintyParams) -> Result<Vec<f64>, ModelError> {
    let shared = dot(&eta.alpha, z)?;
    Ok(eta
        .intercepts
        .iter()
        .zip(&eta.gap_slopes)
        .map(|(a0, a1)| a0 + a1 * gap + shared)
        .collect())
}

/// Log probabilities of each certainty level.
pub fn log_certainty_probs(gap: f64, z: &[f64], eta: &CertaintyParams) -> Result<Vec<f64>, ModelError> {
    if !(gap >= 0.0) || !gap.is_finite() {
        return Err(ModelError::InvalidGap(gap));
    }
    if eta.levels() < 2 {
        return Err(ModelError::TooFewLevels(eta.levels()));
    }
    let logits = certainty_logits(gap, z, eta)?;
    let max = logits.iter().copied().fold(0.0_f64, f64::max);
    let norm = max
        + ((-max).exp() + logits.iter().map(|l| (l - max).exp()).sum::<f64>()).ln();
    let mut out = Vec::with_capacity(logits.len() + 1);
    out.push(-norm);
    out.extend(logits.iter().map(|l| l - norm));
    Ok(out)
}

/// Multinomial logit certainty probabilities with category 1 as reference.
pub fn certainty_probs(gap: f64, z: &[f64], eta: &CertaintyParams) -> Result<CertaintyProbabilities, ModelError> {
    let mut probs: Vec<f64> = log_certainty_probs(gap, z, eta)?
        .into_iter()
        .map(f64::exp)
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(CertaintyProbabilities { probs })
}

/// Logistic function without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability of a planned pregnancy, `exp(g'z) / (1 + exp(g'z))`.
pub fn planned_probability(z: &[f64], gamma: &[f64]) -> Result<f64, ModelError> {
    Ok(sigmoid(dot(gamma, z)?))
}
