//! Sampling-weighted log-likelihood over complete responders.
//!
//! A subject with reported TTP `t`, stratum `xi`, reported certainty level
//! `eps` (or none) and weight `w` contributes
//!
//! ```text
//! w * [ log P(T = t | z, xi) + delta * log pi_eps(o - t, z) + log p^xi (1 - p)^(1 - xi) ]
//! ```
//!
//! When no certainty is reported the mixture over levels collapses to
//! `log P(T = t)` because the level probabilities sum to one. Without the
//! recall model the certainty term is dropped entirely.
//!
//! The three bracketed terms share no parameters, so the objective is a sum of
//! a TTP block `(log nu, rho, beta, phi)`, an intention block `gamma` and a
//! certainty block `eta`. Gradients are analytic on the unconstrained scale.

use crate::model::{
    self, log1m_exp, log_certainty_probs, log_frailty_survival, log_sigmoid, sigmoid,
    BaselineCumulative, ModelError, ParameterLayout, ParameterVector, SubjectRecord,
};
use crate::sum::{chunked_vec_sum, Neumaier};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("subject {index} has no reported TTP")]
    MissingTtp { index: usize },
    #[error("subject {index} has {actual} covariates, model expects {expected}")]
    CovariateMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("parameter layout {actual:?} does not match options (J={cutoff}, K={levels})")]
    LayoutMismatch {
        actual: ParameterLayout,
        cutoff: usize,
        levels: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which likelihood to evaluate and how the baseline and certainty scale are set up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodOptions {
    /// `true` includes the certainty model, `false` drops it.
    pub use_recall_model: bool,
    pub baseline_cutoff: usize,
    pub certainty_levels: usize,
    /// Evaluate missing-certainty subjects as the explicit sum over levels
    /// instead of the collapsed form. Only useful for equivalence checks.
    #[serde(default)]
    pub explicit_case_sum: bool,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self {
            use_recall_model: true,
            baseline_cutoff: 12,
            certainty_levels: 4,
            explicit_case_sum: false,
        }
    }
}

impl LikelihoodOptions {
    pub fn recall(cutoff: usize, levels: usize) -> Self {
        Self {
            use_recall_model: true,
            baseline_cutoff: cutoff,
            certainty_levels: levels,
            explicit_case_sum: false,
        }
    }

    pub fn no_recall(cutoff: usize, levels: usize) -> Self {
        Self {
            use_recall_model: false,
            ..Self::recall(cutoff, levels)
        }
    }

    pub fn layout(&self, n_cov: usize) -> ParameterLayout {
        ParameterLayout::new(self.baseline_cutoff, n_cov, self.certainty_levels)
    }
}

/// Independent parameter blocks of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Ttp,
    Intention,
    Certainty,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Ttp, Block::Intention, Block::Certainty];

    pub fn range(self, layout: &ParameterLayout) -> std::ops::Range<usize> {
        match self {
            Block::Ttp => layout.ttp_block(),
            Block::Intention => layout.intention_block(),
            Block::Certainty => layout.certainty_block(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Ttp => "ttp",
            Block::Intention => "intention",
            Block::Certainty => "certainty",
        }
    }
}

/// Total log-likelihood plus the subjects whose pmf vanished at their observed time.
#[derive(Debug, Clone, PartialEq)]
pub struct LoglikEvaluation {
    pub value: f64,
    pub infeasible: Vec<usize>,
}

/// Per-parameter-vector quantities shared by all subjects.
struct Prepared<'a> {
    theta: &'a ParameterVector,
    cum: BaselineCumulative,
    exp_rho: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(theta: &'a ParameterVector) -> Self {
        Self {
            theta,
            cum: BaselineCumulative::new(&theta.rho),
            exp_rho: theta.rho.iter().map(|r| r.exp()).collect(),
        }
    }
}

/// `d log S / d log nu` for `x = nu * H`.
#[inline]
fn dlogs_dlognu(h: f64, nu: f64) -> f64 {
    let x = nu * h;
    if x < 1e-3 {
        // sum_{m>=2} (-1)^m (m-1)/m x^m, divided by nu
        let mut term = x * x;
        let mut acc = 0.0;
        for m in 2..9 {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * (m - 1) as f64 / m as f64 * term;
            term *= x;
        }
        acc / nu
    } else {
        (x.ln_1p() - x / (1.0 + x)) / nu
    }
}

/// Number of times baseline level `k` (0-based) enters `H(t)`.
#[inline]
fn level_count(k: usize, cutoff: usize, t: u32) -> f64 {
    let t = t as usize;
    if k + 1 < cutoff {
        if k < t {
            1.0
        } else {
            0.0
        }
    } else if t >= cutoff {
        (t - cutoff + 1) as f64
    } else {
        0.0
    }
}

/// Unweighted `log P(T = t)`; writes the gradient w.r.t. the TTP block when asked.
fn ttp_term(rec: &SubjectRecord, t: u32, prep: &Prepared, grad: Option<&mut [f64]>) -> f64 {
    let theta = prep.theta;
    let nu = theta.nu;
    let coeffs = theta.stratum_coeffs(rec.planned);
    let lp: f64 = coeffs.iter().zip(&rec.covariates).map(|(b, z)| b * z).sum();
    let e = lp.exp();
    let h0 = e * prep.cum.at(t - 1);
    let h1 = e * prep.cum.at(t);
    let ls0 = log_frailty_survival(h0, nu);
    let ls1 = log_frailty_survival(h1, nu);
    let d = ls1 - ls0;
    let value = ls0 + log1m_exp(d);
    if let Some(g) = grad {
        if !value.is_finite() {
            return value;
        }
        let r = d.exp();
        let one_minus_r = -d.exp_m1();
        let c0 = -1.0 / (1.0 + nu * h0) / one_minus_r;
        let c1 = r / (1.0 + nu * h1) / one_minus_r;
        g[0] += (dlogs_dlognu(h0, nu) - r * dlogs_dlognu(h1, nu)) / one_minus_r;
        let cutoff = theta.rho.len();
        for k in 0..cutoff {
            let n0 = level_count(k, cutoff, t - 1);
            let n1 = level_count(k, cutoff, t);
            if n1 == 0.0 {
                break;
            }
            g[1 + k] += e * prep.exp_rho[k] * (c0 * n0 + c1 * n1);
        }
        let scale = c0 * h0 + c1 * h1;
        let r_cov = rec.covariates.len();
        let off = 1 + cutoff + if rec.planned { 0 } else { r_cov };
        for (gi, z) in g[off..off + r_cov].iter_mut().zip(&rec.covariates) {
            *gi += scale * z;
        }
    }
    value
}

/// Unweighted `xi log p + (1 - xi) log(1 - p)` and its gradient in `gamma`.
fn intention_term(rec: &SubjectRecord, theta: &ParameterVector, grad: Option<&mut [f64]>) -> f64 {
    let x: f64 = theta.gamma.iter().zip(&rec.covariates).map(|(g, z)| g * z).sum();
    let (value, resid) = if rec.planned {
        (log_sigmoid(x), 1.0 - sigmoid(x))
    } else {
        (log_sigmoid(-x), -sigmoid(x))
    };
    if let Some(g) = grad {
        for (gi, z) in g.iter_mut().zip(&rec.covariates) {
            *gi += resid * z;
        }
    }
    value
}

/// Unweighted certainty term for a subject that reported level `eps`.
fn certainty_term(
    rec: &SubjectRecord,
    eps: u8,
    gap: f64,
    theta: &ParameterVector,
    grad: Option<&mut [f64]>,
) -> Result<f64, ModelError> {
    let logp = log_certainty_probs(gap, &rec.covariates, &theta.eta)?;
    let value = logp[eps as usize - 1];
    if let Some(g) = grad {
        let m = logp.len() - 1;
        let mut shared = 0.0;
        for k in 0..m {
            let hit = if eps as usize == k + 2 { 1.0 } else { 0.0 };
            let resid = hit - logp[k + 1].exp();
            g[k] += resid;
            g[m + k] += resid * gap;
            shared += resid;
        }
        for (gi, z) in g[2 * m..].iter_mut().zip(&rec.covariates) {
            *gi += shared * z;
        }
    }
    Ok(value)
}

fn check_subject(
    index: usize,
    rec: &SubjectRecord,
    layout: &ParameterLayout,
) -> Result<u32, LikelihoodError> {
    if rec.covariates.len() != layout.n_cov {
        return Err(LikelihoodError::CovariateMismatch {
            index,
            expected: layout.n_cov,
            actual: rec.covariates.len(),
        });
    }
    rec.ttp.ok_or(LikelihoodError::MissingTtp { index })
}

fn check_theta(theta: &ParameterVector, opts: &LikelihoodOptions) -> Result<(), LikelihoodError> {
    theta.validate()?;
    let layout = theta.layout();
    if layout.cutoff != opts.baseline_cutoff || layout.levels != opts.certainty_levels {
        return Err(LikelihoodError::LayoutMismatch {
            actual: layout,
            cutoff: opts.baseline_cutoff,
            levels: opts.certainty_levels,
        });
    }
    Ok(())
}

/// Weighted contribution of one block for subject `index`.
fn block_contribution(
    block: Block,
    index: usize,
    rec: &SubjectRecord,
    prep: &Prepared,
    opts: &LikelihoodOptions,
    grad: Option<&mut [f64]>,
) -> Result<f64, LikelihoodError> {
    let layout = prep.theta.layout();
    let t = check_subject(index, rec, &layout)?;
    let w = rec.weight;
    let mut local = grad.as_ref().map(|g| vec![0.0; g.len()]);
    let value = match block {
        Block::Ttp => {
            let mut v = ttp_term(rec, t, prep, local.as_deref_mut());
            if opts.explicit_case_sum && opts.use_recall_model && rec.certainty.is_none() {
                let gap = rec.obs_time - t as f64;
                let logp = log_certainty_probs(gap, &rec.covariates, &prep.theta.eta)?;
                let mut acc = Neumaier::new();
                for lp in &logp {
                    acc.add((v + lp).exp());
                }
                v = acc.value().ln();
            }
            v
        }
        Block::Intention => intention_term(rec, prep.theta, local.as_deref_mut()),
        Block::Certainty => match (opts.use_recall_model, rec.certainty) {
            (true, Some(eps)) => {
                let gap = rec.obs_time - t as f64;
                certainty_term(rec, eps, gap, prep.theta, local.as_deref_mut())?
            }
            _ => 0.0,
        },
    };
    if let (Some(g), Some(l)) = (grad, local) {
        for (gi, li) in g.iter_mut().zip(l) {
            *gi += w * li;
        }
    }
    Ok(w * value)
}

/// Weighted log-likelihood contribution of a single complete subject.
pub fn subject_loglik(
    record: &SubjectRecord,
    theta: &ParameterVector,
    opts: &LikelihoodOptions,
) -> Result<f64, LikelihoodError> {
    check_theta(theta, opts)?;
    let prep = Prepared::new(theta);
    let mut acc = 0.0;
    for block in Block::ALL {
        acc += block_contribution(block, 0, record, &prep, opts, None)?;
    }
    Ok(acc)
}

fn subjects_value(
    dataset: &[SubjectRecord],
    prep: &Prepared,
    opts: &LikelihoodOptions,
    blocks: &[Block],
) -> Result<LoglikEvaluation, LikelihoodError> {
    let contributions: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut v = 0.0;
            for &b in blocks {
                v += block_contribution(b, i, rec, prep, opts, None)?;
            }
            Ok(v)
        })
        .collect::<Result<_, LikelihoodError>>()?;
    let infeasible: Vec<usize> = contributions
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if !infeasible.is_empty() {
        return Ok(LoglikEvaluation {
            value: f64::NEG_INFINITY,
            infeasible,
        });
    }
    let mut acc = Neumaier::new();
    for v in contributions {
        acc.add(v);
    }
    Ok(LoglikEvaluation {
        value: acc.value(),
        infeasible,
    })
}

/// Sum of subject contributions over a dataset of complete responders.
pub fn total_loglik(
    dataset: &[SubjectRecord],
    theta: &ParameterVector,
    opts: &LikelihoodOptions,
) -> Result<LoglikEvaluation, LikelihoodError> {
    check_theta(theta, opts)?;
    subjects_value(dataset, &Prepared::new(theta), opts, &Block::ALL)
}

/// Log-likelihood restricted to one block, with its gradient (block coordinates).
pub fn block_value_and_gradient(
    dataset: &[SubjectRecord],
    theta: &ParameterVector,
    opts: &LikelihoodOptions,
    block: Block,
) -> Result<(LoglikEvaluation, Vec<f64>), LikelihoodError> {
    check_theta(theta, opts)?;
    let prep = Prepared::new(theta);
    let dim = block.range(&theta.layout()).len();
    let eval = subjects_value(dataset, &prep, opts, &[block])?;
    if !eval.value.is_finite() {
        return Ok((eval, vec![f64::NAN; dim]));
    }
    // Errors were already surfaced by the value pass.
    let grad = chunked_vec_sum(dataset.len(), dim, |i, out| {
        let _ = block_contribution(block, i, &dataset[i], &prep, opts, Some(out));
    });
    Ok((eval, grad))
}

/// Gradient of [`total_loglik`] on the unconstrained scale
/// `(log nu, rho, beta, phi, gamma, eta)`.
pub fn loglik_gradient(
    dataset: &[SubjectRecord],
    theta: &ParameterVector,
    opts: &LikelihoodOptions,
) -> Result<Vec<f64>, LikelihoodError> {
    let layout = theta.layout();
    let mut grad = vec![0.0; layout.len()];
    for block in Block::ALL {
        let (_, g) = block_value_and_gradient(dataset, theta, opts, block)?;
        grad[block.range(&layout)].copy_from_slice(&g);
    }
    Ok(grad)
}

/// Per-subject weighted score vectors (full layout), for robust variance estimates.
pub fn subject_scores(
    dataset: &[SubjectRecord],
    theta: &ParameterVector,
    opts: &LikelihoodOptions,
) -> Result<Vec<Vec<f64>>, LikelihoodError> {
    check_theta(theta, opts)?;
    let prep = Prepared::new(theta);
    let layout = theta.layout();
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut score = vec![0.0; layout.len()];
            for block in Block::ALL {
                let range = block.range(&layout);
                block_contribution(block, i, rec, &prep, opts, Some(&mut score[range]))?;
            }
            Ok(score)
        })
        .collect()
}

/// Convenience for callers that only hold the model pieces: `log P(T = t)`.
pub fn log_pmf(rec: &SubjectRecord, theta: &ParameterVector) -> Result<f64, LikelihoodError> {
    let t = rec.ttp.ok_or(LikelihoodError::MissingTtp { index: 0 })?;
    Ok(model::log_marginal_pmf(t, &rec.covariates, rec.planned, theta)?)
}
