//! Synthetic data from the frailty TTP model and Monte Carlo bias/coverage studies.

use crate::estimation::{delta_se, fit, wald_intervals, FitControls, FitResult};
use crate::likelihood::LikelihoodOptions;
use crate::model::{
    baseline_level, certainty_probs, planned_probability, CertaintyParams, ModelError,
    ParameterLayout, ParameterVector, SubjectRecord,
};
use crate::rng::{self, Purpose};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("subject {subject} of replication {rep} exceeded the TTP cap {cap} on {attempts} consecutive draws")]
    CapExceeded {
        rep: u64,
        subject: usize,
        cap: u32,
        attempts: usize,
    },
}

/// One covariate generator; covariates are drawn independently in order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateGen {
    Uniform { low: f64, high: f64 },
    Bernoulli { p: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateGen {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CovariateGen::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            CovariateGen::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
            CovariateGen::Normal { mean, sd } => {
                let e: f64 = StandardNormal.sample(rng);
                mean + sd * e
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            CovariateGen::Uniform { low, high } => 0.5 * (low + high),
            CovariateGen::Bernoulli { p } => p,
            CovariateGen::Normal { mean, .. } => mean,
        }
    }
}

/// Source of the baseline log-hazard `rho(j)` used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSpec {
    /// `theta_true.rho`, held at `rho(J)` beyond the cutoff.
    Fixed,
    /// `rho(j) = log(-log(1 - U_j))`, one draw per time and replication.
    #[default]
    RandomPerReplication,
    /// As above but one baseline shared by every replication.
    RandomPerStudy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub replications: usize,
    pub theta_true: ParameterVector,
    pub covariates: Vec<CovariateGen>,
    /// Gap times `obs_time - ttp`, drawn uniformly from this set.
    pub gap_values: Vec<f64>,
    pub seed: u64,
    pub baseline: BaselineSpec,
    /// Random baselines only: hold `rho(j) = rho(J)` for `j > J` instead of drawing afresh.
    pub pool_tail: bool,
    /// Probability that a simulated subject has no certainty answer.
    pub certainty_missing_rate: f64,
    pub weight: f64,
    /// Longest simulated TTP for a random baseline; longer draws are redrawn.
    /// Ignored when the hazard is constant beyond J.
    pub ttp_cap: u32,
}

impl ScenarioConfig {
    pub fn certainty_levels(&self) -> usize {
        self.theta_true.eta.levels()
    }

    pub fn cutoff(&self) -> usize {
        self.theta_true.rho.len()
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidConfig(m.to_string()));
        self.theta_true.validate()?;
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if self.covariates.len() != self.theta_true.beta.len() {
            return bad("covariate generators do not match the regression dimension");
        }
        for c in &self.covariates {
            let ok = match *c {
                CovariateGen::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
                CovariateGen::Bernoulli { p } => (0.0..=1.0).contains(&p),
                CovariateGen::Normal { mean, sd } => mean.is_finite() && sd >= 0.0,
            };
            if !ok {
                return bad("covariate generator parameters out of range");
            }
        }
        if self.gap_values.is_empty() || self.gap_values.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return bad("gap values must be a non-empty set of positive numbers");
        }
        if !(0.0..=1.0).contains(&self.certainty_missing_rate) {
            return bad("certainty_missing_rate must lie in [0, 1]");
        }
        if !(self.weight > 0.0) {
            return bad("weight must be positive");
        }
        if self.ttp_cap < 1 {
            return bad("ttp_cap must be positive");
        }
        Ok(())
    }

    /// Fixed parts shared by both published scenarios. Covariates are ordered
    /// (continuous U[20,45], binary with P(1)=0.25).
    fn published(eta: CertaintyParams) -> Self {
        let cutoff = 12;
        let mut theta = ParameterVector::zeros(ParameterLayout::new(cutoff, 2, 3), 0.5);
        theta.beta = vec![-0.05, 0.01];
        theta.phi = vec![-0.05, 0.01];
        theta.gamma = vec![0.04, -0.75];
        theta.eta = eta;
        Self {
            n: 1000,
            replications: 1000,
            theta_true: theta,
            covariates: vec![
                CovariateGen::Uniform { low: 20.0, high: 45.0 },
                CovariateGen::Bernoulli { p: 0.25 },
            ],
            gap_values: (0..6).map(|i| 43.5 + i as f64).collect(),
            seed: 1,
            baseline: BaselineSpec::RandomPerReplication,
            pool_tail: false,
            certainty_missing_rate: 0.0,
            weight: 1.0,
            ttp_cap: 600,
        }
    }

    /// Mostly "very sure" answers: probabilities (0.848, 0.094, 0.057) at gap 46.
    pub fn scenario1() -> Self {
        Self::published(CertaintyParams {
            intercepts: vec![-16.0, -5.0],
            gap_slopes: vec![0.3, 0.05],
            alpha: vec![0.0, 0.0],
        })
    }

    /// Roughly equal certainty probabilities at gap 46.
    pub fn scenario2() -> Self {
        Self::published(CertaintyParams {
            intercepts: vec![-9.0, -9.0],
            gap_slopes: vec![0.195, 0.195],
            alpha: vec![0.0, 0.0],
        })
    }

    /// Covariate vector at the generator means.
    pub fn mean_covariates(&self) -> Vec<f64> {
        self.covariates.iter().map(CovariateGen::mean).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub records: Vec<SubjectRecord>,
    /// Subjects whose TTP exceeded the cap and were redrawn.
    pub redraws: usize,
}

/// Baseline log-hazards for `j = 1..=cap` under the configured scheme.
pub fn baseline_for(config: &ScenarioConfig, rep_index: u64) -> Vec<f64> {
    let cap = config.ttp_cap as usize;
    let cutoff = config.cutoff();
    let group = match config.baseline {
        BaselineSpec::Fixed => {
            return (1..=cap as u32).map(|t| baseline_level(&config.theta_true.rho, t)).collect();
        }
        BaselineSpec::RandomPerReplication => rep_index,
        BaselineSpec::RandomPerStudy => u64::MAX,
    };
    let mut rng = rng::stream(config.seed, group, Purpose::Baseline, 0);
    let mut rho = Vec::with_capacity(cap);
    for j in 0..cap {
        if config.pool_tail && j >= cutoff {
            rho.push(rho[cutoff - 1]);
            continue;
        }
        // 1 - U lies in (0, 1], so guard the log of zero.
        let u: f64 = rng.random::<f64>();
        let v = (1.0 - u).max(f64::MIN_POSITIVE);
        rho.push((-v.ln()).max(f64::MIN_POSITIVE).ln());
    }
    rho
}

/// Draws one replication's dataset. Deterministic in `(config.seed, rep_index)`.
pub fn generate_dataset(config: &ScenarioConfig, rep_index: u64) -> Result<GeneratedDataset, SimulationError> {
    const MAX_ATTEMPTS: usize = 1000;
    config.validate()?;
    let theta = &config.theta_true;
    let rho = baseline_for(config, rep_index);
    let exp_rho: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
    // Only a baseline that keeps changing beyond J needs the cap.
    let constant_tail = (config.baseline == BaselineSpec::Fixed || config.pool_tail) && rho.len() >= config.cutoff();
    let frailty = Gamma::new(1.0 / theta.nu, theta.nu)
        .map_err(|e| SimulationError::InvalidConfig(format!("frailty distribution: {e}")))?;
    let mut redraws = 0;
    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let mut rng = rng::stream(config.seed, rep_index, Purpose::Subject, i as u64);
        let mut attempts = 0;
        let rec = loop {
            let z: Vec<f64> = config.covariates.iter().map(|c| c.sample(&mut rng)).collect();
            let planned = rng.random::<f64>() < planned_probability(&z, &theta.gamma)?;
            let g: f64 = frailty.sample(&mut rng);
            let e: f64 = Exp1.sample(&mut rng);
            let scale = g * crate::model::dot(&z, theta.stratum_coeffs(planned))?.exp();
            let mut cum = 0.0;
            let mut ttp = None;
            for (j, er) in exp_rho.iter().enumerate() {
                cum += er;
                if scale * cum >= e {
                    ttp = Some(j as u32 + 1);
                    break;
                }
            }
            if ttp.is_none() && constant_tail {
                // Hazard is flat past the cap, so invert the linear tail directly.
                let last = exp_rho[exp_rho.len() - 1];
                let extra = ((e / scale - cum) / last).ceil().max(1.0);
                let t = exp_rho.len() as f64 + extra;
                if t <= u32::MAX as f64 {
                    ttp = Some(t as u32);
                }
            }
            let Some(t) = ttp else {
                attempts += 1;
                redraws += 1;
                if attempts >= MAX_ATTEMPTS {
                    return Err(SimulationError::CapExceeded {
                        rep: rep_index,
                        subject: i,
                        cap: config.ttp_cap,
                        attempts,
                    });
                }
                continue;
            };
            let gap = config.gap_values[rng.random_range(0..config.gap_values.len())];
            let probs = certainty_probs(gap, &z, &theta.eta)?.probs;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut level = probs.len();
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    level = k + 1;
                    break;
                }
            }
            let missing = config.certainty_missing_rate > 0.0 && rng.random::<f64>() < config.certainty_missing_rate;
            break SubjectRecord {
                id: format!("r{rep_index}-s{i}"),
                ttp: Some(t),
                obs_time: t as f64 + gap,
                certainty: (!missing).then_some(level as u8),
                planned,
                covariates: z,
                weight: config.weight,
            };
        };
        records.push(rec);
    }
    Ok(GeneratedDataset { records, redraws })
}

/// Summary row label for the derived "very sure at gap 46" probability.
pub const VERY_SURE_ROW: &str = "p_very_sure[46]";
const VERY_SURE_GAP: f64 = 46.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Recall,
    NoRecall,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Recall => "recall",
            Estimator::NoRecall => "no_recall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub parameter: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Population standard deviation over successful replications; absent for one replication.
    pub stdev: Option<f64>,
    pub mse: f64,
    pub coverage: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: Estimator,
    pub rows: Vec<McRow>,
    pub replications: usize,
    pub failed: usize,
    pub failure_rate: f64,
    /// `false` when more than 20% of replications failed.
    pub valid: bool,
}

impl McSummary {
    pub fn row(&self, parameter: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStudy {
    pub recall: McSummary,
    pub no_recall: McSummary,
    pub redraws: usize,
}

/// Per-replication, per-estimator outcome: (estimate, lower, upper) per row.
type RepOutcome = Option<Vec<(f64, f64, f64)>>;

fn very_sure(eta: &CertaintyParams, z: &[f64]) -> f64 {
    certainty_probs(VERY_SURE_GAP, z, eta).map(|p| p.probs[0]).unwrap_or(f64::NAN)
}

/// Coordinates reported in the study: everything estimated except the baseline
/// (which is random when the baseline is), plus the derived probability row.
fn summary_rows(config: &ScenarioConfig, estimator: Estimator) -> Vec<(String, Option<usize>)> {
    let layout = config.theta_true.layout();
    let names = layout.names();
    let mut rows = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let is_rho = layout.rho().contains(&i);
        let is_eta = layout.certainty_block().contains(&i);
        if (is_rho && config.baseline != BaselineSpec::Fixed) || (is_eta && estimator == Estimator::NoRecall) {
            continue;
        }
        rows.push((name.clone(), Some(i)));
    }
    if estimator == Estimator::Recall {
        rows.push((VERY_SURE_ROW.to_string(), None));
    }
    rows
}

fn replication_outcome(
    fit: &FitResult,
    rows: &[(String, Option<usize>)],
    z_bar: &[f64],
    level: f64,
) -> RepOutcome {
    if !fit.converged {
        return None;
    }
    let ci = wald_intervals(fit, level).ok()?;
    let natural = fit.theta_hat.to_natural();
    let z = crate::estimation::normal_quantile(level);
    let mut out = Vec::with_capacity(rows.len());
    for (_, idx) in rows {
        match idx {
            Some(i) => {
                if !fit.estimated[*i] {
                    out.push((natural[*i], natural[*i], natural[*i]));
                } else {
                    out.push((natural[*i], ci[*i].0, ci[*i].1));
                }
            }
            None => {
                let layout = fit.layout();
                let x = fit.theta_hat.to_unconstrained();
                let f = |x: &[f64]| very_sure(&ParameterVector::from_unconstrained(layout, x).eta, z_bar);
                let p = f(&x);
                let mut grad = vec![0.0; x.len()];
                for i in layout.certainty_block() {
                    let h = 1e-6 * x[i].abs().max(1.0);
                    let mut xp = x.clone();
                    xp[i] += h;
                    let mut xm = x.clone();
                    xm[i] -= h;
                    grad[i] = (f(&xp) - f(&xm)) / (2.0 * h);
                }
                let se = delta_se(fit, &grad)?;
                out.push((p, p - z * se, p + z * se));
            }
        }
    }
    Some(out)
}

fn summarise(
    estimator: Estimator,
    rows: &[(String, Option<usize>)],
    truths: &[f64],
    outcomes: &[RepOutcome],
) -> McSummary {
    let ok: Vec<&Vec<(f64, f64, f64)>> = outcomes.iter().flatten().collect();
    let m = ok.len();
    let replications = outcomes.len();
    let failed = replications - m;
    let failure_rate = failed as f64 / replications as f64;
    let rows = rows
        .iter()
        .enumerate()
        .map(|(r, (name, _))| {
            let truth = truths[r];
            let mean = ok.iter().map(|o| o[r].0).sum::<f64>() / m as f64;
            let var = ok.iter().map(|o| (o[r].0 - mean).powi(2)).sum::<f64>() / m as f64;
            let bias = mean - truth;
            let covered = ok.iter().filter(|o| o[r].1 <= truth && truth <= o[r].2).count();
            McRow {
                parameter: name.clone(),
                truth,
                mean_estimate: mean,
                bias,
                stdev: (m > 1).then(|| var.sqrt()),
                mse: ok.iter().map(|o| (o[r].0 - truth).powi(2)).sum::<f64>() / m as f64,
                coverage: if m > 0 { covered as f64 / m as f64 } else { f64::NAN },
                count: m,
            }
        })
        .collect();
    McSummary {
        estimator,
        rows,
        replications,
        failed,
        failure_rate,
        valid: m > 0 && failure_rate <= 0.2,
    }
}

/// Fits both estimators to every replication and summarises bias, standard
/// deviation, MSE and Wald coverage against the generating parameters.
pub fn run_mc_study(
    config: &ScenarioConfig,
    recall_opts: &LikelihoodOptions,
    no_recall_opts: &LikelihoodOptions,
    controls: &FitControls,
    level: f64,
) -> Result<McStudy, SimulationError> {
    config.validate()?;
    let z_bar = config.mean_covariates();
    let recall_rows = summary_rows(config, Estimator::Recall);
    let no_recall_rows = summary_rows(config, Estimator::NoRecall);
    let truth_of = |rows: &[(String, Option<usize>)]| -> Vec<f64> {
        let natural = config.theta_true.to_natural();
        rows.iter()
            .map(|(_, idx)| match idx {
                Some(i) => natural[*i],
                None => very_sure(&config.theta_true.eta, &z_bar),
            })
            .collect()
    };

    let per_rep: Vec<Result<(RepOutcome, RepOutcome, usize), SimulationError>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let data = generate_dataset(config, rep as u64)?;
            let run = |opts: &LikelihoodOptions, rows: &[(String, Option<usize>)]| match fit(&data.records, opts, None, controls) {
                Ok(f) => replication_outcome(&f, rows, &z_bar, level),
                Err(e) => {
                    log::debug!("replication {rep}: fit failed: {e}");
                    None
                }
            };
            let a = run(recall_opts, &recall_rows);
            let b = run(no_recall_opts, &no_recall_rows);
            Ok((a, b, data.redraws))
        })
        .collect();

    let mut recall = Vec::with_capacity(per_rep.len());
    let mut no_recall = Vec::with_capacity(per_rep.len());
    let mut redraws = 0;
    for r in per_rep {
        let (a, b, d) = r?;
        recall.push(a);
        no_recall.push(b);
        redraws += d;
    }
    let study = McStudy {
        recall: summarise(Estimator::Recall, &recall_rows, &truth_of(&recall_rows), &recall),
        no_recall: summarise(Estimator::NoRecall, &no_recall_rows, &truth_of(&no_recall_rows), &no_recall),
        redraws,
    };
    for s in [&study.recall, &study.no_recall] {
        if !s.valid {
            log::warn!(
                "{} estimator failed on {} of {} replications; study is invalid",
                s.estimator.name(),
                s.failed,
                s.replications
            );
        }
    }
    Ok(study)
}
