//! Command-line surface.

use crate::estimation::{fit, EstimationError, FitResult};
use crate::evaluation::{evaluate_pipeline, EvaluationError};
use crate::io::{self, IoError, LoadedDataset, RunConfig, UnknownIntention};
use crate::model::{certainty_probs, marginal_survival, ParameterVector, SubjectRecord};
use crate::prediction::{
    classify_intention, predict_survival_with, predict_unconditional_with, ParameterDraws, PredictionError,
};
use crate::simulation::{baseline_for, generate_dataset, run_mc_study, ScenarioConfig, SimulationError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Estimation(_) => "estimation",
            CliError::Simulation(_) => "simulation",
            CliError::Prediction(_) => "prediction",
            CliError::Evaluation(_) => "evaluation",
            CliError::Runtime(_) => "runtime",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ttp-recall", version, about = "Time-to-pregnancy estimation with recall certainty")]
pub struct Cli {
    /// Log progress and stream optimizer traces to stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model to a dataset and write the parameter table.
    Fit(DataArgs),
    /// Generate a synthetic dataset.
    Simulate(ScenarioArgs),
    /// Monte Carlo bias/coverage study of both estimators.
    McStudy(ScenarioArgs),
    /// Conditional survival curves for rows without TTP.
    Predict(DataArgs),
    /// Holdout ROC/AUC evaluation.
    Evaluate(DataArgs),
    /// Plot-ready survival and certainty-by-gap tables.
    ExportPlots(DataArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Drop the certainty model from the likelihood.
    #[arg(long)]
    pub no_recall: bool,
    /// Evaluation times, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub t0: Option<Vec<u32>>,
    /// Monte Carlo draws for prediction.
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioChoice {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Custom,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "1")]
    pub scenario: ScenarioChoice,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Replication index to draw (simulate only).
    #[arg(long, default_value_t = 0)]
    pub rep: u64,
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    verbose: bool,
}

impl Context {
    fn new(common: &Common, verbose: bool) -> Result<Self, CliError> {
        let mut config = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if common.seed.is_some() {
            config.seed = common.seed;
        }
        let out = common
            .out
            .clone()
            .or_else(|| config.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        config.output.dir = Some(out.clone());
        Ok(Self { config, out, verbose })
    }

    fn seed(&self) -> Result<u64, CliError> {
        self.config
            .seed
            .ok_or_else(|| CliError::Usage("this command is stochastic; pass --seed or set seed in the config".into()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn echo_config(&self) -> Result<(), CliError> {
        io::write_text(&self.path("config.resolved.toml"), &self.config.to_toml()?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    block: &'a str,
    iteration: usize,
    loglik: f64,
    grad_norm: f64,
}

fn emit_trace(fit: &FitResult) {
    for b in &fit.trace {
        for p in &b.points {
            let line = TraceLine {
                block: b.block.name(),
                iteration: p.iteration,
                loglik: p.value,
                grad_norm: p.grad_norm,
            };
            if let Ok(s) = serde_json::to_string(&line) {
                eprintln!("{s}");
            }
        }
    }
}

fn load(ctx: &Context, path: &Path) -> Result<LoadedDataset, CliError> {
    let data = io::load_dataset(path, &ctx.config)?;
    io::write_json(&ctx.path("ingestion.json"), &data.report)?;
    log::info!(
        "loaded {} complete rows, {} prediction targets, {} dropped",
        data.records.len(),
        data.targets.len(),
        data.report.dropped.len()
    );
    Ok(data)
}

fn fit_data(ctx: &Context, records: &[SubjectRecord], no_recall: bool) -> Result<FitResult, CliError> {
    let opts = ctx.config.likelihood_options(no_recall);
    let f = fit(records, &opts, None, &ctx.config.fit_controls())?;
    if ctx.verbose {
        emit_trace(&f);
    }
    if !f.converged {
        log::warn!("fit did not converge (relative gradient norm {})", f.gradient_norm);
    }
    Ok(f)
}

fn write_fit(ctx: &Context, f: &FitResult) -> Result<(), CliError> {
    io::write_fit_table(&ctx.path("fit.csv"), f, 0.95)?;
    io::write_json(&ctx.path("fit.json"), f)?;
    Ok(())
}

fn cmd_fit(ctx: &Context, a: &DataArgs) -> Result<(), CliError> {
    let data = load(ctx, &a.data)?;
    let f = fit_data(ctx, &data.records, a.no_recall)?;
    write_fit(ctx, &f)?;
    ctx.echo_config()
}

fn scenario(ctx: &Context, a: &ScenarioArgs) -> Result<ScenarioConfig, CliError> {
    let mut s = match a.scenario {
        ScenarioChoice::One => ScenarioConfig::scenario1(),
        ScenarioChoice::Two => ScenarioConfig::scenario2(),
        ScenarioChoice::Custom => ctx
            .config
            .scenario
            .clone()
            .ok_or_else(|| CliError::Usage("--scenario custom needs a [scenario] section in the config".into()))?,
    };
    if let Some(n) = a.n {
        s.n = n;
    }
    if let Some(r) = a.reps {
        s.replications = r;
    }
    s.seed = ctx.seed()?;
    s.validate()?;
    Ok(s)
}

/// The model block must describe the generating layout for the output to be refittable.
fn align_model(ctx: &mut Context, s: &ScenarioConfig) {
    ctx.config.model.cutoff = s.cutoff();
    ctx.config.model.levels = s.certainty_levels();
    ctx.config.scenario = Some(s.clone());
}

fn covariate_names(r: usize) -> Vec<String> {
    (1..=r).map(|j| format!("z{j}")).collect()
}

fn cmd_simulate(mut ctx: Context, a: &ScenarioArgs) -> Result<(), CliError> {
    let s = scenario(&ctx, a)?;
    let data = generate_dataset(&s, a.rep)?;
    if data.redraws > 0 {
        log::info!("{} subjects exceeded the TTP cap and were redrawn", data.redraws);
    }
    io::write_dataset(&ctx.path("dataset.csv"), &data.records, &covariate_names(s.covariates.len()))?;
    let mut theta: ParameterVector = s.theta_true.clone();
    theta.rho = baseline_for(&s, a.rep)[..s.cutoff()].to_vec();
    io::write_json(&ctx.path("generating_theta.json"), &theta)?;
    align_model(&mut ctx, &s);
    ctx.echo_config()
}

fn cmd_mc_study(mut ctx: Context, a: &ScenarioArgs) -> Result<(), CliError> {
    let s = scenario(&ctx, a)?;
    let recall = ctx.config.likelihood_options(false);
    let recall = crate::likelihood::LikelihoodOptions {
        certainty_levels: s.certainty_levels(),
        ..recall
    };
    let no_recall = crate::likelihood::LikelihoodOptions {
        use_recall_model: false,
        ..recall
    };
    let study = run_mc_study(&s, &recall, &no_recall, &ctx.config.fit_controls(), 0.95)?;
    io::write_mc_summary(&ctx.path("mc_summary.csv"), &study)?;
    io::write_json(&ctx.path("mc_study.json"), &study)?;
    ctx.config.model.levels = s.certainty_levels();
    ctx.config.scenario = Some(s);
    ctx.echo_config()?;
    if !study.recall.valid || !study.no_recall.valid {
        return Err(CliError::Runtime(format!(
            "study invalid: failure rates {} (recall), {} (no recall)",
            study.recall.failure_rate, study.no_recall.failure_rate
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct IntentionRow {
    subject_id: String,
    planned_probability: f64,
    stratum: &'static str,
    source: &'static str,
}

fn cmd_predict(mut ctx: Context, a: &DataArgs) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    if let Some(d) = a.draws {
        ctx.config.prediction.draws = d;
    }
    let data = load(&ctx, &a.data)?;
    if data.targets.is_empty() {
        return Err(CliError::Runtime("dataset has no rows with empty ttp to predict".into()));
    }
    let f = fit_data(&ctx, &data.records, a.no_recall)?;
    let p = &ctx.config.prediction;
    let draws = ParameterDraws::new(&f, p.draws, seed)?;
    let mut curves = Vec::with_capacity(data.targets.len());
    let mut rows = Vec::with_capacity(data.targets.len());
    for t in &data.targets {
        let class = classify_intention(&t.covariates, &f, p.threshold)?;
        let (curve, stratum, source) = match (t.planned, p.unknown_intention) {
            (Some(pl), _) => (
                predict_survival_with(&t.id, &t.covariates, pl, p.t_condition, &p.u_grid, &draws)?,
                if pl { "planned" } else { "unplanned" },
                "reported",
            ),
            (None, UnknownIntention::Classify) => (
                predict_survival_with(&t.id, &t.covariates, class.planned, p.t_condition, &p.u_grid, &draws)?,
                if class.planned { "planned" } else { "unplanned" },
                "classified",
            ),
            (None, UnknownIntention::Mixture) => (
                predict_unconditional_with(&t.id, &t.covariates, p.t_condition, &p.u_grid, &draws)?,
                "mixture",
                "mixture",
            ),
        };
        curves.push(curve);
        rows.push(IntentionRow {
            subject_id: t.id.clone(),
            planned_probability: class.probability,
            stratum,
            source,
        });
    }
    io::write_curves(&ctx.path("curves.csv"), &curves)?;
    io::write_table(
        &ctx.path("intention.csv"),
        &["subject_id", "planned_probability", "stratum", "source"],
        rows.into_iter()
            .map(|r| vec![r.subject_id, r.planned_probability.to_string(), r.stratum.into(), r.source.into()])
            .collect(),
    )?;
    write_fit(&ctx, &f)?;
    ctx.echo_config()
}

#[derive(Serialize)]
struct EvaluationSummary {
    n_train: usize,
    n_test: usize,
    fits: Vec<FitStatus>,
}

#[derive(Serialize)]
struct FitStatus {
    estimator: &'static str,
    converged: Option<bool>,
    loglik: Option<f64>,
    error: Option<String>,
}

fn cmd_evaluate(mut ctx: Context, a: &DataArgs) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    if let Some(d) = a.draws {
        ctx.config.prediction.draws = d;
    }
    if let Some(t0) = &a.t0 {
        ctx.config.evaluation.t0 = t0.clone();
    }
    let data = load(&ctx, &a.data)?;
    let settings = ctx.config.evaluation_settings(seed);
    let result = evaluate_pipeline(&data.records, &ctx.config.evaluation.t0, &settings)?;
    io::write_evaluation(&ctx.out, &result.cells)?;
    let summary = EvaluationSummary {
        n_train: result.n_train,
        n_test: result.n_test,
        fits: result
            .fits
            .iter()
            .map(|(recall, f)| FitStatus {
                estimator: if *recall { "recall" } else { "no_recall" },
                converged: f.as_ref().ok().map(|f| f.converged),
                loglik: f.as_ref().ok().map(|f| f.loglik_at_max),
                error: f.as_ref().err().map(|e| e.to_string()),
            })
            .collect(),
    };
    io::write_json(&ctx.path("evaluation.json"), &summary)?;
    ctx.echo_config()?;
    let failed: Vec<String> = result
        .cells
        .iter()
        .filter_map(|c| c.result.as_ref().err().map(|e| format!("{}: {e}", io::roc_file_name(c))))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!("{} evaluation cells failed; first: {}", failed.len(), failed[0])));
    }
    Ok(())
}

fn weighted_quantile_edges(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        v[lo] + (h - lo as f64) * (v[h.ceil() as usize] - v[lo])
    };
    vec![q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]
}

fn cmd_export_plots(ctx: &Context, a: &DataArgs) -> Result<(), CliError> {
    let data = load(ctx, &a.data)?;
    if data.records.is_empty() {
        return Err(CliError::Runtime("no complete rows to plot".into()));
    }
    let f = fit_data(ctx, &data.records, a.no_recall)?;
    let t_max = data.records.iter().filter_map(|r| r.ttp).max().unwrap_or(1);

    // Survival by stratum: fitted at the stratum covariate mean, and weighted empirical.
    let mut rows = Vec::new();
    for planned in [true, false] {
        let group: Vec<&SubjectRecord> = data.records.iter().filter(|r| r.planned == planned).collect();
        if group.is_empty() {
            continue;
        }
        let total: f64 = group.iter().map(|r| r.weight).sum();
        let r = data.covariate_names.len();
        let z_bar: Vec<f64> = (0..r)
            .map(|j| group.iter().map(|s| s.weight * s.covariates[j]).sum::<f64>() / total)
            .collect();
        let name = if planned { "planned" } else { "unplanned" };
        for t in 0..=t_max {
            let fitted = marginal_survival(t, &z_bar, planned, &f.theta_hat).map_err(|e| CliError::Runtime(e.to_string()))?;
            let empirical = group.iter().filter(|s| s.ttp.unwrap_or(0) > t).map(|s| s.weight).sum::<f64>() / total;
            rows.push(vec![name.to_string(), t.to_string(), fitted.to_string(), empirical.to_string()]);
        }
    }
    io::write_table(&ctx.path("survival_curves.csv"), &["stratum", "t", "fitted", "empirical"], rows)?;

    // Certainty level shares by gap quartile group, with the fitted probability at the group midpoint.
    let answered: Vec<&SubjectRecord> = data.records.iter().filter(|r| r.certainty.is_some()).collect();
    let mut rows = Vec::new();
    if !answered.is_empty() {
        let gaps: Vec<f64> = answered.iter().map(|r| r.gap().unwrap_or(0.0)).collect();
        let edges = weighted_quantile_edges(&gaps);
        let levels = ctx.config.model.levels;
        let z0 = vec![0.0; data.covariate_names.len()];
        for g in 0..4 {
            let (lo, hi) = (edges[g], edges[g + 1]);
            let members: Vec<&&SubjectRecord> = answered
                .iter()
                .zip(&gaps)
                .filter(|(_, &x)| x >= lo && (x < hi || (g == 3 && x <= hi)))
                .map(|(r, _)| r)
                .collect();
            let total: f64 = members.iter().map(|r| r.weight).sum();
            let fitted = certainty_probs(0.5 * (lo + hi), &z0, &f.theta_hat.eta).ok();
            for k in 1..=levels {
                let w: f64 = members.iter().filter(|r| r.certainty == Some(k as u8)).map(|r| r.weight).sum();
                let count = members.iter().filter(|r| r.certainty == Some(k as u8)).count();
                rows.push(vec![
                    (g + 1).to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    k.to_string(),
                    count.to_string(),
                    if total > 0.0 { (w / total).to_string() } else { String::new() },
                    fitted
                        .as_ref()
                        .filter(|_| f.options.use_recall_model)
                        .map(|p| p.probs[k - 1].to_string())
                        .unwrap_or_default(),
                ]);
            }
        }
    }
    io::write_table(
        &ctx.path("certainty_by_gap.csv"),
        &["gap_group", "gap_low", "gap_high", "level", "count", "proportion", "fitted_at_midpoint"],
        rows,
    )?;
    ctx.echo_config()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let verbose = cli.verbose;
    match &cli.command {
        Command::Fit(a) => cmd_fit(&Context::new(&a.common, verbose)?, a),
        Command::Simulate(a) => cmd_simulate(Context::new(&a.common, verbose)?, a),
        Command::McStudy(a) => cmd_mc_study(Context::new(&a.common, verbose)?, a),
        Command::Predict(a) => cmd_predict(Context::new(&a.common, verbose)?, a),
        Command::Evaluate(a) => cmd_evaluate(Context::new(&a.common, verbose)?, a),
        Command::ExportPlots(a) => cmd_export_plots(&Context::new(&a.common, verbose)?, a),
    }
}
