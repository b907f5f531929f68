//! Dataset files, run configuration and CSV/JSON writers.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! number read back parses to the identical `f64`.

use crate::estimation::{wald_intervals, CovarianceMethod, FitControls, FitResult};
use crate::evaluation::{EvaluationCell, EvaluationSettings, DEFAULT_T0};
use crate::likelihood::LikelihoodOptions;
use crate::model::{SubjectRecord, ModelError};
use crate::optimize::LbfgsSettings;
use crate::prediction::{PredictionCurve, PredictionTarget, DEFAULT_DRAWS};
use crate::simulation::{McStudy, McSummary};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}: file has no data rows")]
    EmptyFile(PathBuf),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("duplicate column {0:?}")]
    DuplicateColumn(String),
    #[error("row {row}, column {column:?}: cannot parse {value:?} as {expected}")]
    Parse {
        row: usize,
        column: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error(transparent)]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateRole {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateDecl {
    pub name: String,
    pub role: CovariateRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cutoff: usize,
    pub levels: usize,
    pub use_recall_model: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = LikelihoodOptions::default();
        Self {
            cutoff: d.baseline_cutoff,
            levels: d.certainty_levels,
            use_recall_model: d.use_recall_model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub memory: usize,
    pub gtol: f64,
    pub xtol: f64,
    pub restarts: usize,
    pub sandwich: bool,
    pub pseudo_inverse: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let l = LbfgsSettings::default();
        Self {
            max_iter: l.max_iter,
            memory: l.memory,
            gtol: l.gtol,
            xtol: l.xtol,
            restarts: 0,
            sandwich: false,
            pseudo_inverse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub draws: usize,
    pub t_condition: u32,
    pub u_grid: Vec<u32>,
    pub threshold: f64,
    /// How to predict targets whose intention is not reported.
    pub unknown_intention: UnknownIntention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownIntention {
    /// Classify by the fitted logistic, then predict within the chosen stratum.
    #[default]
    Classify,
    /// Average the two stratum curves with the planning probability.
    Mixture,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            draws: DEFAULT_DRAWS,
            t_condition: 0,
            u_grid: (1..=24).collect(),
            threshold: 0.5,
            unknown_intention: UnknownIntention::Classify,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub fraction: f64,
    pub t0: Vec<u32>,
    pub resamples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            fraction: 1.0 / 3.0,
            t0: DEFAULT_T0.to_vec(),
            resamples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Declared covariate columns. When absent, every non-standard column is a covariate.
    pub covariates: Option<Vec<CovariateDecl>>,
    pub output: OutputConfig,
    pub prediction: PredictionConfig,
    pub evaluation: EvaluationConfig,
    /// Custom simulation scenario (`--scenario custom`).
    pub scenario: Option<crate::simulation::ScenarioConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|source| IoError::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let bad = |m: &str| Err(IoError::Config(m.to_string()));
        if self.model.cutoff < 1 {
            return bad("model.cutoff must be at least 1");
        }
        if self.model.levels < 2 || self.model.levels > u8::MAX as usize {
            return bad("model.levels must lie in 2..=255");
        }
        if !(self.optimizer.gtol > 0.0) || !(self.optimizer.xtol >= 0.0) || self.optimizer.max_iter == 0 || self.optimizer.memory == 0 {
            return bad("optimizer tolerances and limits must be positive");
        }
        if self.prediction.draws < 2 {
            return bad("prediction.draws must be at least 2");
        }
        if !(self.evaluation.fraction > 0.0 && self.evaluation.fraction < 1.0) {
            return bad("evaluation.fraction must lie in (0, 1)");
        }
        if let Some(decl) = &self.covariates {
            let mut seen = HashSet::new();
            for d in decl {
                if STANDARD_COLUMNS.contains(&d.name.as_str()) || !seen.insert(d.name.as_str()) {
                    return Err(IoError::Config(format!("covariate name {:?} is reserved or repeated", d.name)));
                }
            }
        }
        Ok(())
    }

    pub fn likelihood_options(&self, no_recall: bool) -> LikelihoodOptions {
        LikelihoodOptions {
            use_recall_model: self.model.use_recall_model && !no_recall,
            baseline_cutoff: self.model.cutoff,
            certainty_levels: self.model.levels,
            explicit_case_sum: false,
        }
    }

    pub fn fit_controls(&self) -> FitControls {
        FitControls {
            lbfgs: LbfgsSettings {
                max_iter: self.optimizer.max_iter,
                memory: self.optimizer.memory,
                gtol: self.optimizer.gtol,
                xtol: self.optimizer.xtol,
            },
            restarts: self.optimizer.restarts,
            restart_seed: self.seed.unwrap_or(0),
            covariance: if self.optimizer.sandwich {
                CovarianceMethod::Sandwich
            } else {
                CovarianceMethod::ObservedInformation
            },
            allow_pseudo_inverse: self.optimizer.pseudo_inverse,
        }
    }

    pub fn evaluation_settings(&self, seed: u64) -> EvaluationSettings {
        EvaluationSettings {
            fraction: self.evaluation.fraction,
            seed,
            draws: self.prediction.draws,
            resamples: self.evaluation.resamples,
            threshold: self.prediction.threshold,
            cutoff: self.model.cutoff,
            levels: self.model.levels,
            controls: self.fit_controls(),
        }
    }

    pub fn to_toml(&self) -> Result<String, IoError> {
        Ok(toml::to_string_pretty(self)?)
    }
}

pub const STANDARD_COLUMNS: [&str; 6] = ["id", "ttp", "obs_time", "certainty", "planned", "weight"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRow {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestionReport {
    pub rows_read: usize,
    pub complete: usize,
    /// Rows with empty TTP, routed to prediction.
    pub prediction_targets: Vec<String>,
    /// Complete rows without a certainty answer (delta = 0).
    pub missing_certainty: Vec<String>,
    pub dropped: Vec<DroppedRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    /// Rows with a reported TTP.
    pub records: Vec<SubjectRecord>,
    /// Rows without TTP.
    pub targets: Vec<PredictionTarget>,
    pub covariate_names: Vec<String>,
    pub report: IngestionReport,
}

fn delimiter_for(path: &Path, first_line: &str) -> u8 {
    let tsv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv") || e.eq_ignore_ascii_case("tab"));
    if tsv || (first_line.contains('\t') && !first_line.contains(',')) {
        b'\t'
    } else {
        b','
    }
}

fn parse_cell<T: std::str::FromStr>(row: usize, column: &str, value: &str, expected: &'static str) -> Result<T, IoError> {
    value.trim().parse().map_err(|_| IoError::Parse {
        row,
        column: column.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_flag(row: usize, column: &str, value: &str) -> Result<bool, IoError> {
    match value.trim() {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        _ => Err(IoError::Parse {
            row,
            column: column.to_string(),
            value: value.to_string(),
            expected: "0/1",
        }),
    }
}

/// Reads a delimited dataset. Unparseable cells are hard errors; rows that
/// parse but violate the record invariants are dropped and listed in the report.
pub fn load_dataset(path: &Path, config: &RunConfig) -> Result<LoadedDataset, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let first = text.lines().next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path, first))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(IoError::EmptyFile(path.to_path_buf()));
    }
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(IoError::DuplicateColumn(h.clone()));
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| IoError::MissingColumn(name.to_string()));
    let idx: Vec<usize> = STANDARD_COLUMNS.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let covariate_names: Vec<String> = match &config.covariates {
        Some(decl) => {
            if let Some(extra) = headers
                .iter()
                .find(|h| !STANDARD_COLUMNS.contains(&h.as_str()) && !decl.iter().any(|d| &d.name == *h))
            {
                return Err(IoError::UnknownColumn(extra.clone()));
            }
            decl.iter().map(|d| d.name.clone()).collect()
        }
        None => headers.iter().filter(|h| !STANDARD_COLUMNS.contains(&h.as_str())).cloned().collect(),
    };
    let cov_idx: Vec<usize> = covariate_names.iter().map(|c| col(c)).collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    let mut targets = Vec::new();
    let mut report = IngestionReport::default();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(csv_err(path))?;
        report.rows_read += 1;
        let cell = |k: usize| row.get(k).unwrap_or("");
        let id = cell(idx[0]).to_string();
        let ttp_s = cell(idx[1]);
        let ttp: Option<u32> = if ttp_s.is_empty() {
            None
        } else {
            Some(parse_cell(row_no, "ttp", ttp_s, "non-negative integer")?)
        };
        let obs_s = cell(idx[2]);
        let obs_time: f64 = if obs_s.is_empty() && ttp.is_none() {
            f64::NAN
        } else {
            parse_cell(row_no, "obs_time", obs_s, "number")?
        };
        let cert_s = cell(idx[3]);
        let certainty: Option<u8> = if cert_s.is_empty() {
            None
        } else {
            Some(parse_cell(row_no, "certainty", cert_s, "integer level")?)
        };
        let planned_s = cell(idx[4]);
        let planned = if planned_s.is_empty() {
            None
        } else {
            Some(parse_flag(row_no, "planned", planned_s)?)
        };
        let weight: f64 = parse_cell(row_no, "weight", cell(idx[5]), "number")?;
        let mut covariates = Vec::with_capacity(cov_idx.len());
        for (name, &k) in covariate_names.iter().zip(&cov_idx) {
            covariates.push(parse_cell::<f64>(row_no, name, cell(k), "number")?);
        }

        let drop = |id: &str, reason: String| DroppedRow {
            row: row_no,
            id: id.to_string(),
            reason,
        };
        if id.is_empty() {
            report.dropped.push(drop(&id, "empty id".into()));
            continue;
        }
        match ttp {
            None => {
                if covariates.iter().any(|v| !v.is_finite()) {
                    report.dropped.push(drop(&id, "covariates must be finite".into()));
                    continue;
                }
                if !(weight > 0.0 && weight.is_finite()) {
                    report.dropped.push(drop(&id, format!("weight must be positive, got {weight}")));
                    continue;
                }
                report.prediction_targets.push(id.clone());
                targets.push(PredictionTarget {
                    id,
                    covariates,
                    planned,
                });
            }
            Some(t) => {
                let Some(planned) = planned else {
                    report.dropped.push(drop(&id, "planned is empty but ttp is reported".into()));
                    continue;
                };
                let rec = SubjectRecord {
                    id,
                    ttp: Some(t),
                    obs_time,
                    certainty,
                    planned,
                    covariates,
                    weight,
                };
                match rec.validate(config.model.levels) {
                    Ok(()) => {
                        if certainty.is_none() {
                            report.missing_certainty.push(rec.id.clone());
                        }
                        records.push(rec);
                    }
                    Err(ModelError::InvalidRecord { reason, .. }) => report.dropped.push(drop(&rec.id, reason)),
                    Err(e) => report.dropped.push(drop(&rec.id, e.to_string())),
                }
            }
        }
    }
    if report.rows_read == 0 {
        return Err(IoError::EmptyFile(path.to_path_buf()));
    }
    report.complete = records.len();
    for d in &report.dropped {
        log::warn!("dropped row {} ({}): {}", d.row, d.id, d.reason);
    }
    Ok(LoadedDataset {
        records,
        targets,
        covariate_names,
        report,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    csv::Writer::from_path(path).map_err(csv_err(path))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), IoError> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    fs::write(path, text).map_err(file_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_dataset(path: &Path, records: &[SubjectRecord], covariate_names: &[String]) -> Result<(), IoError> {
    let mut header: Vec<&str> = STANDARD_COLUMNS.to_vec();
    header.extend(covariate_names.iter().map(String::as_str));
    write_rows(
        path,
        &header,
        records.iter().map(|r| {
            let mut row = vec![
                r.id.clone(),
                opt(r.ttp),
                r.obs_time.to_string(),
                opt(r.certainty),
                u8::from(r.planned).to_string(),
                r.weight.to_string(),
            ];
            row.extend(r.covariates.iter().map(f64::to_string));
            row
        }),
    )
}

/// Parameter table: estimate, standard error and Wald interval per coordinate.
pub fn write_fit_table(path: &Path, fit: &FitResult, level: f64) -> Result<(), IoError> {
    let names = fit.layout().names();
    let natural = fit.theta_hat.to_natural();
    let ci = wald_intervals(fit, level).ok();
    write_rows(
        path,
        &["parameter", "estimate", "se", "ci_lower", "ci_upper", "estimated"],
        names.iter().enumerate().map(|(i, n)| {
            let (lo, hi) = match &ci {
                Some(c) => (c[i].0.to_string(), c[i].1.to_string()),
                None => (String::new(), String::new()),
            };
            let se = fit.std_errors[i];
            vec![
                n.clone(),
                natural[i].to_string(),
                if se.is_nan() { String::new() } else { se.to_string() },
                lo,
                hi,
                fit.estimated[i].to_string(),
            ]
        }),
    )
}

pub fn write_mc_summary(path: &Path, study: &McStudy) -> Result<(), IoError> {
    let rows = |s: &McSummary| -> Vec<Vec<String>> {
        s.rows
            .iter()
            .map(|r| {
                vec![
                    r.parameter.clone(),
                    s.estimator.name().to_string(),
                    r.bias.to_string(),
                    opt(r.stdev),
                    r.mse.to_string(),
                    r.coverage.to_string(),
                ]
            })
            .collect()
    };
    write_rows(
        path,
        &["parameter", "estimator", "bias", "stdev", "mse", "cp"],
        rows(&study.recall).into_iter().chain(rows(&study.no_recall)),
    )
}

pub fn write_curves(path: &Path, curves: &[PredictionCurve]) -> Result<(), IoError> {
    write_rows(
        path,
        &["subject_id", "u", "median", "mean", "mc_se"],
        curves.iter().flat_map(|c| {
            c.u_grid.iter().enumerate().map(move |(k, u)| {
                vec![
                    c.subject_id.clone(),
                    u.to_string(),
                    c.point[k].to_string(),
                    c.mean[k].to_string(),
                    c.mc_se[k].to_string(),
                ]
            })
        }),
    )
}

pub fn roc_file_name(cell: &EvaluationCell) -> String {
    format!(
        "roc_t{}_{}_{}.csv",
        cell.t0,
        cell.variant.name(),
        if cell.recall { "recall" } else { "no_recall" }
    )
}

/// One ROC file per cell plus an `auc.csv` table (errors recorded in its last column).
pub fn write_evaluation(dir: &Path, cells: &[EvaluationCell]) -> Result<(), IoError> {
    let mut table = Vec::new();
    for c in cells {
        let est = if c.recall { "recall" } else { "no_recall" };
        match &c.result {
            Ok(r) => {
                write_rows(
                    &dir.join(roc_file_name(c)),
                    &["threshold", "sensitivity", "specificity"],
                    r.points
                        .iter()
                        .map(|p| vec![p.threshold.to_string(), p.sensitivity.to_string(), p.specificity.to_string()]),
                )?;
                table.push(vec![
                    c.t0.to_string(),
                    c.variant.name().into(),
                    est.into(),
                    r.auc.to_string(),
                    r.auc_ci.0.to_string(),
                    r.auc_ci.1.to_string(),
                    r.n_pos.to_string(),
                    r.n_neg.to_string(),
                    String::new(),
                ]);
            }
            Err(e) => table.push(vec![
                c.t0.to_string(),
                c.variant.name().into(),
                est.into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ]),
        }
    }
    write_rows(
        &dir.join("auc.csv"),
        &["t0", "variant", "estimator", "auc", "ci_lower", "ci_upper", "n_pos", "n_neg", "error"],
        table,
    )
}

/// Writes CSV rows with an arbitrary header; used for plot-ready exports.
pub fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), IoError> {
    write_rows(path, header, rows)
}
