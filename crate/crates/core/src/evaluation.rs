//! Holdout validation: mask the TTP of part of the complete responders, refit,
//! predict `P(T > t0)`, and score the predictions by ROC/AUC.

use crate::estimation::{fit, EstimationError, FitControls, FitResult};
use crate::likelihood::LikelihoodOptions;
use crate::model::SubjectRecord;
use crate::prediction::{
    classify_intention, predict_survival_with, ParameterDraws, PredictionError, DEFAULT_DRAWS,
};
use crate::rng::{self, Purpose};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("{stratum} stratum has {count} members; at least 2 are needed")]
    SmallStratum { stratum: &'static str, count: usize },
    #[error("duplicate subject id {0:?}")]
    DuplicateId(String),
    #[error("scores and truths differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("score {value} at position {index} is not a probability")]
    InvalidScore { index: usize, value: f64 },
    #[error("all truths fall in one class ({positives} positives, {negatives} negatives)")]
    OneClass { positives: usize, negatives: usize },
    #[error("record {0} has no TTP")]
    IncompleteRecord(usize),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SubjectRecord>,
    pub test: Vec<SubjectRecord>,
}

fn stratum_name(planned: bool) -> &'static str {
    if planned {
        "planned"
    } else {
        "unplanned"
    }
}

/// Sorts by id and rejects duplicates, so downstream results do not depend on
/// input order.
pub fn canonical_order(dataset: &[SubjectRecord]) -> Result<Vec<SubjectRecord>, EvaluationError> {
    let mut out = dataset.to_vec();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = out.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(EvaluationError::DuplicateId(w[0].id.clone()));
    }
    Ok(out)
}

/// Stratified random split: within each intention stratum the subjects with
/// the smallest seeded hash of their id go to the test set.
pub fn holdout_split(dataset: &[SubjectRecord], fraction: f64, seed: u64) -> Result<Split, EvaluationError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvaluationError::InvalidFraction(fraction));
    }
    let data = canonical_order(dataset)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for planned in [true, false] {
        let mut members: Vec<(u64, &SubjectRecord)> = data
            .iter()
            .filter(|r| r.planned == planned)
            .map(|r| (rng::mix(&[seed, Purpose::Split as u64, rng::hash_id(&r.id)]), r))
            .collect();
        if members.len() < 2 {
            return Err(EvaluationError::SmallStratum {
                stratum: stratum_name(planned),
                count: members.len(),
            });
        }
        members.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        test.extend(members[..k].iter().map(|(_, r)| (*r).clone()));
        train.extend(members[k..].iter().map(|(_, r)| (*r).clone()));
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Split { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub t0: u32,
    /// Ordered by increasing threshold.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub auc_ci: (f64, f64),
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_inputs(scores: &[f64], truths: &[bool]) -> Result<(usize, usize), EvaluationError> {
    if scores.len() != truths.len() {
        return Err(EvaluationError::LengthMismatch(scores.len(), truths.len()));
    }
    if let Some(index) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(EvaluationError::InvalidScore {
            index,
            value: scores[index],
        });
    }
    let positives = truths.iter().filter(|t| **t).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvaluationError::OneClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Area under the empirical ROC curve by the trapezoid rule, points given in
/// increasing threshold order.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| {
            let (a, b) = (w[1], w[0]);
            let dx = (1.0 - b.specificity) - (1.0 - a.specificity);
            0.5 * dx * (a.sensitivity + b.sensitivity)
        })
        .sum()
}

/// Pairwise Mann-Whitney estimate `P(S_pos > S_neg) + P(S_pos = S_neg) / 2`.
pub fn mann_whitney_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for (&sp, _) in scores.iter().zip(truths).filter(|(_, t)| **t) {
        for (&sn, _) in scores.iter().zip(truths).filter(|(_, t)| !**t) {
            pairs += 1;
            if sp > sn {
                num += 1.0;
            } else if sp == sn {
                num += 0.5;
            }
        }
    }
    num / pairs as f64
}

/// Rank-sum form of the same statistic, `O(n log n)`.
fn rank_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical ROC of `score > c` for `truth`, swept over every distinct score
/// plus 0, 1 and a threshold below all scores, with a stratified percentile
/// bootstrap interval for the AUC.
pub fn roc_curve(
    scores: &[f64],
    truths: &[bool],
    t0: u32,
    resamples: usize,
    seed: u64,
) -> Result<RocResult, EvaluationError> {
    let (n_pos, n_neg) = check_inputs(scores, truths)?;
    let mut thresholds: Vec<f64> = scores.iter().copied().chain([0.0, 1.0]).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    let pos: Vec<f64> = scores.iter().zip(truths).filter(|(_, t)| **t).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(truths).filter(|(_, t)| !**t).map(|(s, _)| *s).collect();
    let mut pos_sorted = pos.clone();
    pos_sorted.sort_by(f64::total_cmp);
    let mut neg_sorted = neg.clone();
    neg_sorted.sort_by(f64::total_cmp);
    // count of entries <= c in a sorted slice
    let at_most = |v: &[f64], c: f64| v.partition_point(|x| *x <= c);
    let points: Vec<RocPoint> = thresholds
        .iter()
        .map(|&c| RocPoint {
            threshold: c,
            sensitivity: (n_pos - at_most(&pos_sorted, c)) as f64 / n_pos as f64,
            specificity: at_most(&neg_sorted, c) as f64 / n_neg as f64,
        })
        .collect();
    let auc = trapezoid_auc(&points);

    let auc_ci = if resamples == 0 {
        (auc, auc)
    } else {
        let mut boot: Vec<f64> = (0..resamples)
            .into_par_iter()
            .map(|b| {
                let mut rng = rng::stream(seed, t0 as u64, Purpose::Bootstrap, b as u64);
                let p: Vec<f64> = (0..n_pos).map(|_| pos[rng.random_range(0..n_pos)]).collect();
                let n: Vec<f64> = (0..n_neg).map(|_| neg[rng.random_range(0..n_neg)]).collect();
                rank_auc(&p, &n)
            })
            .collect();
        boot.sort_by(f64::total_cmp);
        (quantile(&boot, 0.025), quantile(&boot, 0.975))
    };
    Ok(RocResult {
        t0,
        points,
        auc,
        auc_ci,
        n_pos,
        n_neg,
    })
}

/// One-sided sign test p-value `P(X >= wins)` for `X ~ Bin(wins + losses, 1/2)`; ties are dropped.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    b.sf(wins as u64 - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Intention classified from covariates before predicting.
    TwoStage,
    /// Reported intention used directly.
    IntentionGiven,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TwoStage => "two_stage",
            Variant::IntentionGiven => "intention_given",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSettings {
    pub fraction: f64,
    pub seed: u64,
    pub draws: usize,
    pub resamples: usize,
    pub threshold: f64,
    pub cutoff: usize,
    pub levels: usize,
    pub controls: FitControls,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            fraction: 1.0 / 3.0,
            seed: 0,
            draws: DEFAULT_DRAWS,
            resamples: 2000,
            threshold: 0.5,
            cutoff: 12,
            levels: 4,
            controls: FitControls::default(),
        }
    }
}

pub const DEFAULT_T0: [u32; 3] = [6, 12, 20];

#[derive(Debug)]
pub struct EvaluationCell {
    pub t0: u32,
    pub variant: Variant,
    pub recall: bool,
    pub result: Result<RocResult, EvaluationError>,
}

#[derive(Debug)]
pub struct PipelineResult {
    pub cells: Vec<EvaluationCell>,
    /// `Err` when that estimator could not be fitted; its cells are then absent.
    pub fits: Vec<(bool, Result<FitResult, EvaluationError>)>,
    pub n_train: usize,
    pub n_test: usize,
}

impl PipelineResult {
    pub fn cell(&self, t0: u32, variant: Variant, recall: bool) -> Option<&EvaluationCell> {
        self.cells.iter().find(|c| c.t0 == t0 && c.variant == variant && c.recall == recall)
    }
}

fn predict_scores(
    test: &[SubjectRecord],
    fit: &FitResult,
    t0_grid: &[u32],
    settings: &EvaluationSettings,
    variant: Variant,
    draws: &ParameterDraws,
) -> Result<Vec<Vec<f64>>, EvaluationError> {
    test.iter()
        .map(|r| {
            let planned = match variant {
                Variant::IntentionGiven => r.planned,
                Variant::TwoStage => classify_intention(&r.covariates, fit, settings.threshold)?.planned,
            };
            Ok(predict_survival_with(&r.id, &r.covariates, planned, 0, t0_grid, draws)?.point)
        })
        .collect()
}

/// Split, fit both likelihoods on the training part, predict `P(T > t0)` for
/// the masked part, and compute the ROC for every `(t0, variant, estimator)`.
pub fn evaluate_pipeline(
    dataset: &[SubjectRecord],
    t0_list: &[u32],
    settings: &EvaluationSettings,
) -> Result<PipelineResult, EvaluationError> {
    if let Some(i) = dataset.iter().position(|r| r.ttp.is_none()) {
        return Err(EvaluationError::IncompleteRecord(i));
    }
    let split = holdout_split(dataset, settings.fraction, settings.seed)?;
    let mut grid: Vec<u32> = t0_list.to_vec();
    grid.sort_unstable();
    grid.dedup();

    let mut cells = Vec::new();
    let mut fits = Vec::new();
    for recall in [true, false] {
        let opts = if recall {
            LikelihoodOptions::recall(settings.cutoff, settings.levels)
        } else {
            LikelihoodOptions::no_recall(settings.cutoff, settings.levels)
        };
        let fitted = match fit(&split.train, &opts, None, &settings.controls) {
            Ok(f) => f,
            Err(e) => {
                fits.push((recall, Err(e.into())));
                continue;
            }
        };
        let draws = match ParameterDraws::new(&fitted, settings.draws, settings.seed) {
            Ok(d) => d,
            Err(e) => {
                fits.push((recall, Err(e.into())));
                continue;
            }
        };
        for variant in [Variant::TwoStage, Variant::IntentionGiven] {
            let scores = predict_scores(&split.test, &fitted, &grid, settings, variant, &draws);
            for &t0 in t0_list {
                let k = grid.binary_search(&t0).expect("t0 in grid");
                let result = match &scores {
                    Ok(s) => {
                        let col: Vec<f64> = s.iter().map(|v| v[k]).collect();
                        let truths: Vec<bool> = split.test.iter().map(|r| r.ttp.unwrap_or(0) > t0).collect();
                        roc_curve(&col, &truths, t0, settings.resamples, settings.seed)
                    }
                    Err(e) => Err(EvaluationError::Prediction(PredictionError::InvalidGrid(e.to_string()))),
                };
                cells.push(EvaluationCell {
                    t0,
                    variant,
                    recall,
                    result,
                });
            }
        }
        fits.push((recall, Ok(fitted)));
    }
    Ok(PipelineResult {
        cells,
        fits,
        n_train: split.train.len(),
        n_test: split.test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<SubjectRecord> {
        (0..n)
            .map(|i| SubjectRecord {
                id: format!("s{i:04}"),
                ttp: Some(1 + (i % 9) as u32),
                obs_time: 60.0,
                certainty: Some(1),
                planned: i % 4 != 0,
                covariates: vec![],
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let data = records(900);
        let s = holdout_split(&data, 1.0 / 3.0, 5).unwrap();
        assert_eq!(s.test.len(), 300);
        assert_eq!(s.train.len() + s.test.len(), 900);
        let mut ids: Vec<&str> = s.train.iter().chain(&s.test).map(|r| r.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 900);
        assert!(s.test.iter().any(|r| r.planned) && s.test.iter().any(|r| !r.planned));
        assert_eq!(s, holdout_split(&data, 1.0 / 3.0, 5).unwrap());
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(s, holdout_split(&rev, 1.0 / 3.0, 5).unwrap());
        assert_ne!(s, holdout_split(&data, 1.0 / 3.0, 6).unwrap());
    }

    #[test]
    fn split_errors() {
        let data = records(10);
        assert!(matches!(holdout_split(&data, 1.0, 0), Err(EvaluationError::InvalidFraction(_))));
        let one_unplanned: Vec<_> = data.iter().filter(|r| r.planned || r.id == "s0000").cloned().collect();
        assert!(matches!(
            holdout_split(&one_unplanned, 0.3, 0),
            Err(EvaluationError::SmallStratum { stratum: "unplanned", count: 1 })
        ));
    }

    #[test]
    fn auc_edge_cases() {
        let truths = [true, false, true, false, true];
        let r = roc_curve(&[0.3; 5], &truths, 6, 200, 1).unwrap();
        assert_eq!(r.auc, 0.5);
        let perfect: Vec<f64> = truths.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let r = roc_curve(&perfect, &truths, 6, 200, 1).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.auc_ci, (1.0, 1.0));
        let first = r.points.first().unwrap();
        let last = r.points.last().unwrap();
        assert_eq!((first.sensitivity, first.specificity), (1.0, 0.0));
        assert_eq!((last.sensitivity, last.specificity), (0.0, 1.0));
        assert!(matches!(roc_curve(&[0.5, 0.2], &[true, true], 6, 0, 0), Err(EvaluationError::OneClass { .. })));
        assert!(matches!(roc_curve(&[1.5, 0.2], &[true, false], 6, 0, 0), Err(EvaluationError::InvalidScore { index: 0, .. })));
    }

    #[test]
    fn rank_form_matches_pairwise() {
        let scores = [0.1, 0.4, 0.4, 0.35, 0.8, 0.4, 0.05, 0.9];
        let truths = [false, true, false, true, true, true, false, false];
        let pos: Vec<f64> = scores.iter().zip(&truths).filter(|x| *x.1).map(|x| *x.0).collect();
        let neg: Vec<f64> = scores.iter().zip(&truths).filter(|x| !*x.1).map(|x| *x.0).collect();
        let mw = mann_whitney_auc(&scores, &truths);
        assert!((rank_auc(&pos, &neg) - mw).abs() < 1e-15);
        assert!((roc_curve(&scores, &truths, 1, 0, 0).unwrap().auc - mw).abs() < 1e-15);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test(15, 5) - 0.020_694_732_666_015_625).abs() < 1e-12);
        assert_eq!(sign_test(0, 0), 1.0);
        assert!((sign_test(10, 10) - 0.588_098_526_000_976_6).abs() < 1e-12);
    }
}
