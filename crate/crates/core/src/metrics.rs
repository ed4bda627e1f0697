//! Data splits and test-set metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PersonRecord;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
}

/// Split fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    /// Fraction of all people held out as the global test set.
    pub test_fraction: f64,
    /// Fraction of the central analyzer's non-test people used for
    /// validation (early stopping).
    pub central_validation_fraction: f64,
    /// Fraction of each silo's records held out for silo-internal validation.
    pub silo_validation_fraction: f64,
    /// When set, silo-internal validation rows are also used for training.
    pub final_fit: bool,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            test_fraction: 0.2,
            central_validation_fraction: 0.2,
            silo_validation_fraction: 0.2,
            final_fit: true,
            seed: 0,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<(), MetricError> {
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("central_validation_fraction", self.central_validation_fraction),
            ("silo_validation_fraction", self.silo_validation_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(MetricError::InvalidPlan(format!("{name} must be in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Per-record split assignment, aligned with the cohort's record order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub assignment: Vec<Split>,
}

impl Splits {
    pub fn count(&self, s: Split) -> usize {
        self.assignment.iter().filter(|&&a| a == s).count()
    }

    pub fn indices(&self, s: Split) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == s).collect()
    }

    pub fn select<'a>(&self, records: &'a [PersonRecord], s: Split) -> Vec<&'a PersonRecord> {
        self.indices(s).into_iter().map(|i| &records[i]).collect()
    }
}

const STREAM_SPLIT: u64 = 0x5350_4c54;

/// Draws the global test set from everyone, then the central validation set
/// from the central region's remaining people. Everything else is training.
pub fn make_splits(records: &[PersonRecord], central_region: u32, plan: &SplitPlan) -> Result<Splits, MetricError> {
    plan.validate()?;
    let n = records.len();
    let n_test = (plan.test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(MetricError::InvalidPlan(format!(
            "test_fraction {} of {n} people leaves an empty split",
            plan.test_fraction
        )));
    }
    let mut r = rng::rng(rng::derive(plan.seed, STREAM_SPLIT));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut assignment = vec![Split::Train; n];
    for &i in &order[..n_test] {
        assignment[i] = Split::Test;
    }
    let central: Vec<usize> = order[n_test..]
        .iter()
        .copied()
        .filter(|&i| records[i].region == central_region)
        .collect();
    let n_val = (plan.central_validation_fraction * central.len() as f64).round() as usize;
    if n_val == 0 || n_val == central.len() {
        return Err(MetricError::InvalidPlan(format!(
            "central_validation_fraction {} of {} central people leaves an empty split",
            plan.central_validation_fraction,
            central.len()
        )));
    }
    for &i in &central[..n_val] {
        assignment[i] = Split::Validation;
    }
    Ok(Splits { assignment })
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Undefined("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUCROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U from midranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: mean over positives of the precision at each
/// positive's rank in descending-score order. Within a score tie negatives
/// come first.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined("AUCPR needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(labels[a].cmp(&labels[b])));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Screening operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// `None` when nothing is predicted positive.
    pub ppv: Option<f64>,
    /// `None` when nothing is predicted negative.
    pub npv: Option<f64>,
    pub threshold: f64,
}

/// Nearest-rank `q`-quantile: the `ceil(q·n)`-th smallest score.
pub fn nearest_rank_quantile(scores: &[f64], q: f64) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Undefined("quantile of no scores".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(MetricError::Undefined(format!("quantile level {q} outside (0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // the small slack keeps q·n that is integral in exact arithmetic from
    // rounding up (0.95·20 is 19.000000000000004 in binary)
    let k = ((q * sorted.len() as f64 - 1e-9).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

/// PPV and NPV with everything scoring at or above the `q`-quantile
/// predicted positive.
pub fn ppv_npv_at_quantile(scores: &[f64], labels: &[bool], q: f64) -> Result<OperatingPoint, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(MetricError::Undefined("PPV/NPV need both classes".into()));
    }
    let threshold = nearest_rank_quantile(scores, q)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(OperatingPoint {
        ppv: ratio(tp, fp),
        npv: ratio(tn, fn_),
        threshold,
    })
}

/// Four metrics for one method and one disease on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub disease: String,
    pub aucroc: f64,
    pub aucpr: f64,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub threshold: f64,
    pub n_test: usize,
}

pub const SCREENING_QUANTILE: f64 = 0.95;

impl MetricsReport {
    pub fn from_scores(method: &str, disease: &str, scores: &[f64], labels: &[bool]) -> Result<Self, MetricError> {
        let op = ppv_npv_at_quantile(scores, labels, SCREENING_QUANTILE)?;
        Ok(MetricsReport {
            method: method.to_owned(),
            disease: disease.to_owned(),
            aucroc: auc_roc(scores, labels)?,
            aucpr: auc_pr(scores, labels)?,
            ppv: op.ppv,
            npv: op.npv,
            threshold: op.threshold,
            n_test: scores.len(),
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.3}"))
}

/// Text table with one block per disease and one row per method, in the
/// order the reports are given.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut diseases: Vec<&str> = Vec::new();
    for r in reports {
        if !diseases.contains(&r.disease.as_str()) {
            diseases.push(&r.disease);
        }
    }
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    for d in diseases {
        out.push_str(&format!("{d}\n"));
        out.push_str(&format!(
            "  {:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "method", "AUCROC", "AUCPR", "PPV", "NPV"
        ));
        for r in reports.iter().filter(|r| r.disease == d) {
            out.push_str(&format!(
                "  {:<width$}  {:>7.3}  {:>7.3}  {:>7}  {:>7}\n",
                r.method,
                r.aucroc,
                r.aucpr,
                cell(r.ppv),
                cell(r.npv)
            ));
        }
    }
    out
}
