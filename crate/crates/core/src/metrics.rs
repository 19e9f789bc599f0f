//! Confusion-cell classification and the five confidence/correctness metrics.
//!
//! Every evaluated record lands in one of four cells — confident+correct
//! (TP), confident+incorrect (FP), unconfident+incorrect (TN),
//! unconfident+correct (FN) — and the report ratios are:
//!
//! * uncertain-rate `(FN+TN)/Total`
//! * accuracy `(TP+FN)/Total`
//! * alignment `(TP+TN)/Total`
//! * conservativeness `FN/Total`
//! * overconfidence `FP/Total`
//!
//! Two identities follow directly and hold exactly in integer arithmetic:
//! `Align + Overco + Conser = 1` and `Unc-R + Acc = Align + 2·Conser`.

use serde::{Deserialize, Serialize};

/// Confusion cell for a (correct, confident) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    TP,
    FP,
    TN,
    FN,
}

/// Classifies a graded answer and a binary confidence into its cell.
pub fn classify_outcome(correct: bool, confident: bool) -> Cell {
    match (correct, confident) {
        (true, true) => Cell::TP,
        (true, false) => Cell::FN,
        (false, true) => Cell::FP,
        (false, false) => Cell::TN,
    }
}

/// Per-record result of one method on one record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub record_id: String,
    pub answer_text: String,
    pub correct: bool,
    pub confident: bool,
    pub cell: Cell,
}

impl EvalOutcome {
    pub fn new(record_id: String, answer_text: String, correct: bool, confident: bool) -> Self {
        EvalOutcome {
            record_id,
            answer_text,
            correct,
            confident,
            cell: classify_outcome(correct, confident),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot compute metrics over zero outcomes")]
    Empty,
}

/// Confusion counts plus the five derived ratios (rounded to 4 decimals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: u64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub unc_r: f64,
    pub acc: f64,
    pub align: f64,
    pub conser: f64,
    pub overco: f64,
}

/// Rounds the exact rational `numer/denom` to 4 decimal places (half away
/// from zero) without going through intermediate floating point.
pub fn round4(numer: u64, denom: u64) -> f64 {
    debug_assert!(denom > 0);
    ((20_000 * numer + denom) / (2 * denom)) as f64 / 10_000.0
}

impl MetricsReport {
    /// Builds a report from raw confusion counts.
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<Self, MetricsError> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(MetricsReport {
            total,
            tp,
            fp,
            tn,
            fn_,
            unc_r: round4(fn_ + tn, total),
            acc: round4(tp + fn_, total),
            align: round4(tp + tn, total),
            conser: round4(fn_, total),
            overco: round4(fp, total),
        })
    }

    /// The two metric identities, checked exactly on the integer numerators
    /// (every ratio shares the denominator `total`).
    pub fn identities_hold_exactly(&self) -> bool {
        let sum_to_one = (self.tp + self.tn) + self.fp + self.fn_ == self.total;
        let unc_acc = (self.fn_ + self.tn) + (self.tp + self.fn_) == (self.tp + self.tn) + 2 * self.fn_;
        sum_to_one && unc_acc
    }
}

/// Aggregates per-record outcomes into a [`MetricsReport`].
pub fn compute_metrics(outcomes: &[EvalOutcome]) -> Result<MetricsReport, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    for outcome in outcomes {
        match outcome.cell {
            Cell::TP => tp += 1,
            Cell::FP => fp += 1,
            Cell::TN => tn += 1,
            Cell::FN => fn_ += 1,
        }
    }
    MetricsReport::from_counts(tp, fp, tn, fn_)
}
