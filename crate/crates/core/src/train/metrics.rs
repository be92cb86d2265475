use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::{Error, Result};

/// Binary classification scores; the positive class is sarcastic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Result<Metrics> {
        let total = tp + fp + fn_ + tn;
        if total == 0 {
            return Err(Error::Validation("cannot score an empty split".into()));
        }
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(Metrics {
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
            degenerate: tp + fp == 0 || tp + fn_ == 0,
        })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Result<Metrics> {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (gold, predicted) in pairs {
            match (gold.is_positive(), predicted.is_positive()) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Metrics::from_counts(tp, fp, fn_, tn)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}
