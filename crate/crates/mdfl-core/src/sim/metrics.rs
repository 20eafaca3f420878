//! Evaluation metrics for the round loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::RoundLog;

/// Unweighted mean of per-class F1 scores.
///
/// Per class: `F1 = 2 TP / (2 TP + FP + FN)`. A class with an empty
/// denominator (absent from both predictions and labels) contributes 0, so
/// scores stay comparable across devices whose local test sets miss classes;
/// the averaging denominator is always `num_classes`.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Domain("macro_f1 requires at least one prediction".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be >= 2".into()));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&v| v >= num_classes) {
        return Err(Error::Domain(format!(
            "class id {bad} out of range for {num_classes} classes"
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let mut acc = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            acc += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(acc / num_classes as f64)
}

/// Mean over users of the population variance of their devices' F1 scores.
///
/// Users without any scored device are skipped; returns 0 when no user has a
/// score.
pub fn per_user_f1_variance(
    per_device_f1: &BTreeMap<String, f64>,
    topology: &[(String, Vec<String>)],
) -> f64 {
    let mut acc = 0.0;
    let mut users = 0usize;
    for (user, devices) in topology {
        let scores: Vec<f64> = devices
            .iter()
            .filter_map(|d| per_device_f1.get(&crate::data::device_key(user, d)).copied())
            .collect();
        if scores.is_empty() {
            continue;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        acc += var;
        users += 1;
    }
    if users == 0 {
        0.0
    } else {
        acc / users as f64
    }
}

/// Which F1 series of a run to scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSeries {
    Global,
    Personal,
}

/// First round (and its cumulative simulated time) at which the chosen
/// series reaches `target_f1`; `None` if it never does.
pub fn rounds_to_target(
    logs: &[RoundLog],
    target_f1: f64,
    which: TargetSeries,
) -> Option<(u32, f64)> {
    for log in logs {
        let value = match which {
            TargetSeries::Global => Some(log.global_f1),
            TargetSeries::Personal => log.personal_f1,
        };
        if let Some(v) = value {
            if v >= target_f1 {
                return Some((log.round, log.cumulative_seconds));
            }
        }
    }
    None
}
