//! Classification metrics: accuracy, F1 and per-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::classifier::DecisionRule;
use crate::error::{Error, Result};

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Binary F1 with class 1 as the positive class. Returns 0 when there are no
/// positive predictions and no positive labels.
pub fn binary_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    Ok(f1_for_class(predictions, labels, 1))
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(predictions, labels)?;
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be >= 1".into()));
    }
    let sum: f64 = (0..num_classes).map(|c| f1_for_class(predictions, labels, c)).sum();
    Ok(sum / num_classes as f64)
}

fn f1_for_class(predictions: &[usize], labels: &[usize], class: usize) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fne = 0.0;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
            _ => {}
        }
    }
    let denom = 2.0 * tp + fp + fne;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Data(format!(
            "predictions/labels length mismatch or empty: {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean with sample standard deviation; std is omitted below 2 values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Data("mean_std over empty slice".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() >= 2 {
        Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    Ok(MeanStd { mean, std })
}

/// Multi-seed classification metrics for one decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rule: DecisionRule,
    pub num_steps: usize,
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_f1: Vec<f64>,
    pub accuracy: MeanStd,
    pub f1: MeanStd,
    /// Only populated for more than two classes.
    pub macro_f1: Option<MeanStd>,
}

impl MetricsReport {
    pub fn from_runs(
        rule: DecisionRule,
        num_steps: usize,
        seeds: &[u64],
        predictions_per_seed: &[Vec<usize>],
        labels: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if seeds.len() != predictions_per_seed.len() || seeds.is_empty() {
            return Err(Error::Data("one prediction vector required per seed".into()));
        }
        let mut per_seed_accuracy = Vec::with_capacity(seeds.len());
        let mut per_seed_f1 = Vec::with_capacity(seeds.len());
        let mut per_seed_macro = Vec::with_capacity(seeds.len());
        for preds in predictions_per_seed {
            per_seed_accuracy.push(accuracy(preds, labels)?);
            per_seed_f1.push(binary_f1(preds, labels)?);
            if num_classes > 2 {
                per_seed_macro.push(macro_f1(preds, labels, num_classes)?);
            }
        }
        Ok(Self {
            rule,
            num_steps,
            seeds: seeds.to_vec(),
            accuracy: mean_std(&per_seed_accuracy)?,
            f1: mean_std(&per_seed_f1)?,
            macro_f1: if num_classes > 2 { Some(mean_std(&per_seed_macro)?) } else { None },
            per_seed_accuracy,
            per_seed_f1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_hand_case() {
        let a = accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn f1_hand_case() {
        // preds: 1,1,0,0  labels: 1,0,1,0 -> tp=1 fp=1 fn=1 -> F1 = 0.5
        let f = binary_f1(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(f, 0.5);
    }

    #[test]
    fn f1_perfect_and_degenerate() {
        assert_eq!(binary_f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        // No positives anywhere: defined as 0.
        assert_eq!(binary_f1(&[0, 0], &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_matches_manual_average() {
        let preds = [0, 1, 2, 2, 1, 0];
        let labels = [0, 2, 2, 2, 1, 1];
        let m = macro_f1(&preds, &labels, 3).unwrap();
        let manual = (f1_for_class(&preds, &labels, 0)
            + f1_for_class(&preds, &labels, 1)
            + f1_for_class(&preds, &labels, 2))
            / 3.0;
        assert!((m - manual).abs() < 1e-15);
    }

    #[test]
    fn binary_macro_consistency() {
        // For symmetric binary data macro-F1 averages both one-vs-rest F1s.
        let preds = [1, 0, 1, 1];
        let labels = [1, 1, 0, 1];
        let m = macro_f1(&preds, &labels, 2).unwrap();
        let expect = (f1_for_class(&preds, &labels, 0) + binary_f1(&preds, &labels).unwrap()) / 2.0;
        assert!((m - expect).abs() < 1e-15);
    }

    #[test]
    fn mean_std_values() {
        let ms = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert!((ms.mean - 2.0).abs() < 1e-15);
        assert!((ms.std.unwrap() - 1.0).abs() < 1e-15);
        let single = mean_std(&[4.2]).unwrap();
        assert_eq!(single.std, None);
        assert!(mean_std(&[]).is_err());
    }

    #[test]
    fn report_aggregates_per_seed() {
        let labels = vec![0, 1, 1, 0];
        let runs = vec![vec![0, 1, 1, 0], vec![0, 1, 0, 0]];
        let r = MetricsReport::from_runs(DecisionRule::Majority, 11, &[1, 2], &runs, &labels, 2).unwrap();
        assert_eq!(r.per_seed_accuracy, vec![1.0, 0.75]);
        assert!((r.accuracy.mean - 0.875).abs() < 1e-15);
        assert!(r.accuracy.std.is_some());
        assert!(r.macro_f1.is_none());
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }
}
