//! Vote-based uncertainty: categorical vote distributions, Shannon entropy
//! in bits, coverage-accuracy filtering curves and per-outcome summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    /// votes / N; sums to 1.
    pub vote_fraction: Vec<f64>,
    /// Shannon entropy of the vote distribution, in bits: [0, log2 C].
    pub entropy: f64,
    pub predicted: usize,
}

/// Entropy in bits with the 0 log 0 = 0 convention.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// Turn per-step votes into a vote-fraction distribution and its entropy.
/// For two classes this is exactly the Bernoulli entropy of the predicted
/// class fraction.
pub fn estimate_uncertainty(votes: &[u32], n: usize) -> Result<UncertaintyEstimate> {
    if n == 0 {
        return Err(Error::EmptySelection("N must be >= 1 for uncertainty".into()));
    }
    let total: u32 = votes.iter().sum();
    if total as usize != n {
        return Err(Error::Data(format!("votes sum to {total}, expected N={n}")));
    }
    let vote_fraction: Vec<f64> = votes.iter().map(|&v| v as f64 / n as f64).collect();
    let entropy = entropy_bits(&vote_fraction);
    let mut predicted = 0;
    for (j, &v) in votes.iter().enumerate() {
        if v > votes[predicted] {
            predicted = j;
        }
    }
    Ok(UncertaintyEstimate { vote_fraction, entropy, predicted })
}

/// One point of a coverage-accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub retained_fraction: f64,
    /// Entropy cutoff actually realized at this fraction.
    pub threshold: f64,
    pub n_kept: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    /// Ordered by decreasing retained fraction; the first point is the
    /// unfiltered accuracy when 1.0 is among the requested fractions.
    pub points: Vec<CoveragePoint>,
}

/// For each retained fraction f, keep the round(f*B) samples with lowest
/// entropy (ties broken by sample index) and report accuracy on the kept set.
pub fn coverage_accuracy_curve(
    predictions: &[usize],
    entropies: &[f64],
    labels: &[usize],
    fractions: &[f64],
) -> Result<CoverageCurve> {
    let b = predictions.len();
    if entropies.len() != b || labels.len() != b {
        return Err(Error::Data("predictions, entropies and labels must align".into()));
    }
    if b == 0 {
        return Err(Error::EmptySelection("no samples to filter".into()));
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| entropies[i].partial_cmp(&entropies[j]).unwrap().then(i.cmp(&j)));
    let mut fractions: Vec<f64> = fractions.to_vec();
    fractions.sort_by(|a, c| c.partial_cmp(a).unwrap());
    let mut points = Vec::new();
    for &f in &fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("retained fraction {f} outside (0,1]")));
        }
        let keep = ((f * b as f64).round() as usize).min(b);
        if keep == 0 {
            return Err(Error::EmptySelection(format!("fraction {f} keeps no samples")));
        }
        let kept = &order[..keep];
        let correct = kept.iter().filter(|&&i| predictions[i] == labels[i]).count();
        points.push(CoveragePoint {
            retained_fraction: f,
            threshold: entropies[*kept.last().unwrap()],
            n_kept: keep,
            accuracy: correct as f64 / keep as f64,
        });
    }
    Ok(CoverageCurve { points })
}

/// Binary confusion outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    TrueNegative,
    FalsePositive,
    FalseNegative,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::TruePositive => "TP",
            Outcome::TrueNegative => "TN",
            Outcome::FalsePositive => "FP",
            Outcome::FalseNegative => "FN",
        }
    }

    pub fn all() -> [Outcome; 4] {
        [Outcome::TruePositive, Outcome::TrueNegative, Outcome::FalsePositive, Outcome::FalseNegative]
    }
}

/// Five-number summary of the entropies inside one outcome group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between order statistics.
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn summarize(mut values: Vec<f64>) -> EntropySummary {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    EntropySummary {
        min: values[0],
        q1: quantile(&values, 0.25),
        median: quantile(&values, 0.5),
        q3: quantile(&values, 0.75),
        max: *values.last().unwrap(),
        count: values.len(),
    }
}

/// Group entropies by TP/TN/FP/FN (positive class = 1) and summarize each
/// non-empty group. Empty groups are reported as absent.
pub fn confidence_by_outcome(
    predictions: &[usize],
    entropies: &[f64],
    labels: &[usize],
) -> Result<Vec<(Outcome, EntropySummary)>> {
    let b = predictions.len();
    if entropies.len() != b || labels.len() != b {
        return Err(Error::Data("predictions, entropies and labels must align".into()));
    }
    if predictions.iter().chain(labels.iter()).any(|&v| v > 1) {
        return Err(Error::Data("outcome grouping requires binary labels".into()));
    }
    let mut groups: std::collections::HashMap<Outcome, Vec<f64>> = std::collections::HashMap::new();
    for i in 0..b {
        let outcome = match (labels[i], predictions[i]) {
            (1, 1) => Outcome::TruePositive,
            (0, 0) => Outcome::TrueNegative,
            (0, 1) => Outcome::FalsePositive,
            (1, 0) => Outcome::FalseNegative,
            _ => unreachable!(),
        };
        groups.entry(outcome).or_default().push(entropies[i]);
    }
    let mut out = Vec::new();
    for outcome in Outcome::all() {
        if let Some(values) = groups.remove(&outcome) {
            out.push((outcome, summarize(values)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_uniform_votes_max_entropy() {
        let u = estimate_uncertainty(&[250, 251], 501).unwrap();
        assert!((u.entropy - 1.0).abs() < 1e-5);
        assert_eq!(u.predicted, 1);
        assert!((u.vote_fraction.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unanimous_votes_zero_entropy() {
        let u = estimate_uncertainty(&[501, 0], 501).unwrap();
        assert_eq!(u.entropy, 0.0);
        assert_eq!(u.predicted, 0);
    }

    #[test]
    fn binary_entropy_frozen_value() {
        // H2(400/501), frozen from 40-digit evaluation.
        let u = estimate_uncertainty(&[400, 101], 501).unwrap();
        assert!((u.entropy - 0.7251102349760045).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounds_attained() {
        for c in 2..=5usize {
            let n = 60;
            let uniform = vec![(n / c) as u32; c];
            let u = estimate_uncertainty(&uniform, n).unwrap();
            assert!((u.entropy - (c as f64).log2()).abs() < 1e-12);
            let mut unanimous = vec![0u32; c];
            unanimous[c - 1] = n as u32;
            let u = estimate_uncertainty(&unanimous, n).unwrap();
            assert_eq!(u.entropy, 0.0);
        }
    }

    #[test]
    fn vote_sum_validation() {
        assert!(estimate_uncertainty(&[3, 3], 7).is_err());
        assert!(estimate_uncertainty(&[0, 0], 0).is_err());
    }

    #[test]
    fn coverage_all_correct_is_flat() {
        let preds = vec![0, 1, 0, 1];
        let ents = vec![0.1, 0.5, 0.9, 0.3];
        let labels = preds.clone();
        let curve = coverage_accuracy_curve(&preds, &ents, &labels, &[1.0, 0.5]).unwrap();
        assert!(curve.points.iter().all(|p| p.accuracy == 1.0));
    }

    #[test]
    fn coverage_hand_case() {
        // entropies (0.1, 0.9), correctness (right, wrong).
        let preds = vec![0, 0];
        let labels = vec![0, 1];
        let ents = vec![0.1, 0.9];
        let curve = coverage_accuracy_curve(&preds, &ents, &labels, &[1.0, 0.5]).unwrap();
        assert_eq!(curve.points[0].retained_fraction, 1.0);
        assert_eq!(curve.points[0].accuracy, 0.5);
        assert_eq!(curve.points[1].retained_fraction, 0.5);
        assert_eq!(curve.points[1].accuracy, 1.0);
        assert_eq!(curve.points[1].n_kept, 1);
    }

    #[test]
    fn coverage_full_fraction_reproduces_unfiltered_accuracy() {
        let preds = vec![0, 1, 1, 0, 1];
        let labels = vec![0, 0, 1, 1, 1];
        let ents = vec![0.4, 0.2, 0.9, 0.1, 0.6];
        let curve = coverage_accuracy_curve(&preds, &ents, &labels, &[1.0]).unwrap();
        assert_eq!(curve.points[0].accuracy, 3.0 / 5.0);
        assert_eq!(curve.points[0].n_kept, 5);
    }

    #[test]
    fn coverage_order_invariant() {
        let preds = vec![0, 1, 1, 0];
        let labels = vec![0, 1, 0, 0];
        let ents = vec![0.4, 0.2, 0.9, 0.1];
        let c1 = coverage_accuracy_curve(&preds, &ents, &labels, &[0.5, 1.0]).unwrap();
        // Permute samples; accuracy per fraction must not change.
        let perm = [2usize, 0, 3, 1];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let e2: Vec<f64> = perm.iter().map(|&i| ents[i]).collect();
        let c2 = coverage_accuracy_curve(&p2, &e2, &l2, &[0.5, 1.0]).unwrap();
        for (a, b) in c1.points.iter().zip(c2.points.iter()) {
            assert_eq!(a.accuracy, b.accuracy);
            assert_eq!(a.n_kept, b.n_kept);
        }
    }

    #[test]
    fn coverage_rejects_bad_fractions() {
        let r = coverage_accuracy_curve(&[0], &[0.1], &[0], &[0.0]);
        assert!(r.is_err());
        let r = coverage_accuracy_curve(&[0], &[0.1], &[0], &[1.5]);
        assert!(r.is_err());
    }

    #[test]
    fn outcome_groups_perfectly_confident() {
        let preds = vec![1, 0, 1];
        let labels = vec![1, 0, 1];
        let ents = vec![0.0, 0.0, 0.0];
        let groups = confidence_by_outcome(&preds, &ents, &labels).unwrap();
        let names: Vec<&str> = groups.iter().map(|(o, _)| o.label()).collect();
        assert_eq!(names, vec!["TP", "TN"]);
        assert!(groups.iter().all(|(_, s)| s.median == 0.0));
    }

    #[test]
    fn outcome_group_means_match_hand_computation() {
        let preds = vec![1, 1, 0, 0, 1, 0];
        let labels = vec![1, 0, 0, 1, 1, 0];
        let ents = vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.4];
        let groups = confidence_by_outcome(&preds, &ents, &labels).unwrap();
        let get = |label: &str| groups.iter().find(|(o, _)| o.label() == label).unwrap().1;
        assert_eq!(get("TP").count, 2);
        assert!((get("TP").median - 0.2).abs() < 1e-12);
        assert_eq!(get("FP").count, 1);
        assert_eq!(get("FP").median, 0.9);
        assert_eq!(get("FN").median, 0.8);
        let tn = get("TN");
        assert_eq!(tn.count, 2);
        assert!((tn.median - 0.3).abs() < 1e-12);
        assert_eq!(tn.min, 0.2);
        assert_eq!(tn.max, 0.4);
    }

    #[test]
    fn outcome_requires_binary() {
        assert!(confidence_by_outcome(&[2], &[0.1], &[0]).is_err());
    }
}
