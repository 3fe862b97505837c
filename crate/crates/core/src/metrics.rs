//! Test-set metrics: accuracy, balanced accuracy, macro precision and macro
//! one-vs-rest AUC.

use serde::{Deserialize, Serialize};

use crate::data_sim::Dataset;
use crate::error::{Error, Result};
use crate::tensor_net::{self, Matrix, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean per-class recall over classes present in the test set.
    pub balanced_accuracy: f64,
    /// Mean per-class precision over classes that were predicted at least once.
    pub macro_precision: f64,
    /// Mean one-vs-rest AUC over classes with both positives and negatives.
    pub macro_auc: f64,
}

/// Argmax with ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
            if v > best.1 {
                (k, v)
            } else {
                best
            }
        })
        .0
}

/// `(accuracy, balanced accuracy, macro precision)`.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    class_count: usize,
) -> Result<(f64, f64, f64)> {
    if labels.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut support = vec![0usize; class_count];
    let mut predicted = vec![0usize; class_count];
    let mut hits = vec![0usize; class_count];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= class_count || p >= class_count {
            return Err(Error::Evaluation(format!(
                "class index outside [0, {class_count})"
            )));
        }
        support[y] += 1;
        predicted[p] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let accuracy = correct as f64 / labels.len() as f64;
    let ratio_mean = |denoms: &[usize]| {
        let (sum, n) = hits
            .iter()
            .zip(denoms)
            .filter(|(_, &d)| d > 0)
            .fold((0.0, 0usize), |(s, n), (&h, &d)| {
                (s + h as f64 / d as f64, n + 1)
            });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    Ok((accuracy, ratio_mean(&support), ratio_mean(&predicted)))
}

/// Ranking AUC of `scores` for the positive set, ties by midrank. `None`
/// when either side is empty.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn macro_auc(probabilities: &Matrix, labels: &[usize], class_count: usize) -> f64 {
    let aucs: Vec<f64> = (0..class_count)
        .filter_map(|c| {
            let scores: Vec<f64> = probabilities.iter_rows().map(|r| r[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            rank_auc(&scores, &positive)
        })
        .collect();
    if aucs.is_empty() {
        0.0
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let class_count = params.arch().class_count();
    let logits = tensor_net::forward(params, &Matrix::from_rows(test.features())?)?.logits;
    let predictions: Vec<usize> = logits.iter_rows().map(argmax).collect();
    let probs: Vec<Vec<f64>> = logits
        .iter_rows()
        .map(|r| tensor_net::softmax(r, None))
        .collect();
    let probs = Matrix::from_rows(&probs)?;
    let (accuracy, balanced_accuracy, macro_precision) =
        classification_metrics(&predictions, test.labels(), class_count)?;
    Ok(EvalMetrics {
        accuracy,
        balanced_accuracy,
        macro_precision,
        macro_auc: macro_auc(&probs, test.labels(), class_count),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn perfect_predictions() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let (a, b, p) = classification_metrics(&labels, &labels, 4).unwrap();
        assert_eq!((a, b, p), (1.0, 1.0, 1.0));
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| (0..4).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(
            macro_auc(&Matrix::from_rows(&probs).unwrap(), &labels, 4),
            1.0
        );
    }

    #[test]
    fn constant_predictor_on_skewed_set() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let preds = vec![0; 100];
        let (a, b, p) = classification_metrics(&preds, &labels, 2).unwrap();
        assert!((a - 0.9).abs() < 1e-12);
        assert!((b - 0.5).abs() < 1e-12);
        // only class 0 was predicted; its precision is 0.9
        assert!((p - 0.9).abs() < 1e-12);
    }

    #[test]
    fn balanced_set_accuracy_equals_balanced_accuracy() {
        let mut r = rng::seeded(3);
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let preds: Vec<usize> = (0..60).map(|_| r.random_range(0..3)).collect();
        let (a, b, _) = classification_metrics(&preds, &labels, 3).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn auc_midrank_ties() {
        assert_eq!(rank_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(rank_auc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(rank_auc(&[0.1, 0.9], &[true, false]), Some(0.0));
        // brute-force pair count: pos {0.3, 0.5}, neg {0.3, 0.1}
        // pairs: (0.3,0.3)=.5 (0.3,0.1)=1 (0.5,0.3)=1 (0.5,0.1)=1 -> 3.5/4
        assert_eq!(
            rank_auc(&[0.3, 0.5, 0.3, 0.1], &[true, true, false, false]),
            Some(0.875)
        );
        assert_eq!(rank_auc(&[0.3], &[true]), None);
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut r = rng::seeded(11);
        let n = 20_000;
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| r.random::<f64>()).collect())
            .collect();
        let auc = macro_auc(&Matrix::from_rows(&probs).unwrap(), &labels, 3);
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(classification_metrics(&[], &[], 2).is_err());
    }
}
