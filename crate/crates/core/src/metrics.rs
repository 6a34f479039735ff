//! Evaluation statistics.

use crate::error::{Error, Result};
use crate::graph::Label;

/// Rank-based ROC AUC: the probability that a random abnormal graph scores
/// above a random normal one, ties counting one half.
pub fn compute_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l == Label::Abnormal).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} abnormal and {n_neg} normal"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of abnormal samples, average ranks on ties, keeps
    // the arithmetic in integers.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1, average (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == Label::Abnormal).count() as u128;
        twice_rank_sum += twice_avg * pos_in_tie;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = R - p(p+1)/2; AUC = U / (p q).
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}
