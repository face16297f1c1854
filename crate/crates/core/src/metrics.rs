//! Evaluation metrics: AUC-ROC, quadratic weighted kappa and macro Dice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
}

/// Area under the ROC curve via the Mann–Whitney rank statistic.
///
/// Tied scores receive their average rank, so every tied positive/negative
/// pair counts one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auc over NaN scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares the average rank.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Quadratic weighted Cohen's kappa over ordinal grades `0..k`.
pub fn kappa_quadratic(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Contract(format!(
            "kappa needs at least 2 grades, got {k}"
        )));
    }
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(
            "kappa",
            format!("{} predictions vs {} truths", pred.len(), truth.len()),
        ));
    }
    if let Some(&g) = pred.iter().chain(truth).find(|&&g| g >= k) {
        return Err(Error::Contract(format!("grade {g} outside 0..{k}")));
    }
    let mut observed = vec![0.0; k * k];
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t * k + p] += 1.0;
        row[t] += 1.0;
        col[p] += 1.0;
    }
    let n = pred.len() as f64;
    let norm = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2) / norm;
            num += w * observed[i * k + j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "kappa has zero expected disagreement".into(),
        ));
    }
    Ok(1.0 - num / den)
}

/// Macro Dice over foreground classes `1..k` of two hard label masks.
///
/// A class absent from both masks scores 1.
pub fn dice(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "dice",
            format!("{} vs {} pixels", pred.len(), truth.len()),
        ));
    }
    if k < 2 {
        return Err(Error::Contract(format!(
            "dice needs at least 2 classes, got {k}"
        )));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= k) {
        return Err(Error::Contract(format!("label {c} outside 0..{k}")));
    }
    let mut inter = vec![0usize; k];
    let mut p_count = vec![0usize; k];
    let mut t_count = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        p_count[p] += 1;
        t_count[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let total: f64 = (1..k)
        .map(|c| {
            let denom = p_count[c] + t_count[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / (k - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_edge_cases() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn kappa_cases() {
        assert_eq!(
            kappa_quadratic(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap(),
            1.0
        );
        assert!(matches!(
            kappa_quadratic(&[1, 1], &[1, 1], 3),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(kappa_quadratic(&[0], &[0], 1).is_err());

        // truth (0,1,2,2), pred (0,2,1,2): weights 0, 1/4, 1/4, 0 → observed 0.5.
        // Expected: row marginals (1,1,2), col marginals (1,1,2), n = 4.
        let k = kappa_quadratic(&[0, 2, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        let expected_disagreement: f64 = {
            let rows = [1.0, 1.0, 2.0];
            let cols = [1.0, 1.0, 2.0];
            let mut e = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    e += ((i as f64 - j as f64).powi(2) / 4.0) * rows[i] * cols[j] / 4.0;
                }
            }
            e
        };
        assert!((k - (1.0 - 0.5 / expected_disagreement)).abs() < 1e-15);
    }

    #[test]
    fn dice_cases() {
        let a = [0, 1, 1, 2, 0, 2];
        assert_eq!(dice(&a, &a, 3).unwrap(), 1.0);
        assert_eq!(dice(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        // class 2 absent from both sides contributes 1.
        assert_eq!(dice(&[1, 0], &[1, 0], 3).unwrap(), 1.0);
    }
}
