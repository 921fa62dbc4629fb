//! Ranking metrics: ROC AUC and average precision.

use crate::error::{Error, Result};

/// ROC AUC via the rank statistic. Tied scores contribute 1/2 per
/// positive/negative pair. Errors when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc requires at least one positive and one negative".into(),
        ));
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::NonFinite("auc score".into()));
        }
    }
    // average rank per score: sort indices, give tied runs the mean rank
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 averaged
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = mean_rank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(rank.iter())
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision: precision at each positive's position in the
/// descending-score ordering, averaged over positives. Ties keep their
/// input order (stable sort). Errors when no positive is present.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision requires at least one positive".into(),
        ));
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::NonFinite("average precision score".into()));
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}
