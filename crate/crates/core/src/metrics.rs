//! Ranking metrics for binary scores (label 1 = fake = positive).

use crate::error::{Error, Result};

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (fake, real) pairs where the fake scores higher, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auc" });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!("{pos} positive and {neg} negative samples")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups, then U = R_pos − pos(pos+1)/2
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of samples where `score > 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s > 0.5) == (l == 1)).count();
    hits as f64 / scores.len() as f64
}

/// Probability of class 1 from a pair of logits.
pub fn fake_probability(logit_real: f64, logit_fake: f64) -> f64 {
    1.0 / (1.0 + (logit_real - logit_fake).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.7, 0.5, 0.9], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.4; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn fake_probability_is_softmax() {
        assert_eq!(fake_probability(0.0, 0.0), 0.5);
        assert!((fake_probability(1.0, 3.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }
}
