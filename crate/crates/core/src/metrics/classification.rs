//! Binary classification metrics at a threshold plus the rank-based AUC.

use super::MetricsError;

#[derive(Debug, Clone, Copy)]
pub struct BinaryPrediction {
    /// Positive-class probability in [0, 1].
    pub score: f32,
    pub label: u8,
}

/// Percent-scaled confusion-matrix metrics. Division-by-zero cells report 0
/// with the degeneracy flag raised.
#[derive(Debug, Clone, Copy)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    pub degenerate: bool,
}

pub fn classification_metrics(
    preds: &[BinaryPrediction],
    threshold: f32,
) -> Result<ClassificationMetrics, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = preds.iter().position(|p| !p.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index: i });
    }
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for p in preds {
        let positive = p.score >= threshold;
        match (positive, p.label != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| -> f64 {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let acc = ratio(tp + tn, preds.len());
    let sen = ratio(tp, tp + fne);
    let spe = ratio(tn, tn + fp);
    let precision = ratio(tp, tp + fp);
    let f1 = if precision + sen == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * sen / (precision + sen)
    };
    Ok(ClassificationMetrics {
        acc,
        sen,
        spe,
        f1,
        degenerate,
    })
}

/// Area under the ROC curve as the Mann-Whitney rank statistic: the fraction
/// of (positive, negative) pairs ranked correctly, ties credited one half.
pub fn auc(preds: &[BinaryPrediction]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = preds.iter().position(|p| !p.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index: i });
    }
    let n_pos = preds.iter().filter(|p| p.label != 0).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    if n_neg == 0 {
        return Err(MetricsError::NoNegatives);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].score.partial_cmp(&preds[b].score).unwrap());
    // average ranks over tie groups, 1-based
    let mut rank_pos_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]].score == preds[order[i]].score {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if preds[idx].label != 0 {
                rank_pos_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_pos_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(pairs: &[(f32, u8)]) -> Vec<BinaryPrediction> {
        pairs
            .iter()
            .map(|&(score, label)| BinaryPrediction { score, label })
            .collect()
    }

    #[test]
    fn all_correct_is_100_everywhere() {
        let p = preds(&[(0.9, 1), (0.8, 1), (0.1, 0), (0.2, 0)]);
        let m = classification_metrics(&p, 0.5).unwrap();
        assert_eq!((m.acc, m.sen, m.spe, m.f1), (100.0, 100.0, 100.0, 100.0));
        assert!(!m.degenerate);
    }

    #[test]
    fn all_positive_on_balanced_set() {
        let p = preds(&[(0.9, 1), (0.8, 0), (0.7, 1), (0.6, 0)]);
        let m = classification_metrics(&p, 0.5).unwrap();
        assert_eq!(m.sen, 100.0);
        assert_eq!(m.spe, 0.0);
        assert_eq!(m.acc, 50.0);
    }

    #[test]
    fn hand_confusion_matrix() {
        // TP=1, FN=1, FP=1, TN=1
        let p = preds(&[(0.9, 1), (0.2, 0), (0.7, 0), (0.4, 1)]);
        let m = classification_metrics(&p, 0.5).unwrap();
        assert_eq!((m.acc, m.sen, m.spe, m.f1), (50.0, 50.0, 50.0, 50.0));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            classification_metrics(&[], 0.5),
            Err(MetricsError::Empty)
        ));
    }

    #[test]
    fn degenerate_cells_flag_and_zero() {
        let p = preds(&[(0.9, 1), (0.8, 1)]);
        let m = classification_metrics(&p, 0.5).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.spe, 0.0);
    }

    #[test]
    fn auc_perfect_separation_is_one() {
        let p = preds(&[(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]);
        assert_eq!(auc(&p).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let p = preds(&[(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]);
        assert_eq!(auc(&p).unwrap(), 0.5);
    }

    #[test]
    fn auc_hand_case_three_of_four_pairs() {
        let p = preds(&[(0.1, 0), (0.4, 0), (0.35, 1), (0.8, 1)]);
        assert_eq!(auc(&p).unwrap(), 0.75);
    }

    #[test]
    fn auc_single_class_is_an_error() {
        let p = preds(&[(0.9, 1), (0.8, 1)]);
        assert!(matches!(auc(&p), Err(MetricsError::NoNegatives)));
        let p = preds(&[(0.9, 0), (0.8, 0)]);
        assert!(matches!(auc(&p), Err(MetricsError::NoPositives)));
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let base = preds(&[(0.1, 0), (0.45, 1), (0.3, 0), (0.7, 1), (0.5, 0)]);
        let squashed: Vec<BinaryPrediction> = base
            .iter()
            .map(|p| BinaryPrediction {
                score: 1.0 / (1.0 + (-4.0 * p.score).exp()),
                label: p.label,
            })
            .collect();
        assert_eq!(auc(&base).unwrap(), auc(&squashed).unwrap());
    }
}
