//! Evaluation metrics: MAE, F-measure, IoU, and the AUROC of uncertainty
//! against prediction errors.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Binarization threshold shared by F-measure and IoU.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// F-measure beta^2; the salient-object-detection convention.
pub const DEFAULT_BETA_SQ: f64 = 0.3;
/// Error indicator cutoff for the uncertainty AUROC.
pub const ERROR_CUTOFF: f64 = 0.5;

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            context: what.into(),
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    Ok(())
}

fn check_binary(gt: &Tensor, what: &str) -> Result<()> {
    if gt.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config(format!("{what}: ground truth must be binary")));
    }
    Ok(())
}

/// Mean absolute error over all pixels.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same_shape(pred, gt, "mae")?;
    let n = pred.len() as f64;
    Ok(pred.data.iter().zip(gt.data.iter()).map(|(p, g)| (p - g).abs()).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    check_same_shape(pred, gt, "confusion")?;
    check_binary(gt, "confusion")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        match (p > threshold, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// F-measure from confusion counts: `(1 + b^2) P R / (b^2 P + R)`, defined
/// as 0 when the denominator vanishes.
pub fn f_measure_from_counts(c: &ConfusionCounts, beta_sq: f64) -> f64 {
    let precision = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

pub fn f_measure(pred: &Tensor, gt: &Tensor, threshold: f64, beta_sq: f64) -> Result<f64> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!("f_measure: threshold {threshold} must lie in (0, 1)")));
    }
    Ok(f_measure_from_counts(&confusion(pred, gt, threshold)?, beta_sq))
}

/// Intersection over union of the binarized prediction. Both-empty counts
/// as a perfect match.
pub fn iou(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64> {
    let c = confusion(pred, gt, threshold)?;
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 { 1.0 } else { c.tp as f64 / union as f64 })
}

/// AUROC of ranking pixels by uncertainty against the binary error indicator
/// `|prediction - truth| > 0.5`, with midrank tie handling. `None` when only
/// one class is present.
pub fn uncertainty_error_auroc(uncertainty: &Tensor, pred: &Tensor, gt: &Tensor) -> Result<Option<f64>> {
    check_same_shape(uncertainty, pred, "uncertainty_error_auroc")?;
    check_same_shape(pred, gt, "uncertainty_error_auroc")?;
    check_binary(gt, "uncertainty_error_auroc")?;
    let errors: Vec<bool> =
        pred.data.iter().zip(gt.data.iter()).map(|(p, g)| (p - g).abs() > ERROR_CUTOFF).collect();
    Ok(auroc(&uncertainty.data, &errors))
}

/// Mann-Whitney AUROC with midranks.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if positives[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Population variance via sums and squared sums; the same identity the
/// uncertainty map uses.
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Stream};

    fn t(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    #[test]
    fn mae_of_identical_maps_is_zero() {
        let a = t(vec![0.2, 0.8, 0.5]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mae_of_opposite_constants_is_one() {
        let p = t(vec![0.0; 8]);
        let g = t(vec![1.0; 8]);
        assert_eq!(mae(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn mae_hand_case() {
        // pred 0.25 everywhere, gt half ones: (0.25 + 0.75) / 2 = 0.5.
        let p = t(vec![0.25; 4]);
        let g = t(vec![1.0, 1.0, 0.0, 0.0]);
        assert!((mae(&p, &g).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mae_shape_mismatch_is_an_error() {
        assert!(mae(&t(vec![0.0; 3]), &t(vec![0.0; 4])).is_err());
    }

    #[test]
    fn perfect_prediction_scores_full_f_measure() {
        let g = t(vec![1.0, 0.0, 1.0, 0.0]);
        let p = t(vec![0.9, 0.1, 0.8, 0.2]);
        assert_eq!(f_measure(&p, &g, 0.5, DEFAULT_BETA_SQ).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_prediction_scores_zero() {
        let g = t(vec![1.0, 0.0, 1.0, 0.0]);
        let p = t(vec![0.0; 4]);
        assert_eq!(f_measure(&p, &g, 0.5, DEFAULT_BETA_SQ).unwrap(), 0.0);
    }

    #[test]
    fn f_measure_known_value() {
        // P = 0.5, R = 1.0, beta^2 = 0.3: F = 1.3 * 0.5 / 1.15 = 13/23.
        let c = ConfusionCounts { tp: 2, fp: 2, fn_: 0, tn: 0 };
        let f = f_measure_from_counts(&c, 0.3);
        assert!((f - 13.0 / 23.0).abs() < 1e-15);
        assert!((f - 0.5652).abs() < 1e-4);
    }

    #[test]
    fn non_binary_ground_truth_is_rejected() {
        let g = t(vec![0.4, 1.0]);
        let p = t(vec![0.5, 0.5]);
        assert!(f_measure(&p, &g, 0.5, 0.3).is_err());
    }

    #[test]
    fn f_measure_is_monotone_in_true_positives() {
        // With fixed positive/negative totals, converting a miss into a hit
        // never lowers F.
        let mut s = Stream::new(2, Purpose::Test, 0, 0, 0);
        for _ in 0..200 {
            let pos = 1 + s.below(50);
            let neg = 1 + s.below(50);
            let tp = s.below(pos + 1);
            let fp = s.below(neg + 1);
            if tp + 1 > pos {
                continue;
            }
            let base = f_measure_from_counts(
                &ConfusionCounts { tp, fp, fn_: pos - tp, tn: neg - fp },
                DEFAULT_BETA_SQ,
            );
            let more = f_measure_from_counts(
                &ConfusionCounts { tp: tp + 1, fp, fn_: pos - tp - 1, tn: neg - fp },
                DEFAULT_BETA_SQ,
            );
            assert!(more >= base - 1e-12, "tp {tp}->{} dropped F {base} -> {more}", tp + 1);
        }
    }

    #[test]
    fn iou_cases() {
        let g = t(vec![1.0, 1.0, 0.0, 0.0]);
        let p = t(vec![0.9, 0.2, 0.8, 0.1]);
        // tp 1, fp 1, fn 1 -> 1/3
        assert!((iou(&p, &g, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = t(vec![0.0; 4]);
        assert_eq!(iou(&empty, &empty, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn auroc_perfect_ordering_is_one() {
        let g = t(vec![1.0, 0.0, 1.0, 0.0]);
        let p = t(vec![0.0, 0.0, 0.0, 0.0]); // errors at gt=1 pixels
        let u = t(vec![0.9, 0.1, 0.8, 0.2]);
        assert_eq!(uncertainty_error_auroc(&u, &p, &g).unwrap(), Some(1.0));
    }

    #[test]
    fn auroc_constant_scores_are_chance() {
        let g = t(vec![1.0, 0.0, 1.0, 0.0]);
        let p = t(vec![0.0; 4]);
        let u = t(vec![0.5; 4]);
        assert_eq!(uncertainty_error_auroc(&u, &p, &g).unwrap(), Some(0.5));
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        let g = t(vec![0.0, 0.0]);
        let p = t(vec![0.0, 0.0]); // no errors at all
        let u = t(vec![0.3, 0.4]);
        assert_eq!(uncertainty_error_auroc(&u, &p, &g).unwrap(), None);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_transforms() {
        let mut s = Stream::new(3, Purpose::Test, 0, 0, 0);
        let scores: Vec<f64> = (0..64).map(|_| s.uniform()).collect();
        let positives: Vec<bool> = (0..64).map(|_| s.below(2) == 1).collect();
        let base = auroc(&scores, &positives).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&v| (3.0 * v).exp()).collect();
        let shifted: Vec<f64> = scores.iter().map(|&v| 10.0 + 0.01 * v).collect();
        assert!((auroc(&squashed, &positives).unwrap() - base).abs() < 1e-12);
        assert!((auroc(&shifted, &positives).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auroc_exhaustive_four_pixel_case() {
        // e = (1, 0, 1, 0), u = (0.9, 0.1, 0.8, 0.2): every error pixel
        // outranks every clean pixel -> 1.0 by pair counting.
        let scores = [0.9, 0.1, 0.8, 0.2];
        let positives = [true, false, true, false];
        assert_eq!(auroc(&scores, &positives), Some(1.0));
    }
}
