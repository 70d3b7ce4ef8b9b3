//! Mask evaluation: MAE, adaptive F-measure, IoU and Dice.
//!
//! Binary-input metrics treat values `>= 0.5` as foreground. Empty
//! prediction against empty ground truth scores 1 on IoU, Dice and F.

use crate::error::{invalid, Result};
use crate::tensor::MaskMap;

/// `β²` of the F-measure.
pub const BETA_SQ: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub dice: f64,
    /// Adaptive threshold used for `f_beta`.
    pub threshold_used: f64,
}

/// Structure measure, E-measure, AUC and sensitivity are not computed.
pub const UNAVAILABLE_METRICS: &[&str] = &["S_alpha", "E_phi", "AUC", "SEN"];

fn check(pred: &MaskMap, gt: &MaskMap) -> Result<()> {
    if !pred.same_size(gt) {
        return Err(invalid(format!(
            "prediction {}×{} and ground truth {}×{} differ",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

pub fn mae(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check(pred, gt)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

#[inline]
fn fg(v: f64) -> bool {
    v >= 0.5
}

/// `(|pred ∩ gt|, |pred|, |gt|)` after binarisation.
fn overlap(pred: &MaskMap, gt: &MaskMap) -> (usize, usize, usize) {
    pred.data()
        .iter()
        .zip(gt.data())
        .fold((0, 0, 0), |(i, a, b), (&p, &g)| {
            (
                i + usize::from(fg(p) && fg(g)),
                a + usize::from(fg(p)),
                b + usize::from(fg(g)),
            )
        })
}

pub fn iou(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check(pred, gt)?;
    let (inter, a, b) = overlap(pred, gt);
    let union = a + b - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn dice(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check(pred, gt)?;
    let (inter, a, b) = overlap(pred, gt);
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// `min(2·mean(pred), 1)`.
pub fn adaptive_threshold(pred: &MaskMap) -> f64 {
    let mean = pred.data().iter().sum::<f64>() / pred.len() as f64;
    (2.0 * mean).min(1.0)
}

/// F-measure of the prediction binarised at [`adaptive_threshold`].
///
/// A pixel is predicted foreground when it is `>= t` and nonzero, so an
/// all-zero prediction stays empty.
pub fn f_beta_adaptive(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check(pred, gt)?;
    let t = adaptive_threshold(pred);
    let (mut tp, mut pp, mut gp) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pb = p >= t && p > 0.0;
        let gb = fg(g);
        tp += usize::from(pb && gb);
        pp += usize::from(pb);
        gp += usize::from(gb);
    }
    if pp == 0 && gp == 0 {
        return Ok(1.0);
    }
    if pp == 0 || gp == 0 || tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / pp as f64;
    let recall = tp as f64 / gp as f64;
    Ok((1.0 + BETA_SQ) * precision * recall / (BETA_SQ * precision + recall))
}

/// All metrics; IoU and Dice use the prediction thresholded at 0.5.
pub fn evaluate(pred: &MaskMap, gt: &MaskMap) -> Result<MetricReport> {
    Ok(MetricReport {
        mae: mae(pred, gt)?,
        f_beta: f_beta_adaptive(pred, gt)?,
        iou: iou(pred, gt)?,
        dice: dice(pred, gt)?,
        threshold_used: adaptive_threshold(pred),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[f64]) -> MaskMap {
        MaskMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn mae_cases() {
        let gt = m(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&m(&[0.0, 1.0, 1.0, 0.0]), &gt).unwrap(), 1.0);
        let pred = MaskMap::new(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let gt = MaskMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mae(&pred, &gt).unwrap(), 0.25);
        assert!(mae(&m(&[0.0]), &gt).is_err());
    }

    #[test]
    fn f_beta_cases() {
        let gt = m(&[1.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(f_beta_adaptive(&gt, &gt).unwrap(), 1.0);
        assert_eq!(f_beta_adaptive(&m(&[0.0; 5]), &gt).unwrap(), 0.0);
        assert_eq!(f_beta_adaptive(&m(&[0.0; 5]), &m(&[0.0; 5])).unwrap(), 1.0);
    }

    #[test]
    fn iou_dice_cases() {
        let a = m(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = m(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // |∩| = 2, |A| = 3, |B| = 4
        let a = m(&[1.0, 1.0, 1.0, 0.0, 0.0]);
        let b = m(&[1.0, 1.0, 0.0, 1.0, 1.0]);
        assert!((iou(&a, &b).unwrap() - 0.4).abs() < 1e-15);
        assert!((dice(&a, &b).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        let empty = m(&[0.0; 3]);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }
}
