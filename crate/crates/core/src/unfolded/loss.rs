//! Deeply supervised training loss.
//!
//! Each stage contributes `bce_w + iou_w` on the mask, a Dice loss on the
//! edge map and the reconstruction MSE; stage `k` of `K` is weighted by
//! `1 / 2^(K-k)`.

use crate::error::{invalid, Result};
use crate::tensor::{conv2d, reflect_index, MaskMap, Tape, Tensor, Var};

/// Probability clamp applied before logs.
pub const EPS_P: f64 = 1e-6;
/// Additive smoothing of the weighted IoU and Dice ratios.
pub const SMOOTH: f64 = 1.0;
/// Side of the mean-pool window in the boundary weights.
pub const WEIGHT_POOL: usize = 15;
pub const WEIGHT_GAIN: f64 = 5.0;

/// `1 / 2^(K-k)` for `k = 1..=K`.
pub fn stage_weights(stages: usize) -> Vec<f64> {
    (1..=stages)
        .map(|k| 0.5f64.powi((stages - k) as i32))
        .collect()
}

/// Boundary-emphasis weights `ω = 1 + 5·|meanpool₁₅(GT) − GT|`, with
/// reflect padding so a constant map pools to itself.
pub fn loss_weights(gt: &MaskMap) -> MaskMap {
    let k = Tensor::full(
        &[WEIGHT_POOL, WEIGHT_POOL, 1, 1],
        1.0 / (WEIGHT_POOL * WEIGHT_POOL) as f64,
    );
    let pooled = conv2d(&gt.to_tensor(), &k).expect("valid pooling kernel");
    let data = pooled
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| 1.0 + WEIGHT_GAIN * (p - g).abs())
        .collect();
    MaskMap::raw(gt.height(), gt.width(), data).expect("finite")
}

/// Binary edge map: 3×3 dilation minus 3×3 erosion of the binarised mask.
pub fn edge_ground_truth(gt: &MaskMap) -> MaskMap {
    let (h, w) = (gt.height(), gt.width());
    let mut data = Vec::with_capacity(gt.len());
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut any = false;
            let mut all = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = gt.get(reflect_index(y + dy, h), reflect_index(x + dx, w)) >= 0.5;
                    any |= v;
                    all &= v;
                }
            }
            data.push(if any && !all { 1.0 } else { 0.0 });
        }
    }
    MaskMap::new(h, w, data).expect("binary")
}

/// Weighted BCE and weighted IoU loss of a soft mask against ground truth.
pub fn weighted_loss_terms(m: &MaskMap, gt: &MaskMap) -> Result<(f64, f64)> {
    if !m.same_size(gt) {
        return Err(invalid("mask and ground truth differ in size"));
    }
    let omega = loss_weights(gt);
    let (mut wsum, mut bce, mut inter, mut union) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..m.len() {
        let p = m.data()[i].clamp(EPS_P, 1.0 - EPS_P);
        let g = gt.data()[i];
        let w = omega.data()[i];
        wsum += w;
        bce += w * -(g * p.ln() + (1.0 - g) * (1.0 - p).ln());
        inter += w * p * g;
        union += w * (p + g - p * g);
    }
    Ok((bce / wsum, 1.0 - (inter + SMOOTH) / (union + SMOOTH)))
}

/// `1 − (2Σe·g + s) / (Σe + Σg + s)`.
pub fn dice_loss(e: &MaskMap, gt_edge: &MaskMap) -> Result<f64> {
    if !e.same_size(gt_edge) {
        return Err(invalid("edge map and edge ground truth differ in size"));
    }
    let inter: f64 = e
        .data()
        .iter()
        .zip(gt_edge.data())
        .map(|(a, b)| a * b)
        .sum();
    let total: f64 = e.data().iter().sum::<f64>() + gt_edge.data().iter().sum::<f64>();
    Ok(1.0 - (2.0 * inter + SMOOTH) / (total + SMOOTH))
}

/// Constant tensors a sample's loss needs on the tape.
pub(crate) struct LossTargets {
    pub gt: Tensor,
    pub gt_edge: Tensor,
    pub omega: Tensor,
    pub omega_sum: f64,
    /// `ω·GT` and `ω·(1 − GT)`.
    pub omega_fg: Tensor,
    pub omega_bg: Tensor,
    pub omega_gt_sum: f64,
}

impl LossTargets {
    pub fn new(gt: &MaskMap, gt_edge: &MaskMap) -> Self {
        let omega = loss_weights(gt).to_tensor();
        let g = gt.to_tensor();
        let omega_fg = Tensor::new(
            omega.shape(),
            omega
                .data()
                .iter()
                .zip(g.data())
                .map(|(w, g)| w * g)
                .collect(),
        )
        .expect("shape");
        let omega_bg = Tensor::new(
            omega.shape(),
            omega
                .data()
                .iter()
                .zip(g.data())
                .map(|(w, g)| w * (1.0 - g))
                .collect(),
        )
        .expect("shape");
        Self {
            omega_sum: omega.sum(),
            omega_gt_sum: omega_fg.sum(),
            gt: g,
            gt_edge: gt_edge.to_tensor(),
            omega,
            omega_fg,
            omega_bg,
        }
    }
}

/// Per-stage loss components on the tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StageLossVars {
    pub bce: Var,
    pub iou: Var,
    pub dice: Var,
    pub mse: Var,
    pub total: Var,
}

pub(crate) fn stage_loss(
    tape: &mut Tape,
    m: Var,
    e: Var,
    c_hat: Var,
    c: Var,
    targets: &LossTargets,
) -> Result<StageLossVars> {
    let p = tape.clamp(m, EPS_P, 1.0 - EPS_P);

    // weighted BCE
    let ln_p = tape.ln(p);
    let one_minus = tape.rsub_scalar(1.0, p);
    let ln_q = tape.ln(one_minus);
    let gt = tape.constant(targets.gt.clone());
    let gt_c = tape.constant(targets.gt.map(|g| 1.0 - g));
    let a = tape.mul(gt, ln_p)?;
    let b = tape.mul(gt_c, ln_q)?;
    let ll = tape.add(a, b)?;
    let omega = tape.constant(targets.omega.clone());
    let wll = tape.mul(omega, ll)?;
    let s = tape.sum(wll);
    let bce = tape.scale(s, -1.0 / targets.omega_sum);

    // weighted IoU: union = Σω·m·(1−g) + Σω·g
    let wfg = tape.constant(targets.omega_fg.clone());
    let wbg = tape.constant(targets.omega_bg.clone());
    let i_px = tape.mul(wfg, p)?;
    let inter = tape.sum(i_px);
    let u_px = tape.mul(wbg, p)?;
    let u = tape.sum(u_px);
    let inter_s = tape.add_scalar(inter, SMOOTH);
    let union_s = tape.add_scalar(u, targets.omega_gt_sum + SMOOTH);
    let ratio = tape.safe_div(inter_s, union_s)?;
    let iou = tape.rsub_scalar(1.0, ratio);

    // Dice on the edge head
    let ge = tape.constant(targets.gt_edge.clone());
    let eg = tape.mul(e, ge)?;
    let inter_e = tape.sum(eg);
    let sum_e = tape.sum(e);
    let num = tape.scale(inter_e, 2.0);
    let num = tape.add_scalar(num, SMOOTH);
    let den = tape.add_scalar(sum_e, targets.gt_edge.sum() + SMOOTH);
    let r = tape.safe_div(num, den)?;
    let dice = tape.rsub_scalar(1.0, r);

    // reconstruction
    let d = tape.sub(c_hat, c)?;
    let d2 = tape.square(d);
    let mse = tape.mean(d2);

    let t = tape.add(bce, iou)?;
    let t = tape.add(t, dice)?;
    let total = tape.add(t, mse)?;
    Ok(StageLossVars {
        bce,
        iou,
        dice,
        mse,
        total,
    })
}

/// `Σ_k stage_losses[k] / 2^(K-k)`.
pub fn combine_stage_losses(tape: &mut Tape, stage_losses: &[Var]) -> Result<Var> {
    let weights = stage_weights(stage_losses.len());
    let mut acc: Option<Var> = None;
    for (&l, w) in stage_losses.iter().zip(weights) {
        let term = tape.scale(l, w);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| invalid("no stage losses to combine"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_double_per_stage() {
        assert_eq!(stage_weights(4), vec![0.125, 0.25, 0.5, 1.0]);
        assert_eq!(stage_weights(1), vec![1.0]);
        let w = stage_weights(6);
        assert!(w.windows(2).all(|p| p[1] == 2.0 * p[0]));
    }

    #[test]
    fn constant_gt_gives_unit_weights() {
        for v in [0.0, 1.0] {
            let gt = MaskMap::filled(9, 11, v);
            let w = loss_weights(&gt);
            assert!(w.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn perfect_binary_prediction_has_near_zero_iou_loss() {
        let gt = MaskMap::new(3, 3, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (bce, iou) = weighted_loss_terms(&gt, &gt).unwrap();
        assert!(bce < 2e-6);
        assert!(iou.abs() < 1e-5);
    }

    #[test]
    fn edges_of_a_square() {
        let mut data = vec![0.0; 36];
        for y in 1..5 {
            for x in 1..5 {
                data[y * 6 + x] = 1.0;
            }
        }
        let gt = MaskMap::new(6, 6, data).unwrap();
        let e = edge_ground_truth(&gt);
        // interior 2×2 block is not an edge, border pixels of the frame are
        assert_eq!(e.get(2, 2), 0.0);
        assert_eq!(e.get(1, 1), 1.0);
        assert_eq!(e.get(0, 0), 1.0);
        assert!(edge_ground_truth(&MaskMap::filled(4, 4, 1.0))
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn dice_zero_for_exact_edge_map() {
        let g = MaskMap::new(1, 4, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(dice_loss(&g, &g).unwrap().abs() < 1e-15);
    }
}
