//! Composite BCE + soft-IoU objective with closed-form gradients.
//!
//! Both losses are mean/ratio reductions over the full map, computed in
//! f64 so analytic gradients can be checked against central finite
//! differences at 1e-4 relative error.

use crate::error::{Error, Result};
use crate::hsicube::{GroundTruthMask, SaliencyMap};

/// Predictions are clamped into [EPS, 1 - EPS] before the logs.
pub const CLAMP_EPS: f64 = 1e-7;

/// Smoothing constant of the soft-IoU ratio.
pub const IOU_LAMBDA: f64 = 1.0;

/// One composite loss evaluation: value parts and the gradient w.r.t. the
/// prediction map.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub bce: f64,
    pub iou: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// Decoder + final supervision combined.
#[derive(Debug, Clone)]
pub struct TotalLossReport {
    pub dec: LossReport,
    pub fin: LossReport,
    pub total: f64,
}

/// Mean binary cross-entropy and its gradient, on raw slices.
pub fn bce_on_slices(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (s, g) in pred.iter().zip(gt) {
        let s = s.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        loss += -(g * s.ln() + (1.0 - g) * (1.0 - s).ln());
        grad.push((s - g) / (s * (1.0 - s)) / n);
    }
    (loss / n, grad)
}

/// Soft-IoU loss 1 - (I + l) / (U + l) and its gradient, on raw slices.
pub fn iou_on_slices(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut sum_s = 0.0;
    let mut sum_g = 0.0;
    for (s, g) in pred.iter().zip(gt) {
        inter += s * g;
        sum_s += s;
        sum_g += g;
    }
    let union = sum_s + sum_g - inter;
    let num = inter + IOU_LAMBDA;
    let den = union + IOU_LAMBDA;
    let loss = 1.0 - num / den;
    // d/ds_i: dI/ds_i = g_i, dU/ds_i = 1 - g_i
    let grad = gt
        .iter()
        .map(|g| -(g * den - num * (1.0 - g)) / (den * den))
        .collect();
    (loss, grad)
}

fn check_pair(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<()> {
    if pred.channels() != 1 {
        return Err(Error::validation(
            "loss expects a single-channel prediction",
        ));
    }
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::validation(format!(
            "loss shape mismatch: pred {}x{}, gt {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn gt_to_f64(gt: &GroundTruthMask) -> Vec<f64> {
    gt.data().iter().map(|v| *v as f64).collect()
}

pub fn bce_loss(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, gt)?;
    Ok(bce_on_slices(pred.data(), &gt_to_f64(gt)))
}

pub fn iou_loss(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, gt)?;
    Ok(iou_on_slices(pred.data(), &gt_to_f64(gt)))
}

/// BCE + IoU for one prediction map.
pub fn composite_on_slices(pred: &[f64], gt: &[f64]) -> LossReport {
    let (bce, grad_b) = bce_on_slices(pred, gt);
    let (iou, grad_i) = iou_on_slices(pred, gt);
    let grad = grad_b.iter().zip(&grad_i).map(|(a, b)| a + b).collect();
    LossReport {
        bce,
        iou,
        total: bce + iou,
        grad,
    }
}

/// Composite supervision of the enhanced and final maps against the mask.
pub fn total_loss(
    s_d: &SaliencyMap,
    s_f: &SaliencyMap,
    gt: &GroundTruthMask,
) -> Result<TotalLossReport> {
    check_pair(s_d, gt)?;
    check_pair(s_f, gt)?;
    let g = gt_to_f64(gt);
    let dec = composite_on_slices(s_d.data(), &g);
    let fin = composite_on_slices(s_f.data(), &g);
    let total = dec.total + fin.total;
    Ok(TotalLossReport { dec, fin, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use approx::assert_abs_diff_eq;

    fn random_instance(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = DetRng::new(seed, "loss-fixture");
        let pred: Vec<f64> = (0..n).map(|_| rng.uniform(0.1, 0.9)).collect();
        let gt: Vec<f64> = (0..n)
            .map(|_| if rng.next_f64() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        (pred, gt)
    }

    /// Central finite differences of a scalar loss.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let dn = f(&probe);
            probe[i] = x[i];
            grad.push((up - dn) / (2.0 * h));
        }
        grad
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let pred = vec![0.5; 16];
        let gt: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        let (loss, _) = bce_on_slices(&pred, &gt);
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let gt: Vec<f64> = (0..16).map(|i| ((i / 3) % 2) as f64).collect();
        let (loss, _) = bce_on_slices(&gt, &gt);
        // clamping makes the floor -ln(1 - eps) ~ 1e-7
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn iou_frozen_examples() {
        // pred == gt binary: intersection == union, smoothing cancels
        let gt: Vec<f64> = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let (loss, _) = iou_on_slices(&gt, &gt);
        assert_eq!(loss, 0.0);
        // pred all zero against F=4 foreground: 1 - lambda/(F+lambda) = 0.8
        let pred = vec![0.0; 8];
        let gt4: Vec<f64> = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (loss, _) = iou_on_slices(&pred, &gt4);
        assert_abs_diff_eq!(loss, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn iou_loss_in_unit_interval() {
        for seed in 0..50 {
            let (pred, gt) = random_instance(seed, 16);
            let (loss, _) = iou_on_slices(&pred, &gt);
            assert!((0.0..=1.0).contains(&loss));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..100 {
            let (pred, gt) = random_instance(seed, 16);
            let (_, grad_b) = bce_on_slices(&pred, &gt);
            let fd_b = fd_grad(|p| bce_on_slices(p, &gt).0, &pred, h);
            for (a, f) in grad_b.iter().zip(&fd_b) {
                assert!(rel_err(*a, *f) < 1e-4, "bce: {a} vs {f}");
            }
            let (_, grad_i) = iou_on_slices(&pred, &gt);
            let fd_i = fd_grad(|p| iou_on_slices(p, &gt).0, &pred, h);
            for (a, f) in grad_i.iter().zip(&fd_i) {
                assert!(rel_err(*a, *f) < 1e-4, "iou: {a} vs {f}");
            }
        }
    }

    #[test]
    fn bce_is_convex_at_midpoints() {
        for seed in 200..220 {
            let (p1, gt) = random_instance(seed, 16);
            let (p2, _) = random_instance(seed + 1000, 16);
            let mid: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| 0.5 * (a + b)).collect();
            let l1 = bce_on_slices(&p1, &gt).0;
            let l2 = bce_on_slices(&p2, &gt).0;
            let lm = bce_on_slices(&mid, &gt).0;
            assert!(lm <= 0.5 * (l1 + l2) + 1e-12);
        }
    }

    #[test]
    fn total_loss_is_sum_of_four_terms() {
        let (pred_d, gt_raw) = random_instance(7, 16);
        let (pred_f, _) = random_instance(8, 16);
        let gt = GroundTruthMask::new(4, 4, gt_raw.iter().map(|v| *v as u8).collect()).unwrap();
        let s_d = SaliencyMap::new(4, 4, 1, pred_d.clone()).unwrap();
        let s_f = SaliencyMap::new(4, 4, 1, pred_f.clone()).unwrap();
        let report = total_loss(&s_d, &s_f, &gt).unwrap();
        let b_d = bce_on_slices(&pred_d, &gt_raw).0;
        let i_d = iou_on_slices(&pred_d, &gt_raw).0;
        let b_f = bce_on_slices(&pred_f, &gt_raw).0;
        let i_f = iou_on_slices(&pred_f, &gt_raw).0;
        assert_abs_diff_eq!(report.total, b_d + i_d + b_f + i_f, epsilon = 1e-7);
    }

    #[test]
    fn total_loss_symmetry_and_perfection() {
        let gt_raw: Vec<f64> = (0..16).map(|i| ((i / 4) % 2) as f64).collect();
        let gt = GroundTruthMask::new(4, 4, gt_raw.iter().map(|v| *v as u8).collect()).unwrap();
        let (pred, _) = random_instance(3, 16);
        let m = SaliencyMap::new(4, 4, 1, pred).unwrap();
        let report = total_loss(&m, &m, &gt).unwrap();
        assert_abs_diff_eq!(report.dec.total, report.fin.total, epsilon = 0.0);
        assert_abs_diff_eq!(report.total, 2.0 * report.dec.total, epsilon = 1e-12);

        let perfect = SaliencyMap::new(4, 4, 1, gt_raw).unwrap();
        let report = total_loss(&perfect, &perfect, &gt).unwrap();
        assert!(report.total < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let gt = GroundTruthMask::new(4, 4, vec![0; 16]).unwrap();
        let pred = SaliencyMap::new(4, 8, 1, vec![0.5; 32]).unwrap();
        assert!(matches!(
            bce_loss(&pred, &gt),
            Err(crate::Error::Validation(_))
        ));
        assert!(matches!(
            iou_loss(&pred, &gt),
            Err(crate::Error::Validation(_))
        ));
    }

    #[test]
    fn hundred_gd_steps_descend_and_converge() {
        // 16x16 fixture, foreground band rows 4..12. Both maps start near
        // the target; one background pixel of S_f starts badly wrong at 0.9
        // and is still draining at step 100, which keeps the descent strict
        // all the way instead of flat-lining once the bulk saturates.
        let (h, w) = (16, 16);
        let mut gt = vec![0.0f64; h * w];
        for y in 4..12 {
            for x in 0..w {
                gt[y * w + x] = 1.0;
            }
        }
        let mut s_d: Vec<f64> = gt.iter().map(|g| 0.15 + 0.7 * g).collect();
        let mut s_f = s_d.clone();
        s_f[0] = 0.9;
        let step = 0.5;
        let total = |d: &[f64], f: &[f64]| {
            composite_on_slices(d, &gt).total + composite_on_slices(f, &gt).total
        };
        let mut losses = Vec::with_capacity(101);
        losses.push(total(&s_d, &s_f));
        for _ in 0..100 {
            let rd = composite_on_slices(&s_d, &gt);
            let rf = composite_on_slices(&s_f, &gt);
            for (p, g) in s_d.iter_mut().zip(&rd.grad) {
                *p = (*p - step * g).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            }
            for (p, g) in s_f.iter_mut().zip(&rf.grad) {
                *p = (*p - step * g).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            }
            losses.push(total(&s_d, &s_f));
        }
        for i in 5..100 {
            assert!(
                losses[i + 1] < losses[i],
                "loss rose at step {i}: {} -> {}",
                losses[i],
                losses[i + 1]
            );
        }
        assert!(
            *losses.last().unwrap() < 0.05,
            "final loss {}",
            losses.last().unwrap()
        );
    }
}
