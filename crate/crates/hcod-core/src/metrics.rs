//! COD evaluation measures: MAE, adaptive F-measure, E-measure, S-measure.
//!
//! Definitions are encoded fully here so no external reference is needed:
//!
//! * MAE: mean |s - g|.
//! * Adp-F: binarize at t = min(2*mean(pred), 1) (inclusive >=), then
//!   F = (1+b2) P R / (b2 P + R) with b2 = 0.3. An empty binarization or
//!   empty ground truth scores 0 unless both are empty, which scores 1.
//! * E: same binarization; bias maps phi_S = bin - mean(bin) and
//!   phi_G = g - mean(g); alignment xi = 2 phi_S phi_G / (phi_S^2 +
//!   phi_G^2 + eps); E = mean((1 + xi)^2 / 4). Degenerate all-zero gt
//!   scores 1 - mean(bin); all-one gt scores mean(bin).
//! * S: alpha * S_object + (1-alpha) * S_region with alpha = 0.5, clamped
//!   to [0, 1]. S_object mixes 2x/(x^2+1+2s) scores of the prediction on
//!   the foreground and its complement on the background. S_region splits
//!   both maps into four blocks at the ground-truth centroid, scores each
//!   with (2 x y/(x^2+y^2+eps)) * (2 cov/(var_x+var_y+eps)) and weights
//!   blocks by their share of the foreground. Degenerate all-zero gt
//!   scores 1 - mean(pred); all-one gt scores mean(pred).

use crate::error::{Error, Result};
use crate::hsicube::{GroundTruthMask, SaliencyMap};

pub const FMEASURE_BETA2: f64 = 0.3;
pub const SMEASURE_ALPHA: f64 = 0.5;
const EPS: f64 = 1e-8;

/// Per-image and aggregate metric values.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mae: f64,
    pub adp_f: f64,
    pub e_measure: f64,
    pub s_measure: f64,
    /// Per image: [mae, adp_f, e, s].
    pub per_image: Vec<[f64; 4]>,
}

impl MetricReport {
    /// CSV with one row per image plus a MEAN row, 6-decimal values.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.per_image.len() {
            return Err(Error::validation(format!(
                "csv: {} names for {} rows",
                names.len(),
                self.per_image.len()
            )));
        }
        let mut out = String::from("image,mae,adp_f,e,s\n");
        for (name, row) in names.iter().zip(&self.per_image) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                name, row[0], row[1], row[2], row[3]
            ));
        }
        out.push_str(&format!(
            "MEAN,{:.6},{:.6},{:.6},{:.6}\n",
            self.mae, self.adp_f, self.e_measure, self.s_measure
        ));
        Ok(out)
    }
}

fn check_pair(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<()> {
    if pred.channels() != 1 {
        return Err(Error::validation(
            "metrics expect a single-channel prediction",
        ));
    }
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::validation(format!(
            "metric shape mismatch: pred {}x{}, gt {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Slice-level implementations
// ---------------------------------------------------------------------------

pub fn mae_on_slices(pred: &[f64], gt: &[u8]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(s, g)| (s - *g as f64).abs())
        .sum::<f64>()
        / n
}

/// Adaptive binarization threshold: min(2 * mean, 1).
pub fn adaptive_threshold(pred: &[f64]) -> f64 {
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    (2.0 * mean).min(1.0)
}

fn binarize(pred: &[f64]) -> Vec<u8> {
    let t = adaptive_threshold(pred);
    pred.iter().map(|s| u8::from(*s >= t)).collect()
}

pub fn adaptive_fmeasure_on_slices(pred: &[f64], gt: &[u8]) -> f64 {
    let bin = binarize(pred);
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (b, g) in bin.iter().zip(gt) {
        match (b, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    let pred_empty = tp + fp == 0;
    let gt_empty = tp + fneg == 0;
    if pred_empty && gt_empty {
        return 1.0;
    }
    if pred_empty || gt_empty || tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fneg) as f64;
    (1.0 + FMEASURE_BETA2) * p * r / (FMEASURE_BETA2 * p + r)
}

pub fn e_measure_on_slices(pred: &[f64], gt: &[u8]) -> f64 {
    let bin = binarize(pred);
    let n = pred.len() as f64;
    let bin_mean = bin.iter().map(|v| *v as f64).sum::<f64>() / n;
    let gt_sum: u64 = gt.iter().map(|v| *v as u64).sum();
    if gt_sum == 0 {
        return 1.0 - bin_mean;
    }
    if gt_sum == pred.len() as u64 {
        return bin_mean;
    }
    let gt_mean = gt_sum as f64 / n;
    let mut acc = 0.0;
    for (b, g) in bin.iter().zip(gt) {
        let phi_s = *b as f64 - bin_mean;
        let phi_g = *g as f64 - gt_mean;
        let xi = 2.0 * phi_s * phi_g / (phi_s * phi_s + phi_g * phi_g + EPS);
        acc += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    acc / n
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    let (mean, std) = mean_std(values);
    2.0 * mean / (mean * mean + 1.0 + 2.0 * std)
}

/// SSIM-style block similarity of pred/gt blocks.
fn region_similarity(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        var_x += (p - x) * (p - x);
        var_y += (g - y) * (g - y);
        cov += (p - x) * (g - y);
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    (2.0 * x * y / (x * x + y * y + EPS)) * (2.0 * cov / (var_x + var_y + EPS))
}

pub fn s_measure_on_slices(pred: &[f64], gt: &[u8], h: usize, w: usize) -> f64 {
    let n = (h * w) as f64;
    let gt_sum: u64 = gt.iter().map(|v| *v as u64).sum();
    let pred_mean = pred.iter().sum::<f64>() / n;
    if gt_sum == 0 {
        return 1.0 - pred_mean;
    }
    if gt_sum == (h * w) as u64 {
        return pred_mean;
    }
    let mu = gt_sum as f64 / n;

    // object-aware term
    let fg: Vec<f64> = (0..pred.len())
        .filter(|i| gt[*i] == 1)
        .map(|i| pred[i])
        .collect();
    let bg: Vec<f64> = (0..pred.len())
        .filter(|i| gt[*i] == 0)
        .map(|i| 1.0 - pred[i])
        .collect();
    let s_object = mu * object_score(&fg) + (1.0 - mu) * object_score(&bg);

    // region-aware term: split at the foreground centroid
    let mut cy = 0.0;
    let mut cx = 0.0;
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] == 1 {
                cy += y as f64;
                cx += x as f64;
            }
        }
    }
    cy /= gt_sum as f64;
    cx /= gt_sum as f64;
    let r0 = (cy.round() as usize).clamp(1, h - 1);
    let c0 = (cx.round() as usize).clamp(1, w - 1);

    let mut s_region = 0.0;
    for (rows, cols) in [
        (0..r0, 0..c0),
        (0..r0, c0..w),
        (r0..h, 0..c0),
        (r0..h, c0..w),
    ] {
        let mut block_pred = Vec::new();
        let mut block_gt = Vec::new();
        let mut fg_in_block = 0u64;
        for y in rows.clone() {
            for x in cols.clone() {
                block_pred.push(pred[y * w + x]);
                block_gt.push(gt[y * w + x] as f64);
                fg_in_block += gt[y * w + x] as u64;
            }
        }
        let weight = fg_in_block as f64 / gt_sum as f64;
        s_region += weight * region_similarity(&block_pred, &block_gt);
    }

    (SMEASURE_ALPHA * s_object + (1.0 - SMEASURE_ALPHA) * s_region).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Public map-level API
// ---------------------------------------------------------------------------

pub fn mae(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mae_on_slices(pred.data(), gt.data()))
}

pub fn adaptive_fmeasure(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(adaptive_fmeasure_on_slices(pred.data(), gt.data()))
}

pub fn e_measure(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(e_measure_on_slices(pred.data(), gt.data()))
}

pub fn s_measure(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(s_measure_on_slices(
        pred.data(),
        gt.data(),
        pred.height(),
        pred.width(),
    ))
}

/// All four measures for one pair.
pub fn evaluate_pair(pred: &SaliencyMap, gt: &GroundTruthMask) -> Result<[f64; 4]> {
    Ok([
        mae(pred, gt)?,
        adaptive_fmeasure(pred, gt)?,
        e_measure(pred, gt)?,
        s_measure(pred, gt)?,
    ])
}

/// Per-image metrics plus arithmetic means.
pub fn evaluate_dataset(pairs: &[(SaliencyMap, GroundTruthMask)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::validation("evaluate_dataset: empty pair list"));
    }
    let per_image: Vec<[f64; 4]> = pairs
        .iter()
        .map(|(p, g)| evaluate_pair(p, g))
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let mut sums = [0.0; 4];
    for row in &per_image {
        for k in 0..4 {
            sums[k] += row[k];
        }
    }
    Ok(MetricReport {
        mae: sums[0] / n,
        adp_f: sums[1] / n,
        e_measure: sums[2] / n,
        s_measure: sums[3] / n,
        per_image,
    })
}
