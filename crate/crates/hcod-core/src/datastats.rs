//! Mask statistics: object size, boundary complexity, centroid placement,
//! and the tiny-object / complex-edge challenge flags.
//!
//! "Edge" is the 4-connected foreground boundary pixel count; "perimeter"
//! is the pixel count of the foreground bounding-box ring. Solid convex
//! blobs score about 1, fragmented or ragged shapes score higher.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hsicube::GroundTruthMask;

/// Strictly-below threshold for the tiny-object flag.
pub const TINY_AREA_RATIO: f64 = 0.005;
/// Strictly-above threshold for the complex-edge flag.
pub const COMPLEX_EDGE_RATIO: f64 = 0.3;

pub const AREA_HIST_BINS: usize = 20;
pub const EDGE_HIST_BINS: usize = 20;
pub const CENTROID_GRID: usize = 16;

#[derive(Debug, Clone, Serialize)]
pub struct SceneStats {
    pub area_ratio: f64,
    pub edge_perimeter_ratio: f64,
    /// (row_frac, col_frac) in [0, 1]^2.
    pub centroid: (f64, f64),
    pub is_tiny: bool,
    pub is_complex_edge: bool,
}

/// Challenge flags from the two ratios; thresholds are strict per their
/// "below 0.5%" / "exceeding 0.3" definitions.
pub fn classify(area_ratio: f64, edge_perimeter_ratio: f64) -> (bool, bool) {
    (
        area_ratio < TINY_AREA_RATIO,
        edge_perimeter_ratio > COMPLEX_EDGE_RATIO,
    )
}

/// Foreground fraction of the mask.
pub fn area_ratio(mask: &GroundTruthMask) -> f64 {
    mask.foreground_count() as f64 / (mask.height() * mask.width()) as f64
}

/// Count of foreground pixels with a background (or out-of-image)
/// 4-neighbor, divided by the bounding-box ring pixel count.
pub fn edge_perimeter_ratio(mask: &GroundTruthMask) -> Result<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut boundary = 0u64;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
            let edge = (y == 0 || mask.get(y - 1, x) == 0)
                || (y + 1 == h || mask.get(y + 1, x) == 0)
                || (x == 0 || mask.get(y, x - 1) == 0)
                || (x + 1 == w || mask.get(y, x + 1) == 0);
            if edge {
                boundary += 1;
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::validation("edge_perimeter_ratio: empty mask"));
    }
    let bh = y1 - y0 + 1;
    let bw = x1 - x0 + 1;
    let perimeter = if bh == 1 || bw == 1 {
        bh * bw
    } else {
        2 * (bh + bw) - 4
    };
    Ok(boundary as f64 / perimeter as f64)
}

/// Mean foreground coordinates normalized by (H-1, W-1).
pub fn centroid(mask: &GroundTruthMask) -> Result<(f64, f64)> {
    let fg = mask.foreground_count();
    if fg == 0 {
        return Err(Error::validation("centroid: empty mask"));
    }
    let (mut cy, mut cx) = (0.0f64, 0.0f64);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == 1 {
                cy += y as f64;
                cx += x as f64;
            }
        }
    }
    cy /= fg as f64;
    cx /= fg as f64;
    Ok((
        cy / (mask.height() - 1) as f64,
        cx / (mask.width() - 1) as f64,
    ))
}

/// All statistics of one mask.
pub fn scene_stats(mask: &GroundTruthMask) -> Result<SceneStats> {
    let area = area_ratio(mask);
    let edge = edge_perimeter_ratio(mask)?;
    let c = centroid(mask)?;
    let (is_tiny, is_complex_edge) = classify(area, edge);
    Ok(SceneStats {
        area_ratio: area,
        edge_perimeter_ratio: edge,
        centroid: c,
        is_tiny,
        is_complex_edge,
    })
}

/// Histograms plus per-mask stats for a whole mask set.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub stats: Vec<SceneStats>,
    /// 20 log-scale bins over area ratios 1e-4..1.
    pub area_hist: Vec<u64>,
    /// 20 linear bins over edge ratios 0..2 (overflow clamps into the last).
    pub edge_hist: Vec<u64>,
    /// 16x16 centroid occupancy grid, row-major.
    pub centroid_grid: Vec<Vec<u64>>,
}

fn area_bin(ratio: f64) -> usize {
    if ratio <= 1e-4 {
        return 0;
    }
    let t = (ratio.log10() + 4.0) / 4.0; // 1e-4 -> 0, 1 -> 1
    ((t * AREA_HIST_BINS as f64).floor() as usize).min(AREA_HIST_BINS - 1)
}

fn edge_bin(ratio: f64) -> usize {
    ((ratio / 2.0 * EDGE_HIST_BINS as f64).floor() as usize).min(EDGE_HIST_BINS - 1)
}

fn grid_cell(frac: f64) -> usize {
    ((frac * CENTROID_GRID as f64).floor() as usize).min(CENTROID_GRID - 1)
}

pub fn dataset_stats(masks: &[GroundTruthMask]) -> Result<DatasetSummary> {
    if masks.is_empty() {
        return Err(Error::validation("dataset_stats: empty mask list"));
    }
    let stats: Vec<SceneStats> = masks.iter().map(scene_stats).collect::<Result<_>>()?;
    let mut area_hist = vec![0u64; AREA_HIST_BINS];
    let mut edge_hist = vec![0u64; EDGE_HIST_BINS];
    let mut centroid_grid = vec![vec![0u64; CENTROID_GRID]; CENTROID_GRID];
    for s in &stats {
        area_hist[area_bin(s.area_ratio)] += 1;
        edge_hist[edge_bin(s.edge_perimeter_ratio)] += 1;
        centroid_grid[grid_cell(s.centroid.0)][grid_cell(s.centroid.1)] += 1;
    }
    Ok(DatasetSummary {
        stats,
        area_hist,
        edge_hist,
        centroid_grid,
    })
}

impl DatasetSummary {
    /// Per-mask CSV rows.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.stats.len() {
            return Err(Error::validation(format!(
                "csv: {} names for {} rows",
                names.len(),
                self.stats.len()
            )));
        }
        let mut out =
            String::from("mask,area_ratio,edge_perimeter_ratio,centroid_row,centroid_col,is_tiny,is_complex_edge\n");
        for (name, s) in names.iter().zip(&self.stats) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                name,
                s.area_ratio,
                s.edge_perimeter_ratio,
                s.centroid.0,
                s.centroid.1,
                s.is_tiny,
                s.is_complex_edge
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, ObjectShape, SyntheticSceneSpec};
    use approx::assert_abs_diff_eq;

    fn mask(h: usize, w: usize, data: Vec<u8>) -> GroundTruthMask {
        GroundTruthMask::new(h, w, data).unwrap()
    }

    fn rect_mask(
        h: usize,
        w: usize,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    ) -> GroundTruthMask {
        let mut data = vec![0u8; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = 1;
            }
        }
        mask(h, w, data)
    }

    #[test]
    fn area_ratio_examples() {
        assert_eq!(area_ratio(&mask(10, 10, vec![0; 100])), 0.0);
        let m = rect_mask(10, 10, 0, 5, 0, 5);
        assert_abs_diff_eq!(area_ratio(&m), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn synthetic_scene_area_within_contract() {
        let spec = SyntheticSceneSpec {
            seed: 7,
            height: 64,
            width: 64,
            bands: 20,
            object_shape: ObjectShape::Ellipse,
            object_area_ratio: 0.05,
            spectral_contrast: 0.3,
            rgb_matched: false,
        };
        let (_, m) = generate_scene(&spec).unwrap();
        let r = area_ratio(&m);
        assert!((0.045..=0.055).contains(&r), "ratio {r}");
    }

    #[test]
    fn full_frame_ratio_is_one() {
        let m = mask(10, 10, vec![1; 100]);
        // boundary = frame ring = 36; bbox ring = 36
        assert_abs_diff_eq!(edge_perimeter_ratio(&m).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn solid_rectangle_ratio_is_one() {
        let m = rect_mask(10, 12, 3, 7, 2, 8);
        assert_abs_diff_eq!(edge_perimeter_ratio(&m).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_pixel_and_line_masks() {
        let mut data = vec![0u8; 64];
        data[9] = 1;
        assert_abs_diff_eq!(
            edge_perimeter_ratio(&mask(8, 8, data)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let line = rect_mask(8, 8, 2, 3, 1, 6);
        assert_abs_diff_eq!(edge_perimeter_ratio(&line).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fragmented_scores_above_solid() {
        let base = SyntheticSceneSpec {
            seed: 11,
            height: 64,
            width: 64,
            bands: 20,
            object_shape: ObjectShape::Ellipse,
            object_area_ratio: 0.08,
            spectral_contrast: 0.3,
            rgb_matched: false,
        };
        let (_, solid) = generate_scene(&base).unwrap();
        let fragged = SyntheticSceneSpec {
            object_shape: ObjectShape::Fragmented,
            ..base
        };
        let (_, frag) = generate_scene(&fragged).unwrap();
        let rs = edge_perimeter_ratio(&solid).unwrap();
        let rf = edge_perimeter_ratio(&frag).unwrap();
        assert!(rf > rs, "fragmented {rf} <= solid {rs}");
    }

    #[test]
    fn edge_ratio_invariant_under_translation() {
        let a = rect_mask(16, 16, 2, 6, 3, 9);
        let b = rect_mask(16, 16, 8, 12, 6, 12);
        assert_abs_diff_eq!(
            edge_perimeter_ratio(&a).unwrap(),
            edge_perimeter_ratio(&b).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(area_ratio(&a), area_ratio(&b), epsilon = 1e-12);
    }

    #[test]
    fn centroid_examples() {
        let mut data = vec![0u8; 81];
        data[4 * 9 + 4] = 1; // center of 9x9
        assert_eq!(centroid(&mask(9, 9, data)).unwrap(), (0.5, 0.5));

        let mut data = vec![0u8; 64];
        data[0] = 1;
        assert_eq!(centroid(&mask(8, 8, data)).unwrap(), (0.0, 0.0));

        let mut data = vec![0u8; 64];
        data[0] = 1;
        data[63] = 1;
        assert_eq!(centroid(&mask(8, 8, data)).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn centroid_symmetric_under_rotation() {
        let m = rect_mask(16, 16, 2, 6, 3, 9);
        let mut rot = vec![0u8; 256];
        for y in 0..16 {
            for x in 0..16 {
                rot[(15 - y) * 16 + (15 - x)] = m.get(y, x);
            }
        }
        let (r, c) = centroid(&m).unwrap();
        let (rr, rc) = centroid(&mask(16, 16, rot)).unwrap();
        assert_abs_diff_eq!(rr, 1.0 - r, epsilon = 1e-12);
        assert_abs_diff_eq!(rc, 1.0 - c, epsilon = 1e-12);
    }

    #[test]
    fn empty_mask_errors() {
        let m = mask(8, 8, vec![0; 64]);
        assert!(matches!(
            edge_perimeter_ratio(&m),
            Err(crate::Error::Validation(_))
        ));
        assert!(matches!(centroid(&m), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn classification_thresholds_are_strict() {
        assert_eq!(classify(0.005, 0.3), (false, false));
        assert_eq!(classify(0.0049, 0.301), (true, true));
        assert_eq!(classify(0.0051, 0.299), (false, false));
    }

    #[test]
    fn tiny_flag_on_real_masks() {
        // 10 of 2000 pixels = 0.005 exactly: not tiny
        let at = rect_mask(40, 50, 0, 1, 0, 10);
        assert!(!scene_stats(&at).unwrap().is_tiny);
        // 9 of 2000 = 0.0045: tiny
        let below = rect_mask(40, 50, 0, 1, 0, 9);
        assert!(scene_stats(&below).unwrap().is_tiny);
    }

    #[test]
    fn dataset_stats_histograms() {
        let m = rect_mask(16, 16, 4, 8, 4, 8);
        let summary = dataset_stats(std::slice::from_ref(&m)).unwrap();
        assert_eq!(summary.area_hist.iter().sum::<u64>(), 1);
        assert_eq!(summary.area_hist.iter().filter(|v| **v > 0).count(), 1);
        assert_eq!(summary.edge_hist.iter().filter(|v| **v > 0).count(), 1);
        let occupied: u64 = summary.centroid_grid.iter().flatten().sum();
        assert_eq!(occupied, 1);

        // flags recomputed from the stored ratios match the stored flags
        for s in &summary.stats {
            let (tiny, complex) = classify(s.area_ratio, s.edge_perimeter_ratio);
            assert_eq!(tiny, s.is_tiny);
            assert_eq!(complex, s.is_complex_edge);
        }
        assert!(matches!(
            dataset_stats(&[]),
            Err(crate::Error::Validation(_))
        ));
    }

    #[test]
    fn summary_serializes() {
        let m = rect_mask(16, 16, 4, 8, 4, 8);
        let summary = dataset_stats(std::slice::from_ref(&m)).unwrap();
        let json = serde_json::to_string(&summary).unwrap();
        assert!(json.contains("area_hist"));
        let csv = summary.to_csv(&["m0.png".into()]).unwrap();
        assert!(csv.lines().count() == 2);
    }
}
