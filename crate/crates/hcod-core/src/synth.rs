//! Seeded synthetic camouflage scenes.
//!
//! Scenes pair a reflectance cube with an exact binary mask. The object is
//! an ellipse, a wobbly blob, or a fragmented blob whose pixel count is
//! tuned by bisection to the requested area ratio. In `rgb_matched` mode
//! the object and background spectra are constructed to have identical
//! CIE-XYZ projections (a metameric pair) while remaining separated in
//! spectral angle, so only the spectral branch can see the object.

use serde::{Deserialize, Serialize};

use crate::cmf::CmfTable;
use crate::error::{Error, Result};
use crate::hsicube::{subsample_indices, GroundTruthMask, HsiCube};
use crate::rng::{coord_noise, DetRng};
use crate::ssdm::sad;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Ellipse,
    Blob,
    Fragmented,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub object_shape: ObjectShape,
    /// Foreground fraction of the image, in (0, 1).
    pub object_area_ratio: f64,
    /// Peak reflectance offset of the object in a band window (ignored in
    /// `rgb_matched` mode, where the offset is a metameric direction).
    pub spectral_contrast: f64,
    /// Force object and background to identical CIE-XYZ projections.
    pub rgb_matched: bool,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.object_area_ratio > 0.0 && self.object_area_ratio < 1.0) {
            return Err(Error::spec(format!(
                "object_area_ratio must lie in (0, 1), got {}",
                self.object_area_ratio
            )));
        }
        if (self.object_area_ratio * (self.height * self.width) as f64) < 1.0 {
            return Err(Error::spec("area ratio leaves no room for a single pixel"));
        }
        if self.spectral_contrast < 0.0 {
            return Err(Error::spec("spectral_contrast must be nonnegative"));
        }
        Ok(())
    }
}

/// Relative tolerance on the produced mask's area ratio.
pub const AREA_TOLERANCE: f64 = 0.10;

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct ObjectGeometry {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    shape: ObjectShape,
    /// Radial wobble harmonics for blob-like shapes: (k, amplitude, phase).
    harmonics: Vec<(f64, f64, f64)>,
}

impl ObjectGeometry {
    fn contains(&self, y: usize, x: usize, scale: f64) -> bool {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        let boundary = match self.shape {
            ObjectShape::Ellipse => scale,
            ObjectShape::Blob | ObjectShape::Fragmented => {
                let phi = v.atan2(u);
                let mut r = 1.0;
                for (k, amp, phase) in &self.harmonics {
                    r += amp * (k * phi + phase).sin();
                }
                scale * r.max(0.2)
            }
        };
        if rho > boundary {
            return false;
        }
        match self.shape {
            ObjectShape::Fragmented => {
                // keep a small core so fragments stay attached to something,
                // drop alternating 2x2 cells elsewhere
                rho <= 0.35 * boundary || ((x / 2) + (y / 2)) % 2 == 0
            }
            _ => true,
        }
    }
}

fn rasterize(geom: &ObjectGeometry, h: usize, w: usize, scale: f64) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if geom.contains(y, x, scale) {
                mask[y * w + x] = 1;
            }
        }
    }
    mask
}

/// Bisect the shape scale until the rasterized pixel count lands near the
/// target. Pixel count is monotone in the scale.
fn fit_scale(geom: &ObjectGeometry, h: usize, w: usize, target: usize) -> Result<Vec<u8>> {
    let count = |s: f64| rasterize(geom, h, w, s).iter().filter(|v| **v == 1).count();
    let mut lo = 0.05;
    let mut hi = 4.0;
    let mut best_s = 1.0;
    let mut best_err = usize::MAX;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let n = count(mid);
        let err = n.abs_diff(target);
        if err < best_err {
            best_err = err;
            best_s = mid;
        }
        if n < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let allowed = (AREA_TOLERANCE * target as f64).floor() as usize;
    if best_err > allowed {
        return Err(Error::spec(format!(
            "cannot reach {target} foreground pixels (best miss {best_err})"
        )));
    }
    Ok(rasterize(geom, h, w, best_s))
}

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

fn smooth_background(rng: &mut DetRng, bands: usize) -> Vec<f64> {
    let base = rng.uniform(0.3, 0.5);
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.uniform(1.0, 3.0),
                rng.uniform(0.02, 0.08),
                rng.uniform(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    (0..bands)
        .map(|i| {
            let t = i as f64 / (bands - 1) as f64;
            let mut v = base;
            for (f, a, p) in &waves {
                v += a * (std::f64::consts::TAU * f * t + p).sin();
            }
            v.clamp(0.05, 0.95)
        })
        .collect()
}

/// Orthonormal basis of the span of the XYZ weight rows, over both the full
/// band set and the uniform subsample used by the color mapping. A vector
/// orthogonal to all basis rows shifts a spectrum without moving either
/// projection.
fn xyz_constraint_basis(wavelengths: &[f32], cmf: &CmfTable) -> Vec<Vec<f64>> {
    let c = wavelengths.len();
    let sub = subsample_indices(c, 33.min(c)).expect("valid subsample");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(6);
    for t in 0..3 {
        rows.push(
            wavelengths
                .iter()
                .map(|w| cmf.weights_at(*w as f64)[t])
                .collect(),
        );
    }
    for t in 0..3 {
        let mut row = vec![0.0; c];
        for &i in &sub {
            row[i] = cmf.weights_at(wavelengths[i] as f64)[t];
        }
        rows.push(row);
    }
    // Gram-Schmidt, dropping near-dependent rows
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut row in rows {
        for q in &basis {
            let d: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
            for (r, qv) in row.iter_mut().zip(q) {
                *r -= d * qv;
            }
        }
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for r in &mut row {
                *r /= norm;
            }
            basis.push(row);
        }
    }
    basis
}

/// Metameric partner of `background`: equal XYZ projection, spectral angle
/// above 0.05 rad, all values inside (0, 1).
fn metameric_object(
    rng: &mut DetRng,
    background: &[f64],
    wavelengths: &[f32],
    cmf: &CmfTable,
) -> Result<Vec<f64>> {
    let c = background.len();
    let basis = xyz_constraint_basis(wavelengths, cmf);
    for _attempt in 0..16 {
        let freq = rng.uniform(2.0, (c as f64 / 2.0).max(3.0));
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let mut dir: Vec<f64> = (0..c)
            .map(|i| {
                let t = i as f64 / (c - 1) as f64;
                (std::f64::consts::TAU * freq * t + phase).sin()
            })
            .collect();
        for q in &basis {
            let d: f64 = dir.iter().zip(q).map(|(a, b)| a * b).sum();
            for (v, qv) in dir.iter_mut().zip(q) {
                *v -= d * qv;
            }
        }
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for v in &mut dir {
            *v /= norm;
        }
        // largest step keeping the object spectrum inside (0.02, 0.98)
        let mut s_max = f64::INFINITY;
        for (b, d) in background.iter().zip(&dir) {
            if d.abs() > 1e-12 {
                let room = if *d > 0.0 { 0.98 - b } else { b - 0.02 };
                s_max = s_max.min(room / d.abs());
            }
        }
        if !s_max.is_finite() || s_max <= 0.0 {
            continue;
        }
        let object: Vec<f64> = background
            .iter()
            .zip(&dir)
            .map(|(b, d)| b + 0.9 * s_max * d)
            .collect();
        if sad(background, &object)? > 0.05 {
            return Ok(object);
        }
    }
    Err(Error::spec(
        "could not construct a metameric object spectrum for this band layout",
    ))
}

fn contrast_object(rng: &mut DetRng, background: &[f64], contrast: f64) -> Vec<f64> {
    let c = background.len();
    let center = rng.uniform(0.25 * c as f64, 0.75 * c as f64);
    let sigma = c as f64 / 10.0;
    background
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let bump = (-(i as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp();
            (b + contrast * bump).clamp(0.01, 0.99)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scene assembly
// ---------------------------------------------------------------------------

/// Generate a deterministic scene from a spec.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<(HsiCube, GroundTruthMask)> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    // delegate min-dimension checks to the cube constructor at the end,
    // but geometry needs them now
    if h < 8 || w < 8 || c < 4 {
        return Err(Error::spec(format!(
            "scene must be at least 8x8x4, got {h}x{w}x{c}"
        )));
    }

    let mut shape_rng = DetRng::new(spec.seed, "scene-shape");
    let target = (spec.object_area_ratio * (h * w) as f64).round().max(1.0) as usize;
    let aspect = shape_rng.uniform(0.6, 1.6);
    let base = (target as f64 / (std::f64::consts::PI * aspect)).sqrt();
    let geom = ObjectGeometry {
        cy: shape_rng.uniform(0.35, 0.65) * h as f64,
        cx: shape_rng.uniform(0.35, 0.65) * w as f64,
        a: base * aspect,
        b: base,
        theta: shape_rng.uniform(0.0, std::f64::consts::PI),
        shape: spec.object_shape,
        harmonics: (2..6)
            .map(|k| {
                (
                    k as f64,
                    shape_rng.uniform(0.0, 0.15),
                    shape_rng.uniform(0.0, std::f64::consts::TAU),
                )
            })
            .collect(),
    };
    let mask_data = fit_scale(&geom, h, w, target)?;

    let wavelengths: Vec<f32> = (0..c)
        .map(|i| (400.0 + 600.0 * i as f64 / (c - 1) as f64) as f32)
        .collect();
    let mut spec_rng = DetRng::new(spec.seed, "scene-spectra");
    let background = smooth_background(&mut spec_rng, c);
    let cmf = CmfTable::cie_1931_2deg();
    let object = if spec.rgb_matched {
        metameric_object(&mut spec_rng, &background, &wavelengths, &cmf)?
    } else {
        contrast_object(&mut spec_rng, &background, spec.spectral_contrast)
    };

    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let spectrum = if mask_data[y * w + x] == 1 {
                &object
            } else {
                &background
            };
            if spec.rgb_matched {
                // exact spectra: any per-pixel factor would break metamerism
                data.extend(spectrum.iter().map(|v| *v as f32));
            } else {
                let eta = coord_noise(spec.seed, "scene-texture", x as u64, y as u64);
                let gain = 1.0 + 0.05 * (2.0 * eta - 1.0);
                data.extend(spectrum.iter().map(|v| (v * gain).clamp(0.0, 1.0) as f32));
            }
        }
    }

    let cube = HsiCube::new(h, w, c, wavelengths, data)?;
    let mask = GroundTruthMask::new(h, w, mask_data)?;
    Ok((cube, mask))
}
