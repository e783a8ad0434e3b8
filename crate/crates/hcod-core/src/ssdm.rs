//! Spectral-Spatial Decomposition: CIE-XYZ spatial image and pyramid-SAD
//! spectral saliency prompt.
//!
//! The spatial branch projects the cube onto the color matching functions
//! over a uniform band subsample. The spectral branch builds a per-band
//! Gaussian pyramid and measures, at selected levels, the spectral angle
//! between each pixel's spectrum and the spectrum of the same location
//! three levels deeper, a scale-contrast signal that survives metamerism.

use crate::cmf::CmfTable;
use crate::error::{Error, Result};
use crate::hsicube::{subsample_indices, HsiCube, SaliencyMap};

/// Tristimulus image. `data` is globally rescaled to [0, 1]; the raw
/// weighted sums are kept alongside because linearity properties and the
/// metamerism checks are stated on them.
#[derive(Debug, Clone, PartialEq)]
pub struct XyzImage {
    height: usize,
    width: usize,
    /// Interleaved (y, x, ch), ch in {X, Y, Z}; normalized to [0, 1].
    data: Vec<f64>,
    /// Raw weighted sums, same layout.
    raw: Vec<f64>,
    raw_max: f64,
}

impl XyzImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn raw_data(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_max(&self) -> f64 {
        self.raw_max
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + ch]
    }

    #[inline]
    pub fn raw_at(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.raw[i], self.raw[i + 1], self.raw[i + 2]]
    }
}

/// Gaussian pyramid configuration for the spectral saliency generator.
///
/// `levels` is the deepest level index; the pyramid holds `levels + 1`
/// stacks including the base. Saliency is read at `used_levels`, each
/// compared against the level `level_gap` deeper.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PyramidConfig {
    pub levels: usize,
    pub level_gap: usize,
    pub used_levels: Vec<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            levels: 7,
            level_gap: 3,
            used_levels: vec![2, 3, 4],
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.used_levels.is_empty() {
            return Err(Error::validation("pyramid: used_levels must be nonempty"));
        }
        if self.level_gap == 0 {
            return Err(Error::validation("pyramid: level_gap must be at least 1"));
        }
        let max_used = *self.used_levels.iter().max().unwrap();
        if self.levels < max_used + self.level_gap {
            return Err(Error::validation(format!(
                "pyramid: levels {} cannot serve level {} with gap {}",
                self.levels, max_used, self.level_gap
            )));
        }
        Ok(())
    }

    /// Smallest spatial extent the cube must have: every used level keeps a
    /// at least 2x2 grid. Deeper comparison levels may shrink to 1x1 (a
    /// global average spectrum), which stays well defined.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let max_used = *self.used_levels.iter().max().unwrap();
        let (h, w) = level_dims(height, width, max_used);
        if h < 2 || w < 2 {
            return Err(Error::validation(format!(
                "cube {height}x{width} too small: level {max_used} would be {h}x{w}"
            )));
        }
        Ok(())
    }
}

/// Dimensions of pyramid level `level`: ceil(H / 2^level) x ceil(W / 2^level).
pub fn level_dims(height: usize, width: usize, level: usize) -> (usize, usize) {
    let d = 1usize << level;
    (height.div_ceil(d), width.div_ceil(d))
}

// ---------------------------------------------------------------------------
// Color space mapping
// ---------------------------------------------------------------------------

/// Project a cube onto the CIE XYZ color matching functions over `n_bands`
/// uniformly subsampled bands (clamped to the cube's band count).
pub fn map_to_ciexyz(cube: &HsiCube, cmf: &CmfTable, n_bands: usize) -> Result<XyzImage> {
    let n = n_bands.min(cube.bands()).max(1);
    let idx = subsample_indices(cube.bands(), n)?;
    let (lo, hi) = cmf.support();
    let w_min = cube.wavelengths_nm()[0] as f64;
    let w_max = *cube.wavelengths_nm().last().unwrap() as f64;
    if w_max < lo || w_min > hi {
        return Err(Error::validation(format!(
            "cube spectrum {w_min}-{w_max} nm does not overlap cmf support {lo}-{hi} nm"
        )));
    }
    let weights: Vec<[f64; 3]> = idx
        .iter()
        .map(|&i| cmf.weights_at(cube.wavelengths_nm()[i] as f64))
        .collect();

    let (h, w) = (cube.height(), cube.width());
    let mut raw = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let spec = cube.spectrum(y, x);
            let mut acc = [0.0f64; 3];
            for (k, &band) in idx.iter().enumerate() {
                let v = spec[band] as f64;
                acc[0] += v * weights[k][0];
                acc[1] += v * weights[k][1];
                acc[2] += v * weights[k][2];
            }
            let base = (y * w + x) * 3;
            raw[base] = acc[0];
            raw[base + 1] = acc[1];
            raw[base + 2] = acc[2];
        }
    }
    let raw_max = raw.iter().cloned().fold(0.0f64, f64::max);
    let data = if raw_max > 0.0 {
        raw.iter().map(|v| v / raw_max).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(XyzImage {
        height: h,
        width: w,
        data,
        raw,
        raw_max,
    })
}

// ---------------------------------------------------------------------------
// Spectral angle
// ---------------------------------------------------------------------------

const NORM_EPS: f64 = 1e-12;

/// Spectral angular distance in radians, in [0, pi].
///
/// Computed as 2*atan2(|u - v|, |u + v|) on the normalized spectra rather
/// than acos of the clamped cosine: the two are algebraically equal, but
/// acos loses half the significand near parallel vectors and cannot meet
/// the 1e-9 contract on sad(v, v).
pub fn sad(v1: &[f64], v2: &[f64]) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::validation(format!(
            "sad: length mismatch {} vs {}",
            v1.len(),
            v2.len()
        )));
    }
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for (a, b) in v1.iter().zip(v2) {
        n1 += a * a;
        n2 += b * b;
    }
    let n1 = n1.sqrt();
    let n2 = n2.sqrt();
    if n1 <= NORM_EPS {
        return Err(Error::DegenerateSpectrum(n1));
    }
    if n2 <= NORM_EPS {
        return Err(Error::DegenerateSpectrum(n2));
    }
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (a, b) in v1.iter().zip(v2) {
        let ua = a / n1;
        let ub = b / n2;
        diff += (ua - ub) * (ua - ub);
        sum += (ua + ub) * (ua + ub);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// As [`sad`], but degenerate spectra count as "no material evidence": 0.
fn sad_or_zero(v1: &[f64], v2: &[f64]) -> f64 {
    match sad(v1, v2) {
        Ok(a) => a,
        Err(Error::DegenerateSpectrum(_)) => 0.0,
        Err(_) => unreachable!("lengths are equal by construction"),
    }
}

// ---------------------------------------------------------------------------
// Gaussian pyramid
// ---------------------------------------------------------------------------

/// One pyramid level: per-band planes of identical extent.
struct LevelStack {
    h: usize,
    w: usize,
    planes: Vec<Vec<f64>>,
}

impl LevelStack {
    fn spectrum_at(&self, y: usize, x: usize, out: &mut [f64]) {
        let i = y * self.w + x;
        for (b, plane) in self.planes.iter().enumerate() {
            out[b] = plane[i];
        }
    }
}

/// 5-tap binomial blur [1,4,6,4,1]/16, separable, replicate padding.
fn blur5(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let xx = clamp(x as isize + k as isize - 2, w);
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let yy = clamp(y as isize + k as isize - 2, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Keep even-index pixels; output dims are ceil(n/2).
fn decimate(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out.push(plane[y * w + x]);
        }
    }
    (out, oh, ow)
}

/// Bilinear resize with endpoint-aligned coordinate mapping.
fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let map = |d: usize, dn: usize, sn: usize| -> f64 {
        if dn <= 1 || sn <= 1 {
            0.0
        } else {
            d as f64 * (sn - 1) as f64 / (dn - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let fy = map(y, dh, sh);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = map(x, dw, sw);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let v00 = src[y0 * sw + x0];
            let v01 = src[y0 * sw + x1];
            let v10 = src[y1 * sw + x0];
            let v11 = src[y1 * sw + x1];
            let top = v00 + tx * (v01 - v00);
            let bot = v10 + tx * (v11 - v10);
            out.push(top + ty * (bot - top));
        }
    }
    out
}

fn build_pyramid(cube: &HsiCube, levels: usize) -> Vec<LevelStack> {
    let bands = cube.bands();
    let (h, w) = (cube.height(), cube.width());
    let mut base_planes = vec![vec![0.0f64; h * w]; bands];
    for y in 0..h {
        for x in 0..w {
            let spec = cube.spectrum(y, x);
            for b in 0..bands {
                base_planes[b][y * w + x] = spec[b] as f64;
            }
        }
    }
    let mut pyramid = vec![LevelStack {
        h,
        w,
        planes: base_planes,
    }];
    for _ in 0..levels {
        let prev = pyramid.last().unwrap();
        let mut planes = Vec::with_capacity(bands);
        let (mut nh, mut nw) = (prev.h, prev.w);
        for plane in &prev.planes {
            let blurred = blur5(plane, prev.h, prev.w);
            let (dec, oh, ow) = decimate(&blurred, prev.h, prev.w);
            nh = oh;
            nw = ow;
            planes.push(dec);
        }
        pyramid.push(LevelStack {
            h: nh,
            w: nw,
            planes,
        });
    }
    pyramid
}

// ---------------------------------------------------------------------------
// Spectral saliency
// ---------------------------------------------------------------------------

/// Per-level SAD saliency, one channel per used level, each min-max
/// normalized to [0, 1] over the full image (a constant map becomes zeros).
pub fn spectral_saliency(cube: &HsiCube, cfg: &PyramidConfig) -> Result<SaliencyMap> {
    cfg.validate()?;
    cfg.check_extent(cube.height(), cube.width())?;
    let (h, w) = (cube.height(), cube.width());
    let bands = cube.bands();
    let pyramid = build_pyramid(cube, cfg.levels);

    let n_ch = cfg.used_levels.len();
    let mut out = vec![0.0f64; h * w * n_ch];
    let mut v1 = vec![0.0f64; bands];
    let mut v2 = vec![0.0f64; bands];
    for (ch, &c) in cfg.used_levels.iter().enumerate() {
        let fine = &pyramid[c];
        let coarse = &pyramid[c + cfg.level_gap];
        // upsample the coarse level to the fine grid, band by band
        let up: Vec<Vec<f64>> = coarse
            .planes
            .iter()
            .map(|p| bilinear_resize(p, coarse.h, coarse.w, fine.h, fine.w))
            .collect();
        let mut level_map = vec![0.0f64; fine.h * fine.w];
        for y in 0..fine.h {
            for x in 0..fine.w {
                fine.spectrum_at(y, x, &mut v1);
                let i = y * fine.w + x;
                for (b, plane) in up.iter().enumerate() {
                    v2[b] = plane[i];
                }
                level_map[i] = sad_or_zero(&v1, &v2);
            }
        }
        let full = bilinear_resize(&level_map, fine.h, fine.w, h, w);
        // sequential min/max pass keeps normalization order-independent
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &full {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for (i, &v) in full.iter().enumerate() {
            out[i * n_ch + ch] = if range > 0.0 { (v - lo) / range } else { 0.0 };
        }
    }
    SaliencyMap::new(h, w, n_ch, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn cube_with(
        h: usize,
        w: usize,
        wavelengths: Vec<f32>,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> HsiCube {
        let c = wavelengths.len();
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for b in 0..c {
                    data.push(f(y, x, b));
                }
            }
        }
        HsiCube::new(h, w, c, wavelengths, data).unwrap()
    }

    fn random_cube(seed: u64, h: usize, w: usize, c: usize) -> HsiCube {
        let mut rng = DetRng::new(seed, "ssdm-cube");
        let wl: Vec<f32> = (0..c)
            .map(|i| 400.0 + 600.0 * i as f32 / (c - 1) as f32)
            .collect();
        let data: Vec<f32> = (0..h * w * c)
            .map(|_| 0.05 + 0.9 * rng.next_f64() as f32)
            .collect();
        HsiCube::new(h, w, c, wl, data).unwrap()
    }

    #[test]
    fn sad_basic_identities() {
        let v = vec![0.3, 0.7, 0.2];
        assert_abs_diff_eq!(sad(&v, &v).unwrap(), 0.0, epsilon = 1e-12);
        let scaled: Vec<f64> = v.iter().map(|x| 3.5 * x).collect();
        assert_abs_diff_eq!(sad(&v, &scaled).unwrap(), 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(
            sad(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            FRAC_PI_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            sad(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            FRAC_PI_4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sad_rejects_degenerate_and_mismatched() {
        assert!(matches!(
            sad(&[0.0, 0.0], &[1.0, 0.0]),
            Err(crate::Error::DegenerateSpectrum(_))
        ));
        assert!(matches!(
            sad(&[1.0], &[1.0, 0.0]),
            Err(crate::Error::Validation(_))
        ));
    }

    #[test]
    fn sad_symmetric_bounded_scale_invariant() {
        let mut rng = DetRng::new(11, "sad-prop");
        for _ in 0..1000 {
            let n = 2 + rng.below(12) as usize;
            let a: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            if a.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-6 {
                continue;
            }
            if b.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-6 {
                continue;
            }
            let ab = sad(&a, &b).unwrap();
            let ba = sad(&b, &a).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-9);
            assert!((0.0..=PI).contains(&ab));
            let k = rng.uniform(0.1, 10.0);
            let ka: Vec<f64> = a.iter().map(|x| k * x).collect();
            assert_abs_diff_eq!(sad(&ka, &b).unwrap(), ab, epsilon = 1e-9);
            assert_abs_diff_eq!(sad(&a, &a).unwrap(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn xyz_constant_cube_sums_weights() {
        let wl = vec![450.0f32, 550.0, 650.0, 750.0];
        let cube = cube_with(8, 8, wl.clone(), |_, _, _| 1.0);
        let cmf = CmfTable::cie_1931_2deg();
        let img = map_to_ciexyz(&cube, &cmf, 33).unwrap();
        // oracle: direct sum of the interpolated weights over all bands
        let mut expect = [0.0f64; 3];
        for w in &wl {
            let ws = cmf.weights_at(*w as f64);
            for t in 0..3 {
                expect[t] += ws[t];
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                let raw = img.raw_at(y, x);
                for t in 0..3 {
                    assert_abs_diff_eq!(raw[t], expect[t], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn xyz_unit_spike_reads_cmf_row() {
        let wl = vec![450.0f32, 550.0, 650.0, 750.0];
        let cube = cube_with(8, 8, wl, |_, _, b| if b == 1 { 1.0 } else { 0.0 });
        let cmf = CmfTable::cie_1931_2deg();
        let img = map_to_ciexyz(&cube, &cmf, 33).unwrap();
        let expect = cmf.weights_at(550.0);
        let raw = img.raw_at(3, 5);
        for t in 0..3 {
            assert_abs_diff_eq!(raw[t], expect[t], epsilon = 1e-12);
        }
    }

    #[test]
    fn xyz_homogeneous_in_cube() {
        let cube = random_cube(5, 8, 8, 6);
        let cmf = CmfTable::cie_1931_2deg();
        let a = map_to_ciexyz(&cube, &cmf, 33).unwrap();
        let b = map_to_ciexyz(&cube.scaled(2.0), &cmf, 33).unwrap();
        for (x, y) in a.raw_data().iter().zip(b.raw_data()) {
            assert_eq!(2.0 * x, *y); // power-of-two scaling is exact
        }
    }

    #[test]
    fn xyz_additive_in_cube() {
        let c1 = random_cube(6, 8, 8, 6);
        let c2 = random_cube(7, 8, 8, 6);
        let sum_data: Vec<f32> = c1
            .data()
            .iter()
            .zip(c2.data())
            .map(|(a, b)| a + b)
            .collect();
        let cs = HsiCube::new(8, 8, 6, c1.wavelengths_nm().to_vec(), sum_data).unwrap();
        let cmf = CmfTable::cie_1931_2deg();
        let ra = map_to_ciexyz(&c1, &cmf, 33).unwrap();
        let rb = map_to_ciexyz(&c2, &cmf, 33).unwrap();
        let rs = map_to_ciexyz(&cs, &cmf, 33).unwrap();
        for i in 0..rs.raw_data().len() {
            assert_abs_diff_eq!(
                rs.raw_data()[i],
                ra.raw_data()[i] + rb.raw_data()[i],
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn xyz_requires_spectral_overlap() {
        let cube = cube_with(8, 8, vec![800.0, 866.0, 933.0, 1000.0], |_, _, _| 0.5);
        let cmf = CmfTable::cie_1931_2deg();
        assert!(matches!(
            map_to_ciexyz(&cube, &cmf, 33),
            Err(crate::Error::Validation(_))
        ));
    }

    #[test]
    fn saliency_constant_cube_is_exactly_zero() {
        let cube = cube_with(64, 64, vec![450.0, 550.0, 650.0, 750.0], |_, _, b| {
            0.1 + 0.2 * b as f32
        });
        let sal = spectral_saliency(&cube, &PyramidConfig::default()).unwrap();
        assert!(sal.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saliency_scale_invariance() {
        let cube = random_cube(9, 64, 48, 8);
        let cfg = PyramidConfig::default();
        let a = spectral_saliency(&cube, &cfg).unwrap();
        // power-of-two scaling propagates exactly
        let b = spectral_saliency(&cube.scaled(2.0), &cfg).unwrap();
        assert_eq!(a, b);
        // a general positive scale holds to the stated tolerance
        let c = spectral_saliency(&cube.scaled(3.7), &cfg).unwrap();
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn saliency_rejects_small_cubes() {
        let cube = random_cube(10, 16, 16, 6);
        // level 4 of a 16-wide image is 1x1
        assert!(matches!(
            spectral_saliency(&cube, &PyramidConfig::default()),
            Err(crate::Error::Validation(_))
        ));
    }

    #[test]
    fn saliency_channels_in_unit_interval() {
        let cube = random_cube(12, 64, 64, 8);
        let sal = spectral_saliency(&cube, &PyramidConfig::default()).unwrap();
        assert_eq!(sal.channels(), 3);
        assert!(sal.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn saliency_is_deterministic() {
        let cube = random_cube(13, 64, 64, 8);
        let cfg = PyramidConfig::default();
        let a = spectral_saliency(&cube, &cfg).unwrap();
        let b = spectral_saliency(&cube, &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn pyramid_dims_follow_ceil_rule(h in 8usize..80, w in 8usize..80) {
            let cube = cube_with(
                h, w,
                vec![450.0, 550.0, 650.0, 750.0],
                |y, x, b| (y + x + b) as f32 * 0.001,
            );
            let pyr = build_pyramid(&cube, 7);
            for (lvl, stack) in pyr.iter().enumerate() {
                let (eh, ew) = level_dims(h, w, lvl);
                prop_assert_eq!((stack.h, stack.w), (eh, ew));
            }
        }
    }
}
