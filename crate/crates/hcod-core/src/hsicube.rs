//! Hyperspectral cube and mask types plus bit-exact file I/O.
//!
//! Cubes are stored in the HSIC container: little-endian, band-interleaved
//! by pixel (the spectrum of a pixel is contiguous). Layout:
//!
//! ```text
//! magic "HSIC" (4 bytes) | version u32 | H u32 | W u32 | C u32
//! | C x f32 wavelengths (nm) | H*W*C x f32 reflectances (BIP)
//! ```
//!
//! Ground-truth masks are 8-bit single-channel PNGs holding only 0 and 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HSIC_MAGIC: [u8; 4] = *b"HSIC";
pub const HSIC_VERSION: u32 = 1;

/// Cap on total payload elements; anything above this is a corrupt header.
const MAX_ELEMENTS: u64 = 1 << 31;

pub const MIN_HEIGHT: usize = 8;
pub const MIN_WIDTH: usize = 8;
pub const MIN_BANDS: usize = 4;

/// An H x W x C reflectance cube with per-band wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    wavelengths_nm: Vec<f32>,
    /// BIP order: index (y, x, b) = (y*W + x)*C + b.
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        wavelengths_nm: Vec<f32>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height < MIN_HEIGHT || width < MIN_WIDTH || bands < MIN_BANDS {
            return Err(Error::validation(format!(
                "cube must be at least {MIN_HEIGHT}x{MIN_WIDTH}x{MIN_BANDS}, got {height}x{width}x{bands}"
            )));
        }
        if wavelengths_nm.len() != bands {
            return Err(Error::validation(format!(
                "expected {bands} wavelengths, got {}",
                wavelengths_nm.len()
            )));
        }
        if !wavelengths_nm.iter().all(|w| w.is_finite()) {
            return Err(Error::validation("wavelengths must be finite"));
        }
        if !wavelengths_nm.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("wavelengths must be strictly increasing"));
        }
        if data.len() != height * width * bands {
            return Err(Error::validation(format!(
                "expected {} data values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::validation(
                "reflectance values must be finite and nonnegative",
            ));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            wavelengths_nm,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn wavelengths_nm(&self) -> &[f32] {
        &self.wavelengths_nm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The contiguous spectrum of pixel (y, x).
    #[inline]
    pub fn spectrum(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.bands;
        &self.data[start..start + self.bands]
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize, band: usize) -> f32 {
        self.data[(y * self.width + x) * self.bands + band]
    }

    /// Elementwise scaling; panics on a nonpositive factor.
    pub fn scaled(&self, factor: f32) -> HsiCube {
        assert!(factor > 0.0, "scale factor must be positive");
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= factor;
        }
        out
    }
}

/// A binary foreground mask paired with a cube.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::validation(format!(
                "expected {} mask values, got {}",
                height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| *v <= 1) {
            return Err(Error::validation("mask values must be exactly 0 or 1"));
        }
        Ok(GroundTruthMask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }
}

/// A real-valued map in [0, 1] with one or more channels.
///
/// Channel-interleaved storage: index (y, x, ch) = (y*W + x)*channels + ch.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "expected {} map values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if !data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(Error::validation("map values must lie in [0, 1]"));
        }
        Ok(SaliencyMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        SaliencyMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    /// Mean over all channels inside / outside the mask foreground.
    pub fn region_means(&self, mask: &GroundTruthMask) -> (f64, f64) {
        assert_eq!(self.height, mask.height());
        assert_eq!(self.width, mask.width());
        let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0u64, 0.0, 0u64);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut px = 0.0;
                for c in 0..self.channels {
                    px += self.get(y, x, c);
                }
                px /= self.channels as f64;
                if mask.get(y, x) == 1 {
                    s_in += px;
                    n_in += 1;
                } else {
                    s_out += px;
                    n_out += 1;
                }
            }
        }
        (s_in / n_in.max(1) as f64, s_out / n_out.max(1) as f64)
    }
}

// ---------------------------------------------------------------------------
// HSIC container I/O
// ---------------------------------------------------------------------------

/// Serialize a cube to HSIC bytes.
pub fn cube_to_bytes(cube: &HsiCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * (cube.bands + cube.data.len()));
    out.extend_from_slice(&HSIC_MAGIC);
    out.extend_from_slice(&HSIC_VERSION.to_le_bytes());
    out.extend_from_slice(&(cube.height as u32).to_le_bytes());
    out.extend_from_slice(&(cube.width as u32).to_le_bytes());
    out.extend_from_slice(&(cube.bands as u32).to_le_bytes());
    for w in &cube.wavelengths_nm {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse HSIC bytes into a cube.
pub fn cube_from_bytes(bytes: &[u8]) -> Result<HsiCube> {
    if bytes.len() < 20 {
        return Err(Error::format("file too short for HSIC header"));
    }
    if bytes[0..4] != HSIC_MAGIC {
        return Err(Error::format("bad magic, not an HSIC file"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != HSIC_VERSION {
        return Err(Error::format(format!("unsupported HSIC version {version}")));
    }
    let h = u32_at(8) as u64;
    let w = u32_at(12) as u64;
    let c = u32_at(16) as u64;
    let elements = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| Error::format("dimension overflow"))?;
    if elements > MAX_ELEMENTS {
        return Err(Error::format(format!(
            "unreasonable payload size {elements}"
        )));
    }
    let expected = 20 + 4 * (c + elements);
    if bytes.len() as u64 != expected {
        return Err(Error::format(format!(
            "payload size mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut off = 20;
    let mut read_f32 = || {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        v
    };
    let wavelengths: Vec<f32> = (0..c).map(|_| read_f32()).collect();
    let data: Vec<f32> = (0..elements).map(|_| read_f32()).collect();
    HsiCube::new(h as usize, w as usize, c as usize, wavelengths, data)
}

/// Load a cube from an HSIC file.
pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    cube_from_bytes(&fs::read(path)?)
}

/// Save a cube to an HSIC file.
pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cube_to_bytes(cube))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Mask PNG I/O
// ---------------------------------------------------------------------------

/// Load a ground-truth mask from an 8-bit single-channel PNG of 0/255 values.
pub fn load_mask(path: impl AsRef<Path>) -> Result<GroundTruthMask> {
    let img = image::open(path.as_ref()).map_err(|e| Error::format(format!("mask png: {e}")))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::validation(format!(
                "mask must be 8-bit single-channel, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for px in gray.pixels() {
        match px.0[0] {
            0 => data.push(0u8),
            255 => data.push(1u8),
            v => {
                return Err(Error::validation(format!(
                    "mask pixels must be 0 or 255, found {v}"
                )))
            }
        }
    }
    GroundTruthMask::new(h as usize, w as usize, data)
}

/// Save a mask as an 8-bit single-channel PNG (0/255).
pub fn save_mask(mask: &GroundTruthMask, path: impl AsRef<Path>) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([mask.get(y as usize, x as usize) * 255])
    });
    img.save(path.as_ref()).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(format!("mask png: {other}")),
    })
}

// ---------------------------------------------------------------------------
// Band subsampling
// ---------------------------------------------------------------------------

/// Indices used by [`band_subsample`]: round(i*(C-1)/(n-1)) for i = 0..n,
/// endpoints included. For n = 1 the first band is kept.
pub fn subsample_indices(bands: usize, n: usize) -> Result<Vec<usize>> {
    if n < 1 || n > bands {
        return Err(Error::validation(format!(
            "cannot subsample {bands} bands to {n}"
        )));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n)
        .map(|i| ((i * (bands - 1)) as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

/// Uniformly subsample a cube to `n` bands (endpoint-inclusive rounding).
pub fn band_subsample(cube: &HsiCube, n: usize) -> Result<HsiCube> {
    let idx = subsample_indices(cube.bands(), n)?;
    if n < MIN_BANDS {
        return Err(Error::validation(format!(
            "subsampled cube must keep at least {MIN_BANDS} bands"
        )));
    }
    let wavelengths: Vec<f32> = idx.iter().map(|&i| cube.wavelengths_nm()[i]).collect();
    let mut data = Vec::with_capacity(cube.height() * cube.width() * n);
    for y in 0..cube.height() {
        for x in 0..cube.width() {
            let spec = cube.spectrum(y, x);
            data.extend(idx.iter().map(|&i| spec[i]));
        }
    }
    HsiCube::new(cube.height(), cube.width(), n, wavelengths, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use proptest::prelude::*;

    pub(crate) fn random_cube(seed: u64, h: usize, w: usize, c: usize) -> HsiCube {
        let mut rng = DetRng::new(seed, "test-cube");
        let wavelengths: Vec<f32> = (0..c)
            .map(|i| 400.0 + 600.0 * i as f32 / (c - 1) as f32)
            .collect();
        let data: Vec<f32> = (0..h * w * c).map(|_| rng.next_f64() as f32).collect();
        HsiCube::new(h, w, c, wavelengths, data).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cube = random_cube(1, 16, 16, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.hsic");
        save_cube(&cube, &path).unwrap();
        let back = load_cube(&path).unwrap();
        assert_eq!(cube, back);
        // bit-exact, not just approximately equal
        for (a, b) in cube.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_cube_file_size_matches_layout() {
        let cube = HsiCube::new(
            8,
            8,
            4,
            vec![400.0, 500.0, 600.0, 700.0],
            vec![0.0; 8 * 8 * 4],
        )
        .unwrap();
        let bytes = cube_to_bytes(&cube);
        // magic + version + 3 dims + C wavelengths + H*W*C payload, 4 bytes each field
        let expected = 4 + 4 + 3 * 4 + 4 * 4 + 8 * 8 * 4 * 4;
        assert_eq!(bytes.len(), expected);
        assert_eq!(bytes.len(), 1060);
    }

    #[test]
    fn non_monotone_wavelengths_rejected() {
        // Craft a file with wavelengths [500, 400]: the constructor refuses to
        // build such a cube, so patch valid bytes.
        let cube = HsiCube::new(8, 8, 4, vec![400.0, 500.0, 600.0, 700.0], vec![0.0; 256]).unwrap();
        let mut bytes = cube_to_bytes(&cube);
        bytes[20..24].copy_from_slice(&500.0f32.to_le_bytes());
        bytes[24..28].copy_from_slice(&400.0f32.to_le_bytes());
        match cube_from_bytes(&bytes) {
            Err(Error::Validation(_)) => {}
            other => panic!("expected ValidationError, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let cube = random_cube(2, 8, 8, 8);
        let mut bytes = cube_to_bytes(&cube);
        // header claims 8 bands but payload holds half of them
        bytes.truncate(20 + 4 * 8 + 8 * 8 * 4 * 4);
        match cube_from_bytes(&bytes) {
            Err(Error::Format(_)) => {}
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn nan_payload_is_validation_error() {
        let cube = random_cube(3, 8, 8, 4);
        let mut bytes = cube_to_bytes(&cube);
        let off = bytes.len() - 4;
        bytes[off..].copy_from_slice(&f32::NAN.to_le_bytes());
        match cube_from_bytes(&bytes) {
            Err(Error::Validation(_)) => {}
            other => panic!("expected ValidationError, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let cube = random_cube(4, 8, 8, 4);
        let mut bytes = cube_to_bytes(&cube);
        bytes[0] = b'X';
        assert!(matches!(cube_from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = cube_to_bytes(&cube);
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(cube_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let cube = random_cube(5, 8, 8, 4);
        let res = save_cube(&cube, "/nonexistent-dir/cube.hsic");
        assert!(matches!(res, Err(Error::Io(_))));
    }

    #[test]
    fn subsample_indices_match_rounding_rule() {
        // oracle: evaluate the formula index by index
        let got = subsample_indices(200, 33).unwrap();
        let expect: Vec<usize> = (0..33)
            .map(|i| ((i as f64 * 199.0) / 32.0).round() as usize)
            .collect();
        assert_eq!(got, expect);
        assert_eq!(got[0], 0);
        assert_eq!(got[1], 6);
        assert_eq!(got[2], 12);
        assert_eq!(*got.last().unwrap(), 199);

        assert_eq!(subsample_indices(5, 2).unwrap(), vec![0, 4]);
        assert!(subsample_indices(5, 6).is_err());
    }

    #[test]
    fn subsample_full_is_identity() {
        let cube = random_cube(6, 8, 8, 6);
        let same = band_subsample(&cube, 6).unwrap();
        assert_eq!(cube, same);
    }

    #[test]
    fn mask_png_roundtrip_and_strictness() {
        let mask = GroundTruthMask::new(8, 8, {
            let mut d = vec![0u8; 64];
            d[9] = 1;
            d[10] = 1;
            d
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        save_mask(&mask, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);

        // a gray value that is neither 0 nor 255 must be rejected
        let img = image::GrayImage::from_pixel(8, 8, image::Luma([128u8]));
        let bad = dir.path().join("bad.png");
        img.save(&bad).unwrap();
        assert!(matches!(load_mask(&bad), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_arbitrary_cubes(seed in 0u64..1000) {
            let mut r = DetRng::new(seed, "dims");
            let h = 8 + r.below(8) as usize;
            let w = 8 + r.below(8) as usize;
            let c = 4 + r.below(12) as usize;
            let cube = random_cube(seed, h, w, c);
            let back = cube_from_bytes(&cube_to_bytes(&cube)).unwrap();
            prop_assert_eq!(cube, back);
        }

        #[test]
        fn subsample_composes_and_preserves_order(seed in 0u64..200) {
            let cube = random_cube(seed, 8, 8, 16);
            let n = 4 + (seed % 13) as usize;
            let direct = band_subsample(&cube, n).unwrap();
            let via_full = band_subsample(&band_subsample(&cube, 16).unwrap(), n).unwrap();
            prop_assert_eq!(&direct, &via_full);
            prop_assert!(direct.wavelengths_nm().windows(2).all(|w| w[0] < w[1]));
            let (lo, hi) = (
                cube.data().iter().cloned().fold(f32::INFINITY, f32::min),
                cube.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max),
            );
            prop_assert!(direct.data().iter().all(|v| *v >= lo && *v <= hi));
        }
    }
}
