//! Token-space machinery: patchification, saliency-guided token dropout,
//! spectral-spatial prompt fusion, and the small deterministic encoder.
//!
//! Dropout is "soft" by default: masked tokens are zeroed (the literal
//! elementwise product) and re-zeroed before every attention block, so
//! their content never contributes. A removal execution mode that
//! physically shortens the sequence is available and matches the
//! renormalized soft path on kept positions.

mod encoder;
mod weights;

pub use encoder::{
    block_forward, decode_mask, encoder_forward, encoder_forward_probed, AttentionProbe,
    EncoderOutput, ExecutionMode,
};
pub use weights::{
    load_snapshot, save_snapshot, BlockWeights, DecodeHead, EncoderWeights, LayerNormWeights,
    LinearWeights, PromptBlockWeights,
};

use crate::error::{Error, Result};
use crate::hsicube::SaliencyMap;
use crate::ssdm::XyzImage;

/// Anything patchifiable: a dense H x W x channels grid of f64 values.
pub trait PixelGrid {
    fn grid_height(&self) -> usize;
    fn grid_width(&self) -> usize;
    fn grid_channels(&self) -> usize;
    fn grid_value(&self, y: usize, x: usize, ch: usize) -> f64;
}

impl PixelGrid for XyzImage {
    fn grid_height(&self) -> usize {
        self.height()
    }
    fn grid_width(&self) -> usize {
        self.width()
    }
    fn grid_channels(&self) -> usize {
        3
    }
    fn grid_value(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.get(y, x, ch)
    }
}

impl PixelGrid for SaliencyMap {
    fn grid_height(&self) -> usize {
        self.height()
    }
    fn grid_width(&self) -> usize {
        self.width()
    }
    fn grid_channels(&self) -> usize {
        self.channels()
    }
    fn grid_value(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.get(y, x, ch)
    }
}

// ---------------------------------------------------------------------------
// Core tensor types
// ---------------------------------------------------------------------------

/// A batch of token sequences with a spatial grid layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub batch: usize,
    pub tokens: usize,
    pub channels: usize,
    /// (rows, cols) of the token grid; rows * cols == tokens.
    pub grid: (usize, usize),
    /// Layout (b, n, c): index = (b * tokens + n) * channels + c.
    pub data: Vec<f64>,
}

impl TokenTensor {
    pub fn zeros(batch: usize, grid: (usize, usize), channels: usize) -> Self {
        let tokens = grid.0 * grid.1;
        TokenTensor {
            batch,
            tokens,
            channels,
            grid,
            data: vec![0.0; batch * tokens * channels],
        }
    }

    #[inline]
    pub fn token(&self, b: usize, n: usize) -> &[f64] {
        let start = (b * self.tokens + n) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn token_mut(&mut self, b: usize, n: usize) -> &mut [f64] {
        let start = (b * self.tokens + n) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    fn same_shape(&self, other: &TokenTensor) -> bool {
        self.batch == other.batch
            && self.tokens == other.tokens
            && self.channels == other.channels
            && self.grid == other.grid
    }
}

/// Binary per-token keep mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub batch: usize,
    pub tokens: usize,
    /// Layout (b, n).
    pub data: Vec<u8>,
}

impl TokenMask {
    pub fn ones(batch: usize, tokens: usize) -> Self {
        TokenMask {
            batch,
            tokens,
            data: vec![1; batch * tokens],
        }
    }

    #[inline]
    pub fn get(&self, b: usize, n: usize) -> u8 {
        self.data[b * self.tokens + n]
    }

    pub fn kept_fraction(&self) -> f64 {
        self.data.iter().map(|v| *v as u64).sum::<u64>() as f64 / self.data.len() as f64
    }
}

/// Token grid in channel-major layout (b, c, y, x), the shape the prompt
/// block convolves over.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TokenGrid {
    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.channels + c) * self.height + y) * self.width + x]
    }
}

// ---------------------------------------------------------------------------
// Encoder configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    /// Block indices that receive prompt fusion after their MLP.
    pub prompt_layers: Vec<usize>,
    pub sgtd_tau: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            depth: 4,
            channels: 64,
            heads: 4,
            prompt_layers: vec![0, 1, 2, 3],
            sgtd_tau: 0.01,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.depth == 0 || self.channels == 0 || self.heads == 0 {
            return Err(Error::validation("encoder: all sizes must be positive"));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::validation(format!(
                "encoder: channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.sgtd_tau) {
            return Err(Error::validation(format!(
                "encoder: tau {} outside [0, 1]",
                self.sgtd_tau
            )));
        }
        if self.prompt_layers.iter().any(|l| *l >= self.depth) {
            return Err(Error::validation("encoder: prompt layer beyond depth"));
        }
        Ok(())
    }

    pub fn token_grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::validation(format!(
                "image {height}x{width} not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }
}

// ---------------------------------------------------------------------------
// Patchification
// ---------------------------------------------------------------------------

/// Flatten the p x p patch at grid cell (gy, gx): pixels row-major,
/// channels innermost.
pub(crate) fn patch_vector(
    img: &impl PixelGrid,
    gy: usize,
    gx: usize,
    p: usize,
    out: &mut Vec<f64>,
) {
    out.clear();
    for r in 0..p {
        for c in 0..p {
            for ch in 0..img.grid_channels() {
                out.push(img.grid_value(gy * p + r, gx * p + c, ch));
            }
        }
    }
}

/// Patchify and linearly project an image with the given embed weights.
pub fn embed_image(img: &impl PixelGrid, embed: &LinearWeights, p: usize) -> Result<TokenTensor> {
    if img.grid_height() % p != 0 || img.grid_width() % p != 0 {
        return Err(Error::validation(format!(
            "image {}x{} not divisible by patch size {p}",
            img.grid_height(),
            img.grid_width()
        )));
    }
    let grid = (img.grid_height() / p, img.grid_width() / p);
    let expected_in = p * p * img.grid_channels();
    if embed.in_dim != expected_in {
        return Err(Error::validation(format!(
            "embed expects {} inputs, patches have {expected_in}",
            embed.in_dim
        )));
    }
    let mut out = TokenTensor::zeros(1, grid, embed.out_dim);
    let mut patch = Vec::with_capacity(expected_in);
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            patch_vector(img, gy, gx, p, &mut patch);
            let n = gy * grid.1 + gx;
            embed.forward(&patch, out.token_mut(0, n));
        }
    }
    Ok(out)
}

/// Patchify with seeded weights derived from the config (the image-branch
/// embedding).
pub fn patchify(img: &impl PixelGrid, cfg: &EncoderConfig) -> Result<TokenTensor> {
    cfg.validate()?;
    let embed = weights::seeded_image_embed(cfg, img.grid_channels());
    embed_image(img, &embed, cfg.patch_size)
}

// ---------------------------------------------------------------------------
// Saliency-guided token dropout
// ---------------------------------------------------------------------------

/// Per-token saliency score: the mean over channels. Length batch * tokens.
pub fn sgtd_score(x_s: &TokenTensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(x_s.batch * x_s.tokens);
    for b in 0..x_s.batch {
        for n in 0..x_s.tokens {
            let t = x_s.token(b, n);
            out.push(t.iter().sum::<f64>() / x_s.channels as f64);
        }
    }
    out
}

/// Threshold min-max normalized scores at tau (inclusive: score == tau is
/// kept). Scores are normalized per batch item; an all-equal score vector
/// normalizes to zeros.
pub fn sgtd_mask(scores: &[f64], batch: usize, tokens: usize, tau: f64) -> Result<TokenMask> {
    if scores.len() != batch * tokens {
        return Err(Error::validation(format!(
            "sgtd_mask: {} scores for {batch}x{tokens}",
            scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!(
            "sgtd_mask: tau {tau} outside [0, 1]"
        )));
    }
    let mut data = Vec::with_capacity(scores.len());
    for b in 0..batch {
        let item = &scores[b * tokens..(b + 1) * tokens];
        let lo = item.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = item.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for s in item {
            let norm = if range > 0.0 { (s - lo) / range } else { 0.0 };
            data.push(u8::from(norm >= tau));
        }
    }
    Ok(TokenMask {
        batch,
        tokens,
        data,
    })
}

/// Elementwise token masking: dropped tokens become exactly zero, kept
/// tokens are bit-identical to the input.
pub fn sgtd_apply(x_m: &TokenTensor, mask: &TokenMask) -> Result<TokenTensor> {
    if x_m.batch != mask.batch || x_m.tokens != mask.tokens {
        return Err(Error::validation(format!(
            "sgtd_apply: tokens {}x{} vs mask {}x{}",
            x_m.batch, x_m.tokens, mask.batch, mask.tokens
        )));
    }
    let mut out = x_m.clone();
    for b in 0..out.batch {
        for n in 0..out.tokens {
            if mask.get(b, n) == 0 {
                out.token_mut(b, n).fill(0.0);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Spectral-spatial complementary prompting
// ---------------------------------------------------------------------------

/// Token-to-feature transform: (b, n, c) -> (b, c, h, w) over the grid.
pub fn phi(t: &TokenTensor) -> TokenGrid {
    let (h, w) = t.grid;
    let mut data = vec![0.0; t.batch * t.channels * h * w];
    for b in 0..t.batch {
        for n in 0..t.tokens {
            let (y, x) = (n / w, n % w);
            let tok = t.token(b, n);
            for c in 0..t.channels {
                data[((b * t.channels + c) * h + y) * w + x] = tok[c];
            }
        }
    }
    TokenGrid {
        batch: t.batch,
        channels: t.channels,
        height: h,
        width: w,
        data,
    }
}

/// Inverse of [`phi`].
pub fn phi_inv(g: &TokenGrid) -> TokenTensor {
    let grid = (g.height, g.width);
    let mut t = TokenTensor::zeros(g.batch, grid, g.channels);
    for b in 0..g.batch {
        for y in 0..g.height {
            for x in 0..g.width {
                let n = y * g.width + x;
                let tok = t.token_mut(b, n);
                for c in 0..g.channels {
                    tok[c] = g.at(b, c, y, x);
                }
            }
        }
    }
    t
}

/// Layer normalization over the channel dimension.
pub fn layer_norm(t: &TokenTensor, ln: &LayerNormWeights) -> TokenTensor {
    const EPS: f64 = 1e-6;
    let mut out = t.clone();
    for b in 0..t.batch {
        for n in 0..t.tokens {
            let tok = out.token_mut(b, n);
            let mean = tok.iter().sum::<f64>() / tok.len() as f64;
            let var = tok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / tok.len() as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for (c, v) in tok.iter_mut().enumerate() {
                *v = (*v - mean) * inv * ln.gamma[c] + ln.beta[c];
            }
        }
    }
    out
}

/// Tanh-form GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Prompt fusion: layer-normalize both token sets, reshape to grids,
/// concatenate channels, run the two-layer pointwise prompt block, reshape
/// back and add residually onto the un-normalized image tokens.
pub fn sscp_fuse(
    h_m: &TokenTensor,
    x_s: &TokenTensor,
    prompt: &PromptBlockWeights,
) -> Result<TokenTensor> {
    if !h_m.same_shape(x_s) {
        return Err(Error::validation(format!(
            "sscp_fuse: shape mismatch {}x{}x{} vs {}x{}x{}",
            h_m.batch, h_m.tokens, h_m.channels, x_s.batch, x_s.tokens, x_s.channels
        )));
    }
    let c = h_m.channels;
    if prompt.conv1.in_dim != 2 * c || prompt.conv2.out_dim != c {
        return Err(Error::validation(
            "sscp_fuse: prompt block dims do not match tokens",
        ));
    }
    let f_img = phi(&layer_norm(h_m, &prompt.ln_img));
    let f_spec = phi(&layer_norm(x_s, &prompt.ln_spec));

    let (h, w) = h_m.grid;
    let mut fused = TokenGrid {
        batch: h_m.batch,
        channels: c,
        height: h,
        width: w,
        data: vec![0.0; h_m.batch * c * h * w],
    };
    let mut cell = vec![0.0; 2 * c];
    let mut hidden = vec![0.0; prompt.conv1.out_dim];
    let mut out_cell = vec![0.0; c];
    for b in 0..h_m.batch {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    cell[ch] = f_img.at(b, ch, y, x);
                    cell[c + ch] = f_spec.at(b, ch, y, x);
                }
                prompt.conv1.forward(&cell, &mut hidden);
                for v in &mut hidden {
                    *v = gelu(*v);
                }
                prompt.conv2.forward(&hidden, &mut out_cell);
                for ch in 0..c {
                    fused.data[((b * c + ch) * h + y) * w + x] = out_cell[ch];
                }
            }
        }
    }

    let delta = phi_inv(&fused);
    let mut out = h_m.clone();
    for (o, d) in out.data.iter_mut().zip(&delta.data) {
        *o += d;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_tokens(
        seed: u64,
        batch: usize,
        grid: (usize, usize),
        channels: usize,
    ) -> TokenTensor {
        let mut rng = DetRng::new(seed, "tokens");
        let mut t = TokenTensor::zeros(batch, grid, channels);
        for v in &mut t.data {
            *v = rng.uniform(-1.0, 1.0);
        }
        t
    }

    #[test]
    fn sgtd_score_is_channel_mean() {
        let mut t = TokenTensor::zeros(1, (1, 1), 3);
        t.data.copy_from_slice(&[0.2, 0.4, 0.6]);
        let s = sgtd_score(&t);
        assert_abs_diff_eq!(s[0], 0.4, epsilon = 1e-12);

        let zeros = TokenTensor::zeros(2, (2, 2), 4);
        assert!(sgtd_score(&zeros).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sgtd_score_matches_two_loop_reference() {
        let t = random_tokens(3, 2, (3, 4), 5);
        let fast = sgtd_score(&t);
        for b in 0..2 {
            for n in 0..12 {
                let mut acc = 0.0;
                for c in 0..5 {
                    acc += t.data[(b * 12 + n) * 5 + c];
                }
                let reference = acc / 5.0;
                assert_abs_diff_eq!(fast[b * 12 + n], reference, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn sgtd_mask_boundary_is_inclusive() {
        // raw scores normalize to exactly (0, 0.01, 1)
        let scores = vec![0.0, 0.01, 1.0];
        let mask = sgtd_mask(&scores, 1, 3, 0.01).unwrap();
        assert_eq!(mask.data, vec![0, 1, 1]);
    }

    #[test]
    fn sgtd_mask_tau_zero_keeps_all() {
        let scores = vec![0.3, 0.9, 0.1, 0.5];
        let mask = sgtd_mask(&scores, 1, 4, 0.0).unwrap();
        assert_eq!(mask.data, vec![1; 4]);
        // all-equal scores normalize to zeros: kept at tau 0, dropped above
        let flat = vec![0.7; 4];
        assert_eq!(sgtd_mask(&flat, 1, 4, 0.0).unwrap().data, vec![1; 4]);
        assert_eq!(sgtd_mask(&flat, 1, 4, 0.5).unwrap().data, vec![0; 4]);
    }

    #[test]
    fn sgtd_apply_identities() {
        let t = random_tokens(5, 1, (2, 2), 4);
        let ones = TokenMask::ones(1, 4);
        let kept = sgtd_apply(&t, &ones).unwrap();
        assert_eq!(t, kept);

        let zeros = TokenMask {
            batch: 1,
            tokens: 4,
            data: vec![0; 4],
        };
        let dropped = sgtd_apply(&t, &zeros).unwrap();
        assert!(dropped.data.iter().all(|v| *v == 0.0));

        let partial = TokenMask {
            batch: 1,
            tokens: 4,
            data: vec![1, 0, 1, 0],
        };
        let mixed = sgtd_apply(&t, &partial).unwrap();
        assert_eq!(mixed.token(0, 0), t.token(0, 0));
        assert!(mixed.token(0, 1).iter().all(|v| *v == 0.0));
        // idempotence
        let twice = sgtd_apply(&mixed, &partial).unwrap();
        assert_eq!(mixed, twice);
    }

    #[test]
    fn sgtd_apply_shape_mismatch() {
        let t = random_tokens(6, 1, (2, 2), 4);
        let bad = TokenMask::ones(1, 5);
        assert!(matches!(
            sgtd_apply(&t, &bad),
            Err(crate::Error::Validation(_))
        ));
    }

    #[test]
    fn phi_roundtrip_exact() {
        for seed in 0..200 {
            let t = random_tokens(seed, 2, (3, 5), 7);
            let back = phi_inv(&phi(&t));
            assert_eq!(t, back);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_prime(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn sscp_residual_identity_with_zero_final_layer() {
        let cfg = EncoderConfig {
            channels: 8,
            heads: 2,
            ..Default::default()
        };
        let weights = EncoderWeights::seeded(&cfg);
        let prompt = weights.prompts[0].as_ref().unwrap();
        let h_m = random_tokens(9, 1, (4, 4), 8);
        let x_s = random_tokens(10, 1, (4, 4), 8);
        let fused = sscp_fuse(&h_m, &x_s, prompt).unwrap();
        // conv2 is zero-initialized, so fusion contributes exactly zero
        assert_eq!(h_m.data, fused.data);
    }

    #[test]
    fn sscp_commutes_with_grid_permutation() {
        // the prompt block is pointwise over the grid, so permuting token
        // positions of both inputs permutes the output identically
        let cfg = EncoderConfig {
            channels: 8,
            heads: 2,
            ..Default::default()
        };
        let mut weights = EncoderWeights::seeded(&cfg);
        // de-zero the final layer so the fusion path actually does something
        {
            let prompt = weights.prompts[0].as_mut().unwrap();
            let mut rng = DetRng::new(77, "conv2-fill");
            for v in &mut prompt.conv2.w {
                *v = rng.uniform(-0.5, 0.5);
            }
        }
        let prompt = weights.prompts[0].as_ref().unwrap();

        let h_m = random_tokens(11, 1, (2, 3), 8);
        let x_s = random_tokens(12, 1, (2, 3), 8);
        let fused = sscp_fuse(&h_m, &x_s, prompt).unwrap();

        // rotate token order by 2
        let rot = |t: &TokenTensor| -> TokenTensor {
            let mut out = t.clone();
            for n in 0..t.tokens {
                let src = (n + 2) % t.tokens;
                out.token_mut(0, n).copy_from_slice(t.token(0, src));
            }
            out
        };
        let fused_rot = sscp_fuse(&rot(&h_m), &rot(&x_s), prompt).unwrap();
        let expected = rot(&fused);
        for (a, b) in fused_rot.data.iter().zip(&expected.data) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sscp_rejects_shape_mismatch() {
        let cfg = EncoderConfig {
            channels: 8,
            heads: 2,
            ..Default::default()
        };
        let weights = EncoderWeights::seeded(&cfg);
        let prompt = weights.prompts[0].as_ref().unwrap();
        let h_m = random_tokens(1, 1, (2, 2), 8);
        let x_s = random_tokens(2, 1, (2, 3), 8);
        assert!(matches!(
            sscp_fuse(&h_m, &x_s, prompt),
            Err(crate::Error::Validation(_))
        ));
    }

    proptest! {
        #[test]
        fn sgtd_mask_monotone_in_tau(seed in 0u64..500) {
            let mut rng = DetRng::new(seed, "mask-mono");
            let tokens = 2 + rng.below(30) as usize;
            let scores: Vec<f64> = (0..tokens).map(|_| rng.next_f64()).collect();
            let t1 = rng.next_f64();
            let t2 = rng.next_f64();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let m_lo = sgtd_mask(&scores, 1, tokens, lo).unwrap();
            let m_hi = sgtd_mask(&scores, 1, tokens, hi).unwrap();
            for (a, b) in m_hi.data.iter().zip(&m_lo.data) {
                // kept at the higher tau implies kept at the lower tau
                prop_assert!(*a <= *b);
            }
        }
    }
}
