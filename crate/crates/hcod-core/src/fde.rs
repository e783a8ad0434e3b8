//! Fine-grained detail enhancement: depthwise-separable low-level features
//! modulated by channel / spatial / pixel attention and injected into the
//! prediction through a zero-initialized projection.
//!
//! The module is supervision-time machinery; the inference path leaves the
//! decoder prediction untouched.

use crate::error::{Error, Result};
use crate::hsicube::SaliencyMap;
use crate::rng::DetRng;
use crate::ssdm::XyzImage;
use crate::tokenops::LinearWeights;

/// Dense feature stack in (b, c, y, x) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub fn constant(batch: usize, channels: usize, height: usize, width: usize, v: f64) -> Self {
        FeatureMap {
            data: vec![v; batch * channels * height * width],
            ..FeatureMap::zeros(batch, channels, height, width)
        }
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.channels + c) * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((b * self.channels + c) * self.height + y) * self.width + x]
    }
}

/// All FDE parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FdeParams {
    pub in_channels: usize,
    pub feat_channels: usize,
    /// One 3x3 kernel per input channel, row-major.
    pub depthwise: Vec<f64>,
    pub depthwise_bias: Vec<f64>,
    /// 1x1 conv input channels -> feature channels.
    pub pointwise: LinearWeights,
    pub ca_w1: LinearWeights,
    pub ca_w2: LinearWeights,
    /// Spatial attention kernel over [avg, max] planes: [2][k][k].
    pub sa_kernel: Vec<f64>,
    pub sa_bias: f64,
    pub sa_k: usize,
    pub pa: LinearWeights,
    /// Final 1x1 projection of modulated features to one channel,
    /// zero-initialized so enhancement starts as identity.
    pub proj: LinearWeights,
}

pub const DEFAULT_FEAT_CHANNELS: usize = 16;
pub const DEFAULT_SA_KERNEL: usize = 7;

impl FdeParams {
    pub fn seeded(
        seed: u64,
        in_channels: usize,
        feat_channels: usize,
        sa_k: usize,
    ) -> Result<Self> {
        if sa_k % 2 == 0 {
            return Err(Error::validation(format!(
                "spatial attention kernel must be odd, got {sa_k}"
            )));
        }
        let mut rng = DetRng::new(seed, "fde");
        let depthwise = (0..in_channels * 9)
            .map(|_| rng.uniform(-0.3, 0.3))
            .collect();
        let reduced = (feat_channels / 4).max(1);
        Ok(FdeParams {
            in_channels,
            feat_channels,
            depthwise,
            depthwise_bias: vec![0.0; in_channels],
            pointwise: LinearWeights::seeded(&mut rng, in_channels, feat_channels),
            ca_w1: LinearWeights::seeded(&mut rng, feat_channels, reduced),
            ca_w2: LinearWeights::seeded(&mut rng, reduced, feat_channels),
            sa_kernel: (0..2 * sa_k * sa_k)
                .map(|_| rng.uniform(-0.2, 0.2))
                .collect(),
            sa_bias: 0.0,
            sa_k,
            pa: LinearWeights::seeded(&mut rng, feat_channels, feat_channels),
            proj: LinearWeights::zeros(feat_channels, 1),
        })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Depthwise 3x3 (zero padding) then pointwise 1x1 to the feature width.
pub fn extract_features(i_m: &XyzImage, params: &FdeParams) -> Result<FeatureMap> {
    if params.in_channels != 3 {
        return Err(Error::validation(
            "extract_features expects 3 input channels",
        ));
    }
    let (h, w) = (i_m.height(), i_m.width());
    let chans = params.in_channels;
    let mut dw = FeatureMap::zeros(1, chans, h, w);
    for c in 0..chans {
        let kernel = &params.depthwise[c * 9..(c + 1) * 9];
        for y in 0..h {
            for x in 0..w {
                let mut acc = params.depthwise_bias[c];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let yy = y as isize + ky as isize - 1;
                        let xx = x as isize + kx as isize - 1;
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue; // zero padding
                        }
                        acc += kernel[ky * 3 + kx] * i_m.get(yy as usize, xx as usize, c);
                    }
                }
                *dw.at_mut(0, c, y, x) = acc;
            }
        }
    }

    let mut out = FeatureMap::zeros(1, params.feat_channels, h, w);
    let mut pixel = vec![0.0; chans];
    let mut feat = vec![0.0; params.feat_channels];
    for y in 0..h {
        for x in 0..w {
            for (c, p) in pixel.iter_mut().enumerate() {
                *p = dw.at(0, c, y, x);
            }
            params.pointwise.forward(&pixel, &mut feat);
            for c in 0..params.feat_channels {
                *out.at_mut(0, c, y, x) = feat[c];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attention branches
// ---------------------------------------------------------------------------

/// Per-channel gates: sigmoid(W2 relu(W1 GAP(F))). Shape (b, c).
pub fn channel_attention(f: &FeatureMap, params: &FdeParams) -> Vec<f64> {
    let hw = (f.height * f.width) as f64;
    let mut gates = Vec::with_capacity(f.batch * f.channels);
    let mut pooled = vec![0.0; f.channels];
    let mut hidden = vec![0.0; params.ca_w1.out_dim];
    let mut raw = vec![0.0; f.channels];
    for b in 0..f.batch {
        for (c, p) in pooled.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y in 0..f.height {
                for x in 0..f.width {
                    acc += f.at(b, c, y, x);
                }
            }
            *p = acc / hw;
        }
        params.ca_w1.forward(&pooled, &mut hidden);
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        params.ca_w2.forward(&hidden, &mut raw);
        gates.extend(raw.iter().map(|v| sigmoid(*v)));
    }
    gates
}

/// Boundary-localized gates: sigmoid(conv_kxk([avg_c(F); max_c(F)])).
/// Shape (b, y, x).
pub fn spatial_attention(f: &FeatureMap, params: &FdeParams) -> Result<Vec<f64>> {
    let k = params.sa_k;
    if k % 2 == 0 {
        return Err(Error::validation(format!(
            "spatial attention kernel must be odd, got {k}"
        )));
    }
    let half = (k / 2) as isize;
    let (h, w) = (f.height, f.width);
    let mut planes = vec![0.0; f.batch * 2 * h * w];
    for b in 0..f.batch {
        for y in 0..h {
            for x in 0..w {
                let mut avg = 0.0;
                let mut max = f64::NEG_INFINITY;
                for c in 0..f.channels {
                    let v = f.at(b, c, y, x);
                    avg += v;
                    max = max.max(v);
                }
                planes[((b * 2) * h + y) * w + x] = avg / f.channels as f64;
                planes[((b * 2 + 1) * h + y) * w + x] = max;
            }
        }
    }
    let mut out = vec![0.0; f.batch * h * w];
    for b in 0..f.batch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = params.sa_bias;
                for plane in 0..2usize {
                    for ky in 0..k {
                        for kx in 0..k {
                            let yy = y as isize + ky as isize - half;
                            let xx = x as isize + kx as isize - half;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue; // zero padding
                            }
                            acc += params.sa_kernel[(plane * k + ky) * k + kx]
                                * planes[((b * 2 + plane) * h + yy as usize) * w + xx as usize];
                        }
                    }
                }
                out[(b * h + y) * w + x] = sigmoid(acc);
            }
        }
    }
    Ok(out)
}

/// Full-resolution per-channel gates: sigmoid(1x1 conv). Same shape as `f`.
pub fn pixel_attention(f: &FeatureMap, params: &FdeParams) -> FeatureMap {
    let mut out = FeatureMap::zeros(f.batch, f.channels, f.height, f.width);
    let mut pixel = vec![0.0; f.channels];
    let mut raw = vec![0.0; f.channels];
    for b in 0..f.batch {
        for y in 0..f.height {
            for x in 0..f.width {
                for (c, p) in pixel.iter_mut().enumerate() {
                    *p = f.at(b, c, y, x);
                }
                params.pa.forward(&pixel, &mut raw);
                for c in 0..f.channels {
                    *out.at_mut(b, c, y, x) = sigmoid(raw[c]);
                }
            }
        }
    }
    out
}

/// Broadcast product A = CA * SA * PA, shape (b, c, y, x).
pub fn combined_attention(f: &FeatureMap, params: &FdeParams) -> Result<FeatureMap> {
    let ca = channel_attention(f, params);
    let sa = spatial_attention(f, params)?;
    let pa = pixel_attention(f, params);
    let mut a = FeatureMap::zeros(f.batch, f.channels, f.height, f.width);
    for b in 0..f.batch {
        for c in 0..f.channels {
            let gate = ca[b * f.channels + c];
            for y in 0..f.height {
                for x in 0..f.width {
                    *a.at_mut(b, c, y, x) =
                        gate * sa[(b * f.height + y) * f.width + x] * pa.at(b, c, y, x);
                }
            }
        }
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// Enhancement
// ---------------------------------------------------------------------------

/// Core of the enhancement: project the modulated features A * F to one
/// channel and add onto the prediction, clamped back to a valid map.
pub fn enhance_with_attention(
    s_f: &SaliencyMap,
    f: &FeatureMap,
    a: &FeatureMap,
    proj: &LinearWeights,
) -> Result<SaliencyMap> {
    if s_f.channels() != 1 {
        return Err(Error::validation(
            "enhance expects a single-channel prediction",
        ));
    }
    if f.batch != 1 || a.batch != 1 {
        return Err(Error::validation("enhance runs on single-item batches"));
    }
    if s_f.height() != f.height || s_f.width() != f.width || f.data.len() != a.data.len() {
        return Err(Error::validation(format!(
            "enhance shape mismatch: map {}x{}, features {}x{}x{}",
            s_f.height(),
            s_f.width(),
            f.channels,
            f.height,
            f.width
        )));
    }
    let mut out = vec![0.0; s_f.height() * s_f.width()];
    let mut modulated = vec![0.0; f.channels];
    let mut residual = vec![0.0; 1];
    for y in 0..f.height {
        for x in 0..f.width {
            for (c, m) in modulated.iter_mut().enumerate() {
                *m = a.at(0, c, y, x) * f.at(0, c, y, x);
            }
            proj.forward(&modulated, &mut residual);
            out[y * f.width + x] = (s_f.get(y, x, 0) + residual[0]).clamp(0.0, 1.0);
        }
    }
    SaliencyMap::new(s_f.height(), s_f.width(), 1, out)
}

/// Attention-modulated detail injection: S_d = clamp(S_f + proj(A * F)).
pub fn enhance(s_f: &SaliencyMap, f: &FeatureMap, params: &FdeParams) -> Result<SaliencyMap> {
    let a = combined_attention(f, params)?;
    enhance_with_attention(s_f, f, &a, &params.proj)
}
