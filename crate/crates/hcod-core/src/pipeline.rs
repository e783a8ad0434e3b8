//! End-to-end wiring: decomposition, segmentation, artifact files, and the
//! desk-scale head trainer.
//!
//! Everything downstream of a cube is deterministic given the config, so
//! output files are hash-stable across runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmf::CmfTable;
use crate::error::{Error, Result};
use crate::fde::{enhance, extract_features, FdeParams, DEFAULT_FEAT_CHANNELS, DEFAULT_SA_KERNEL};
use crate::hsicube::{GroundTruthMask, HsiCube, SaliencyMap};
use crate::losses::{composite_on_slices, LossReport};
use crate::ssdm::{map_to_ciexyz, spectral_saliency, PyramidConfig, XyzImage};
use crate::tokenops::{
    decode_mask, embed_image, encoder_forward, gelu, gelu_prime, layer_norm, phi, sgtd_apply,
    sgtd_mask, sgtd_score, sscp_fuse, EncoderConfig, EncoderWeights, ExecutionMode, TokenMask,
    TokenTensor,
};

/// Full pipeline configuration. The top-level `tau` and `seed` are
/// authoritative and are copied into the encoder config before running.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub pyramid: PyramidConfig,
    /// Bands used for the color-space mapping (clamped to the cube depth).
    pub n_bands: usize,
    pub tau: f64,
    pub fde_enabled: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            encoder: EncoderConfig::default(),
            pyramid: PyramidConfig::default(),
            n_bands: 33,
            tau: 0.01,
            fde_enabled: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Encoder config with the top-level threshold and seed applied.
    pub fn effective_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            sgtd_tau: self.tau,
            seed: self.seed,
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_encoder().validate()?;
        self.pyramid.validate()?;
        if self.n_bands == 0 {
            return Err(Error::validation("n_bands must be positive"));
        }
        Ok(())
    }
}

/// Spatial image and spectral prompt for one cube.
pub fn decompose(cube: &HsiCube, cfg: &PipelineConfig) -> Result<(XyzImage, SaliencyMap)> {
    cfg.validate()?;
    let cmf = CmfTable::cie_1931_2deg();
    let xyz = map_to_ciexyz(cube, &cmf, cfg.n_bands)?;
    let saliency = spectral_saliency(cube, &cfg.pyramid)?;
    Ok((xyz, saliency))
}

/// Segmentation result: the decoder prediction, the optional enhanced map,
/// and the dropout mask that was applied.
pub struct SegmentOutput {
    pub s_f: SaliencyMap,
    pub s_d: Option<SaliencyMap>,
    pub mask: TokenMask,
    pub kept_fraction: f64,
}

/// Run the full pipeline on one cube.
pub fn segment(cube: &HsiCube, cfg: &PipelineConfig) -> Result<SegmentOutput> {
    let (xyz, saliency) = decompose(cube, cfg)?;
    let weights = EncoderWeights::seeded(&cfg.effective_encoder());
    let out = encoder_forward(&xyz, &saliency, &weights, ExecutionMode::Soft)?;
    let s_f = decode_mask(&out.tokens, &weights)?;
    let s_d = if cfg.fde_enabled {
        let params = FdeParams::seeded(cfg.seed, 3, DEFAULT_FEAT_CHANNELS, DEFAULT_SA_KERNEL)?;
        let features = extract_features(&xyz, &params)?;
        Some(enhance(&s_f, &features, &params)?)
    } else {
        None
    };
    let kept_fraction = out.mask.kept_fraction();
    Ok(SegmentOutput {
        s_f,
        s_d,
        mask: out.mask,
        kept_fraction,
    })
}

// ---------------------------------------------------------------------------
// Artifact files
// ---------------------------------------------------------------------------

/// Raw f32 dump: channel-planar, row-major planes, little-endian. This is
/// the bit-exact source of truth for golden comparisons.
pub fn write_f32_planar(path: impl AsRef<Path>, map: &SaliencyMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * map.height() * map.width() * map.channels());
    for ch in 0..map.channels() {
        for y in 0..map.height() {
            for x in 0..map.width() {
                bytes.extend_from_slice(&(map.get(y, x, ch) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Raw f32 dump of an XYZ image (normalized data), planar layout.
pub fn write_xyz_f32_planar(path: impl AsRef<Path>, img: &XyzImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * img.height() * img.width() * 3);
    for ch in 0..3 {
        for y in 0..img.height() {
            for x in 0..img.width() {
                bytes.extend_from_slice(&(img.get(y, x, ch) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 16-bit PNG of a map: grayscale for one channel, RGB for three.
pub fn write_map_png16(path: impl AsRef<Path>, map: &SaliencyMap) -> Result<()> {
    let (h, w) = (map.height() as u32, map.width() as u32);
    let save_err = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(format!("png: {other}")),
    };
    match map.channels() {
        1 => {
            let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
                image::Luma([to_u16(map.get(y as usize, x as usize, 0))])
            });
            img.save(path.as_ref()).map_err(save_err)
        }
        3 => {
            let img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
                let px = |c| to_u16(map.get(y as usize, x as usize, c));
                image::Rgb([px(0), px(1), px(2)])
            });
            img.save(path.as_ref()).map_err(save_err)
        }
        n => Err(Error::validation(format!(
            "cannot encode {n}-channel map as png"
        ))),
    }
}

/// 16-bit RGB PNG of the normalized XYZ image.
pub fn write_xyz_png16(path: impl AsRef<Path>, img: &XyzImage) -> Result<()> {
    let data: Vec<f64> = (0..img.height() * img.width() * 3)
        .map(|i| img.data()[i])
        .collect();
    let map = SaliencyMap::new(img.height(), img.width(), 3, data)?;
    write_map_png16(path, &map)
}

/// Load a prediction map from a PNG written by [`write_map_png16`] (16-bit
/// grayscale) or any 8-bit grayscale fallback.
pub fn read_prediction_png(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let img = image::open(path.as_ref()).map_err(|e| Error::format(format!("png: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageLuma16(g) => {
            g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()
        }
        image::DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        other => {
            return Err(Error::validation(format!(
                "prediction png must be grayscale, got {:?}",
                other.color()
            )))
        }
    };
    SaliencyMap::new(h, w, 1, data)
}

/// Write the effective config next to an output for provenance.
pub fn write_config_echo(path: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(cfg).map_err(|e| Error::format(format!("config: {e}")))?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Desk-scale training of the decode head and the last prompt block
// ---------------------------------------------------------------------------

/// Everything that stays constant while only the decode head and the final
/// prompt block train: the token state entering the last fusion and the
/// cached prompt-block input cells.
struct FrozenPrefix {
    tokens_pre: TokenTensor,
    /// Per token: concat(phi(LN(tokens_pre)), phi(LN(x_s))) cell, length 2C.
    cells: Vec<Vec<f64>>,
}

fn frozen_prefix(
    xyz: &XyzImage,
    saliency: &SaliencyMap,
    weights: &EncoderWeights,
) -> Result<FrozenPrefix> {
    let cfg = &weights.cfg;
    let last = cfg.depth - 1;
    let x_m = embed_image(xyz, &weights.embed_m, cfg.patch_size)?;
    let x_s = embed_image(saliency, &weights.embed_s, cfg.patch_size)?;
    let scores = sgtd_score(&x_s);
    let mask = sgtd_mask(&scores, x_s.batch, x_s.tokens, cfg.sgtd_tau)?;

    let mut x = x_m;
    for (i, _blk) in weights.blocks.iter().enumerate() {
        x = sgtd_apply(&x, &mask)?;
        x = crate::tokenops::block_forward(&x, &weights.blocks[i], cfg.heads);
        if i == last {
            break; // final fusion is the trainable part
        }
        if let Some(prompt) = &weights.prompts[i] {
            x = sscp_fuse(&x, &x_s, prompt)?;
        }
    }

    let prompt = weights.prompts[last]
        .as_ref()
        .ok_or_else(|| Error::validation("trainer needs a prompt block on the last layer"))?;
    let f_img = phi(&layer_norm(&x, &prompt.ln_img));
    let f_spec = phi(&layer_norm(&x_s, &prompt.ln_spec));
    let c = x.channels;
    let gw = x.grid.1;
    let mut cells = Vec::with_capacity(x.tokens);
    for n in 0..x.tokens {
        let (y, gx) = (n / gw, n % gw);
        let mut cell = vec![0.0; 2 * c];
        for ch in 0..c {
            cell[ch] = f_img.at(0, ch, y, gx);
            cell[c + ch] = f_spec.at(0, ch, y, gx);
        }
        cells.push(cell);
    }
    Ok(FrozenPrefix {
        tokens_pre: x,
        cells,
    })
}

/// Outcome of the sanity trainer.
pub struct TrainReport {
    pub prediction: SaliencyMap,
    pub losses: Vec<f64>,
}

/// Train the decode head plus the final prompt block on one scene with
/// plain gradient descent; everything else stays at its seeded value.
/// Gradients flow only through the fusion residual and the decoder, never
/// through attention.
pub fn train_decode_and_prompt(
    cube: &HsiCube,
    gt: &GroundTruthMask,
    cfg: &PipelineConfig,
    steps: usize,
    lr: f64,
) -> Result<TrainReport> {
    let (xyz, saliency) = decompose(cube, cfg)?;
    let mut weights = EncoderWeights::seeded(&cfg.effective_encoder());
    let prefix = frozen_prefix(&xyz, &saliency, &weights)?;
    let last = weights.cfg.depth - 1;
    let c = weights.cfg.channels;
    let p = weights.cfg.patch_size;
    let n_tokens = prefix.tokens_pre.tokens;
    let (gh, gw) = prefix.tokens_pre.grid;
    let (h, w) = (gh * p, gw * p);
    if gt.height() != h || gt.width() != w {
        return Err(Error::validation("ground truth does not match the cube"));
    }
    let gt_f: Vec<f64> = gt.data().iter().map(|v| *v as f64).collect();

    let hidden_dim = weights.prompts[last].as_ref().unwrap().conv1.out_dim;
    let mut losses = Vec::with_capacity(steps);
    let mut prediction = vec![0.0f64; h * w];

    for _ in 0..steps {
        let prompt = weights.prompts[last].as_ref().unwrap();
        // forward pass of the trainable tail
        let mut hidden_pre = vec![vec![0.0; hidden_dim]; n_tokens];
        let mut tokens = prefix.tokens_pre.clone();
        let mut fused = vec![0.0; c];
        for n in 0..n_tokens {
            prompt.conv1.forward(&prefix.cells[n], &mut hidden_pre[n]);
            let acts: Vec<f64> = hidden_pre[n].iter().map(|u| gelu(*u)).collect();
            prompt.conv2.forward(&acts, &mut fused);
            let tok = tokens.token_mut(0, n);
            for (t, f) in tok.iter_mut().zip(&fused) {
                *t += f;
            }
        }
        let mut logits = vec![vec![0.0; p * p]; n_tokens];
        for (n, logit) in logits.iter_mut().enumerate() {
            weights.decode.proj.forward(tokens.token(0, n), logit);
        }
        for n in 0..n_tokens {
            let (gy, gx) = (n / gw, n % gw);
            for r in 0..p {
                for cc in 0..p {
                    let z = logits[n][r * p + cc];
                    prediction[(gy * p + r) * w + gx * p + cc] = 1.0 / (1.0 + (-z).exp());
                }
            }
        }

        // decoder output supervises both loss terms while FDE is identity
        let report: LossReport = composite_on_slices(&prediction, &gt_f);
        losses.push(2.0 * report.total);

        // backward: dL/dz back through the sigmoid, both loss terms
        let mut dz = vec![vec![0.0; p * p]; n_tokens];
        for n in 0..n_tokens {
            let (gy, gx) = (n / gw, n % gw);
            for r in 0..p {
                for cc in 0..p {
                    let i = (gy * p + r) * w + gx * p + cc;
                    let s = prediction[i];
                    dz[n][r * p + cc] = 2.0 * report.grad[i] * s * (1.0 - s);
                }
            }
        }

        // decode head gradients and the gradient reaching the tokens
        let mut d_w_dec = vec![0.0; c * p * p];
        let mut d_b_dec = vec![0.0; p * p];
        let mut d_tok = vec![vec![0.0; c]; n_tokens];
        for n in 0..n_tokens {
            let tok = tokens.token(0, n);
            for k in 0..p * p {
                let g = dz[n][k];
                if g == 0.0 {
                    continue;
                }
                d_b_dec[k] += g;
                for ch in 0..c {
                    d_w_dec[ch * p * p + k] += tok[ch] * g;
                    d_tok[n][ch] += weights.decode.proj.w[ch * p * p + k] * g;
                }
            }
        }

        // prompt block gradients through the residual branch
        let mut d_w2 = vec![0.0; hidden_dim * c];
        let mut d_b2 = vec![0.0; c];
        let mut d_w1 = vec![0.0; 2 * c * hidden_dim];
        let mut d_b1 = vec![0.0; hidden_dim];
        for n in 0..n_tokens {
            let acts: Vec<f64> = hidden_pre[n].iter().map(|u| gelu(*u)).collect();
            let df = &d_tok[n]; // residual add passes the gradient through
            let mut dg = vec![0.0; hidden_dim];
            for i in 0..hidden_dim {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += prompt.conv2.w[i * c + j] * df[j];
                    d_w2[i * c + j] += acts[i] * df[j];
                }
                dg[i] = acc;
            }
            for j in 0..c {
                d_b2[j] += df[j];
            }
            for i in 0..hidden_dim {
                let du = dg[i] * gelu_prime(hidden_pre[n][i]);
                d_b1[i] += du;
                for (k, cell_v) in prefix.cells[n].iter().enumerate() {
                    d_w1[k * hidden_dim + i] += cell_v * du;
                }
            }
        }

        // plain SGD
        let prompt = weights.prompts[last].as_mut().unwrap();
        for (wv, g) in prompt.conv1.w.iter_mut().zip(&d_w1) {
            *wv -= lr * g;
        }
        for (bv, g) in prompt.conv1.b.iter_mut().zip(&d_b1) {
            *bv -= lr * g;
        }
        for (wv, g) in prompt.conv2.w.iter_mut().zip(&d_w2) {
            *wv -= lr * g;
        }
        for (bv, g) in prompt.conv2.b.iter_mut().zip(&d_b2) {
            *bv -= lr * g;
        }
        for (wv, g) in weights.decode.proj.w.iter_mut().zip(&d_w_dec) {
            *wv -= lr * g;
        }
        for (bv, g) in weights.decode.proj.b.iter_mut().zip(&d_b_dec) {
            *bv -= lr * g;
        }
    }

    Ok(TrainReport {
        prediction: SaliencyMap::new(h, w, 1, prediction)?,
        losses,
    })
}
