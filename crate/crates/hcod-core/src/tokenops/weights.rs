//! Encoder parameters: seeded deterministic initialization and the flat
//! f32 snapshot format (blob + JSON shape manifest).
//!
//! Init values are quantized to f32 up front so a snapshot round-trip of
//! freshly seeded weights is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::DetRng;

use super::EncoderConfig;

/// Dense layer, also used as a 1x1 convolution over grid cells.
/// `w` is row-major [in_dim][out_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearWeights {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearWeights {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    /// Uniform init in (-1/sqrt(in), 1/sqrt(in)), zero bias.
    pub fn seeded(rng: &mut DetRng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| quantize(rng.uniform(-bound, bound)))
            .collect();
        LinearWeights {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    /// Uniform init in [0, 1/sqrt(in)), zero bias. Used for the spectral
    /// prompt embedding so the channel-mean saliency score preserves the
    /// ordering of patch saliency at initialization.
    pub fn seeded_nonnegative(rng: &mut DetRng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| quantize(rng.uniform(0.0, bound)))
            .collect();
        LinearWeights {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        out.copy_from_slice(&self.b);
        for (i, x) in input.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let row = &self.w[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += x * wv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormWeights {
    pub fn identity(dim: usize) -> Self {
        LayerNormWeights {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// One pre-LN transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormWeights,
    pub wq: LinearWeights,
    pub wk: LinearWeights,
    pub wv: LinearWeights,
    pub wo: LinearWeights,
    pub ln2: LayerNormWeights,
    pub mlp1: LinearWeights,
    pub mlp2: LinearWeights,
}

/// Prompt block: LN both inputs, concat(2C) -> 1x1 conv -> GELU -> 1x1
/// conv (C). The final layer starts at zero so fusion begins as identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBlockWeights {
    pub ln_img: LayerNormWeights,
    pub ln_spec: LayerNormWeights,
    pub conv1: LinearWeights,
    pub conv2: LinearWeights,
}

/// Per-token projection to patch logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeHead {
    pub proj: LinearWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub cfg: EncoderConfig,
    pub embed_m: LinearWeights,
    pub embed_s: LinearWeights,
    pub blocks: Vec<BlockWeights>,
    /// One prompt block per configured prompt layer, indexed by block.
    pub prompts: Vec<Option<PromptBlockWeights>>,
    pub decode: DecodeHead,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

pub(super) fn seeded_image_embed(cfg: &EncoderConfig, img_channels: usize) -> LinearWeights {
    let mut rng = DetRng::new(cfg.seed, "embed-image");
    LinearWeights::seeded(
        &mut rng,
        cfg.patch_size * cfg.patch_size * img_channels,
        cfg.channels,
    )
}

impl EncoderWeights {
    /// Deterministic initialization from the config seed. Both embeddings
    /// assume 3-channel inputs (XYZ image and 3-level saliency prompt).
    pub fn seeded(cfg: &EncoderConfig) -> Self {
        let c = cfg.channels;
        let hidden = 4 * c;
        let embed_m = seeded_image_embed(cfg, 3);
        let mut rng = DetRng::new(cfg.seed, "embed-spectral");
        let embed_s =
            LinearWeights::seeded_nonnegative(&mut rng, cfg.patch_size * cfg.patch_size * 3, c);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut rng = DetRng::new(cfg.seed, &format!("block-{i}"));
                BlockWeights {
                    ln1: LayerNormWeights::identity(c),
                    wq: LinearWeights::seeded(&mut rng, c, c),
                    wk: LinearWeights::seeded(&mut rng, c, c),
                    wv: LinearWeights::seeded(&mut rng, c, c),
                    wo: LinearWeights::seeded(&mut rng, c, c),
                    ln2: LayerNormWeights::identity(c),
                    mlp1: LinearWeights::seeded(&mut rng, c, hidden),
                    mlp2: LinearWeights::seeded(&mut rng, hidden, c),
                }
            })
            .collect();
        let prompts = (0..cfg.depth)
            .map(|i| {
                if cfg.prompt_layers.contains(&i) {
                    let mut rng = DetRng::new(cfg.seed, &format!("prompt-{i}"));
                    Some(PromptBlockWeights {
                        ln_img: LayerNormWeights::identity(c),
                        ln_spec: LayerNormWeights::identity(c),
                        conv1: LinearWeights::seeded(&mut rng, 2 * c, c),
                        conv2: LinearWeights::zeros(c, c),
                    })
                } else {
                    None
                }
            })
            .collect();
        let mut rng = DetRng::new(cfg.seed, "decode-head");
        let decode = DecodeHead {
            proj: LinearWeights::seeded(&mut rng, c, cfg.patch_size * cfg.patch_size),
        };
        EncoderWeights {
            cfg: cfg.clone(),
            embed_m,
            embed_s,
            blocks,
            prompts,
            decode,
        }
    }

    /// Visit every tensor as (name, shape, values).
    fn visit<'a>(&'a self, mut f: impl FnMut(String, Vec<usize>, &'a [f64])) {
        let lin =
            |name: &str, l: &'a LinearWeights, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])| {
                f(format!("{name}.w"), vec![l.in_dim, l.out_dim], &l.w);
                f(format!("{name}.b"), vec![l.out_dim], &l.b);
            };
        let ln = |name: &str,
                  l: &'a LayerNormWeights,
                  f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])| {
            f(format!("{name}.gamma"), vec![l.gamma.len()], &l.gamma);
            f(format!("{name}.beta"), vec![l.beta.len()], &l.beta);
        };
        lin("embed_m", &self.embed_m, &mut f);
        lin("embed_s", &self.embed_s, &mut f);
        for (i, blk) in self.blocks.iter().enumerate() {
            ln(&format!("blocks.{i}.ln1"), &blk.ln1, &mut f);
            lin(&format!("blocks.{i}.wq"), &blk.wq, &mut f);
            lin(&format!("blocks.{i}.wk"), &blk.wk, &mut f);
            lin(&format!("blocks.{i}.wv"), &blk.wv, &mut f);
            lin(&format!("blocks.{i}.wo"), &blk.wo, &mut f);
            ln(&format!("blocks.{i}.ln2"), &blk.ln2, &mut f);
            lin(&format!("blocks.{i}.mlp1"), &blk.mlp1, &mut f);
            lin(&format!("blocks.{i}.mlp2"), &blk.mlp2, &mut f);
        }
        for (i, prompt) in self.prompts.iter().enumerate() {
            if let Some(p) = prompt {
                ln(&format!("prompts.{i}.ln_img"), &p.ln_img, &mut f);
                ln(&format!("prompts.{i}.ln_spec"), &p.ln_spec, &mut f);
                lin(&format!("prompts.{i}.conv1"), &p.conv1, &mut f);
                lin(&format!("prompts.{i}.conv2"), &p.conv2, &mut f);
            }
        }
        lin("decode.proj", &self.decode.proj, &mut f);
    }

    fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Vec<f64>)) {
        f("embed_m.w".into(), &mut self.embed_m.w);
        f("embed_m.b".into(), &mut self.embed_m.b);
        f("embed_s.w".into(), &mut self.embed_s.w);
        f("embed_s.b".into(), &mut self.embed_s.b);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            f(format!("blocks.{i}.ln1.gamma"), &mut blk.ln1.gamma);
            f(format!("blocks.{i}.ln1.beta"), &mut blk.ln1.beta);
            f(format!("blocks.{i}.wq.w"), &mut blk.wq.w);
            f(format!("blocks.{i}.wq.b"), &mut blk.wq.b);
            f(format!("blocks.{i}.wk.w"), &mut blk.wk.w);
            f(format!("blocks.{i}.wk.b"), &mut blk.wk.b);
            f(format!("blocks.{i}.wv.w"), &mut blk.wv.w);
            f(format!("blocks.{i}.wv.b"), &mut blk.wv.b);
            f(format!("blocks.{i}.wo.w"), &mut blk.wo.w);
            f(format!("blocks.{i}.wo.b"), &mut blk.wo.b);
            f(format!("blocks.{i}.ln2.gamma"), &mut blk.ln2.gamma);
            f(format!("blocks.{i}.ln2.beta"), &mut blk.ln2.beta);
            f(format!("blocks.{i}.mlp1.w"), &mut blk.mlp1.w);
            f(format!("blocks.{i}.mlp1.b"), &mut blk.mlp1.b);
            f(format!("blocks.{i}.mlp2.w"), &mut blk.mlp2.w);
            f(format!("blocks.{i}.mlp2.b"), &mut blk.mlp2.b);
        }
        for (i, prompt) in self.prompts.iter_mut().enumerate() {
            if let Some(p) = prompt {
                f(format!("prompts.{i}.ln_img.gamma"), &mut p.ln_img.gamma);
                f(format!("prompts.{i}.ln_img.beta"), &mut p.ln_img.beta);
                f(format!("prompts.{i}.ln_spec.gamma"), &mut p.ln_spec.gamma);
                f(format!("prompts.{i}.ln_spec.beta"), &mut p.ln_spec.beta);
                f(format!("prompts.{i}.conv1.w"), &mut p.conv1.w);
                f(format!("prompts.{i}.conv1.b"), &mut p.conv1.b);
                f(format!("prompts.{i}.conv2.w"), &mut p.conv2.w);
                f(format!("prompts.{i}.conv2.b"), &mut p.conv2.b);
            }
        }
        f("decode.proj.w".into(), &mut self.decode.proj.w);
        f("decode.proj.b".into(), &mut self.decode.proj.b);
    }
}

// ---------------------------------------------------------------------------
// Snapshot format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ManifestEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: EncoderConfig,
    tensors: Vec<ManifestEntry>,
}

/// Write weights as a flat little-endian f32 blob plus a JSON manifest.
pub fn save_snapshot(
    weights: &EncoderWeights,
    blob_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    weights.visit(|name, shape, values| {
        entries.push(ManifestEntry {
            name,
            shape,
            offset: blob.len() / 4,
        });
        for v in values {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        config: weights.cfg.clone(),
        tensors: entries,
    };
    fs::write(blob_path, blob)?;
    fs::write(
        manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(format!("manifest: {e}")))?,
    )?;
    Ok(())
}

/// Load a snapshot saved by [`save_snapshot`].
pub fn load_snapshot(
    blob_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<EncoderWeights> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)
        .map_err(|e| Error::format(format!("manifest: {e}")))?;
    manifest.config.validate()?;
    let blob = fs::read(blob_path)?;
    if blob.len() % 4 != 0 {
        return Err(Error::format("weight blob length not a multiple of 4"));
    }
    let floats: Vec<f64> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();

    let mut weights = EncoderWeights::seeded(&manifest.config);
    let mut cursor = 0usize;
    let mut err: Option<Error> = None;
    let mut idx = 0usize;
    weights.visit_mut(|name, values| {
        if err.is_some() {
            return;
        }
        let Some(entry) = manifest.tensors.get(idx) else {
            err = Some(Error::format("manifest has fewer tensors than the model"));
            return;
        };
        if entry.name != name || entry.len() != values.len() || entry.offset != cursor {
            err = Some(Error::format(format!(
                "manifest mismatch at {name}: expected {} values at {cursor}",
                values.len()
            )));
            return;
        }
        let Some(chunk) = floats.get(cursor..cursor + entry.len()) else {
            err = Some(Error::format("weight blob shorter than the manifest"));
            return;
        };
        values.copy_from_slice(chunk);
        cursor += entry.len();
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != manifest.tensors.len() || cursor != floats.len() {
        return Err(Error::format("weight blob longer than the manifest"));
    }
    Ok(weights)
}
