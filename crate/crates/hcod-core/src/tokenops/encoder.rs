//! The deterministic encoder: pre-LN attention blocks with saliency-guided
//! dropout re-applied before each block and prompt fusion after configured
//! blocks, plus the linear patch decoder.

use crate::error::{Error, Result};
use crate::hsicube::SaliencyMap;
use crate::ssdm::XyzImage;

use super::weights::{BlockWeights, EncoderWeights};
use super::{
    embed_image, gelu, layer_norm, sgtd_apply, sgtd_mask, sgtd_score, sscp_fuse, TokenMask,
    TokenTensor,
};

/// How dropped tokens are treated inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    /// Literal elementwise masking: dropped tokens enter attention as zero
    /// vectors and still occupy softmax slots.
    #[default]
    Soft,
    /// Soft masking with dropped keys excluded from the softmax, so
    /// attention renormalizes over kept tokens only.
    SoftRenorm,
    /// Dropped tokens are removed from the sequence before attention and
    /// their slots scattered back as zeros. Matches `SoftRenorm` on kept
    /// positions (value path) to float tolerance.
    Removal,
}

/// Attention row-sum bookkeeping for the stochasticity invariant.
#[derive(Debug, Clone, Default)]
pub struct AttentionProbe {
    /// Per block: (min, max) of all softmax row sums.
    pub row_sums: Vec<(f64, f64)>,
}

pub struct EncoderOutput {
    pub tokens: TokenTensor,
    pub mask: TokenMask,
    /// Projected spectral prompt tokens (X_S).
    pub spectral_tokens: TokenTensor,
}

/// Multi-head self-attention over one batch item. `keep` marks tokens that
/// participate as keys; `None` means all (the literal soft mode).
fn attention(
    x: &TokenTensor,
    blk: &BlockWeights,
    heads: usize,
    keep: Option<&[u8]>,
    probe: Option<&mut (f64, f64)>,
) -> TokenTensor {
    let (n, c) = (x.tokens, x.channels);
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let normed = layer_norm(x, &blk.ln1);

    let mut q = vec![0.0; x.batch * n * c];
    let mut k = vec![0.0; x.batch * n * c];
    let mut v = vec![0.0; x.batch * n * c];
    for b in 0..x.batch {
        for t in 0..n {
            let tok = normed.token(b, t);
            let base = (b * n + t) * c;
            blk.wq.forward(tok, &mut q[base..base + c]);
            blk.wk.forward(tok, &mut k[base..base + c]);
            blk.wv.forward(tok, &mut v[base..base + c]);
        }
    }

    let mut row_lo = f64::INFINITY;
    let mut row_hi = f64::NEG_INFINITY;
    let mut heads_out = vec![0.0; x.batch * n * c];
    let mut logits = vec![0.0; n];
    for b in 0..x.batch {
        for h in 0..heads {
            let off = h * d;
            for t in 0..n {
                let qrow = &q[(b * n + t) * c + off..(b * n + t) * c + off + d];
                for (j, logit) in logits.iter_mut().enumerate() {
                    let krow = &k[(b * n + j) * c + off..(b * n + j) * c + off + d];
                    *logit = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                // softmax over participating keys
                let mut max = f64::NEG_INFINITY;
                for (j, logit) in logits.iter().enumerate() {
                    if keep.is_none_or(|m| m[j] == 1) {
                        max = max.max(*logit);
                    }
                }
                let mut denom = 0.0;
                for (j, logit) in logits.iter().enumerate() {
                    if keep.is_none_or(|m| m[j] == 1) {
                        denom += (logit - max).exp();
                    }
                }
                let mut row_sum = 0.0;
                let out = &mut heads_out[(b * n + t) * c + off..(b * n + t) * c + off + d];
                for (j, logit) in logits.iter().enumerate() {
                    if keep.is_some_and(|m| m[j] == 0) {
                        continue;
                    }
                    let p = (logit - max).exp() / denom;
                    row_sum += p;
                    let vrow = &v[(b * n + j) * c + off..(b * n + j) * c + off + d];
                    for (o, vv) in out.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
                row_lo = row_lo.min(row_sum);
                row_hi = row_hi.max(row_sum);
            }
        }
    }
    if let Some(p) = probe {
        *p = (row_lo, row_hi);
    }

    let mut out = x.clone();
    let mut proj = vec![0.0; c];
    for b in 0..x.batch {
        for t in 0..n {
            let base = (b * n + t) * c;
            blk.wo.forward(&heads_out[base..base + c], &mut proj);
            let tok = out.token_mut(b, t);
            for (o, p) in tok.iter_mut().zip(&proj) {
                *o += p;
            }
        }
    }
    out
}

/// One full block (attention + MLP, both pre-LN residual) without any
/// masking or fusion. Used by the head trainer to materialize the frozen
/// prefix.
pub fn block_forward(x: &TokenTensor, blk: &BlockWeights, heads: usize) -> TokenTensor {
    let x = attention(x, blk, heads, None, None);
    mlp(&x, blk)
}

fn mlp(x: &TokenTensor, blk: &BlockWeights) -> TokenTensor {
    let normed = layer_norm(x, &blk.ln2);
    let mut out = x.clone();
    let mut hidden = vec![0.0; blk.mlp1.out_dim];
    let mut proj = vec![0.0; blk.mlp2.out_dim];
    for b in 0..x.batch {
        for t in 0..x.tokens {
            blk.mlp1.forward(normed.token(b, t), &mut hidden);
            for v in &mut hidden {
                *v = gelu(*v);
            }
            blk.mlp2.forward(&hidden, &mut proj);
            let tok = out.token_mut(b, t);
            for (o, p) in tok.iter_mut().zip(&proj) {
                *o += p;
            }
        }
    }
    out
}

/// Run one block in removal mode: gather kept tokens, run the block on the
/// short sequence, scatter back with zeros in dropped slots.
fn block_removal(
    x: &TokenTensor,
    blk: &BlockWeights,
    heads: usize,
    mask: &TokenMask,
    probe: Option<&mut (f64, f64)>,
) -> TokenTensor {
    debug_assert_eq!(x.batch, 1, "removal mode runs per batch item");
    let kept: Vec<usize> = (0..x.tokens).filter(|n| mask.get(0, *n) == 1).collect();
    if kept.is_empty() {
        return TokenTensor::zeros(x.batch, x.grid, x.channels);
    }
    // the short sequence keeps the original grid tag; attention and the MLP
    // never consult it
    let mut short = TokenTensor {
        batch: 1,
        tokens: kept.len(),
        channels: x.channels,
        grid: x.grid,
        data: Vec::with_capacity(kept.len() * x.channels),
    };
    for &n in &kept {
        short.data.extend_from_slice(x.token(0, n));
    }
    let short = attention(&short, blk, heads, None, probe);
    let short = mlp(&short, blk);
    let mut out = TokenTensor::zeros(x.batch, x.grid, x.channels);
    for (i, &n) in kept.iter().enumerate() {
        out.token_mut(0, n).copy_from_slice(short.token(0, i));
    }
    out
}

fn forward_impl(
    i_m: &XyzImage,
    i_s: &SaliencyMap,
    weights: &EncoderWeights,
    mode: ExecutionMode,
    mut probe: Option<&mut AttentionProbe>,
) -> Result<EncoderOutput> {
    let cfg = &weights.cfg;
    cfg.validate()?;
    if i_m.height() != i_s.height() || i_m.width() != i_s.width() {
        return Err(Error::validation(format!(
            "encoder: image {}x{} vs prompt {}x{}",
            i_m.height(),
            i_m.width(),
            i_s.height(),
            i_s.width()
        )));
    }
    let x_m = embed_image(i_m, &weights.embed_m, cfg.patch_size)?;
    let x_s = embed_image(i_s, &weights.embed_s, cfg.patch_size)?;
    let scores = sgtd_score(&x_s);
    let mask = sgtd_mask(&scores, x_s.batch, x_s.tokens, cfg.sgtd_tau)?;

    let mut x = x_m;
    for (i, blk) in weights.blocks.iter().enumerate() {
        x = sgtd_apply(&x, &mask)?;
        let mut sums = (f64::INFINITY, f64::NEG_INFINITY);
        let probe_slot = probe.as_deref_mut().map(|_| &mut sums);
        x = match mode {
            ExecutionMode::Soft => attention(&x, blk, cfg.heads, None, probe_slot),
            ExecutionMode::SoftRenorm => {
                attention(&x, blk, cfg.heads, Some(&mask.data), probe_slot)
            }
            ExecutionMode::Removal => {
                let after = block_removal(&x, blk, cfg.heads, &mask, probe_slot);
                if let Some(p) = probe.as_deref_mut() {
                    p.row_sums.push(sums);
                }
                if let Some(prompt) = &weights.prompts[i] {
                    x = sscp_fuse(&after, &x_s, prompt)?;
                } else {
                    x = after;
                }
                continue;
            }
        };
        if let Some(p) = probe.as_deref_mut() {
            p.row_sums.push(sums);
        }
        x = mlp(&x, blk);
        if let Some(prompt) = &weights.prompts[i] {
            x = sscp_fuse(&x, &x_s, prompt)?;
        }
    }
    Ok(EncoderOutput {
        tokens: x,
        mask,
        spectral_tokens: x_s,
    })
}

/// Full encoder pass: patchify both inputs, compute the dropout mask once
/// from the spectral tokens, and run the block stack.
pub fn encoder_forward(
    i_m: &XyzImage,
    i_s: &SaliencyMap,
    weights: &EncoderWeights,
    mode: ExecutionMode,
) -> Result<EncoderOutput> {
    forward_impl(i_m, i_s, weights, mode, None)
}

/// As [`encoder_forward`], additionally reporting attention row sums.
pub fn encoder_forward_probed(
    i_m: &XyzImage,
    i_s: &SaliencyMap,
    weights: &EncoderWeights,
    mode: ExecutionMode,
) -> Result<(EncoderOutput, AttentionProbe)> {
    let mut probe = AttentionProbe::default();
    let out = forward_impl(i_m, i_s, weights, mode, Some(&mut probe))?;
    Ok((out, probe))
}

/// Project tokens to patch logits, unpatchify in grid order, sigmoid.
pub fn decode_mask(tokens: &TokenTensor, weights: &EncoderWeights) -> Result<SaliencyMap> {
    let p = weights.cfg.patch_size;
    if weights.decode.proj.in_dim != tokens.channels || weights.decode.proj.out_dim != p * p {
        return Err(Error::validation("decode head does not match token shape"));
    }
    if tokens.batch != 1 {
        return Err(Error::validation("decode_mask expects a single batch item"));
    }
    let (gh, gw) = tokens.grid;
    let (h, w) = (gh * p, gw * p);
    let mut data = vec![0.0f64; h * w];
    let mut logits = vec![0.0; p * p];
    for n in 0..tokens.tokens {
        let (gy, gx) = (n / gw, n % gw);
        weights.decode.proj.forward(tokens.token(0, n), &mut logits);
        for r in 0..p {
            for c in 0..p {
                let z = logits[r * p + c];
                data[(gy * p + r) * w + gx * p + c] = 1.0 / (1.0 + (-z).exp());
            }
        }
    }
    SaliencyMap::new(h, w, 1, data)
}
