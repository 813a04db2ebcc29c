//! Differentiable attention on a [`Tape`]. Inputs are `(B, T, D)`.

use super::config::{AttentionConfig, ScoreKind};
use super::weights::{AttentionWeights, QkWeights};
use crate::error::{Error, Result};
use crate::mask::MaskSpec;
use crate::tape::{Tape, Var};

/// Whether score functions apply the layer's 1/denominator scale even when
/// `qk_norm` is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    /// Raw bilinear forms unless `qk_norm` is on.
    Raw,
    /// What the layer feeds to the softmax.
    Layer,
}

fn dims3(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [b, t, d] => Ok((b, t, d)),
        ref s => Err(Error::shape("attention input", s, &[0, 0, 0])),
    }
}

/// `(B,T,D) × (D, H·w)` split into heads `(B,H,T,w)`.
pub(crate) fn project_heads(tape: &mut Tape, x: Var, w: Var, heads: usize) -> Result<Var> {
    let (b, t, _) = dims3(tape, x)?;
    let y = tape.matmul(x, w)?;
    let hw = tape.shape(y)[2];
    if hw % heads != 0 {
        return Err(Error::shape("head split", &[hw], &[heads]));
    }
    let y = tape.reshape(y, &[b, t, heads, hw / heads])?;
    tape.permute(y, &[0, 2, 1, 3])
}

fn maybe_ln(tape: &mut Tape, v: Var, on: bool) -> Result<Var> {
    if on {
        tape.layer_norm(v)
    } else {
        Ok(v)
    }
}

/// `Σ_l ⊕_k Q_{l,k} K_{l,k}ᵀ` from per-head features `(B,H,T,Σ r_l)`.
/// Level `l` (zero-based) splits the sequence into `2^l` blocks; entries
/// outside a level's blocks receive nothing from it.
pub(crate) fn mlr_block_scores(tape: &mut Tape, q: Var, k: Var, ranks: &[usize], norm: bool) -> Result<Var> {
    let (b, h, t) = match *tape.shape(q) {
        [b, h, t, _] => (b, h, t),
        ref s => return Err(Error::shape("mlr_block_scores", s, &[0, 0, 0, 0])),
    };
    let mut total: Option<Var> = None;
    let mut off = 0;
    for (l, &rl) in ranks.iter().enumerate() {
        let p = 1 << l;
        if t % p != 0 {
            return Err(Error::config(format!("sequence length {t} is not divisible by {p} blocks")));
        }
        let mut side = |v: Var| -> Result<Var> {
            let v = tape.narrow(v, 3, off, rl)?;
            let v = maybe_ln(tape, v, norm)?;
            tape.reshape(v, &[b * h, p, t / p, rl])
        };
        let ql = side(q)?;
        let kl = side(k)?;
        off += rl;
        let kt = tape.transpose(kl)?;
        let blocks = tape.matmul(ql, kt)?;
        let sl = tape.block_diag(blocks)?;
        total = Some(match total {
            None => sl,
            Some(acc) => tape.add(acc, sl)?,
        });
    }
    let total = total.ok_or_else(|| Error::config("no levels"))?;
    tape.reshape(total, &[b, h, t, t])
}

/// Pre-softmax scores `(B,H,T,T)`.
pub fn scores(tape: &mut Tape, x: Var, qk: &QkWeights<Var>, cfg: &AttentionConfig, scaling: Scaling) -> Result<Var> {
    let (b, t, dim) = dims3(tape, x)?;
    cfg.validate(dim, Some(t))?;
    let h = cfg.heads;
    let r = cfg.head_dim(dim);
    let norm = cfg.qk_norm();
    let scale_on = norm || scaling == Scaling::Layer;
    let dot_scale = if cfg.sqrt_scaling {
        1.0 / (r as f64).sqrt()
    } else {
        1.0 / r as f64
    };
    match (&cfg.score, qk) {
        (ScoreKind::Standard, QkWeights::Dense { wq, wk }) => {
            let q = project_heads(tape, x, *wq, h)?;
            let k = project_heads(tape, x, *wk, h)?;
            let q = maybe_ln(tape, q, norm)?;
            let k = maybe_ln(tape, k, norm)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            if scaling == Scaling::Layer {
                tape.scale(s, dot_scale)
            } else {
                Ok(s)
            }
        }
        (ScoreKind::MlrAttention(c), QkWeights::Dense { wq, wk }) => {
            let q = project_heads(tape, x, *wq, h)?;
            let k = project_heads(tape, x, *wk, h)?;
            let s = mlr_block_scores(tape, q, k, c.rank_allocation().ranks(), norm)?;
            if scaling == Scaling::Layer {
                tape.scale(s, dot_scale)
            } else {
                Ok(s)
            }
        }
        (ScoreKind::BilinearMlr(c), QkWeights::BilinearMlr { wq, wk }) => {
            let ranks = c.rank_allocation().ranks();
            if wq.len() != ranks.len() || wk.len() != ranks.len() {
                return Err(Error::config("bilinear mlr weights do not match the level count"));
            }
            let mut total: Option<Var> = None;
            for (l, &rl) in ranks.iter().enumerate() {
                let p = 1 << l;
                let mut side = |w: Var| -> Result<Var> {
                    let xs = tape.reshape(x, &[b * t, p, dim / p])?;
                    let xs = tape.permute(xs, &[1, 0, 2])?;
                    let y = tape.matmul(xs, w)?;
                    let y = tape.reshape(y, &[p, b, t, h, rl])?;
                    let y = tape.permute(y, &[1, 3, 2, 0, 4])?;
                    let y = tape.reshape(y, &[b, h, t, p * rl])?;
                    maybe_ln(tape, y, norm)
                };
                let ql = side(wq[l])?;
                let kl = side(wk[l])?;
                let kt = tape.transpose(kl)?;
                let mut sl = tape.matmul(ql, kt)?;
                if scale_on {
                    sl = tape.scale(sl, cfg.norm_constant / (rl * p) as f64)?;
                }
                total = Some(match total {
                    None => sl,
                    Some(acc) => tape.add(acc, sl)?,
                });
            }
            Ok(total.expect("at least one level"))
        }
        (ScoreKind::BilinearBtt(s), QkWeights::BilinearBtt { left, right }) => {
            let (a, bb, c, d, sr) = (s.a(), s.b(), s.c(), s.d(), s.s());
            let (mut left, mut right) = (*left, *right);
            if cfg.weight_rms_norm {
                left = tape.rms_norm(left)?;
                let rh = tape.reshape(right, &[c, d, h, bb * sr])?;
                let rh = tape.rms_norm(rh)?;
                right = tape.reshape(rh, &[c, d, h * bb * sr])?;
            }
            // Keys: Y = X Mᵀ per head, built right factor first.
            let xs = tape.reshape(x, &[b * t, c, d])?;
            let xs = tape.permute(xs, &[1, 0, 2])?;
            let z = tape.matmul(xs, right)?;
            let z = tape.reshape(z, &[c, b * t, h, bb, sr])?;
            let z = tape.permute(z, &[2, 3, 1, 0, 4])?;
            let z = tape.reshape(z, &[h * bb, b * t, c * sr])?;
            let lt = tape.transpose(left)?;
            let y = tape.matmul(z, lt)?;
            let y = tape.reshape(y, &[h, bb, b, t, a])?;
            let y = tape.permute(y, &[2, 0, 3, 4, 1])?;
            let y = tape.reshape(y, &[b, h, t, dim])?;
            let xq = tape.reshape(x, &[b, 1, t, dim])?;
            let xq = maybe_ln(tape, xq, norm)?;
            let y = maybe_ln(tape, y, norm)?;
            let yt = tape.transpose(y)?;
            let sc = tape.matmul(xq, yt)?;
            if scale_on {
                tape.scale(sc, cfg.norm_constant / (a * bb) as f64)
            } else {
                Ok(sc)
            }
        }
        _ => Err(Error::config("weights do not match the configured score kind")),
    }
}

/// One attention layer: `Σ_h softmax(S_h) X W_{V,h} W_{O,h}`, returned as
/// `(B,T,D)`. `mask` must already be resolved for this layer.
pub fn forward(tape: &mut Tape, x: Var, w: &AttentionWeights<Var>, cfg: &AttentionConfig, mask: &MaskSpec) -> Result<Var> {
    let (b, t, dim) = dims3(tape, x)?;
    let h = cfg.heads;
    let r = cfg.head_dim(dim);
    mask.validate(t)?;
    cfg.check_feature_width(dim)?;
    let s = scores(tape, x, &w.qk, cfg, Scaling::Layer)?;
    let a = tape.softmax_rows_masked(s, mask)?;
    let v = project_heads(tape, x, w.wv, h)?;
    let o = tape.matmul(a, v)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, t, h * r])?;
    tape.matmul(o, w.wo)
}

/// Records every tensor of `w` as a trainable parameter.
pub fn bind_params(tape: &mut Tape, w: &AttentionWeights<crate::tensor::Tensor>) -> AttentionWeights<Var> {
    w.map(|t| tape.param(t.clone()))
}
