//! Attention layers: standard, bilinear MLR/BTT scoring and MLR attention.
//!
//! The functions here take a single sequence `X ∈ R^{T×D}` and run on a
//! private tape; [`layer`] exposes the batched, differentiable versions.

mod config;
pub mod layer;
mod weights;

use std::ops::Range;

pub use config::{AttentionConfig, BilinearMlrConfig, MlrAttentionConfig, ScoreKind};
pub use layer::Scaling;
pub use weights::{param_slots, AttentionWeights, ParamSlot, QkWeights};

use crate::error::{Error, Result};
use crate::mask::MaskSpec;
use crate::structured::StructuredMatrix;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn check_matrix(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [t, d] => Ok((t, d)),
        ref s => Err(Error::shape("sequence", s, &[0, 0])),
    }
}

/// `(XW_Q)(XW_K)ᵀ`.
pub fn score_matrix_standard(x: &Tensor, wq: &Tensor, wk: &Tensor) -> Result<Tensor> {
    check_matrix(x)?;
    if wq.shape() != wk.shape() || wq.rank() != 2 {
        return Err(Error::shape("score_matrix_standard", wq.shape(), wk.shape()));
    }
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    q.matmul(&k.t()?)
}

fn single_head(x: &Tensor, cfg: &AttentionConfig, qk: QkWeights<Tensor>, scaling: Scaling) -> Result<Tensor> {
    let (t, d) = check_matrix(x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.reshape(&[1, t, d])?);
    let qk = match qk {
        QkWeights::Dense { wq, wk } => QkWeights::Dense {
            wq: tape.leaf(wq),
            wk: tape.leaf(wk),
        },
        QkWeights::BilinearMlr { wq, wk } => QkWeights::BilinearMlr {
            wq: wq.into_iter().map(|w| tape.leaf(w)).collect(),
            wk: wk.into_iter().map(|w| tape.leaf(w)).collect(),
        },
        QkWeights::BilinearBtt { left, right } => QkWeights::BilinearBtt {
            left: tape.leaf(left),
            right: tape.leaf(right),
        },
    };
    let s = layer::scores(&mut tape, xv, &qk, cfg, scaling)?;
    tape.value(s).reshape(&[t, t])
}

/// Scores `x_jᵀ M x_{j'}` for one head's structured matrix `m`, computed
/// without materializing `M`. With `qk_norm` on, projected features are
/// layer-normalized and scaled by `C/(r_l p_l)` (MLR) or `C*/(ab)` (BTT).
pub fn score_matrix_bilinear(x: &Tensor, cfg: &AttentionConfig, m: &StructuredMatrix) -> Result<Tensor> {
    let (_, d) = check_matrix(x)?;
    if !matches!(cfg.score, ScoreKind::BilinearMlr(_) | ScoreKind::BilinearBtt(_)) {
        return Err(Error::config("score_matrix_bilinear needs a bilinear score kind"));
    }
    let one = AttentionConfig {
        heads: 1,
        ..cfg.clone()
    };
    let qk = AttentionWeights::qk_from_heads(&one, d, std::slice::from_ref(m))?;
    single_head(x, &one, qk, Scaling::Raw)
}

/// MLR attention scores `Σ_l ⊕_k Q_{l,k} K_{l,k}ᵀ` for one head, where the
/// columns of `wq` and `wk` are split into levels by the rank allocation.
pub fn score_matrix_mlr_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, cfg: &MlrAttentionConfig) -> Result<Tensor> {
    let (_, d) = check_matrix(x)?;
    let r = cfg.rank_allocation().total();
    if wq.shape() != [d, r] || wk.shape() != [d, r] {
        return Err(Error::shape("score_matrix_mlr_attention", wq.shape(), &[d, r]));
    }
    let (t, _) = check_matrix(x)?;
    cfg.validate(t)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.reshape(&[1, t, d])?);
    let (qv, kv) = (tape.leaf(wq.clone()), tape.leaf(wk.clone()));
    let q = layer::project_heads(&mut tape, xv, qv, 1)?;
    let k = layer::project_heads(&mut tape, xv, kv, 1)?;
    let s = layer::mlr_block_scores(&mut tape, q, k, cfg.rank_allocation().ranks(), false)?;
    tape.value(s).reshape(&[t, t])
}

/// Single-sequence attention layer output `(T, D)`.
pub fn attention_layer_forward(x: &Tensor, w: &AttentionWeights<Tensor>, cfg: &AttentionConfig, mask: &MaskSpec) -> Result<Tensor> {
    let (t, d) = check_matrix(x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.reshape(&[1, t, d])?);
    let wv = w.map(|p| tape.leaf(p.clone()));
    let y = layer::forward(&mut tape, xv, &wv, cfg, mask)?;
    tape.value(y).reshape(&[t, d])
}

/// Sets entries outside the causal sliding window to `−∞`: column `j'` is
/// kept for row `j` iff `j' ≤ j` and `j − j' ≤ window`.
pub fn sliding_window_scores(s: &Tensor, window: usize) -> Result<Tensor> {
    let (t, t2) = check_matrix(s)?;
    if t != t2 {
        return Err(Error::shape("sliding_window_scores", s.shape(), &[t, t]));
    }
    let mask = MaskSpec::SlidingWindow { window };
    Ok(Tensor::from_fn(&[t, t], |i| {
        if mask.allows(i[0], i[1]) {
            s.at(i)
        } else {
            f64::NEG_INFINITY
        }
    }))
}

/// Key positions each level keeps for decoding: the last block,
/// `[T(p_l − 1)/p_l, T)`.
pub fn retained_key_indices(cfg: &MlrAttentionConfig, seq_len: usize) -> Result<Vec<Range<usize>>> {
    cfg.validate(seq_len)?;
    Ok((0..cfg.levels())
        .map(|l| {
            let p = 1usize << l;
            seq_len * (p - 1) / p..seq_len
        })
        .collect())
}

/// Total retained key elements per head, `Σ_l r_l · |range_l|`.
pub fn retained_key_elements(cfg: &MlrAttentionConfig, seq_len: usize) -> Result<u128> {
    let ranges = retained_key_indices(cfg, seq_len)?;
    Ok(ranges
        .iter()
        .zip(cfg.rank_allocation().ranks())
        .map(|(r, &rl)| (r.len() * rl) as u128)
        .sum())
}

/// Splits `(T, T)` head scores of a `(B,H,T,T)` tensor; used by tests and
/// the CLI to inspect a layer.
pub fn head_scores(s: &Tensor, batch: usize, head: usize) -> Result<Tensor> {
    match *s.shape() {
        [b, h, t, t2] if batch < b && head < h => {
            let n = t * t2;
            let off = (batch * h + head) * n;
            Tensor::new(&[t, t2], s.data()[off..off + n].to_vec())
        }
        ref sh => Err(Error::shape("head_scores", sh, &[batch, head])),
    }
}
