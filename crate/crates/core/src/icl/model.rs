//! Pre-norm transformer for the regression task.
//!
//! `h₀ = X W_in + P`, then per layer `h += attn(rms(h))` and
//! `h += gelu(rms(h) W₁) W₂`, and finally `ŷ = rms(h) W_out`. Positional
//! embeddings `P` and the readout `W_out` start at zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{layer, param_slots, AttentionConfig, AttentionWeights, ScoreKind};
use crate::error::{Error, Result};
use crate::mask::MaskSpec;
use crate::mup::{init_tensor, MupEntry, MupRole, MupRule};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn default_mlp_ratio() -> usize {
    4
}

fn default_mask() -> MaskSpec {
    MaskSpec::Causal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub d_input: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Attention used by every layer unless `per_layer` is given.
    pub attention: AttentionConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer: Vec<AttentionConfig>,
    #[serde(default = "default_mask")]
    pub mask: MaskSpec,
}

impl ModelConfig {
    pub fn new(layers: usize, dim: usize, d_input: usize, attention: AttentionConfig) -> Self {
        ModelConfig {
            layers,
            dim,
            d_input,
            mlp_ratio: 4,
            attention,
            per_layer: vec![],
            mask: MaskSpec::Causal,
        }
    }

    pub fn layer_attention(&self, l: usize) -> &AttentionConfig {
        self.per_layer.get(l).unwrap_or(&self.attention)
    }

    /// Smallest length `≥ seq_len` every layer accepts. Padding goes at the
    /// end, where causal masking hides it from real positions.
    pub fn padded_len(&self, seq_len: usize) -> usize {
        (0..self.layers)
            .filter_map(|l| match &self.layer_attention(l).score {
                ScoreKind::MlrAttention(c) => Some(c.padded_len(seq_len)),
                _ => None,
            })
            .max()
            .unwrap_or(seq_len)
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.d_input == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("layers, dim, d_input and mlp_ratio must be positive"));
        }
        if !self.per_layer.is_empty() && self.per_layer.len() != self.layers {
            return Err(Error::config(format!(
                "per_layer lists {} configs for {} layers",
                self.per_layer.len(),
                self.layers
            )));
        }
        if !self.mask.is_causal() {
            return Err(Error::config("the regression model must be causal"));
        }
        let t = self.padded_len(seq_len);
        self.mask.validate(seq_len)?;
        if let MaskSpec::GlobalPlusSwa { global_layers, .. } = &self.mask {
            if let Some(l) = global_layers.iter().find(|&&l| l >= self.layers) {
                return Err(Error::config(format!("global layer {l} is outside 0..{}", self.layers)));
            }
        }
        for l in 0..self.layers {
            let a = self.layer_attention(l);
            a.validate(self.dim, Some(t))?;
            a.check_feature_width(self.dim)?;
        }
        Ok(())
    }
}

/// Name, shape and μP rule of one parameter. Rules are stored with
/// `base_lr = 1` and `D₁ = D`; trainers substitute their own.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub rule: MupRule,
    /// Starts at zero regardless of the rule.
    pub zero_init: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    max_len: usize,
    info: Vec<ParamInfo>,
    params: Vec<Tensor>,
}

/// Values recorded by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub params: Vec<Var>,
    /// `[B, T_padded]` predictions at every position.
    pub outputs: Var,
    /// Residual stream after the embedding and after each layer.
    pub residuals: Vec<Var>,
}

fn param_layout(cfg: &ModelConfig, max_len: usize) -> Result<Vec<ParamInfo>> {
    let d = cfg.dim;
    let rule = |role, fi, fo| MupRule::new(role, fi, fo, 1.0, d, d);
    let mut out = vec![
        ParamInfo {
            name: "embed.w".into(),
            shape: vec![cfg.d_input, d],
            rule: rule(MupRole::Embedding, cfg.d_input, d)?,
            zero_init: false,
        },
        ParamInfo {
            name: "embed.pos".into(),
            shape: vec![cfg.padded_len(max_len), d],
            rule: rule(MupRole::Embedding, 1, d)?,
            zero_init: true,
        },
    ];
    let hidden = cfg.mlp_ratio * d;
    for l in 0..cfg.layers {
        for s in param_slots(cfg.layer_attention(l), d, 1.0, d)? {
            out.push(ParamInfo {
                name: format!("layers.{l}.attn.{}", s.name),
                shape: s.shape,
                rule: s.rule,
                zero_init: false,
            });
        }
        out.push(ParamInfo {
            name: format!("layers.{l}.mlp.w1"),
            shape: vec![d, hidden],
            rule: rule(MupRole::HiddenDense, d, hidden)?,
            zero_init: false,
        });
        out.push(ParamInfo {
            name: format!("layers.{l}.mlp.w2"),
            shape: vec![hidden, d],
            rule: rule(MupRole::HiddenDense, hidden, d)?,
            zero_init: false,
        });
    }
    out.push(ParamInfo {
        name: "readout.w".into(),
        shape: vec![d, 1],
        rule: rule(MupRole::Output, d, 1)?,
        zero_init: true,
    });
    Ok(out)
}

impl Model {
    /// μP initialization for sequences of up to `max_len` tokens.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, max_len: usize, rng: &mut R) -> Result<Model> {
        cfg.validate(max_len)?;
        let info = param_layout(cfg, max_len)?;
        let params = info
            .iter()
            .map(|p| {
                if p.zero_init {
                    Tensor::zeros(&p.shape)
                } else {
                    init_tensor(&p.rule, &p.shape, rng)
                }
            })
            .collect();
        Ok(Model {
            cfg: cfg.clone(),
            max_len,
            info,
            params,
        })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(cfg: &ModelConfig, max_len: usize, params: Vec<Tensor>) -> Result<Model> {
        cfg.validate(max_len)?;
        let info = param_layout(cfg, max_len)?;
        if info.len() != params.len() {
            return Err(Error::Factor {
                location: "model parameter list".into(),
                expected: vec![info.len()],
                actual: vec![params.len()],
            });
        }
        for (i, p) in info.iter().zip(&params) {
            if i.shape != p.shape() {
                return Err(Error::Factor {
                    location: i.name.clone(),
                    expected: i.shape.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        Ok(Model {
            cfg: cfg.clone(),
            max_len,
            info,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.info.iter().position(|p| p.name == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// μP audit rows for base learning rate `base_lr` tuned at width
    /// `base_width`.
    pub fn mup_entries(&self, base_lr: f64, base_width: usize) -> Vec<MupEntry> {
        self.info
            .iter()
            .map(|p| MupEntry {
                path: p.name.clone(),
                rule: MupRule {
                    base_lr,
                    base_width,
                    ..p.rule
                },
            })
            .collect()
    }

    /// Records the forward pass of `tokens` (`[B, T, d_input]`, `T ≤
    /// max_len`) with every parameter as a trainable leaf.
    pub fn forward(&self, tape: &mut Tape, tokens: &Tensor) -> Result<Forward> {
        let (b, t) = match *tokens.shape() {
            [b, t, d] if d == self.cfg.d_input && t <= self.max_len => (b, t),
            ref s => return Err(Error::shape("Model::forward", s, &[self.max_len, self.cfg.d_input])),
        };
        let tp = self.cfg.padded_len(t);
        let input = if tp == t {
            tokens.clone()
        } else {
            let d = self.cfg.d_input;
            let mut data = vec![0.0; b * tp * d];
            for (dst, src) in data.chunks_exact_mut(tp * d).zip(tokens.data().chunks_exact(t * d)) {
                dst[..t * d].copy_from_slice(src);
            }
            Tensor::new(&[b, tp, d], data)?
        };
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.leaf(input);
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter layout");

        let w_in = take();
        let pos = take();
        let h = tape.matmul(x, w_in)?;
        let pos = tape.narrow(pos, 0, 0, tp)?;
        let mut h = tape.add_broadcast(h, pos)?;
        let mut residuals = vec![h];
        for l in 0..self.cfg.layers {
            let acfg = self.cfg.layer_attention(l);
            let n_attn = param_slots(acfg, self.cfg.dim, 1.0, self.cfg.dim)?.len();
            let attn_vars: Vec<Var> = (0..n_attn).map(|_| take()).collect();
            let weights = AttentionWeights::from_vec_with(acfg, attn_vars);
            let mask = self.cfg.mask.for_layer(l);
            let normed = tape.rms_norm(h)?;
            let a = layer::forward(tape, normed, &weights, acfg, &mask)?;
            h = tape.add(h, a)?;
            let (w1, w2) = (take(), take());
            let normed = tape.rms_norm(h)?;
            let u = tape.matmul(normed, w1)?;
            let u = tape.gelu(u)?;
            let m = tape.matmul(u, w2)?;
            h = tape.add(h, m)?;
            residuals.push(h);
        }
        let w_out = take();
        let normed = tape.rms_norm(h)?;
        let y = tape.matmul(normed, w_out)?;
        let outputs = tape.reshape(y, &[b, tp])?;
        Ok(Forward {
            params,
            outputs,
            residuals,
        })
    }

    /// Predictions `[B, N]` at the `x` positions `0, 2, …, 2N−2`.
    pub fn predictions(&self, tape: &mut Tape, fwd: &Forward, n_points: usize) -> Result<Var> {
        let idx: Vec<usize> = (0..n_points).map(|i| 2 * i).collect();
        tape.select(fwd.outputs, 1, &idx)
    }
}
