use rand::Rng;

use super::config::{AttentionConfig, ScoreKind};
use crate::error::{Error, Result};
use crate::mup::{init_tensor, MupRole, MupRule};
use crate::structured::{MlrSpec, StructuredMatrix, StructuredSpec};
use crate::tensor::Tensor;

/// Query/key parameters, batched over heads.
#[derive(Debug, Clone, PartialEq)]
pub enum QkWeights<V> {
    /// `W_Q`, `W_K`: `(D, H·r)`, head-major columns. Used by standard and
    /// MLR attention (where each head's `r` columns split into levels).
    Dense { wq: V, wk: V },
    /// Per level `l`: `(p_l, D/p_l, H·r_l)` blocks for each side.
    BilinearMlr { wq: Vec<V>, wk: Vec<V> },
    /// `left: (H·b, a, cs)`, `right: (c, d, H·b·s)`.
    BilinearBtt { left: V, right: V },
}

/// All parameters of one attention layer. `wv: (D, H·r)`, `wo: (H·r, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<V> {
    pub qk: QkWeights<V>,
    pub wv: V,
    pub wo: V,
}

impl<V> AttentionWeights<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> AttentionWeights<U> {
        let qk = match &self.qk {
            QkWeights::Dense { wq, wk } => QkWeights::Dense { wq: f(wq), wk: f(wk) },
            QkWeights::BilinearMlr { wq, wk } => QkWeights::BilinearMlr {
                wq: wq.iter().map(&mut f).collect(),
                wk: wk.iter().map(&mut f).collect(),
            },
            QkWeights::BilinearBtt { left, right } => QkWeights::BilinearBtt {
                left: f(left),
                right: f(right),
            },
        };
        AttentionWeights {
            qk,
            wv: f(&self.wv),
            wo: f(&self.wo),
        }
    }

    /// Parameters with their local names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &V)> {
        let mut out = vec![];
        match &self.qk {
            QkWeights::Dense { wq, wk } => {
                out.push(("wq".to_string(), wq));
                out.push(("wk".to_string(), wk));
            }
            QkWeights::BilinearMlr { wq, wk } => {
                for (l, w) in wq.iter().enumerate() {
                    out.push((format!("wq[{l}]"), w));
                }
                for (l, w) in wk.iter().enumerate() {
                    out.push((format!("wk[{l}]"), w));
                }
            }
            QkWeights::BilinearBtt { left, right } => {
                out.push(("btt_left".to_string(), left));
                out.push(("btt_right".to_string(), right));
            }
        }
        out.push(("wv".to_string(), &self.wv));
        out.push(("wo".to_string(), &self.wo));
        out
    }

    pub fn into_vec(self) -> Vec<V> {
        let mut out = vec![];
        match self.qk {
            QkWeights::Dense { wq, wk } => out.extend([wq, wk]),
            QkWeights::BilinearMlr { wq, wk } => {
                out.extend(wq);
                out.extend(wk);
            }
            QkWeights::BilinearBtt { left, right } => out.extend([left, right]),
        }
        out.extend([self.wv, self.wo]);
        out
    }
}

/// Shape and μP rule of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub rule: MupRule,
}

/// The layer's parameters in [`AttentionWeights::named`] order.
pub fn param_slots(cfg: &AttentionConfig, dim: usize, base_lr: f64, base_width: usize) -> Result<Vec<ParamSlot>> {
    cfg.validate(dim, None)?;
    let h = cfg.heads;
    let r = cfg.head_dim(dim);
    let rule = |role, fan_in, fan_out| MupRule::new(role, fan_in, fan_out, base_lr, base_width, dim);
    let mut out = vec![];
    match &cfg.score {
        ScoreKind::Standard | ScoreKind::MlrAttention(_) => {
            for name in ["wq", "wk"] {
                out.push(ParamSlot {
                    name: name.into(),
                    shape: vec![dim, h * r],
                    rule: rule(MupRole::HiddenDense, dim, h * r)?,
                });
            }
        }
        ScoreKind::BilinearMlr(c) => {
            for side in ["wq", "wk"] {
                for (l, &rl) in c.rank_allocation().ranks().iter().enumerate() {
                    let p = 1 << l;
                    out.push(ParamSlot {
                        name: format!("{side}[{l}]"),
                        shape: vec![p, dim / p, h * rl],
                        rule: rule(MupRole::MlrFactor { blocks: p }, dim / p, h * rl.max(1))?,
                    });
                }
            }
        }
        ScoreKind::BilinearBtt(s) => {
            out.push(ParamSlot {
                name: "btt_left".into(),
                shape: vec![h * s.b(), s.a(), s.c() * s.s()],
                rule: rule(MupRole::BttLeft, s.c() * s.s(), s.a())?,
            });
            out.push(ParamSlot {
                name: "btt_right".into(),
                shape: vec![s.c(), s.d(), h * s.b() * s.s()],
                rule: rule(MupRole::BttRight { a: s.a() }, s.d(), s.b() * s.s())?,
            });
        }
    }
    out.push(ParamSlot {
        name: "wv".into(),
        shape: vec![dim, h * r],
        rule: rule(MupRole::HiddenDense, dim, h * r)?,
    });
    out.push(ParamSlot {
        name: "wo".into(),
        shape: vec![h * r, dim],
        rule: rule(MupRole::HiddenDense, h * r, dim)?,
    });
    Ok(out)
}

fn assemble<V>(cfg: &AttentionConfig, mut params: Vec<V>) -> AttentionWeights<V> {
    let wo = params.pop().expect("wo");
    let wv = params.pop().expect("wv");
    let qk = match &cfg.score {
        ScoreKind::Standard | ScoreKind::MlrAttention(_) => {
            let wk = params.pop().expect("wk");
            let wq = params.pop().expect("wq");
            QkWeights::Dense { wq, wk }
        }
        ScoreKind::BilinearMlr(_) => {
            let wk = params.split_off(params.len() / 2);
            QkWeights::BilinearMlr { wq: params, wk }
        }
        ScoreKind::BilinearBtt(_) => {
            let right = params.pop().expect("right");
            let left = params.pop().expect("left");
            QkWeights::BilinearBtt { left, right }
        }
    };
    AttentionWeights { qk, wv, wo }
}

impl AttentionWeights<Tensor> {
    /// μP initialization at width `dim`.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, dim: usize, rng: &mut R) -> Result<Self> {
        let slots = param_slots(cfg, dim, 1.0, dim)?;
        let params = slots.iter().map(|s| init_tensor(&s.rule, &s.shape, rng)).collect();
        Ok(assemble(cfg, params))
    }

    /// Wraps tensors given in [`AttentionWeights::named`] order, checking
    /// every shape.
    pub fn from_vec(cfg: &AttentionConfig, dim: usize, params: Vec<Tensor>) -> Result<Self> {
        let slots = param_slots(cfg, dim, 1.0, dim)?;
        if slots.len() != params.len() {
            return Err(Error::Factor {
                location: "attention parameter list".into(),
                expected: vec![slots.len()],
                actual: vec![params.len()],
            });
        }
        for (s, p) in slots.iter().zip(&params) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::Factor {
                    location: s.name.clone(),
                    expected: s.shape.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        Ok(assemble(cfg, params))
    }

    /// Head `h`'s query/key bilinear matrix as a structured matrix.
    pub fn head_matrix(&self, cfg: &AttentionConfig, dim: usize, h: usize) -> Result<StructuredMatrix> {
        let r = cfg.head_dim(dim);
        let cols = |w: &Tensor, lo: usize, width: usize| -> Tensor {
            let rows = w.shape()[w.rank() - 2];
            let batch: usize = w.shape()[..w.rank() - 2].iter().product();
            let total = w.shape()[w.rank() - 1];
            let mut data = Vec::with_capacity(batch * rows * width);
            for row in w.data().chunks_exact(total) {
                data.extend_from_slice(&row[lo..lo + width]);
            }
            let mut shape = w.shape().to_vec();
            *shape.last_mut().unwrap() = width;
            Tensor::new(&shape, data).expect("column slice")
        };
        let split_blocks = |t: Tensor| -> Vec<Tensor> {
            let (p, rows, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            t.data()
                .chunks_exact(rows * c)
                .take(p)
                .map(|b| Tensor::new(&[rows, c], b.to_vec()).unwrap())
                .collect()
        };
        match (&cfg.score, &self.qk) {
            (ScoreKind::Standard | ScoreKind::MlrAttention(_), QkWeights::Dense { wq, wk }) => {
                let spec = StructuredSpec::Mlr(MlrSpec::new(dim, dim, &[r])?);
                StructuredMatrix::new(spec, vec![cols(wq, h * r, r), cols(wk, h * r, r)])
            }
            (ScoreKind::BilinearMlr(c), QkWeights::BilinearMlr { wq, wk }) => {
                let ranks = c.rank_allocation().ranks();
                let spec = StructuredSpec::Mlr(MlrSpec::new(dim, dim, ranks)?);
                let mut factors = vec![];
                for side in [wq, wk] {
                    for (l, &rl) in ranks.iter().enumerate() {
                        factors.extend(split_blocks(cols(&side[l], h * rl, rl)));
                    }
                }
                StructuredMatrix::new(spec, factors)
            }
            (ScoreKind::BilinearBtt(s), QkWeights::BilinearBtt { left, right }) => {
                let bs = s.b() * s.s();
                let lb = left.shape()[1] * left.shape()[2];
                let mut factors: Vec<Tensor> = left.data()[h * s.b() * lb..(h + 1) * s.b() * lb]
                    .chunks_exact(lb)
                    .map(|b| Tensor::new(&[s.a(), s.c() * s.s()], b.to_vec()).unwrap())
                    .collect();
                factors.extend(split_blocks(cols(right, h * bs, bs)));
                StructuredMatrix::new(StructuredSpec::Btt(*s), factors)
            }
            _ => Err(Error::config("weights do not match the configured score kind")),
        }
    }

    /// Inverse of [`Self::head_matrix`] for the query/key part: builds the
    /// head-batched layout from one structured matrix per head.
    pub fn qk_from_heads(cfg: &AttentionConfig, dim: usize, heads: &[StructuredMatrix]) -> Result<QkWeights<Tensor>> {
        if heads.len() != cfg.heads {
            return Err(Error::config(format!("expected {} head matrices, got {}", cfg.heads, heads.len())));
        }
        // Concatenates per-head tensors of shape [..., rows, w] along the last axis.
        let concat_cols = |parts: Vec<Tensor>| -> Tensor {
            let w = parts[0].shape()[parts[0].rank() - 1];
            let rows = parts[0].len() / w;
            let mut data = Vec::with_capacity(rows * w * parts.len());
            for i in 0..rows {
                for p in &parts {
                    data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
                }
            }
            let mut shape = parts[0].shape().to_vec();
            *shape.last_mut().unwrap() = w * parts.len();
            Tensor::new(&shape, data).unwrap()
        };
        let stack = |blocks: &[Tensor]| -> Tensor {
            let mut shape = vec![blocks.len()];
            shape.extend_from_slice(blocks[0].shape());
            Tensor::new(&shape, blocks.iter().flat_map(|b| b.data().to_vec()).collect()).unwrap()
        };
        for m in heads {
            if m.dims() != (dim, dim) {
                return Err(Error::config("head matrices must be D×D"));
            }
        }
        match &cfg.score {
            ScoreKind::Standard | ScoreKind::MlrAttention(_) => {
                let mut wq = vec![];
                let mut wk = vec![];
                for m in heads {
                    match m.spec() {
                        StructuredSpec::LowRank(_) => {}
                        StructuredSpec::Mlr(s) if s.levels().len() == 1 => {}
                        _ => return Err(Error::config("dense query/key heads need single-factor matrices")),
                    }
                    wq.push(m.factors()[0].clone());
                    wk.push(m.factors()[1].clone());
                }
                Ok(QkWeights::Dense {
                    wq: concat_cols(wq),
                    wk: concat_cols(wk),
                })
            }
            ScoreKind::BilinearMlr(c) => {
                let expected = StructuredSpec::Mlr(MlrSpec::new(dim, dim, c.rank_allocation().ranks())?);
                if heads.iter().any(|m| m.spec() != &expected) {
                    return Err(Error::config("head matrices must use the configured dyadic mlr blocks"));
                }
                let levels = c.rank_allocation().levels();
                let mut wq = vec![];
                let mut wk = vec![];
                for l in 0..levels {
                    let p = 1 << l;
                    let lefts_before: usize = (0..l).map(|x| 1 << x).sum();
                    let total: usize = (0..levels).map(|x| 1 << x).sum();
                    let mut q_parts = vec![];
                    let mut k_parts = vec![];
                    for m in heads {
                        let f = m.factors();
                        q_parts.push(stack(&f[lefts_before..lefts_before + p]));
                        k_parts.push(stack(&f[total + lefts_before..total + lefts_before + p]));
                    }
                    wq.push(concat_cols(q_parts));
                    wk.push(concat_cols(k_parts));
                }
                Ok(QkWeights::BilinearMlr { wq, wk })
            }
            ScoreKind::BilinearBtt(s) => {
                if heads.iter().any(|m| m.spec() != &StructuredSpec::Btt(*s)) {
                    return Err(Error::config("head matrices must use the configured btt spec"));
                }
                let mut left_blocks = vec![];
                let mut right_parts = vec![];
                for m in heads {
                    let f = m.factors();
                    left_blocks.extend_from_slice(&f[..s.b()]);
                    right_parts.push(stack(&f[s.b()..]));
                }
                Ok(QkWeights::BilinearBtt {
                    left: stack(&left_blocks),
                    right: concat_cols(right_parts),
                })
            }
        }
    }
}

impl<V> AttentionWeights<V> {
    /// Groups a flat list in [`AttentionWeights::named`] order. The caller
    /// guarantees the count matches [`param_slots`].
    pub fn from_vec_with(cfg: &AttentionConfig, params: Vec<V>) -> Self {
        assemble(cfg, params)
    }
}
