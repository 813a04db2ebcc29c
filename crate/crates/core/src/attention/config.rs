use serde::{Deserialize, Serialize};

use crate::allocation::RankAllocation;
use crate::error::{Error, Result};
use crate::structured::BttSpec;

/// Level structure of MLR attention: level `l` splits the sequence into
/// `2^{l−1}` equal blocks and spends rank `r_l` inside each block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MlrAttentionRaw", into = "MlrAttentionRaw")]
pub struct MlrAttentionConfig {
    rank_allocation: RankAllocation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlrAttentionRaw {
    rank_allocation: RankAllocation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<usize>,
}

impl TryFrom<MlrAttentionRaw> for MlrAttentionConfig {
    type Error = Error;
    fn try_from(r: MlrAttentionRaw) -> Result<Self> {
        check_levels(r.levels, &r.rank_allocation)?;
        Ok(MlrAttentionConfig::new(r.rank_allocation))
    }
}

impl From<MlrAttentionConfig> for MlrAttentionRaw {
    fn from(c: MlrAttentionConfig) -> Self {
        MlrAttentionRaw {
            levels: Some(c.rank_allocation.levels()),
            rank_allocation: c.rank_allocation,
        }
    }
}

fn check_levels(levels: Option<usize>, alloc: &RankAllocation) -> Result<()> {
    match levels {
        Some(l) if l != alloc.levels() => Err(Error::config(format!(
            "levels = {l} but rank allocation {alloc} has {} levels",
            alloc.levels()
        ))),
        _ => Ok(()),
    }
}

impl MlrAttentionConfig {
    pub fn new(rank_allocation: RankAllocation) -> Self {
        MlrAttentionConfig { rank_allocation }
    }

    pub fn rank_allocation(&self) -> &RankAllocation {
        &self.rank_allocation
    }

    pub fn levels(&self) -> usize {
        self.rank_allocation.levels()
    }

    /// `2^{L−1} | T`, and `T` exceeds the finest block count when `L > 1`.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let p = self.rank_allocation.finest_blocks();
        if seq_len % p != 0 {
            return Err(Error::config(format!(
                "sequence length {seq_len} is not divisible by the {p} finest blocks of {}",
                self.rank_allocation
            )));
        }
        if self.levels() > 1 && seq_len <= p {
            return Err(Error::config(format!(
                "sequence length {seq_len} must exceed the {p} finest blocks"
            )));
        }
        Ok(())
    }

    /// Number of levels at which tokens `j` and `j2` share a block.
    pub fn shared_levels(&self, j: usize, j2: usize, seq_len: usize) -> usize {
        (0..self.levels())
            .take_while(|&l| {
                let size = seq_len >> l;
                j / size == j2 / size
            })
            .count()
    }

    /// Smallest padded length `≥ seq_len` that satisfies [`Self::validate`].
    pub fn padded_len(&self, seq_len: usize) -> usize {
        let p = self.rank_allocation.finest_blocks();
        let mut t = seq_len.div_ceil(p) * p;
        if self.levels() > 1 && t <= p {
            t = 2 * p;
        }
        t
    }
}

/// How one layer scores query/key pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScoreKind {
    /// `x_jᵀ W_Q W_Kᵀ x_{j'}` with head dimension `r = D/H`.
    Standard,
    /// Per head, a `D×D` MLR matrix with `p_l = 2^{l−1}` equal blocks.
    BilinearMlr(BilinearMlrConfig),
    /// Per head, a `D×D` BTT matrix.
    BilinearBtt(BttSpec),
    MlrAttention(MlrAttentionConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MlrAttentionRaw", into = "MlrAttentionRaw")]
pub struct BilinearMlrConfig {
    rank_allocation: RankAllocation,
}

impl TryFrom<MlrAttentionRaw> for BilinearMlrConfig {
    type Error = Error;
    fn try_from(r: MlrAttentionRaw) -> Result<Self> {
        check_levels(r.levels, &r.rank_allocation)?;
        Ok(BilinearMlrConfig {
            rank_allocation: r.rank_allocation,
        })
    }
}

impl From<BilinearMlrConfig> for MlrAttentionRaw {
    fn from(c: BilinearMlrConfig) -> Self {
        MlrAttentionRaw {
            levels: Some(c.rank_allocation.levels()),
            rank_allocation: c.rank_allocation,
        }
    }
}

impl BilinearMlrConfig {
    pub fn new(rank_allocation: RankAllocation) -> Self {
        BilinearMlrConfig { rank_allocation }
    }

    pub fn rank_allocation(&self) -> &RankAllocation {
        &self.rank_allocation
    }
}

fn default_norm_constant() -> f64 {
    1.0
}

/// Attention configuration of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub score: ScoreKind,
    /// Layer-normalize projected features. Defaults to on for bilinear
    /// kinds and off otherwise.
    #[serde(default)]
    pub qk_norm: Option<bool>,
    /// `C` for bilinear MLR, `C*` for bilinear BTT.
    #[serde(default = "default_norm_constant")]
    pub norm_constant: f64,
    /// Scale standard and MLR-attention scores by `1/√r` instead of `1/r`.
    #[serde(default)]
    pub sqrt_scaling: bool,
    /// RMS-normalize BTT factors (over their last axis) before use.
    #[serde(default)]
    pub weight_rms_norm: bool,
}

impl AttentionConfig {
    pub fn new(heads: usize, score: ScoreKind) -> Self {
        AttentionConfig {
            heads,
            score,
            qk_norm: None,
            norm_constant: 1.0,
            sqrt_scaling: false,
            weight_rms_norm: false,
        }
    }

    pub fn standard(heads: usize) -> Self {
        AttentionConfig::new(heads, ScoreKind::Standard)
    }

    /// A small default configuration of score kind `kind` for width `dim`.
    ///
    /// MLR kinds split `r = D/H` over two levels when `r` and `D` allow it.
    /// BTT uses `D = ab` with `b = c` the largest divisor of `D` not above
    /// `√D`, and the smallest `s` with `cs ≥ r`.
    pub fn preset(kind: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not partition width {dim}")));
        }
        let r = dim / heads;
        let split = |r: usize| -> Result<RankAllocation> {
            if r >= 2 && dim % 2 == 0 {
                RankAllocation::new(vec![r - r / 2, r / 2])
            } else {
                RankAllocation::new(vec![r])
            }
        };
        let score = match kind {
            "standard" => ScoreKind::Standard,
            "mlr-attention" => ScoreKind::MlrAttention(MlrAttentionConfig::new(split(r)?)),
            "bilinear-mlr" => ScoreKind::BilinearMlr(BilinearMlrConfig::new(split(r)?)),
            "bilinear-btt" => {
                let q = (1..=dim.isqrt()).rev().find(|q| dim % q == 0).unwrap_or(1);
                let s = r.div_ceil(q);
                ScoreKind::BilinearBtt(BttSpec::new(dim / q, q, q, dim / q, s)?)
            }
            other => {
                return Err(Error::config(format!(
                    "unknown score kind {other:?}; expected standard, mlr-attention, bilinear-mlr or bilinear-btt"
                )))
            }
        };
        let cfg = AttentionConfig::new(heads, score);
        cfg.validate(dim, None)?;
        cfg.check_feature_width(dim)?;
        Ok(cfg)
    }

    pub fn with_qk_norm(mut self, on: bool) -> Self {
        self.qk_norm = Some(on);
        self
    }

    pub fn qk_norm(&self) -> bool {
        self.qk_norm.unwrap_or(matches!(
            self.score,
            ScoreKind::BilinearMlr(_) | ScoreKind::BilinearBtt(_)
        ))
    }

    pub fn kind_id(&self) -> &'static str {
        match self.score {
            ScoreKind::Standard => "standard",
            ScoreKind::BilinearMlr(_) => "bilinear-mlr",
            ScoreKind::BilinearBtt(_) => "bilinear-btt",
            ScoreKind::MlrAttention(_) => "mlr-attention",
        }
    }

    /// Value/output head dimension `r = D/H`.
    pub fn head_dim(&self, dim: usize) -> usize {
        dim / self.heads
    }

    /// Bilinear BTT heads project to `sbc` features; a layer whose value
    /// heads are wider than that is rejected.
    pub fn check_feature_width(&self, dim: usize) -> Result<()> {
        if let ScoreKind::BilinearBtt(s) = &self.score {
            let r = self.head_dim(dim);
            if s.inner() < r {
                return Err(Error::config(format!(
                    "btt feature width sbc = {} is below the head dimension {r}",
                    s.inner()
                )));
            }
        }
        Ok(())
    }

    /// Checks every shape invariant against model width `dim` and, when
    /// known, the (padded) sequence length.
    pub fn validate(&self, dim: usize, seq_len: Option<usize>) -> Result<()> {
        if self.heads == 0 || dim == 0 || dim % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not partition width {dim}",
                self.heads
            )));
        }
        if !(self.norm_constant > 0.0 && self.norm_constant.is_finite()) {
            return Err(Error::config("norm_constant must be positive"));
        }
        let r = self.head_dim(dim);
        if let ScoreKind::BilinearMlr(BilinearMlrConfig { rank_allocation })
        | ScoreKind::MlrAttention(MlrAttentionConfig { rank_allocation }) = &self.score
        {
            if rank_allocation.ranks().contains(&0) {
                return Err(Error::config(format!(
                    "attention rank allocation {rank_allocation} has an empty level"
                )));
            }
        }
        match &self.score {
            ScoreKind::Standard => {}
            ScoreKind::BilinearMlr(c) => {
                let p = c.rank_allocation.finest_blocks();
                if dim % p != 0 {
                    return Err(Error::config(format!(
                        "width {dim} is not divisible by the {p} finest blocks of {}",
                        c.rank_allocation
                    )));
                }
            }
            ScoreKind::BilinearBtt(s) => {
                if s.m() != dim || s.n() != dim {
                    return Err(Error::config(format!(
                        "btt needs ab = cd = {dim}, got ab = {} and cd = {}",
                        s.m(),
                        s.n()
                    )));
                }
            }
            ScoreKind::MlrAttention(c) => {
                if c.rank_allocation.total() != r {
                    return Err(Error::config(format!(
                        "rank allocation {} sums to {} but the head dimension is {r}",
                        c.rank_allocation,
                        c.rank_allocation.total()
                    )));
                }
                if let Some(t) = seq_len {
                    c.validate(t)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for kind in ["standard", "mlr-attention", "bilinear-mlr", "bilinear-btt"] {
            for (dim, heads) in [(4, 1), (8, 2), (12, 3), (64, 8), (64, 1)] {
                let c = AttentionConfig::preset(kind, dim, heads).unwrap();
                assert_eq!(c.kind_id(), kind);
            }
        }
        match AttentionConfig::preset("bilinear-btt", 64, 8).unwrap().score {
            ScoreKind::BilinearBtt(s) => assert_eq!((s.a(), s.b(), s.c(), s.d(), s.s()), (8, 8, 8, 8, 1)),
            _ => unreachable!(),
        }
        match AttentionConfig::preset("bilinear-btt", 64, 1).unwrap().score {
            ScoreKind::BilinearBtt(s) => assert_eq!(s.s(), 8),
            _ => unreachable!(),
        }
        assert!(AttentionConfig::preset("dense", 8, 2).is_err());
        assert!(AttentionConfig::preset("standard", 8, 3).is_err());
    }

    #[test]
    fn json_shapes() {
        let c: AttentionConfig = serde_json::from_str(
            r#"{"heads": 2, "score": {"kind": "mlr-attention", "levels": 3, "rank_allocation": "2|1|1"}}"#,
        )
        .unwrap();
        assert!(c.validate(8, Some(8)).is_ok());
        assert!(c.validate(8, Some(6)).is_err());
        assert!(!c.qk_norm());
        let bad = r#"{"heads": 2, "score": {"kind": "mlr-attention", "levels": 2, "rank_allocation": "2|1|1"}}"#;
        assert!(serde_json::from_str::<AttentionConfig>(bad).is_err());
        let btt: AttentionConfig = serde_json::from_str(
            r#"{"heads": 8, "score": {"kind": "bilinear-btt", "a": 8, "b": 8, "c": 8, "d": 8, "s": 1}}"#,
        )
        .unwrap();
        assert!(btt.qk_norm());
        assert!(btt.validate(64, None).is_ok());
        assert!(btt.validate(32, None).is_err());
        assert!(btt.check_feature_width(64).is_ok());
        let narrow = AttentionConfig::new(1, ScoreKind::BilinearBtt(BttSpec::new(16, 4, 4, 16, 1).unwrap()));
        assert!(narrow.validate(64, None).is_ok());
        assert!(narrow.check_feature_width(64).is_err());
        let extra = r#"{"heads": 1, "score": {"kind": "standard"}, "window": 3}"#;
        assert!(serde_json::from_str::<AttentionConfig>(extra).is_err());
    }

    #[test]
    fn shared_levels_follow_blocks() {
        let c = MlrAttentionConfig::new("1|1|1".parse().unwrap());
        assert_eq!(c.shared_levels(0, 7, 8), 1);
        assert_eq!(c.shared_levels(1, 3, 8), 2);
        assert_eq!(c.shared_levels(2, 3, 8), 3);
        assert_eq!(c.padded_len(7), 8);
        assert_eq!(c.padded_len(3), 8);
        assert_eq!(MlrAttentionConfig::new("4".parse().unwrap()).padded_len(3), 3);
    }
}
