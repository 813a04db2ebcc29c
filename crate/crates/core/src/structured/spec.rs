use serde::{Deserialize, Serialize};

use super::perm::PermutationMap;
use crate::error::{Error, Result};

/// A matrix family with all of its dimension hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum StructuredSpec {
    Dense(DenseSpec),
    LowRank(LowRankSpec),
    BlockDiag(BlockDiagSpec),
    Mlr(MlrSpec),
    Btt(BttSpec),
    Mlbtc(MlbtcSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSpec {
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LowRankRaw", into = "LowRankRaw")]
pub struct LowRankSpec {
    m: usize,
    n: usize,
    r: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LowRankRaw {
    m: usize,
    n: usize,
    r: usize,
}

impl TryFrom<LowRankRaw> for LowRankSpec {
    type Error = Error;
    fn try_from(r: LowRankRaw) -> Result<Self> {
        LowRankSpec::new(r.m, r.n, r.r)
    }
}

impl From<LowRankSpec> for LowRankRaw {
    fn from(s: LowRankSpec) -> Self {
        LowRankRaw {
            m: s.m,
            n: s.n,
            r: s.r,
        }
    }
}

impl LowRankSpec {
    pub fn new(m: usize, n: usize, r: usize) -> Result<Self> {
        if m == 0 || n == 0 || r == 0 || r > m.min(n) {
            return Err(Error::config(format!(
                "low-rank spec needs 1 <= r <= min(m, n), got m={m} n={n} r={r}"
            )));
        }
        Ok(LowRankSpec { m, n, r })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BlockDiagRaw", into = "BlockDiagRaw")]
pub struct BlockDiagSpec {
    row_blocks: Vec<usize>,
    col_blocks: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDiagRaw {
    row_blocks: Vec<usize>,
    col_blocks: Vec<usize>,
}

impl TryFrom<BlockDiagRaw> for BlockDiagSpec {
    type Error = Error;
    fn try_from(r: BlockDiagRaw) -> Result<Self> {
        BlockDiagSpec::new(r.row_blocks, r.col_blocks)
    }
}

impl From<BlockDiagSpec> for BlockDiagRaw {
    fn from(s: BlockDiagSpec) -> Self {
        BlockDiagRaw {
            row_blocks: s.row_blocks,
            col_blocks: s.col_blocks,
        }
    }
}

impl BlockDiagSpec {
    pub fn new(row_blocks: Vec<usize>, col_blocks: Vec<usize>) -> Result<Self> {
        if row_blocks.is_empty()
            || row_blocks.len() != col_blocks.len()
            || row_blocks.iter().chain(&col_blocks).any(|&b| b == 0)
        {
            return Err(Error::config(
                "block-diagonal spec needs matching, non-empty, positive block sizes",
            ));
        }
        Ok(BlockDiagSpec {
            row_blocks,
            col_blocks,
        })
    }

    pub fn row_blocks(&self) -> &[usize] {
        &self.row_blocks
    }

    pub fn col_blocks(&self) -> &[usize] {
        &self.col_blocks
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlrLevel {
    pub rank: usize,
    pub row_blocks: Vec<usize>,
    pub col_blocks: Vec<usize>,
}

impl MlrLevel {
    pub fn blocks(&self) -> usize {
        self.row_blocks.len()
    }
}

/// Sum over levels of block-diagonal low-rank matrices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MlrRaw", into = "MlrRaw")]
pub struct MlrSpec {
    m: usize,
    n: usize,
    levels: Vec<MlrLevel>,
}

/// Either `ranks` (default power-of-two equal blocking) or explicit `levels`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlrRaw {
    m: usize,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<MlrLevel>>,
}

impl TryFrom<MlrRaw> for MlrSpec {
    type Error = Error;
    fn try_from(r: MlrRaw) -> Result<Self> {
        match (r.ranks, r.levels) {
            (Some(ranks), None) => MlrSpec::new(r.m, r.n, &ranks),
            (None, Some(levels)) => MlrSpec::uneven(r.m, r.n, levels),
            _ => Err(Error::config("mlr spec needs exactly one of `ranks` or `levels`")),
        }
    }
}

impl From<MlrSpec> for MlrRaw {
    fn from(s: MlrSpec) -> Self {
        MlrRaw {
            m: s.m,
            n: s.n,
            ranks: None,
            levels: Some(s.levels),
        }
    }
}

impl MlrSpec {
    /// Level `l` (1-based) has `2^{l−1}` equal blocks.
    pub fn new(m: usize, n: usize, ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() || ranks.len() > 31 {
            return Err(Error::config("mlr spec needs between 1 and 31 levels"));
        }
        let finest = 1usize << (ranks.len() - 1);
        if m == 0 || n == 0 || m % finest != 0 || n % finest != 0 {
            return Err(Error::config(format!(
                "{} levels need 2^{} to divide both m={m} and n={n}; use uneven blocks otherwise",
                ranks.len(),
                ranks.len() - 1
            )));
        }
        let levels = ranks
            .iter()
            .enumerate()
            .map(|(l, &rank)| {
                let p = 1usize << l;
                MlrLevel {
                    rank,
                    row_blocks: vec![m / p; p],
                    col_blocks: vec![n / p; p],
                }
            })
            .collect();
        MlrSpec::uneven(m, n, levels)
    }

    /// Arbitrary per-level block sizes.
    pub fn uneven(m: usize, n: usize, levels: Vec<MlrLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("mlr spec needs at least one level"));
        }
        for (l, lev) in levels.iter().enumerate() {
            if lev.row_blocks.is_empty() || lev.row_blocks.len() != lev.col_blocks.len() {
                return Err(Error::config(format!(
                    "level {l}: row and column block counts differ or are zero"
                )));
            }
            if lev.row_blocks.iter().chain(&lev.col_blocks).any(|&b| b == 0) {
                return Err(Error::config(format!("level {l}: empty block")));
            }
            if lev.row_blocks.iter().sum::<usize>() != m || lev.col_blocks.iter().sum::<usize>() != n {
                return Err(Error::config(format!(
                    "level {l}: block sizes must sum to m={m} and n={n}"
                )));
            }
        }
        if levels.iter().all(|l| l.rank == 0) {
            return Err(Error::config("mlr spec has zero total rank"));
        }
        Ok(MlrSpec { m, n, levels })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn levels(&self) -> &[MlrLevel] {
        &self.levels
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.rank).collect()
    }

    /// `Σ_l r_l`.
    pub fn mlr_rank(&self) -> usize {
        self.levels.iter().map(|l| l.rank).sum()
    }
}

/// `P_L (⊕ L_{k'}) P_R (⊕ R_kᵀ)` with `L_{k'}: a×cs` (b of them) and
/// `R_k: d×bs` (c of them); the matrix is `ab × cd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BttRaw", into = "BttRaw")]
pub struct BttSpec {
    a: usize,
    b: usize,
    c: usize,
    d: usize,
    s: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BttRaw {
    a: usize,
    b: usize,
    c: usize,
    d: usize,
    s: usize,
}

impl TryFrom<BttRaw> for BttSpec {
    type Error = Error;
    fn try_from(r: BttRaw) -> Result<Self> {
        BttSpec::new(r.a, r.b, r.c, r.d, r.s)
    }
}

impl From<BttSpec> for BttRaw {
    fn from(s: BttSpec) -> Self {
        BttRaw {
            a: s.a,
            b: s.b,
            c: s.c,
            d: s.d,
            s: s.s,
        }
    }
}

impl BttSpec {
    pub fn new(a: usize, b: usize, c: usize, d: usize, s: usize) -> Result<Self> {
        if [a, b, c, d, s].contains(&0) {
            return Err(Error::config(format!(
                "btt dims must be positive, got a={a} b={b} c={c} d={d} s={s}"
            )));
        }
        Ok(BttSpec { a, b, c, d, s })
    }

    /// `a = b = c = d = √D`.
    pub fn square(dim: usize, s: usize) -> Result<Self> {
        let q = dim.isqrt();
        if q * q != dim {
            return Err(Error::config(format!("{dim} is not a perfect square")));
        }
        BttSpec::new(q, q, q, q, s)
    }

    pub fn a(&self) -> usize {
        self.a
    }
    pub fn b(&self) -> usize {
        self.b
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn s(&self) -> usize {
        self.s
    }

    pub fn m(&self) -> usize {
        self.a * self.b
    }

    pub fn n(&self) -> usize {
        self.c * self.d
    }

    /// Width of the intermediate vector between the two block banks.
    pub fn inner(&self) -> usize {
        self.b * self.c * self.s
    }

    pub fn p_left(&self) -> PermutationMap {
        super::perm_reshape_transpose(self.b, self.a, 1)
    }

    pub fn p_right(&self) -> PermutationMap {
        super::perm_reshape_transpose(self.c, self.b, self.s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlbtcLevel {
    /// Fixed scale; not trained.
    pub alpha: f64,
    /// `r'_l`, the column count of each left block.
    pub left_rank: usize,
    /// `r_l`, the column count of each right block.
    pub right_rank: usize,
    /// `m_{l,k'}`.
    pub left_blocks: Vec<usize>,
    /// `n_{l,k}`.
    pub right_blocks: Vec<usize>,
}

impl MlbtcLevel {
    pub fn inner(&self) -> usize {
        self.right_blocks.len() * self.right_rank
    }
}

/// `Σ_l α_l P_L (⊕ L_{l,k'}) P_R (⊕ R_{l,k}ᵀ)` with permutations shared by
/// all levels. A permutation left out (`null`) is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlbtcRaw", into = "MlbtcRaw")]
pub struct MlbtcSpec {
    m: usize,
    n: usize,
    levels: Vec<MlbtcLevel>,
    p_left: Option<PermutationMap>,
    p_right: Option<PermutationMap>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlbtcRaw {
    m: usize,
    n: usize,
    levels: Vec<MlbtcLevel>,
    #[serde(default)]
    p_left: Option<PermutationMap>,
    #[serde(default)]
    p_right: Option<PermutationMap>,
}

impl TryFrom<MlbtcRaw> for MlbtcSpec {
    type Error = Error;
    fn try_from(r: MlbtcRaw) -> Result<Self> {
        MlbtcSpec::new(r.m, r.n, r.levels, r.p_left, r.p_right)
    }
}

impl From<MlbtcSpec> for MlbtcRaw {
    fn from(s: MlbtcSpec) -> Self {
        MlbtcRaw {
            m: s.m,
            n: s.n,
            levels: s.levels,
            p_left: s.p_left,
            p_right: s.p_right,
        }
    }
}

impl MlbtcSpec {
    /// A single `P_R` must fit every level, so with a non-identity `P_R` all
    /// levels need the same inner width `p_l r_l`.
    pub fn new(
        m: usize,
        n: usize,
        levels: Vec<MlbtcLevel>,
        p_left: Option<PermutationMap>,
        p_right: Option<PermutationMap>,
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("mlbtc spec needs at least one level"));
        }
        for (l, lev) in levels.iter().enumerate() {
            if lev.left_blocks.is_empty() || lev.right_blocks.is_empty() {
                return Err(Error::config(format!("level {l}: no blocks")));
            }
            if lev.left_blocks.iter().chain(&lev.right_blocks).any(|&b| b == 0) {
                return Err(Error::config(format!("level {l}: empty block")));
            }
            if lev.left_blocks.iter().sum::<usize>() != m || lev.right_blocks.iter().sum::<usize>() != n {
                return Err(Error::config(format!(
                    "level {l}: block sizes must sum to m={m} and n={n}"
                )));
            }
            if lev.left_blocks.len() * lev.left_rank != lev.inner() {
                return Err(Error::config(format!(
                    "level {l}: p'·r' = {} but p·r = {}",
                    lev.left_blocks.len() * lev.left_rank,
                    lev.inner()
                )));
            }
            if !lev.alpha.is_finite() {
                return Err(Error::config(format!("level {l}: alpha is not finite")));
            }
            if let Some(p) = &p_right {
                if p.len() != lev.inner() {
                    return Err(Error::config(format!(
                        "level {l}: inner width {} does not match P_R of length {}",
                        lev.inner(),
                        p.len()
                    )));
                }
            }
        }
        if levels.iter().all(|l| l.inner() == 0) {
            return Err(Error::config("mlbtc spec has zero total rank"));
        }
        if let Some(p) = &p_left {
            if p.len() != m {
                return Err(Error::config(format!(
                    "P_L has length {} but m = {m}",
                    p.len()
                )));
            }
        }
        Ok(MlbtcSpec {
            m,
            n,
            levels,
            p_left,
            p_right,
        })
    }

    /// `α_l = 1`, identity permutations, `p'_l = p_l`, `r'_l = r_l`.
    pub fn from_mlr(mlr: &MlrSpec) -> Self {
        let levels = mlr
            .levels()
            .iter()
            .map(|lev| MlbtcLevel {
                alpha: 1.0,
                left_rank: lev.rank,
                right_rank: lev.rank,
                left_blocks: lev.row_blocks.clone(),
                right_blocks: lev.col_blocks.clone(),
            })
            .collect();
        MlbtcSpec::new(mlr.m(), mlr.n(), levels, None, None).expect("valid mlr gives valid mlbtc")
    }

    /// `p' = b`, `p = c`, `r' = cs`, `r = bs`, blocks `a` and `d`.
    pub fn btt_level(btt: &BttSpec, alpha: f64) -> MlbtcLevel {
        MlbtcLevel {
            alpha,
            left_rank: btt.c() * btt.s(),
            right_rank: btt.b() * btt.s(),
            left_blocks: vec![btt.a(); btt.b()],
            right_blocks: vec![btt.d(); btt.c()],
        }
    }

    /// One active BTT level among `count` identically shaped levels.
    pub fn from_btt(btt: &BttSpec, count: usize, active: usize) -> Self {
        assert!(active < count);
        let levels = (0..count)
            .map(|l| MlbtcSpec::btt_level(btt, if l == active { 1.0 } else { 0.0 }))
            .collect();
        MlbtcSpec::new(
            btt.m(),
            btt.n(),
            levels,
            Some(btt.p_left()),
            Some(btt.p_right()),
        )
        .expect("valid btt gives valid mlbtc")
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn levels(&self) -> &[MlbtcLevel] {
        &self.levels
    }

    pub fn p_left(&self) -> Option<&PermutationMap> {
        self.p_left.as_ref()
    }

    pub fn p_right(&self) -> Option<&PermutationMap> {
        self.p_right.as_ref()
    }
}

/// Where a factor lives and what shape it must have.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorSlot {
    pub location: String,
    pub shape: Vec<usize>,
    /// Variance of the default initialization is `1 / fan_in`.
    pub fan_in: usize,
}

impl FactorSlot {
    fn left(location: String, rows: usize, cols: usize) -> Self {
        FactorSlot {
            location,
            shape: vec![rows, cols],
            fan_in: cols,
        }
    }

    fn right(location: String, rows: usize, cols: usize) -> Self {
        FactorSlot {
            location,
            shape: vec![rows, cols],
            fan_in: rows,
        }
    }
}

impl StructuredSpec {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            StructuredSpec::Dense(s) => (s.m, s.n),
            StructuredSpec::LowRank(s) => (s.m, s.n),
            StructuredSpec::BlockDiag(s) => (s.row_blocks.iter().sum(), s.col_blocks.iter().sum()),
            StructuredSpec::Mlr(s) => (s.m, s.n),
            StructuredSpec::Btt(s) => (s.m(), s.n()),
            StructuredSpec::Mlbtc(s) => (s.m, s.n),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            StructuredSpec::Dense(_) => "dense",
            StructuredSpec::LowRank(_) => "low-rank",
            StructuredSpec::BlockDiag(_) => "block-diag",
            StructuredSpec::Mlr(_) => "mlr",
            StructuredSpec::Btt(_) => "btt",
            StructuredSpec::Mlbtc(_) => "mlbtc",
        }
    }

    /// Every factor in canonical order: all left factors (level-major), then
    /// all right factors.
    pub fn factor_slots(&self) -> Vec<FactorSlot> {
        match self {
            StructuredSpec::Dense(s) => vec![FactorSlot::left("w".into(), s.m, s.n)],
            StructuredSpec::LowRank(s) => vec![
                FactorSlot::left("left".into(), s.m, s.r),
                FactorSlot::right("right".into(), s.n, s.r),
            ],
            StructuredSpec::BlockDiag(s) => s
                .row_blocks
                .iter()
                .zip(&s.col_blocks)
                .enumerate()
                .map(|(k, (&r, &c))| FactorSlot::left(format!("block[{k}]"), r, c))
                .collect(),
            StructuredSpec::Mlr(s) => {
                let mut out = vec![];
                for (l, lev) in s.levels.iter().enumerate() {
                    for (k, &rows) in lev.row_blocks.iter().enumerate() {
                        out.push(FactorSlot::left(format!("left[{l}][{k}]"), rows, lev.rank));
                    }
                }
                for (l, lev) in s.levels.iter().enumerate() {
                    for (k, &rows) in lev.col_blocks.iter().enumerate() {
                        out.push(FactorSlot::right(format!("right[{l}][{k}]"), rows, lev.rank));
                    }
                }
                out
            }
            StructuredSpec::Btt(s) => {
                let mut out: Vec<FactorSlot> = (0..s.b)
                    .map(|k| FactorSlot::left(format!("left[{k}]"), s.a, s.c * s.s))
                    .collect();
                out.extend((0..s.c).map(|k| FactorSlot::right(format!("right[{k}]"), s.d, s.b * s.s)));
                out
            }
            StructuredSpec::Mlbtc(s) => {
                let mut out = vec![];
                for (l, lev) in s.levels.iter().enumerate() {
                    for (k, &rows) in lev.left_blocks.iter().enumerate() {
                        out.push(FactorSlot::left(format!("left[{l}][{k}]"), rows, lev.left_rank));
                    }
                }
                for (l, lev) in s.levels.iter().enumerate() {
                    for (k, &rows) in lev.right_blocks.iter().enumerate() {
                        out.push(FactorSlot::right(format!("right[{l}][{k}]"), rows, lev.right_rank));
                    }
                }
                out
            }
        }
    }

    /// Trainable scalar count: the total size of all factors.
    pub fn param_count(&self) -> usize {
        self.factor_slots()
            .iter()
            .map(|f| f.shape.iter().product::<usize>())
            .sum()
    }

    /// `min(m, n, family bound)`.
    ///
    /// The family bound is `r` for low rank, `Σ_l r_l p_l` for MLR,
    /// `b·min(a, cs)` and `c·min(d, bs)` for BTT (both equal `D` when
    /// `a = b = c = d = √D`), and the sum of level ranks for MLBTC.
    pub fn rank_upper_bound(&self) -> usize {
        let (m, n) = self.dims();
        let family = match self {
            StructuredSpec::Dense(_) => m.min(n),
            StructuredSpec::LowRank(s) => s.r,
            StructuredSpec::BlockDiag(s) => s
                .row_blocks
                .iter()
                .zip(&s.col_blocks)
                .map(|(&r, &c)| r.min(c))
                .sum(),
            StructuredSpec::Mlr(s) => s.levels.iter().map(|l| l.rank * l.blocks()).sum(),
            StructuredSpec::Btt(s) => (s.b * s.a.min(s.c * s.s)).min(s.c * s.d.min(s.b * s.s)),
            StructuredSpec::Mlbtc(s) => s
                .levels
                .iter()
                .filter(|l| l.alpha != 0.0)
                .map(|l| l.inner())
                .sum(),
        };
        m.min(n).min(family)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALLOCATION: [usize; 8] = [32, 8, 6, 4, 4, 4, 4, 2];

    #[test]
    fn param_counts() {
        let lr = StructuredSpec::LowRank(LowRankSpec::new(512, 512, 64).unwrap());
        assert_eq!(lr.param_count(), 65_536);
        let mlr = StructuredSpec::Mlr(MlrSpec::new(512, 512, &ALLOCATION).unwrap());
        assert_eq!(mlr.param_count(), 65_536);
        let btt = StructuredSpec::Btt(BttSpec::square(256, 1).unwrap());
        assert_eq!(btt.param_count(), 8_192);
    }

    #[test]
    fn rank_bounds() {
        let mlr = StructuredSpec::Mlr(MlrSpec::new(512, 512, &ALLOCATION).unwrap());
        assert_eq!(mlr.rank_upper_bound(), 512);
        let uniform = StructuredSpec::Mlr(MlrSpec::new(512, 512, &[8; 8]).unwrap());
        assert_eq!(uniform.rank_upper_bound(), 512);
        let lr = StructuredSpec::LowRank(LowRankSpec::new(512, 512, 64).unwrap());
        assert_eq!(lr.rank_upper_bound(), 64);
        let btt = StructuredSpec::Btt(BttSpec::square(1024, 2).unwrap());
        assert_eq!(btt.rank_upper_bound(), 1024);
    }

    #[test]
    fn default_blocking_requires_divisibility() {
        assert!(MlrSpec::new(12, 12, &[1, 1, 1]).is_ok());
        assert!(MlrSpec::new(10, 12, &[1, 1, 1]).is_err());
        let lev = |rows: Vec<usize>, cols: Vec<usize>| MlrLevel {
            rank: 1,
            row_blocks: rows,
            col_blocks: cols,
        };
        assert!(MlrSpec::uneven(10, 7, vec![lev(vec![10], vec![7]), lev(vec![3, 7], vec![5, 2])]).is_ok());
        assert!(MlrSpec::uneven(10, 7, vec![lev(vec![3, 6], vec![5, 2])]).is_err());
    }

    #[test]
    fn json_round_trip_with_family_tag() {
        let spec = StructuredSpec::Mlr(MlrSpec::new(8, 8, &[2, 1]).unwrap());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"family\":\"mlr\""));
        let back: StructuredSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let short: StructuredSpec =
            serde_json::from_str(r#"{"family":"mlr","m":8,"n":8,"ranks":[2,1]}"#).unwrap();
        assert_eq!(short, spec);
        let btt = StructuredSpec::Mlbtc(MlbtcSpec::from_btt(&BttSpec::new(2, 3, 2, 2, 1).unwrap(), 2, 1));
        let back: StructuredSpec = serde_json::from_str(&serde_json::to_string(&btt).unwrap()).unwrap();
        assert_eq!(back, btt);
    }

    #[test]
    fn json_validation() {
        let bad = r#"{"family":"low-rank","m":4,"n":4,"r":5}"#;
        assert!(serde_json::from_str::<StructuredSpec>(bad).is_err());
        let unknown = r#"{"family":"btt","a":2,"b":2,"c":2,"d":2,"s":1,"z":0}"#;
        assert!(serde_json::from_str::<StructuredSpec>(unknown).is_err());
    }

    #[test]
    fn mlbtc_rejects_inconsistent_levels() {
        let lev = MlbtcLevel {
            alpha: 1.0,
            left_rank: 3,
            right_rank: 2,
            left_blocks: vec![4],
            right_blocks: vec![4],
        };
        assert!(MlbtcSpec::new(4, 4, vec![lev], None, None).is_err());
        let btt = BttSpec::new(2, 2, 2, 2, 1).unwrap();
        let narrow = MlbtcLevel {
            alpha: 1.0,
            left_rank: 1,
            right_rank: 1,
            left_blocks: vec![2, 2],
            right_blocks: vec![2, 2],
        };
        // Inner width 2 cannot share the length-4 P_R of the BTT level.
        assert!(MlbtcSpec::new(4, 4, vec![MlbtcSpec::btt_level(&btt, 1.0), narrow.clone()], None, Some(btt.p_right())).is_err());
        assert!(MlbtcSpec::new(4, 4, vec![MlbtcSpec::btt_level(&btt, 1.0), narrow], None, None).is_ok());
    }
}
