//! Closed-form parameter, FLOP and key-cache counts.
//!
//! FLOP formulas count multiply-accumulates, one per scalar product term,
//! and keep only the terms the formulas print. The runtime counter in
//! [`crate::flops`] reports the same quantity as `macs`.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::allocation::RankAllocation;
use crate::error::{Error, Result};
use crate::structured::StructuredSpec;

type Q = Ratio<u128>;

/// Contraction orders for the bilinear MLR score `X·MLR·Xᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlrOrder {
    /// `X W_Q W_Kᵀ Xᵀ` with a single rank-`r` factor pair.
    LowRank,
    /// Form the dense `D×D` sum first.
    DenseProduct,
    /// Form each level's dense matrix, then sandwich per level.
    PerLevelDense,
    /// Project both sides per level, then multiply the features.
    Optimal,
    /// Per level, fold the key side into a `D×T` matrix first.
    PerLevelRightFirst,
    /// Sum the folded key sides over levels, then one `T×D×T` product.
    SharedRightFirst,
}

impl MlrOrder {
    pub const ALL: [MlrOrder; 6] = [
        MlrOrder::LowRank,
        MlrOrder::DenseProduct,
        MlrOrder::PerLevelDense,
        MlrOrder::Optimal,
        MlrOrder::PerLevelRightFirst,
        MlrOrder::SharedRightFirst,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MlrOrder::LowRank => "low-rank",
            MlrOrder::DenseProduct => "dense-product",
            MlrOrder::PerLevelDense => "per-level-dense",
            MlrOrder::Optimal => "optimal",
            MlrOrder::PerLevelRightFirst => "per-level-right-first",
            MlrOrder::SharedRightFirst => "shared-right-first",
        }
    }

    /// Rows whose printed formula carries composite lower-order terms; they
    /// are evaluated exactly as printed.
    pub fn is_verbatim(self) -> bool {
        matches!(self, MlrOrder::DenseProduct | MlrOrder::PerLevelDense)
    }
}

/// Contraction orders for the bilinear BTT score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BttOrder {
    /// Project both sides to `sbc` features, then multiply.
    ProjectionFirst,
    /// `X · (M Xᵀ)`: apply the structured matrix per token, then one
    /// `T×D×T` product.
    Chosen,
}

impl BttOrder {
    pub const ALL: [BttOrder; 2] = [BttOrder::ProjectionFirst, BttOrder::Chosen];

    pub fn id(self) -> &'static str {
        match self {
            BttOrder::ProjectionFirst => "projection-first",
            BttOrder::Chosen => "chosen",
        }
    }
}

macro_rules! id_parsing {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                <$ty>::ALL
                    .into_iter()
                    .find(|o| o.id() == s)
                    .ok_or_else(|| Error::config(format!("unknown {} order {s:?}", $what)))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.id())
            }
        }
    };
}

id_parsing!(MlrOrder, "bilinear-mlr");
id_parsing!(BttOrder, "bilinear-btt");

/// Rounds to the nearest integer, warning when the value is fractional.
fn to_count(x: Q, what: &str) -> u128 {
    if !x.is_integer() {
        log::warn!("{what}: non-integral count {x}, rounding");
    }
    x.round().to_integer()
}

fn pow2(l: usize) -> u128 {
    1u128 << l
}

/// Cost of forming one head's bilinear MLR score from `X ∈ R^{T×D}`, with
/// `p_l = 2^{l−1}` and `r = Σ r_l`.
pub fn bilinear_mlr_flops(t: usize, d: usize, ranks: &RankAllocation, order: MlrOrder) -> u128 {
    let (t, d) = (t as u128, d as u128);
    let r = ranks.total() as u128;
    let big_l = ranks.levels() as u128;
    let rl = || ranks.ranks().iter().enumerate().map(|(l, &x)| (l, x as u128));
    match order {
        MlrOrder::LowRank => t * t * r + 2 * t * d * r,
        MlrOrder::DenseProduct => {
            // T²D + TD² + D²(Σ r_l/2^{l−1} + Σ 1/2^l − 1/2)
            let mut q = Q::from_integer(0);
            for (l, x) in rl() {
                q += Q::new(x, pow2(l));
            }
            for l in 1..=ranks.levels() {
                q += Q::new(1, pow2(l));
            }
            q -= Q::new(1, 2);
            t * t * d + t * d * d + to_count(q * Q::from_integer(d * d), "dense-product")
        }
        MlrOrder::PerLevelDense => {
            // T²LD + Σ_l (D² r_l + TD²) / 2^{l−1}
            let mut q = Q::from_integer(t * t * big_l * d);
            for (l, x) in rl() {
                q += Q::new(d * d * x + t * d * d, pow2(l));
            }
            to_count(q, "per-level-dense")
        }
        MlrOrder::Optimal => {
            2 * t * d * r + t * t * rl().map(|(l, x)| pow2(l) * x).sum::<u128>()
        }
        MlrOrder::PerLevelRightFirst => big_l * t * t * d + 2 * t * d * r,
        MlrOrder::SharedRightFirst => t * t * d + 2 * t * d * r,
    }
}

/// Cost of one head's bilinear BTT score with `a = b = c = d = √D`.
pub fn bilinear_btt_flops(t: usize, d: usize, s: usize, order: BttOrder) -> Result<u128> {
    let q = d.isqrt();
    if q * q != d {
        return Err(Error::config(format!(
            "the square-root regime needs a perfect-square D, got {d}"
        )));
    }
    let (t, d, s, q) = (t as u128, d as u128, s as u128, q as u128);
    let proj = 2 * s * t * d * q;
    Ok(match order {
        BttOrder::ProjectionFirst => s * t * t * d + proj,
        BttOrder::Chosen => t * t * d + proj,
    })
}

/// Rectangular-block form for square `M` (`ab = cd = D`): the key-side
/// work is `T·s·(b·n + c·m)`, the score product `T²D` (chosen) or
/// `T²·sbc` (projection first).
pub fn bilinear_btt_flops_blocks(
    t: usize,
    spec: &crate::structured::BttSpec,
    order: BttOrder,
) -> Result<u128> {
    if spec.m() != spec.n() {
        return Err(Error::config("bilinear BTT needs a square matrix"));
    }
    let t = t as u128;
    let (b, c, s) = (spec.b() as u128, spec.c() as u128, spec.s() as u128);
    let dim = spec.m() as u128;
    let proj = t * s * (b * dim + c * dim);
    Ok(match order {
        BttOrder::ProjectionFirst => t * t * s * b * c + proj,
        BttOrder::Chosen => t * t * dim + proj,
    })
}

fn check_divisible(t: usize, ranks: &RankAllocation) -> Result<()> {
    let p = ranks.finest_blocks();
    if t % p != 0 {
        return Err(Error::config(format!(
            "sequence length {t} is not divisible by 2^{} = {p}",
            ranks.levels() - 1
        )));
    }
    if ranks.levels() > 1 && t <= p {
        return Err(Error::config(format!(
            "sequence length {t} must exceed the finest block count {p}"
        )));
    }
    Ok(())
}

/// `T² Σ_l r_l / 2^{l−1}`.
pub fn mlr_attention_score_flops(t: usize, ranks: &RankAllocation) -> Result<u128> {
    check_divisible(t, ranks)?;
    let t = t as u128;
    Ok(ranks
        .ranks()
        .iter()
        .enumerate()
        .map(|(l, &r)| t * (t / pow2(l)) * r as u128)
        .sum())
}

/// Retained key elements per head: `T Σ_l r_l / 2^{l−1}`.
pub fn kv_cache_size(t: usize, ranks: &RankAllocation) -> Result<u128> {
    check_divisible(t, ranks)?;
    let t = t as u128;
    Ok(ranks
        .ranks()
        .iter()
        .enumerate()
        .map(|(l, &r)| (t / pow2(l)) * r as u128)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Leading-order cost to form `S` for one head, excluding
    /// `projection_flops`.
    pub score_flops: u128,
    /// The `X`-projection part of the formula, when it has one.
    pub projection_flops: u128,
    pub params: u128,
    pub rank_bound: u128,
    /// Retained key-side scalars for a length-`T` sequence.
    pub kv_cache_elements: u128,
    pub contraction_order: String,
}

impl CostReport {
    pub fn total_flops(&self) -> u128 {
        self.score_flops + self.projection_flops
    }
}

/// Parameters and rank per family for a square `D×D` spec; the bilinear
/// form `xᵀMy` costs one MAC per parameter at leading order.
pub fn table1_summary(spec: &StructuredSpec) -> Result<CostReport> {
    let (m, n) = spec.dims();
    if m != n {
        return Err(Error::config(format!("table summary needs a square spec, got {m}×{n}")));
    }
    if !matches!(
        spec,
        StructuredSpec::Dense(_) | StructuredSpec::LowRank(_) | StructuredSpec::Mlr(_) | StructuredSpec::Btt(_)
    ) {
        return Err(Error::config(format!("no table row for family {}", spec.family())));
    }
    let params = spec.param_count() as u128;
    Ok(CostReport {
        score_flops: params,
        projection_flops: 0,
        params,
        rank_bound: spec.rank_upper_bound() as u128,
        kv_cache_elements: 0,
        contraction_order: "bilinear-form".into(),
    })
}

/// One attention configuration to cost out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostQuery {
    Standard {
        seq_len: usize,
        dim: usize,
        rank: usize,
    },
    BilinearMlr {
        seq_len: usize,
        dim: usize,
        rank_allocation: RankAllocation,
        order: MlrOrder,
    },
    BilinearBtt {
        seq_len: usize,
        dim: usize,
        s: usize,
        order: BttOrder,
    },
    MlrAttention {
        seq_len: usize,
        dim: usize,
        rank_allocation: RankAllocation,
    },
    Table1 {
        spec: StructuredSpec,
    },
}

impl CostQuery {
    pub fn family(&self) -> &'static str {
        match self {
            CostQuery::Standard { .. } => "standard",
            CostQuery::BilinearMlr { .. } => "bilinear-mlr",
            CostQuery::BilinearBtt { .. } => "bilinear-btt",
            CostQuery::MlrAttention { .. } => "mlr-attention",
            CostQuery::Table1 { spec } => spec.family(),
        }
    }

    pub fn evaluate(&self) -> Result<CostReport> {
        match *self {
            CostQuery::Standard { seq_len, dim, rank } => {
                let (t, d, r) = (seq_len as u128, dim as u128, rank as u128);
                Ok(CostReport {
                    score_flops: t * t * r,
                    projection_flops: 2 * t * d * r,
                    params: 2 * d * r,
                    rank_bound: r.min(d),
                    kv_cache_elements: t * r,
                    contraction_order: "standard".into(),
                })
            }
            CostQuery::BilinearMlr {
                seq_len,
                dim,
                ref rank_allocation,
                order,
            } => {
                let (t, d) = (seq_len as u128, dim as u128);
                let r = rank_allocation.total() as u128;
                let total = bilinear_mlr_flops(seq_len, dim, rank_allocation, order);
                let projection = match order {
                    MlrOrder::DenseProduct | MlrOrder::PerLevelDense => 0,
                    _ => 2 * t * d * r,
                };
                let spread: u128 = rank_allocation
                    .ranks()
                    .iter()
                    .enumerate()
                    .map(|(l, &x)| pow2(l) * x as u128)
                    .sum();
                let kv = match order {
                    MlrOrder::LowRank => t * r,
                    MlrOrder::Optimal => t * spread,
                    _ => t * d,
                };
                Ok(CostReport {
                    score_flops: total - projection,
                    projection_flops: projection,
                    params: 2 * d * r,
                    rank_bound: if order == MlrOrder::LowRank { r.min(d) } else { spread.min(d) },
                    kv_cache_elements: kv,
                    contraction_order: order.id().into(),
                })
            }
            CostQuery::BilinearBtt {
                seq_len,
                dim,
                s,
                order,
            } => {
                let total = bilinear_btt_flops(seq_len, dim, s, order)?;
                let (t, d, s) = (seq_len as u128, dim as u128, s as u128);
                let q = dim.isqrt() as u128;
                let projection = 2 * s * t * d * q;
                Ok(CostReport {
                    score_flops: total - projection,
                    projection_flops: projection,
                    params: 2 * d * q * s,
                    rank_bound: d,
                    kv_cache_elements: match order {
                        BttOrder::ProjectionFirst => t * s * d,
                        BttOrder::Chosen => t * d,
                    },
                    contraction_order: order.id().into(),
                })
            }
            CostQuery::MlrAttention {
                seq_len,
                dim,
                ref rank_allocation,
            } => {
                let (t, d) = (seq_len as u128, dim as u128);
                let r = rank_allocation.total() as u128;
                let spread: u128 = rank_allocation
                    .ranks()
                    .iter()
                    .enumerate()
                    .map(|(l, &x)| pow2(l) * x as u128)
                    .sum();
                Ok(CostReport {
                    score_flops: mlr_attention_score_flops(seq_len, rank_allocation)?,
                    projection_flops: 2 * t * d * r,
                    params: 2 * d * r,
                    rank_bound: spread.min(t),
                    kv_cache_elements: kv_cache_size(seq_len, rank_allocation)?,
                    contraction_order: "block-sum".into(),
                })
            }
            CostQuery::Table1 { ref spec } => table1_summary(spec),
        }
    }
}

/// A named query and its evaluated report.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub config_id: String,
    pub family: String,
    pub report: CostReport,
}

pub const CSV_HEADER: [&str; 8] = [
    "config_id",
    "family",
    "order",
    "score_flops",
    "projection_flops",
    "params",
    "rank_bound",
    "kv_cache",
];

pub fn write_csv<W: std::io::Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in rows {
        let r = &row.report;
        w.write_record([
            row.config_id.clone(),
            row.family.clone(),
            r.contraction_order.clone(),
            r.score_flops.to_string(),
            r.projection_flops.to_string(),
            r.params.to_string(),
            r.rank_bound.to_string(),
            r.kv_cache_elements.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Digits grouped by thousands: `16,711,680`.
pub fn group_digits(v: u128) -> String {
    let s = v.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Markdown table with the same columns as the CSV.
pub fn render_markdown(rows: &[CostRow]) -> String {
    let mut out = format!("| {} |\n", CSV_HEADER.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(CSV_HEADER.len())));
    for row in rows {
        let r = &row.report;
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            row.config_id,
            row.family,
            r.contraction_order,
            group_digits(r.score_flops),
            group_digits(r.projection_flops),
            group_digits(r.params),
            group_digits(r.rank_bound),
            group_digits(r.kv_cache_elements),
        ));
    }
    out
}
