use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-level ranks `r_1 | … | r_L`, written `"32|8|6|4|4|4|4|2"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "AllocationRepr", into = "String")]
pub struct RankAllocation(Vec<usize>);

#[derive(Deserialize)]
#[serde(untagged)]
enum AllocationRepr {
    Text(String),
    List(Vec<usize>),
}

impl TryFrom<AllocationRepr> for RankAllocation {
    type Error = Error;
    fn try_from(r: AllocationRepr) -> Result<Self> {
        match r {
            AllocationRepr::Text(s) => s.parse(),
            AllocationRepr::List(v) => RankAllocation::new(v),
        }
    }
}

impl From<RankAllocation> for String {
    fn from(r: RankAllocation) -> Self {
        r.to_string()
    }
}

impl RankAllocation {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() || ranks.len() > 31 {
            return Err(Error::config("rank allocation needs between 1 and 31 levels"));
        }
        if ranks.iter().sum::<usize>() == 0 {
            return Err(Error::config("rank allocation sums to zero"));
        }
        Ok(RankAllocation(ranks))
    }

    /// `levels` copies of `rank`.
    pub fn uniform(levels: usize, rank: usize) -> Result<Self> {
        RankAllocation::new(vec![rank; levels])
    }

    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    /// `Σ_l r_l`.
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Block count at zero-based level `l`: `2^l`.
    pub fn blocks(&self, l: usize) -> usize {
        1 << l
    }

    /// Block count of the finest level, `2^{L−1}`.
    pub fn finest_blocks(&self) -> usize {
        self.blocks(self.levels() - 1)
    }
}

impl FromStr for RankAllocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ranks = s
            .split('|')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad rank {p:?} in allocation {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        RankAllocation::new(ranks)
    }
}

impl fmt::Display for RankAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| r.to_string()).collect();
        f.write_str(&parts.join("|"))
    }
}
