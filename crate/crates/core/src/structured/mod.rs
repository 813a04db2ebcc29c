//! Structured matrix families with dense oracles and rank tools.

mod matrix;
mod perm;
mod rank;
mod spec;

pub use matrix::{dense_block_diag, StructuredMatrix};
pub use perm::{perm_reshape_transpose, PermutationMap};
pub use rank::{numeric_rank, singular_values, DEFAULT_RANK_TOL};
pub use spec::{
    BlockDiagSpec, BttSpec, DenseSpec, FactorSlot, LowRankSpec, MlbtcLevel, MlbtcSpec, MlrLevel,
    MlrSpec, StructuredSpec,
};
