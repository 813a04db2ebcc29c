use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which key positions a query row may attend to.
///
/// `GlobalPlusSwa` is a model-level pattern; it must be resolved to a concrete
/// per-layer mask with [`MaskSpec::for_layer`] before scores are normalized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum MaskSpec {
    None,
    Causal,
    /// Causal, and additionally `j − j' ≤ window`.
    SlidingWindow { window: usize },
    GlobalPlusSwa {
        window: usize,
        /// Zero-based indices of layers that use full causal attention.
        global_layers: Vec<usize>,
    },
}

impl MaskSpec {
    /// Global layers for a stack of `depth` layers: the first layer and the
    /// layer halfway through. For six layers this is layers 1 and 4 (1-based).
    pub fn default_global_layers(depth: usize) -> Vec<usize> {
        let mut layers = vec![0];
        let mid = depth.div_ceil(2);
        if mid > 0 && mid < depth {
            layers.push(mid);
        }
        layers
    }

    pub fn for_layer(&self, layer: usize) -> MaskSpec {
        match self {
            MaskSpec::GlobalPlusSwa {
                window,
                global_layers,
            } => {
                if global_layers.contains(&layer) {
                    MaskSpec::Causal
                } else {
                    MaskSpec::SlidingWindow { window: *window }
                }
            }
            other => other.clone(),
        }
    }

    pub fn is_causal(&self) -> bool {
        !matches!(self, MaskSpec::None)
    }

    /// Whether query `row` may attend to key `col`.
    ///
    /// # Panics
    /// On `GlobalPlusSwa`, which has no single answer.
    pub fn allows(&self, row: usize, col: usize) -> bool {
        match self {
            MaskSpec::None => true,
            MaskSpec::Causal => col <= row,
            MaskSpec::SlidingWindow { window } => col <= row && row - col <= *window,
            MaskSpec::GlobalPlusSwa { .. } => {
                panic!("global-plus-swa must be resolved per layer before use")
            }
        }
    }

    /// Contiguous range of admissible key columns for query `row` among
    /// `cols` keys. Causal kinds admit a prefix ending at the diagonal.
    pub(crate) fn row_range(&self, row: usize, cols: usize) -> std::ops::Range<usize> {
        match self {
            MaskSpec::None => 0..cols,
            MaskSpec::Causal => 0..(row + 1).min(cols),
            MaskSpec::SlidingWindow { window } => row.saturating_sub(*window)..(row + 1).min(cols),
            MaskSpec::GlobalPlusSwa { .. } => {
                panic!("global-plus-swa must be resolved per layer before use")
            }
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        match self {
            MaskSpec::SlidingWindow { window } | MaskSpec::GlobalPlusSwa { window, .. }
                if *window > seq_len =>
            {
                Err(Error::config(format!(
                    "window {window} exceeds sequence length {seq_len}"
                )))
            }
            _ => Ok(()),
        }
    }
}
