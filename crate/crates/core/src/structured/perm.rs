use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijection on `0..n`, stored as the forward map: entry `k` of the input
/// lands at position `forward[k]` of the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PermutationMap {
    forward: Vec<usize>,
}

impl TryFrom<Vec<usize>> for PermutationMap {
    type Error = Error;

    fn try_from(forward: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; forward.len()];
        for &p in &forward {
            if p >= forward.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::config(format!(
                    "index array of length {} is not a permutation",
                    forward.len()
                )));
            }
        }
        Ok(PermutationMap { forward })
    }
}

impl From<PermutationMap> for Vec<usize> {
    fn from(p: PermutationMap) -> Self {
        p.forward
    }
}

/// Reshape to `(outer, inner, trailing)`, swap the first two axes, flatten.
pub fn perm_reshape_transpose(outer: usize, inner: usize, trailing: usize) -> PermutationMap {
    assert!(outer > 0 && inner > 0 && trailing > 0, "extents must be positive");
    let mut forward = Vec::with_capacity(outer * inner * trailing);
    for o in 0..outer {
        for i in 0..inner {
            for t in 0..trailing {
                forward.push((i * outer + o) * trailing + t);
            }
        }
    }
    PermutationMap { forward }
}

impl PermutationMap {
    pub fn identity(n: usize) -> Self {
        PermutationMap {
            forward: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> PermutationMap {
        let mut inv = vec![0; self.len()];
        for (k, &p) in self.forward.iter().enumerate() {
            inv[p] = k;
        }
        PermutationMap { forward: inv }
    }

    /// The map that applies `self` first, then `next`.
    pub fn then(&self, next: &PermutationMap) -> PermutationMap {
        assert_eq!(self.len(), next.len());
        PermutationMap {
            forward: self.forward.iter().map(|&p| next.forward[p]).collect(),
        }
    }

    /// `P v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.len(), "permutation length");
        let mut out = vec![0.0; v.len()];
        for (k, &p) in self.forward.iter().enumerate() {
            out[p] = v[k];
        }
        out
    }

    /// `Pᵀ v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.len(), "permutation length");
        self.forward.iter().map(|&p| v[p]).collect()
    }

    /// Dense permutation matrix with `P[forward[k], k] = 1`.
    pub fn to_matrix(&self) -> Tensor {
        let n = self.len();
        let mut data = vec![0.0; n * n];
        for (k, &p) in self.forward.iter().enumerate() {
            data[p * n + k] = 1.0;
        }
        Tensor::from_parts(vec![n, n], data)
    }
}
