use rand::Rng;

use super::perm::PermutationMap;
use super::spec::StructuredSpec;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// A structured matrix: a validated spec plus its factors in canonical order
/// (see [`StructuredSpec::factor_slots`]).
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredMatrix {
    spec: StructuredSpec,
    factors: Vec<Tensor>,
}

/// One `α P_L (⊕ left) P_R (⊕ rightᵀ)` summand.
struct Term<'a> {
    alpha: f64,
    p_left: Option<&'a PermutationMap>,
    left: &'a [Tensor],
    p_right: Option<&'a PermutationMap>,
    right: &'a [Tensor],
}

fn matvec(a: &Tensor, x: &[f64], out: &mut [f64]) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    gemm(m, k, 1, a.data(), false, x, false, out, false);
}

fn matvec_t(a: &Tensor, x: &[f64], out: &mut [f64]) {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    gemm(m, k, 1, a.data(), true, x, false, out, false);
}

/// `(⊕ blocks) v`.
fn block_apply(blocks: &[Tensor], v: &[f64]) -> Vec<f64> {
    let rows: usize = blocks.iter().map(|b| b.shape()[0]).sum();
    let mut out = vec![0.0; rows];
    let (mut i, mut o) = (0, 0);
    for b in blocks {
        let (r, c) = (b.shape()[0], b.shape()[1]);
        matvec(b, &v[i..i + c], &mut out[o..o + r]);
        i += c;
        o += r;
    }
    out
}

/// `(⊕ blocks)ᵀ v`.
fn block_apply_t(blocks: &[Tensor], v: &[f64]) -> Vec<f64> {
    let cols: usize = blocks.iter().map(|b| b.shape()[1]).sum();
    let mut out = vec![0.0; cols];
    let (mut i, mut o) = (0, 0);
    for b in blocks {
        let (r, c) = (b.shape()[0], b.shape()[1]);
        matvec_t(b, &v[i..i + r], &mut out[o..o + c]);
        i += r;
        o += c;
    }
    out
}

/// Dense direct sum of possibly unequal blocks.
pub fn dense_block_diag(blocks: &[Tensor]) -> Tensor {
    let rows: usize = blocks.iter().map(|b| b.shape()[0]).sum();
    let cols: usize = blocks.iter().map(|b| b.shape()[1]).sum();
    let mut data = vec![0.0; rows * cols];
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        let (r, c) = (b.shape()[0], b.shape()[1]);
        for i in 0..r {
            data[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + c]
                .copy_from_slice(&b.data()[i * c..(i + 1) * c]);
        }
        r0 += r;
        c0 += c;
    }
    Tensor::from_parts(vec![rows, cols], data)
}

impl StructuredMatrix {
    pub fn new(spec: StructuredSpec, factors: Vec<Tensor>) -> Result<Self> {
        let slots = spec.factor_slots();
        if slots.len() != factors.len() {
            return Err(Error::Factor {
                location: format!("{} factor list", spec.family()),
                expected: vec![slots.len()],
                actual: vec![factors.len()],
            });
        }
        for (slot, f) in slots.iter().zip(&factors) {
            if f.shape() != slot.shape.as_slice() {
                return Err(Error::Factor {
                    location: slot.location.clone(),
                    expected: slot.shape.clone(),
                    actual: f.shape().to_vec(),
                });
            }
        }
        Ok(StructuredMatrix { spec, factors })
    }

    /// I.i.d. normal factors with variance `1 / fan_in`, drawn slot by slot.
    pub fn random<R: Rng + ?Sized>(spec: StructuredSpec, rng: &mut R) -> Self {
        let factors = spec
            .factor_slots()
            .iter()
            .map(|s| Tensor::randn(&s.shape, 1.0 / (s.fan_in as f64).sqrt(), rng))
            .collect();
        StructuredMatrix { spec, factors }
    }

    pub fn spec(&self) -> &StructuredSpec {
        &self.spec
    }

    pub fn factors(&self) -> &[Tensor] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<Tensor> {
        self.factors
    }

    pub fn dims(&self) -> (usize, usize) {
        self.spec.dims()
    }

    fn terms(&self) -> Vec<Term<'_>> {
        let f = &self.factors;
        match &self.spec {
            StructuredSpec::Dense(_) | StructuredSpec::BlockDiag(_) => vec![],
            StructuredSpec::LowRank(_) => vec![Term {
                alpha: 1.0,
                p_left: None,
                left: &f[..1],
                p_right: None,
                right: &f[1..],
            }],
            StructuredSpec::Mlr(s) => {
                let total: usize = s.levels().iter().map(|l| l.blocks()).sum();
                let (lefts, rights) = f.split_at(total);
                let mut off = 0;
                s.levels()
                    .iter()
                    .map(|lev| {
                        let p = lev.blocks();
                        let t = Term {
                            alpha: 1.0,
                            p_left: None,
                            left: &lefts[off..off + p],
                            p_right: None,
                            right: &rights[off..off + p],
                        };
                        off += p;
                        t
                    })
                    .collect()
            }
            StructuredSpec::Btt(_) => unreachable!("btt terms carry owned permutations"),
            StructuredSpec::Mlbtc(s) => {
                let total: usize = s.levels().iter().map(|l| l.left_blocks.len()).sum();
                let (lefts, rights) = f.split_at(total);
                let (mut lo, mut ro) = (0, 0);
                s.levels()
                    .iter()
                    .map(|lev| {
                        let (pl, pr) = (lev.left_blocks.len(), lev.right_blocks.len());
                        let t = Term {
                            alpha: lev.alpha,
                            p_left: s.p_left(),
                            left: &lefts[lo..lo + pl],
                            p_right: s.p_right(),
                            right: &rights[ro..ro + pr],
                        };
                        lo += pl;
                        ro += pr;
                        t
                    })
                    .collect()
            }
        }
    }

    fn with_terms<T>(&self, f: impl FnOnce(&[Term<'_>]) -> T) -> T {
        if let StructuredSpec::Btt(s) = &self.spec {
            let (pl, pr) = (s.p_left(), s.p_right());
            let (lefts, rights) = self.factors.split_at(s.b());
            f(&[Term {
                alpha: 1.0,
                p_left: Some(&pl),
                left: lefts,
                p_right: Some(&pr),
                right: rights,
            }])
        } else {
            f(&self.terms())
        }
    }

    /// The dense matrix given by the family formula, built from dense
    /// permutation and block-diagonal matrices.
    pub fn materialize(&self) -> Tensor {
        let (m, n) = self.dims();
        match &self.spec {
            StructuredSpec::Dense(_) => return self.factors[0].clone(),
            StructuredSpec::BlockDiag(_) => return dense_block_diag(&self.factors),
            _ => {}
        }
        self.with_terms(|terms| {
            let mut acc = vec![0.0; m * n];
            for t in terms {
                if t.alpha == 0.0 {
                    continue;
                }
                let mut left = dense_block_diag(t.left);
                if let Some(p) = t.p_left {
                    left = p.to_matrix().matmul(&left).expect("P_L conforms");
                }
                let mut right_t = dense_block_diag(t.right).t().expect("matrix");
                if let Some(p) = t.p_right {
                    right_t = p.to_matrix().matmul(&right_t).expect("P_R conforms");
                }
                let term = left.matmul(&right_t).expect("inner widths agree");
                acc.iter_mut()
                    .zip(term.data())
                    .for_each(|(a, v)| *a += t.alpha * v);
            }
            Tensor::from_parts(vec![m, n], acc)
        })
    }

    fn check_vec(&self, op: &'static str, v: &Tensor, len: usize) -> Result<()> {
        if v.rank() != 1 || v.len() != len {
            let (m, n) = self.dims();
            return Err(Error::shape(op, &[m, n], v.shape()));
        }
        Ok(())
    }

    /// `M x` via blocked products; never forms `M`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims();
        self.check_vec("apply", x, n)?;
        let out = match &self.spec {
            StructuredSpec::Dense(_) => {
                let mut y = vec![0.0; m];
                matvec(&self.factors[0], x.data(), &mut y);
                y
            }
            StructuredSpec::BlockDiag(_) => block_apply(&self.factors, x.data()),
            _ => self.with_terms(|terms| {
                let mut y = vec![0.0; m];
                for t in terms {
                    if t.alpha == 0.0 {
                        continue;
                    }
                    let mut z = block_apply_t(t.right, x.data());
                    if let Some(p) = t.p_right {
                        z = p.apply(&z);
                    }
                    let mut u = block_apply(t.left, &z);
                    if let Some(p) = t.p_left {
                        u = p.apply(&u);
                    }
                    y.iter_mut().zip(&u).for_each(|(a, v)| *a += t.alpha * v);
                }
                y
            }),
        };
        Ok(Tensor::from_parts(vec![m], out))
    }

    /// `xᵀ M y` as an inner product of separately projected features.
    pub fn bilinear(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let (m, n) = self.dims();
        self.check_vec("bilinear", x, m)?;
        self.check_vec("bilinear", y, n)?;
        Ok(match &self.spec {
            StructuredSpec::Dense(_) | StructuredSpec::BlockDiag(_) => {
                let my = self.apply(y)?;
                x.dot(&my)?
            }
            _ => self.with_terms(|terms| {
                let mut total = 0.0;
                for t in terms {
                    if t.alpha == 0.0 {
                        continue;
                    }
                    let xl = match t.p_left {
                        Some(p) => p.apply_transpose(x.data()),
                        None => x.data().to_vec(),
                    };
                    let left = block_apply_t(t.left, &xl);
                    let mut right = block_apply_t(t.right, y.data());
                    if let Some(p) = t.p_right {
                        right = p.apply(&right);
                    }
                    total += t.alpha * left.iter().zip(&right).map(|(a, b)| a * b).sum::<f64>();
                }
                total
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured::{BttSpec, LowRankSpec, MlrSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn low_rank_ones() {
        let spec = StructuredSpec::LowRank(LowRankSpec::new(3, 5, 1).unwrap());
        let m = StructuredMatrix::new(spec, vec![Tensor::filled(&[3, 1], 1.0), Tensor::filled(&[5, 1], 1.0)]).unwrap();
        let y = m.apply(&Tensor::filled(&[5], 1.0)).unwrap();
        assert_eq!(y.data(), &[5.0; 3]);
    }

    #[test]
    fn low_rank_identity_factors_give_inner_product() {
        let spec = StructuredSpec::LowRank(LowRankSpec::new(4, 4, 4).unwrap());
        let m = StructuredMatrix::new(spec, vec![Tensor::eye(4), Tensor::eye(4)]).unwrap();
        let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Tensor::new(&[4], vec![-1.0, 0.5, 2.0, 0.0]).unwrap();
        assert_eq!(m.bilinear(&x, &y).unwrap(), x.dot(&y).unwrap());
    }

    #[test]
    fn trivial_btt_is_scalar_product() {
        let spec = StructuredSpec::Btt(BttSpec::new(1, 1, 1, 1, 1).unwrap());
        let m = StructuredMatrix::new(
            spec,
            vec![Tensor::filled(&[1, 1], 3.0), Tensor::filled(&[1, 1], -2.0)],
        )
        .unwrap();
        assert_eq!(m.materialize().data(), &[-6.0]);
    }

    #[test]
    fn single_level_mlr_is_low_rank_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = StructuredMatrix::random(StructuredSpec::Mlr(MlrSpec::new(5, 4, &[2]).unwrap()), &mut rng);
        let f = m.factors();
        let expected = f[0].matmul(&f[1].t().unwrap()).unwrap();
        assert_eq!(m.materialize(), expected);
    }

    #[test]
    fn factor_shape_errors_name_location() {
        let spec = StructuredSpec::Mlr(MlrSpec::new(4, 4, &[1, 1]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = StructuredMatrix::random(spec.clone(), &mut rng).into_factors();
        f[2] = Tensor::zeros(&[3, 1]);
        match StructuredMatrix::new(spec, f) {
            Err(Error::Factor { location, .. }) => assert_eq!(location, "left[1][1]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn apply_rejects_wrong_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = StructuredMatrix::random(StructuredSpec::Btt(BttSpec::new(2, 2, 2, 2, 1).unwrap()), &mut rng);
        assert!(m.apply(&Tensor::zeros(&[3])).is_err());
    }
}
