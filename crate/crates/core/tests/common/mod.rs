//! Index-formula oracles shared by the integration tests. None of these go
//! through the library's efficient paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strattn::structured::{MlbtcSpec, MlrSpec, StructuredMatrix, StructuredSpec};
use strattn::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn offsets(blocks: &[usize]) -> Vec<usize> {
    let mut o = vec![0];
    for b in blocks {
        o.push(o.last().unwrap() + b);
    }
    o
}

fn block_of(offs: &[usize], i: usize) -> usize {
    offs.windows(2).position(|w| w[0] <= i && i < w[1]).unwrap()
}

/// `M[αb + i, kd + t] = Σ_σ L_i[α, ks + σ] · R_k[t, is + σ]`.
pub fn btt_oracle(a: usize, b: usize, c: usize, d: usize, s: usize, f: &[Tensor]) -> Tensor {
    let (lefts, rights) = f.split_at(b);
    Tensor::from_fn(&[a * b, c * d], |idx| {
        let (alpha, i) = (idx[0] / b, idx[0] % b);
        let (k, t) = (idx[1] / d, idx[1] % d);
        (0..s)
            .map(|sg| lefts[i].at(&[alpha, k * s + sg]) * rights[k].at(&[t, i * s + sg]))
            .sum()
    })
}

/// Entry `(i, j)` sums each level whose block contains both `i` and `j`.
pub fn mlr_oracle(spec: &MlrSpec, f: &[Tensor]) -> Tensor {
    let total: usize = spec.levels().iter().map(|l| l.blocks()).sum();
    let (lefts, rights) = f.split_at(total);
    Tensor::from_fn(&[spec.m(), spec.n()], |idx| {
        let (i, j) = (idx[0], idx[1]);
        let mut base = 0;
        let mut v = 0.0;
        for lev in spec.levels() {
            let ro = offsets(&lev.row_blocks);
            let co = offsets(&lev.col_blocks);
            let (bi, bj) = (block_of(&ro, i), block_of(&co, j));
            if bi == bj {
                for rho in 0..lev.rank {
                    v += lefts[base + bi].at(&[i - ro[bi], rho]) * rights[base + bj].at(&[j - co[bj], rho]);
                }
            }
            base += lev.blocks();
        }
        v
    })
}

/// Direct index loop over the defining sum, with forward-map permutations.
pub fn mlbtc_oracle(spec: &MlbtcSpec, f: &[Tensor]) -> Tensor {
    let (m, n) = (spec.m(), spec.n());
    let total_left: usize = spec.levels().iter().map(|l| l.left_blocks.len()).sum();
    let (lefts, rights) = f.split_at(total_left);
    let mut out = vec![0.0; m * n];
    let (mut lb, mut rb) = (0, 0);
    for lev in spec.levels() {
        let inner = lev.inner();
        // Dense BD(R)ᵀ as inner × n.
        let mut right_t = vec![0.0; inner * n];
        let co = offsets(&lev.right_blocks);
        for (k, w) in co.windows(2).enumerate() {
            for j in w[0]..w[1] {
                for rho in 0..lev.right_rank {
                    right_t[(k * lev.right_rank + rho) * n + j] = rights[rb + k].at(&[j - w[0], rho]);
                }
            }
        }
        // Dense BD(L) as m × inner.
        let mut left = vec![0.0; m * inner];
        let ro = offsets(&lev.left_blocks);
        for (k, w) in ro.windows(2).enumerate() {
            for i in w[0]..w[1] {
                for rho in 0..lev.left_rank {
                    left[i * inner + k * lev.left_rank + rho] = lefts[lb + k].at(&[i - w[0], rho]);
                }
            }
        }
        for i in 0..m {
            let row = spec.p_left().map_or(i, |p| p.forward()[i]);
            for j in 0..n {
                let mut v = 0.0;
                for q in 0..inner {
                    let qq = spec.p_right().map_or(q, |p| p.forward()[q]);
                    v += left[i * inner + qq] * right_t[q * n + j];
                }
                out[row * n + j] += lev.alpha * v;
            }
        }
        lb += lev.left_blocks.len();
        rb += lev.right_blocks.len();
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Oracle for any family supported by the tests.
pub fn dense_oracle(mat: &StructuredMatrix) -> Tensor {
    let f = mat.factors();
    match mat.spec() {
        StructuredSpec::LowRank(s) => {
            let (l, r) = (&f[0], &f[1]);
            Tensor::from_fn(&[s.m(), s.n()], |i| (0..s.r()).map(|k| l.at(&[i[0], k]) * r.at(&[i[1], k])).sum())
        }
        StructuredSpec::Mlr(s) => mlr_oracle(s, f),
        StructuredSpec::Btt(s) => btt_oracle(s.a(), s.b(), s.c(), s.d(), s.s(), f),
        StructuredSpec::Mlbtc(s) => mlbtc_oracle(s, f),
        other => panic!("no oracle for {}", other.family()),
    }
}

pub fn dense_matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    naive_matmul(m.data(), x, r, c, 1)
}

pub fn dense_bilinear(m: &Tensor, x: &[f64], y: &[f64]) -> f64 {
    dense_matvec(m, y).iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Random partition of `total` into `parts` positive sizes.
pub fn random_partition(rng: &mut impl Rng, total: usize, parts: usize) -> Vec<usize> {
    assert!(parts <= total);
    let mut cuts: Vec<usize> = (1..total).collect();
    for i in 0..parts - 1 {
        let j = rng.random_range(i..cuts.len());
        cuts.swap(i, j);
    }
    let mut chosen: Vec<usize> = cuts[..parts - 1].to_vec();
    chosen.sort_unstable();
    let mut out = vec![];
    let mut prev = 0;
    for c in chosen.into_iter().chain([total]) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Causal prefix of `T` tokens built entrywise from `x_jᵀ W_q W_kᵀ x_{j'}`.
pub fn bilinear_score_oracle(x: &Tensor, wq: &Tensor, wk: &Tensor) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let r = wq.shape()[1];
    Tensor::from_fn(&[t, t], |ij| {
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                let m: f64 = (0..r).map(|k| wq.at(&[a, k]) * wk.at(&[b, k])).sum();
                s += x.at(&[ij[0], a]) * m * x.at(&[ij[1], b]);
            }
        }
        s
    })
}

fn divisors_up_to(w: usize, cap: usize) -> Vec<usize> {
    (1..=w.min(cap)).filter(|p| w % p == 0).collect()
}

fn random_perm(rng: &mut impl Rng, n: usize) -> strattn::structured::PermutationMap {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    strattn::structured::PermutationMap::try_from(v).unwrap()
}

pub fn random_low_rank(rng: &mut impl Rng) -> StructuredSpec {
    let m = rng.random_range(1..=16);
    let n = rng.random_range(1..=16);
    let r = rng.random_range(1..=m.min(n));
    StructuredSpec::LowRank(strattn::structured::LowRankSpec::new(m, n, r).unwrap())
}

/// Half default power-of-two blocking, half uneven blocks.
pub fn random_mlr(rng: &mut impl Rng) -> StructuredSpec {
    if rng.random_bool(0.5) {
        let levels = rng.random_range(1..=3);
        let unit = 1 << (levels - 1);
        let m = unit * rng.random_range(1..=16 / unit);
        let n = unit * rng.random_range(1..=16 / unit);
        let ranks: Vec<usize> = (0..levels).map(|_| rng.random_range(1..=3)).collect();
        StructuredSpec::Mlr(MlrSpec::new(m, n, &ranks).unwrap())
    } else {
        let m = rng.random_range(2..=16);
        let n = rng.random_range(2..=16);
        let levels = (0..rng.random_range(1..=3))
            .map(|_| {
                let p = rng.random_range(1..=m.min(n).min(4));
                strattn::structured::MlrLevel {
                    rank: rng.random_range(1..=3),
                    row_blocks: random_partition(rng, m, p),
                    col_blocks: random_partition(rng, n, p),
                }
            })
            .collect();
        StructuredSpec::Mlr(MlrSpec::uneven(m, n, levels).unwrap())
    }
}

pub fn random_btt(rng: &mut impl Rng) -> StructuredSpec {
    let pick = |rng: &mut dyn rand::RngCore| {
        let total = rng.random_range(1..=16usize);
        let f = divisors_up_to(total, total);
        let a = f[rng.random_range(0..f.len())];
        (a, total / a)
    };
    let (a, b) = pick(rng);
    let (c, d) = pick(rng);
    let s = rng.random_range(1..=3);
    StructuredSpec::Btt(strattn::structured::BttSpec::new(a, b, c, d, s).unwrap())
}

/// Levels share inner width `w` when `P_R` is a map; permutations are
/// random or identity.
pub fn random_mlbtc(rng: &mut impl Rng) -> StructuredSpec {
    let m = rng.random_range(1..=16);
    let n = rng.random_range(1..=16);
    let with_pr = rng.random_bool(0.5);
    let shared_w = rng.random_range(1..=12);
    let levels: Vec<_> = (0..rng.random_range(1..=3))
        .map(|_| {
            let w = if with_pr { shared_w } else { rng.random_range(1..=12) };
            let rp = divisors_up_to(w, n);
            let lp = divisors_up_to(w, m);
            let p = rp[rng.random_range(0..rp.len())];
            let pp = lp[rng.random_range(0..lp.len())];
            strattn::structured::MlbtcLevel {
                alpha: rng.random_range(-2.0..2.0),
                left_rank: w / pp,
                right_rank: w / p,
                left_blocks: random_partition(rng, m, pp),
                right_blocks: random_partition(rng, n, p),
            }
        })
        .collect();
    let p_left = rng.random_bool(0.5).then(|| random_perm(rng, m));
    let p_right = with_pr.then(|| random_perm(rng, shared_w));
    StructuredSpec::Mlbtc(MlbtcSpec::new(m, n, levels, p_left, p_right).unwrap())
}

/// Number of dyadic levels at which positions `j` and `j2` fall in the same
/// block of a length-`t` sequence.
pub fn shared_depth(j: usize, j2: usize, t: usize, levels: usize) -> usize {
    let mut depth = 0;
    for l in 0..levels {
        let blocks = 1usize << l;
        if j * blocks / t == j2 * blocks / t {
            depth += 1;
        } else {
            break;
        }
    }
    depth
}

/// Hierarchical score `Σ_{l < d(j,j')} x_jᵀ L_l R_lᵀ x_{j'}`, one entry at a
/// time, with `wq`/`wk` columns split by `ranks`.
pub fn hierarchical_score_oracle(x: &Tensor, wq: &Tensor, wk: &Tensor, ranks: &[usize]) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[t, t], |ij| {
        let depth = shared_depth(ij[0], ij[1], t, ranks.len());
        let mut s = 0.0;
        let mut col = 0;
        for (l, &rl) in ranks.iter().enumerate() {
            for c in col..col + rl {
                if l < depth {
                    let q: f64 = (0..d).map(|a| x.at(&[ij[0], a]) * wq.at(&[a, c])).sum();
                    let k: f64 = (0..d).map(|a| x.at(&[ij[1], a]) * wk.at(&[a, c])).sum();
                    s += q * k;
                }
            }
            col += rl;
        }
        s
    })
}

/// `x_jᵀ M x_{j'}` for a dense `M`.
pub fn dense_score_oracle(x: &Tensor, m: &Tensor) -> Tensor {
    let t = x.shape()[0];
    Tensor::from_fn(&[t, t], |ij| dense_bilinear(m, x.row(ij[0]).data(), x.row(ij[1]).data()))
}

pub fn layer_norm_rows(x: &Tensor) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[t, d], |ij| {
        let row = x.row(ij[0]);
        let mean = row.data().iter().sum::<f64>() / d as f64;
        let var = row.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        (x.at(ij) - mean) / (var + 1e-5).sqrt()
    })
}

/// Softmax of each row over the positions `allowed(j, j')`, zeros elsewhere.
pub fn masked_softmax_oracle(s: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    let t = s.shape()[0];
    let mut out = vec![0.0; t * t];
    for j in 0..t {
        let cols: Vec<usize> = (0..t).filter(|&c| allowed(j, c)).collect();
        let max = cols.iter().map(|&c| s.at(&[j, c])).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cols.iter().map(|&c| (s.at(&[j, c]) - max).exp()).sum();
        for &c in &cols {
            out[j * t + c] = (s.at(&[j, c]) - max).exp() / z;
        }
    }
    Tensor::new(&[t, t], out).unwrap()
}

/// Columns `[lo, lo + w)` of a matrix.
pub fn col_slice(m: &Tensor, lo: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[m.shape()[0], w], |ij| m.at(&[ij[0], lo + ij[1]]))
}

/// Rows `[lo, lo + w)` of a matrix.
pub fn row_slice(m: &Tensor, lo: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[w, m.shape()[1]], |ij| m.at(&[lo + ij[0], ij[1]]))
}

/// Per-head loop over `Σ_h softmax(c·S_h) X W_{V,h} W_{O,h}` for dense
/// query/key weights, causal mask.
pub fn naive_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize, scale: f64) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let r = wv.shape()[1] / heads;
    let rq = wq.shape()[1] / heads;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let s = bilinear_score_oracle(x, &col_slice(wq, h * rq, rq), &col_slice(wk, h * rq, rq)).scale(scale);
        let a = masked_softmax_oracle(&s, |j, c| c <= j);
        let xv = naive_matmul(x.data(), col_slice(wv, h * r, r).data(), t, d, r);
        let av = naive_matmul(a.data(), &xv, t, t, r);
        let y = naive_matmul(&av, row_slice(wo, h * r, r).data(), t, r, d);
        for (o, v) in out.iter_mut().zip(y) {
            *o += v;
        }
    }
    Tensor::new(&[t, d], out).unwrap()
}
