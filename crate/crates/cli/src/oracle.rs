//! Random structured matrices and MLR-attention score matrices checked
//! against dense computations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use strattn::attention::{score_matrix_mlr_attention, MlrAttentionConfig};
use strattn::icl::{stream_rng, Domain};
use strattn::structured::{
    BttSpec, LowRankSpec, MlbtcLevel, MlbtcSpec, MlrSpec, PermutationMap, StructuredMatrix, StructuredSpec,
};
use strattn::{RankAllocation, Tensor};

use crate::{run_dir, Cli, CliResult, Failure};

pub const FAMILIES: [&str; 4] = ["low-rank", "mlr", "btt", "mlbtc"];

/// Splits `total` into `parts` positive sizes.
fn composition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..total).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(parts - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> PermutationMap {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    PermutationMap::try_from(v).expect("shuffled range")
}

/// A random valid spec of `family` with both dimensions at most 16.
pub fn random_spec(family: &str, rng: &mut ChaCha8Rng) -> StructuredSpec {
    match family {
        "low-rank" => {
            let (m, n) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let r = rng.random_range(1..=m.min(n));
            StructuredSpec::LowRank(LowRankSpec::new(m, n, r).expect("valid"))
        }
        "mlr" => {
            let levels = rng.random_range(1..=3);
            let p = 1 << (levels - 1);
            let (m, n) = (p * rng.random_range(1..=16 / p), p * rng.random_range(1..=16 / p));
            let ranks: Vec<usize> = (0..levels)
                .map(|l| rng.random_range(1..=(m.min(n) >> l).max(1)))
                .collect();
            StructuredSpec::Mlr(MlrSpec::new(m, n, &ranks).expect("valid"))
        }
        "btt" => {
            let mut dim = || rng.random_range(1..=4);
            let (a, b, c, d) = (dim(), dim(), dim(), dim());
            let s = rng.random_range(1..=2);
            StructuredSpec::Btt(BttSpec::new(a, b, c, d, s).expect("valid"))
        }
        "mlbtc" => {
            let (m, n) = (rng.random_range(2..=16), rng.random_range(2..=16));
            let n_levels = rng.random_range(1..=3);
            let levels = (0..n_levels)
                .map(|_| {
                    let p = rng.random_range(1..=n.min(4));
                    let r = rng.random_range(1..=3);
                    let inner = p * r;
                    let divisors: Vec<usize> = (1..=inner.min(m)).filter(|q| inner % q == 0).collect();
                    let q = divisors[rng.random_range(0..divisors.len())];
                    MlbtcLevel {
                        alpha: rng.random_range(-2.0..2.0),
                        left_rank: inner / q,
                        right_rank: r,
                        left_blocks: composition(rng, m, q),
                        right_blocks: composition(rng, n, p),
                    }
                })
                .collect();
            let p_left = rng.random_bool(0.5).then(|| random_permutation(rng, m));
            StructuredSpec::Mlbtc(MlbtcSpec::new(m, n, levels, p_left, None).expect("valid"))
        }
        other => panic!("unknown family {other}"),
    }
}

fn dense_matvec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = a.shape()[1];
    a.data().chunks_exact(n).map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Largest apply and bilinear gaps to the materialized matrix.
pub fn check_matrix(mat: &StructuredMatrix, rng: &mut ChaCha8Rng) -> strattn::Result<(f64, f64)> {
    let (m, n) = mat.dims();
    let dense = mat.materialize();
    let x = Tensor::randn(&[n], 1.0, rng);
    let y = Tensor::randn(&[m], 1.0, rng);
    let expect = dense_matvec(&dense, x.data());
    let got = mat.apply(&x)?;
    let apply_gap = got.data().iter().zip(&expect).fold(0.0f64, |g, (a, b)| g.max((a - b).abs()));
    let bil = mat.bilinear(&y, &x)?;
    let bil_expect: f64 = y.data().iter().zip(&expect).map(|(a, b)| a * b).sum();
    Ok((apply_gap, (bil - bil_expect).abs()))
}

/// Random MLR-attention instance with `T ≤ 16` and `L ≤ 4`; returns the
/// largest gap between the layer's score matrix and the entrywise sum of
/// per-level products over shared blocks.
pub fn check_mlr_attention(rng: &mut ChaCha8Rng) -> strattn::Result<f64> {
    let levels = rng.random_range(1..=4);
    let finest = 1usize << (levels - 1);
    let lo = if levels > 1 { 2 } else { 1 };
    let t = finest * rng.random_range(lo..=16 / finest);
    let ranks: Vec<usize> = (0..levels).map(|_| rng.random_range(1..=3)).collect();
    let r: usize = ranks.iter().sum();
    let d = rng.random_range(1..=8);
    let x = Tensor::randn(&[t, d], 1.0, rng);
    let wq = Tensor::randn(&[d, r], 1.0, rng);
    let wk = Tensor::randn(&[d, r], 1.0, rng);
    let cfg = MlrAttentionConfig::new(RankAllocation::new(ranks.clone())?);
    let got = score_matrix_mlr_attention(&x, &wq, &wk, &cfg)?;
    let q = x.matmul(&wq)?;
    let k = x.matmul(&wk)?;
    let mut gap = 0.0f64;
    for j in 0..t {
        for j2 in 0..t {
            let mut s = 0.0;
            let mut col = 0;
            for (l, &rl) in ranks.iter().enumerate() {
                let size = t >> l;
                if j / size == j2 / size {
                    s += (col..col + rl).map(|c| q.at(&[j, c]) * k.at(&[j2, c])).sum::<f64>();
                }
                col += rl;
            }
            gap = gap.max((got.at(&[j, j2]) - s).abs());
        }
    }
    Ok(gap)
}

pub fn run(cli: &Cli, configs: usize, tolerance: f64) -> CliResult<()> {
    if configs == 0 {
        return Err(Failure::Invalid("--configs must be at least 1".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let mut rows = vec![];
    for (f, family) in FAMILIES.iter().enumerate() {
        let (mut apply, mut bil) = (0.0f64, 0.0f64);
        for i in 0..configs {
            let mut rng = stream_rng(seed, Domain::Eval, (f * configs + i) as u64);
            let spec = random_spec(family, &mut rng);
            let mat = StructuredMatrix::random(spec, &mut rng);
            let (a, b) = check_matrix(&mat, &mut rng)?;
            apply = apply.max(a);
            bil = bil.max(b);
        }
        rows.push((family.to_string(), apply, bil));
    }
    let mut att = 0.0f64;
    for i in 0..configs {
        let mut rng = stream_rng(seed, Domain::Eval, (FAMILIES.len() * configs + i) as u64);
        att = att.max(check_mlr_attention(&mut rng)?);
    }
    rows.push(("mlr-attention".into(), att, 0.0));

    let canonical = run_dir::canonical(&json!({"oracle_suite": {"configs": configs, "tolerance": tolerance}}));
    let dir = run_dir::create(&cli.out, &canonical, seed)?;
    let mut w = csv::Writer::from_path(dir.join("oracle.csv"))?;
    w.write_record(["family", "configs", "max_apply_gap", "max_bilinear_gap"])?;
    for (family, a, b) in &rows {
        w.write_record([family.clone(), configs.to_string(), format!("{a:e}"), format!("{b:e}")])?;
    }
    w.flush()?;

    let mut failed = vec![];
    for (family, a, b) in &rows {
        let ok = a.max(*b) <= tolerance;
        println!(
            "{} {family:<14} {configs} configs, max gap {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            a.max(*b)
        );
        if !ok {
            failed.push(family.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("tolerance {tolerance:e} exceeded for {}", failed.join(", "))))
    }
}
