//! In-context linear regression: prompts `x₁, f(x₁), …, x_N` with
//! `f(x) = wᵀx`, `w ∼ N(0, I)` and `x_i ∼ N(0, I/d)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a scalar label becomes a `d`-dimensional token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelEncoding {
    /// `(f(x), 0, …, 0)`.
    #[default]
    Coordinate0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IclTaskConfig {
    pub d_input: usize,
    /// Number of `(x, f(x))` pairs; defaults to `2·d_input`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(default)]
    pub label_encoding: LabelEncoding,
}

impl IclTaskConfig {
    pub fn new(d_input: usize) -> Self {
        IclTaskConfig {
            d_input,
            n_points: None,
            label_encoding: LabelEncoding::Coordinate0,
        }
    }

    pub fn n_points(&self) -> usize {
        self.n_points.unwrap_or(2 * self.d_input)
    }

    /// Tokens per prompt, `2N − 1`.
    pub fn seq_len(&self) -> usize {
        2 * self.n_points() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_input == 0 {
            return Err(Error::config("d_input must be at least 1"));
        }
        if self.n_points() < 2 {
            return Err(Error::config(format!("prompts need N ≥ 2 pairs, got {}", self.n_points())));
        }
        Ok(())
    }
}

/// One prompt. `tokens` is `[2N−1, d]`; `ys[i] = wᵀ x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Tensor,
    pub xs: Tensor,
    pub w: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Prompt {
    /// Interleaves `xs` (`[N, d]`) with their labels under `w`.
    pub fn from_parts(xs: Tensor, w: Vec<f64>) -> Result<Prompt> {
        let (n, d) = match *xs.shape() {
            [n, d] if d == w.len() => (n, d),
            ref s => return Err(Error::shape("Prompt::from_parts", s, &[w.len()])),
        };
        let ys: Vec<f64> = xs
            .data()
            .chunks_exact(d)
            .map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        let mut data = Vec::with_capacity((2 * n - 1) * d);
        for (i, x) in xs.data().chunks_exact(d).enumerate() {
            data.extend_from_slice(x);
            if i + 1 < n {
                data.push(ys[i]);
                data.extend(std::iter::repeat_n(0.0, d - 1));
            }
        }
        Ok(Prompt {
            tokens: Tensor::new(&[2 * n - 1, d], data)?,
            xs,
            w,
            ys,
        })
    }
}

pub fn sample_prompt<R: Rng + ?Sized>(cfg: &IclTaskConfig, rng: &mut R) -> Prompt {
    let d = cfg.d_input;
    let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let xs = Tensor::randn(&[cfg.n_points(), d], 1.0 / (d as f64).sqrt(), rng);
    Prompt::from_parts(xs, w).expect("shapes agree by construction")
}

/// Independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init,
    Train,
    Eval,
}

/// Generator for item `index` of `domain`: one ChaCha stream per item, so
/// items can be produced in any order or in parallel.
pub fn stream_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let tag = match domain {
        Domain::Init => 0x1d1d_0000_0000_0001,
        Domain::Train => 0x7a17_0000_0000_0002,
        Domain::Eval => 0xe7a1_0000_0000_0003,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(index);
    rng
}

/// Prompts `first .. first + size` of a domain, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, 2N−1, d]`.
    pub tokens: Tensor,
    /// `[B, N]`.
    pub targets: Tensor,
}

impl Batch {
    pub fn from_prompts(prompts: &[Prompt]) -> Result<Batch> {
        let first = prompts.first().ok_or_else(|| Error::config("empty batch"))?;
        let (t, d) = (first.tokens.shape()[0], first.tokens.shape()[1]);
        let n = first.ys.len();
        let mut tokens = Vec::with_capacity(prompts.len() * t * d);
        let mut targets = Vec::with_capacity(prompts.len() * n);
        for p in prompts {
            if p.tokens.shape() != [t, d] {
                return Err(Error::shape("Batch::from_prompts", p.tokens.shape(), &[t, d]));
            }
            tokens.extend_from_slice(p.tokens.data());
            targets.extend_from_slice(&p.ys);
        }
        Ok(Batch {
            tokens: Tensor::new(&[prompts.len(), t, d], tokens)?,
            targets: Tensor::new(&[prompts.len(), n], targets)?,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.shape()[0]
    }
}

pub fn sample_prompts(cfg: &IclTaskConfig, seed: u64, domain: Domain, first: u64, size: usize) -> Vec<Prompt> {
    (0..size as u64)
        .map(|i| sample_prompt(cfg, &mut stream_rng(seed, domain, first + i)))
        .collect()
}

pub fn sample_batch(cfg: &IclTaskConfig, seed: u64, domain: Domain, first: u64, size: usize) -> Result<Batch> {
    Batch::from_prompts(&sample_prompts(cfg, seed, domain, first, size))
}
