use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::optim::{AdamW, AdamWConfig};
use super::task::{sample_batch, sample_prompts, stream_rng, Batch, Domain, IclTaskConfig, Prompt};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::flops;
use crate::mup::{adam_lr, MupRule};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Numeric precision of a run. Only 64-bit is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision {s:?}"))),
        }
    }
}

impl Precision {
    pub fn check_supported(self) -> Result<()> {
        match self {
            Precision::F64 => Ok(()),
            Precision::F32 => Err(Error::config("32-bit precision is not supported; use f64")),
        }
    }
}

fn default_eval_prompts() -> usize {
    512
}

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// `η_base`.
    pub base_lr: f64,
    /// `D₁`; defaults to the model width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_width: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Steps between metric records; 0 records only the first and last.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_prompts")]
    pub eval_prompts: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, base_lr: f64) -> Self {
        TrainConfig {
            steps,
            batch_size,
            base_lr,
            base_width: None,
            optimizer: AdamWConfig::default(),
            eval_every: 0,
            eval_prompts: default_eval_prompts(),
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_prompts == 0 {
            return Err(Error::config("batch_size and eval_prompts must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.base_width == Some(0) {
            return Err(Error::config("base_width must be positive"));
        }
        self.optimizer.validate()?;
        self.precision.check_supported()
    }
}

/// Mean over the batch and the `N` query positions of `(f̂(x_i) − f(x_i))²`.
pub fn icl_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = loss_on_tape(model, &mut tape, batch)?.1;
    tape.value(loss).item()
}

fn loss_on_tape(model: &Model, tape: &mut Tape, batch: &Batch) -> Result<(super::model::Forward, crate::tape::Var)> {
    let fwd = model.forward(tape, &batch.tokens)?;
    let n = batch.targets.shape()[1];
    let pred = model.predictions(tape, &fwd, n)?;
    let target = tape.leaf(batch.targets.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let loss = tape.mean(sq)?;
    Ok((fwd, loss))
}

/// Relative error of the backpropagated gradient of every parameter
/// against central finite differences of [`icl_loss`].
pub fn gradient_errors(model: &Model, batch: &Batch) -> Result<Vec<(String, f64)>> {
    let mut tape = Tape::new();
    let (fwd, loss) = loss_on_tape(model, &mut tape, batch)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(model.info().len());
    for (i, info) in model.info().iter().enumerate() {
        let fd = crate::gradcheck::finite_diff_grad(
            |p| {
                let mut ps = model.params().to_vec();
                ps[i] = p.clone();
                icl_loss(&Model::from_params(model.config(), model.max_len(), ps)?, batch)
            },
            &model.params()[i],
        )?;
        let analytic = grads.wrt(fwd.params[i]).expect("trainable");
        out.push((info.name.clone(), crate::gradcheck::relative_error(analytic, &fd)));
    }
    Ok(out)
}

/// Mean squared error of `predict(prompt)` against `f(x_N)`.
pub fn eval_error_with(prompts: &[Prompt], predict: impl Fn(&Prompt) -> f64) -> f64 {
    let total: f64 = prompts
        .iter()
        .map(|p| {
            let e = predict(p) - p.ys[p.ys.len() - 1];
            e * e
        })
        .sum();
    total / prompts.len() as f64
}

const EVAL_CHUNK: usize = 64;

/// Error at the final query position, conditioning on all `N − 1` pairs,
/// over prompts `0..count` of the evaluation stream.
pub fn eval_error_at_n(model: &Model, task: &IclTaskConfig, seed: u64, count: usize) -> Result<f64> {
    let n = task.n_points();
    let last = 2 * (n - 1);
    let chunks: Vec<(u64, usize)> = (0..count)
        .step_by(EVAL_CHUNK)
        .map(|s| (s as u64, EVAL_CHUNK.min(count - s)))
        .collect();
    let sums = chunks
        .par_iter()
        .map(|&(first, size)| -> Result<f64> {
            let batch = sample_batch(task, seed, Domain::Eval, first, size)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch.tokens)?;
            let out = tape.value(fwd.outputs);
            let tp = out.shape()[1];
            Ok((0..size)
                .map(|b| {
                    let e = out.data()[b * tp + last] - batch.targets.data()[b * n + n - 1];
                    e * e
                })
                .sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / count as f64)
}

/// Least-squares prediction of `f(x_N)` from the first `N − 1` pairs.
pub fn least_squares_prediction(p: &Prompt) -> f64 {
    let (n, d) = (p.xs.shape()[0], p.xs.shape()[1]);
    let a = nalgebra::DMatrix::from_row_slice(n - 1, d, &p.xs.data()[..(n - 1) * d]);
    let y = nalgebra::DVector::from_column_slice(&p.ys[..n - 1]);
    let w = a.svd(true, true).solve(&y, 1e-12).expect("u and v were computed");
    p.xs.row(n - 1).data().iter().zip(w.iter()).map(|(x, w)| x * w).sum()
}

/// Error of the least-squares oracle over evaluation prompts `0..count`.
pub fn oracle_eval_error(task: &IclTaskConfig, seed: u64, count: usize) -> f64 {
    let prompts = sample_prompts(task, seed, Domain::Eval, 0, count);
    eval_error_with(&prompts, least_squares_prediction)
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Training loss of this step's batch at the current parameters.
    pub loss: f64,
    pub eval_error: f64,
    /// Runtime-counted FLOPs of all training forward and backward passes
    /// before this record.
    pub flops_cumulative: u128,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["step", "loss", "eval_error", "flops_cumulative", "wall_seconds"];

/// Writes records as CSV; timing is left out when `wall_clock` is false so
/// that reruns are byte-identical.
pub fn write_metrics<W: std::io::Write>(records: &[MetricRecord], wall_clock: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = crate::cost::csv_err;
    let cols = if wall_clock { 5 } else { 4 };
    w.write_record(&METRICS_HEADER[..cols]).map_err(err)?;
    for r in records {
        let mut row = vec![
            r.step.to_string(),
            format!("{:e}", r.loss),
            format!("{:e}", r.eval_error),
            r.flops_cumulative.to_string(),
        ];
        if wall_clock {
            row.push(format!("{:.3}", r.wall_seconds));
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The last parameters with a finite loss below the divergence bound.
    pub model: Model,
    pub records: Vec<MetricRecord>,
    /// Diagnostics when training stopped early.
    pub diverged: Option<String>,
}

/// Per-parameter AdamW learning rates from the model's μP rules.
pub fn mup_learning_rates(model: &Model, cfg: &TrainConfig) -> Vec<f64> {
    let base_width = cfg.base_width.unwrap_or(model.config().dim);
    model
        .info()
        .iter()
        .map(|p| {
            adam_lr(&MupRule {
                base_lr: cfg.base_lr,
                base_width,
                ..p.rule
            })
        })
        .collect()
}

/// Trains from a fresh μP initialization. `on_record` sees each record as
/// it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    task: &IclTaskConfig,
    cfg: &TrainConfig,
    seed: u64,
    on_record: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    task.validate()?;
    cfg.validate()?;
    if model_cfg.d_input != task.d_input {
        return Err(Error::config(format!(
            "model d_input {} differs from task d_input {}",
            model_cfg.d_input, task.d_input
        )));
    }
    let model = Model::init(model_cfg, task.seq_len(), &mut stream_rng(seed, Domain::Init, 0))?;
    train_from(model, task, cfg, seed, on_record)
}

/// Continues training `model`; batches are drawn from step 0 of `seed`'s
/// training stream.
pub fn train_from(
    mut model: Model,
    task: &IclTaskConfig,
    cfg: &TrainConfig,
    seed: u64,
    on_record: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let lrs = mup_learning_rates(&model, cfg);
    let mut opt = AdamW::new(cfg.optimizer, model.params(), lrs)?;
    let start = Instant::now();
    let mut flops_total: u128 = 0;
    let mut records = vec![];
    let mut last_good = model.clone();
    for step in 0..=cfg.steps {
        let batch = sample_batch(task, seed, Domain::Train, (step * cfg.batch_size) as u64, cfg.batch_size)?;
        let training = step < cfg.steps;
        let (result, counts) = flops::measure(|| -> Result<_> {
            let mut tape = Tape::new();
            let (fwd, loss_var) = loss_on_tape(&model, &mut tape, &batch)?;
            let loss = tape.value(loss_var).item()?;
            let max_act = fwd
                .residuals
                .iter()
                .map(|&r| tape.value(r).max_abs())
                .fold(0.0, f64::max);
            let grads = if training && loss.is_finite() && loss <= DIVERGENCE_LOSS {
                let g = tape.backward(loss_var)?;
                Some(fwd.params.iter().map(|&p| g.wrt(p).expect("trainable").clone()).collect::<Vec<Tensor>>())
            } else {
                None
            };
            Ok((loss, grads, max_act))
        });
        let (loss, grads, max_act) = result?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            let msg = format!(
                "loss {loss:e} at step {step} (base lr {:e}, max |activation| {max_act:e})",
                cfg.base_lr
            );
            log::warn!("training diverged: {msg}");
            return Ok(TrainOutcome {
                model: last_good,
                records,
                diverged: Some(msg),
            });
        }
        let record_now = step == 0 || step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if record_now {
            let rec = MetricRecord {
                step,
                loss,
                eval_error: eval_error_at_n(&model, task, seed, cfg.eval_prompts)?,
                flops_cumulative: flops_total,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("step {step}: loss {loss:.5} eval {:.5}", rec.eval_error);
            on_record(&rec);
            records.push(rec);
        }
        flops_total += counts.flops;
        if let Some(grads) = grads {
            last_good = model.clone();
            let refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(model.params_mut(), &refs)?;
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        diverged: None,
    })
}
