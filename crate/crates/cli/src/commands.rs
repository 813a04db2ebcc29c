use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;
use strattn::attention::AttentionConfig;
use strattn::config::{from_json_file, ExperimentConfig};
use strattn::cost::{render_markdown, write_csv};
use strattn::icl::{
    eval_error_at_n, gradient_errors, load_checkpoint, sample_batch, save_checkpoint, stream_rng, train, write_metrics,
    Batch, Domain, IclTaskConfig, Model, ModelConfig, TrainConfig,
};
use strattn::mup::write_table;
use strattn::structured::{StructuredMatrix, StructuredSpec};
use strattn::Tensor;

use crate::{run_dir, Cli, CliResult, Failure};

pub fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Invalid("this subcommand needs --config".into()))?;
    Ok(ExperimentConfig::load(path)?)
}

fn seeds(cli: &Cli, cfg: &ExperimentConfig) -> Vec<u64> {
    cli.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn section<'a, T>(v: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| Failure::Invalid(format!("config has no `{name}` section")))
}

pub fn materialize(cli: &Cli, spec: &Path, compare: Option<&Path>, tolerance: f64) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    let a: StructuredSpec = from_json_file(spec)?;
    let b: Option<StructuredSpec> = compare.map(from_json_file).transpose()?;
    let draw = |s: &StructuredSpec| StructuredMatrix::random(s.clone(), &mut stream_rng(seed, Domain::Init, 0));
    let ma = draw(&a).materialize();
    let dir = run_dir::create(&cli.out, &run_dir::canonical(&json!({"spec": a, "compare": b})), seed)?;
    ma.save(dir.join("matrix.bin"))?;
    let (m, n) = a.dims();
    println!(
        "{} {m}x{n}: params {}, rank bound {}",
        a.family(),
        a.param_count(),
        a.rank_upper_bound()
    );
    if let Some(b) = b {
        if b.dims() != a.dims() {
            return Err(Failure::Invalid(format!(
                "cannot compare a {m}x{n} matrix with a {}x{} one",
                b.dims().0,
                b.dims().1
            )));
        }
        let mb = draw(&b).materialize();
        mb.save(dir.join("compare.bin"))?;
        let gap = ma.max_abs_diff(&mb);
        println!("max |Δ| = {gap}");
        if !(gap <= tolerance) {
            return Err(Failure::Numerical(format!("max |Δ| {gap:e} exceeds tolerance {tolerance:e}")));
        }
    }
    Ok(())
}

pub fn flops(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let rows = section(&cfg.cost, "cost")?.evaluate()?;
    let dir = run_dir::create(&cli.out, &cfg.canonical_json(), cli.seed.unwrap_or(0))?;
    write_csv(&rows, std::fs::File::create(dir.join("cost.csv"))?)?;
    if cli.markdown {
        print!("{}", render_markdown(&rows));
    } else {
        write_csv(&rows, std::io::stdout().lock())?;
    }
    Ok(())
}

/// Tokens `[2, T, 2]` and targets at the `⌈T/2⌉` input positions.
fn grad_check_batch(seq_len: usize, seed: u64) -> CliResult<Batch> {
    let mut task = IclTaskConfig::new(2);
    task.n_points = Some(seq_len / 2 + 1);
    let full = sample_batch(&task, seed, Domain::Eval, 0, 2)?;
    if full.tokens.shape()[1] == seq_len {
        return Ok(full);
    }
    let n = seq_len.div_ceil(2);
    let (b, t, d) = (2, full.tokens.shape()[1], 2);
    let tokens: Vec<f64> = full
        .tokens
        .data()
        .chunks_exact(t * d)
        .flat_map(|p| p[..seq_len * d].to_vec())
        .collect();
    let targets: Vec<f64> = full
        .targets
        .data()
        .chunks_exact(t / 2 + 1)
        .flat_map(|p| p[..n].to_vec())
        .collect();
    Ok(Batch {
        tokens: Tensor::new(&[b, seq_len, d], tokens)?,
        targets: Tensor::new(&[b, n], targets)?,
    })
}

pub fn grad_check(cli: &Cli, kind: &str, dim: usize, seq_len: usize, heads: usize, tolerance: f64) -> CliResult<()> {
    if seq_len < 2 {
        return Err(Failure::Invalid("--T must be at least 2".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let attention = AttentionConfig::preset(kind, dim, heads)?;
    let mut cfg = ModelConfig::new(1, dim, 2, attention);
    cfg.mlp_ratio = 1;
    let model = Model::init(&cfg, seq_len, &mut stream_rng(seed, Domain::Init, 0))?;
    // Zero-initialized tensors would leave most gradients identically zero.
    let mut rng = stream_rng(seed, Domain::Init, 1);
    let params = model
        .info()
        .iter()
        .zip(model.params())
        .map(|(info, p)| {
            if info.zero_init {
                Tensor::randn(&info.shape, 0.5, &mut rng)
            } else {
                p.clone()
            }
        })
        .collect();
    let model = Model::from_params(&cfg, seq_len, params)?;
    let batch = grad_check_batch(seq_len, seed)?;
    let errors = gradient_errors(&model, &batch)?;

    let canonical = run_dir::canonical(&json!({"grad_check": {"kind": kind, "D": dim, "T": seq_len, "heads": heads}}));
    let dir = run_dir::create(&cli.out, &canonical, seed)?;
    let mut w = csv::Writer::from_path(dir.join("grad_check.csv"))?;
    w.write_record(["param", "relative_error"])?;
    for (name, err) in &errors {
        w.write_record([name.clone(), format!("{err:e}")])?;
    }
    w.flush()?;

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    for (name, err) in &errors {
        println!("{name:<24} {err:.3e}");
    }
    println!("{kind} D={dim} T={seq_len} H={heads}: max relative error {worst:.3e}");
    if !(worst < tolerance) {
        return Err(Failure::Numerical(format!(
            "gradient relative error {worst:e} is not below {tolerance:e}"
        )));
    }
    Ok(())
}

struct SeedRun {
    seed: u64,
    dir: std::path::PathBuf,
    final_eval: Option<f64>,
    diverged: Option<String>,
}

fn train_one(
    cli: &Cli,
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    task: &IclTaskConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> CliResult<SeedRun> {
    let dir = run_dir::create(&cli.out, &cfg.canonical_json(), seed)?;
    let outcome = train(model_cfg, task, train_cfg, seed, &mut |r| {
        log::info!("seed {seed} step {}: loss {:.5} eval {:.5}", r.step, r.loss, r.eval_error)
    })?;
    write_metrics(
        &outcome.records,
        !cli.no_wall_clock,
        std::fs::File::create(dir.join("metrics.csv"))?,
    )?;
    let base_width = train_cfg.base_width.unwrap_or(model_cfg.dim);
    write_table(
        &outcome.model.mup_entries(train_cfg.base_lr, base_width),
        std::fs::File::create(dir.join("mup_table.csv"))?,
    )?;
    let step = outcome.records.last().map_or(0, |r| r.step);
    save_checkpoint(dir.join("checkpoint"), &outcome.model, step)?;
    Ok(SeedRun {
        seed,
        dir,
        final_eval: outcome.records.last().map(|r| r.eval_error),
        diverged: outcome.diverged,
    })
}

pub fn train_icl(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let model_cfg = section(&cfg.model, "model")?;
    let task = section(&cfg.task, "task")?;
    let mut train_cfg = section(&cfg.train, "train")?.clone();
    if let Some(p) = cli.precision {
        train_cfg.precision = p;
    }
    train_cfg.precision.check_supported()?;
    let runs: Vec<CliResult<SeedRun>> = seeds(cli, &cfg)
        .par_iter()
        .map(|&seed| train_one(cli, &cfg, model_cfg, task, &train_cfg, seed))
        .collect();
    let mut diverged = vec![];
    let mut stdout = std::io::stdout().lock();
    for run in runs {
        let run = run?;
        match &run.diverged {
            Some(msg) => {
                writeln!(stdout, "seed {}: diverged ({msg}) -> {}", run.seed, run.dir.display())?;
                diverged.push(format!("seed {}: {msg}", run.seed));
            }
            None => writeln!(
                stdout,
                "seed {}: eval error {:.6} -> {}",
                run.seed,
                run.final_eval.unwrap_or(f64::NAN),
                run.dir.display()
            )?,
        }
    }
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("training diverged; {}", diverged.join("; "))))
    }
}

pub fn eval(cli: &Cli, checkpoint: &Path, prompts: usize) -> CliResult<()> {
    if prompts == 0 {
        return Err(Failure::Invalid("--prompts must be at least 1".into()));
    }
    let (model, step) = load_checkpoint(checkpoint)?;
    let task = match &cli.config {
        Some(_) => section(&load_config(cli)?.task, "task")?.clone(),
        None => {
            let mut t = IclTaskConfig::new(model.config().d_input);
            t.n_points = Some(model.max_len().div_ceil(2));
            t
        }
    };
    if task.d_input != model.config().d_input || task.seq_len() > model.max_len() {
        return Err(Failure::Invalid(format!(
            "task (d_input {}, {} tokens) does not fit the checkpoint (d_input {}, max length {})",
            task.d_input,
            task.seq_len(),
            model.config().d_input,
            model.max_len()
        )));
    }
    let seed = cli.seed.unwrap_or(0);
    let err = eval_error_at_n(&model, &task, seed, prompts)?;
    let canonical = run_dir::canonical(&json!({
        "eval": {"model": model.config(), "step": step, "task": task, "prompts": prompts}
    }));
    let dir = run_dir::create(&cli.out, &canonical, seed)?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
    w.write_record(["step", "prompts", "eval_error"])?;
    w.write_record([step.to_string(), prompts.to_string(), format!("{err:e}")])?;
    w.flush()?;
    println!("step {step}: eval error at N={} over {prompts} prompts = {err:.6}", task.n_points());
    if !err.is_finite() {
        return Err(Failure::Numerical("evaluation error is not finite".into()));
    }
    Ok(())
}
