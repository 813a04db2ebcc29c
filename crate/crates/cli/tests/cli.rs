use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn strattn(dir: &Path, args: &[&str]) -> Run {
    let Output { status, stdout, stderr } = Command::new(env!("CARGO_BIN_EXE_strattn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: status.code().expect("exited"),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

const ICL: &str = r#"{
  "schema_version": "1",
  "model": {"layers": 1, "dim": 8, "d_input": 2,
            "attention": {"heads": 2, "score": {"kind": "standard"}}},
  "task": {"d_input": 2},
  "train": {"steps": 6, "batch_size": 4, "base_lr": 0.001, "eval_every": 3, "eval_prompts": 32},
  "seeds": [0, 1, 2]
}"#;

#[test]
fn help_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(strattn(dir.path(), &["--help"]).code, 0);
    assert_eq!(strattn(dir.path(), &["--version"]).code, 0);
    assert_eq!(strattn(dir.path(), &["--bogus", "flops"]).code, 1);
    assert_eq!(strattn(dir.path(), &["flops"]).code, 1);
}

#[test]
fn materialize_one_level_mlr_equals_low_rank() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "mlr_L1.json", r#"{"family": "mlr", "m": 8, "n": 6, "ranks": [2]}"#);
    write(d, "lowrank.json", r#"{"family": "low-rank", "m": 8, "n": 6, "r": 2}"#);
    let r = strattn(d, &["materialize", "--spec", "mlr_L1.json", "--compare", "lowrank.json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("max |Δ| = 0\n"), "{}", r.stdout);

    write(d, "mlr_L2.json", r#"{"family": "mlr", "m": 8, "n": 6, "ranks": [1, 1]}"#);
    let r = strattn(d, &["materialize", "--spec", "mlr_L2.json", "--compare", "lowrank.json"]);
    assert_eq!(r.code, 2);

    write(d, "small.json", r#"{"family": "low-rank", "m": 4, "n": 6, "r": 2}"#);
    assert_eq!(strattn(d, &["materialize", "--spec", "small.json", "--compare", "lowrank.json"]).code, 1);
    write(d, "bad.json", r#"{"family": "low-rank", "m": 4, "n": 6, "r": 5}"#);
    assert_eq!(strattn(d, &["materialize", "--spec", "bad.json"]).code, 1);
}

#[test]
fn flops_markdown_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "mlr8.json",
        r#"{"schema_version": "1", "cost": {"queries": [
            {"id": "uniform-8", "query": {"kind": "mlr-attention", "seq_len": 1024, "dim": 512,
                                          "rank_allocation": "8|8|8|8|8|8|8|8"}}]}}"#,
    );
    let r = strattn(d, &["flops", "--config", "mlr8.json", "--markdown"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let row = r.stdout.lines().find(|l| l.starts_with("| uniform-8")).unwrap();
    assert!(row.contains("| 16,711,680 |"), "{row}");
    let csv = std::fs::read_to_string(run_dirs(d)[0].join("cost.csv")).unwrap();
    assert!(csv.contains(",16711680,"));
}

#[test]
fn grad_check_passes_for_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["standard", "mlr-attention", "bilinear-mlr", "bilinear-btt"] {
        let r = strattn(dir.path(), &["grad-check", "--kind", kind, "--D", "4", "--T", "3"]);
        assert_eq!(r.code, 0, "{kind}: {}", r.stderr);
        let worst: f64 = r.stdout.lines().last().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
        assert!(worst < 1e-5);
    }
    let r = strattn(dir.path(), &["grad-check", "--kind", "bilinear-btt", "--D", "8", "--T", "4", "--heads", "2"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(strattn(dir.path(), &["grad-check", "--kind", "nope", "--D", "4", "--T", "3"]).code, 1);
}

#[test]
fn oracle_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let r = strattn(dir.path(), &["oracle-suite", "--configs", "20"]);
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert_eq!(r.stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn training_runs_are_reproducible_and_exportable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "icl.json", ICL);
    let r = strattn(d, &["train-icl", "--config", "icl.json", "--jobs", "2", "--no-wall-clock"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let runs = run_dirs(d);
    assert_eq!(runs.len(), 3);
    let names: Vec<String> = runs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    let hash = names[0].split('-').next().unwrap();
    assert_eq!(hash.len(), 12);
    assert_eq!(names, [0, 1, 2].map(|s| format!("{hash}-seed{s}")));
    for run in &runs {
        for f in ["config.json", "metrics.csv", "mup_table.csv", "checkpoint/manifest.json", "checkpoint/weights.bin"] {
            assert!(run.join(f).is_file(), "{} lacks {f}", run.display());
        }
    }
    let first = std::fs::read(runs[1].join("metrics.csv")).unwrap();
    let r = strattn(d, &["train-icl", "--config", "icl.json", "--seed", "1", "--no-wall-clock"]);
    assert_eq!(r.code, 0);
    assert_eq!(std::fs::read(runs[1].join("metrics.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,loss,eval_error,flops_cumulative");
    assert_eq!(text.lines().count(), 4);

    let r = strattn(d, &["eval", "--checkpoint", runs[0].join("checkpoint").to_str().unwrap(), "--prompts", "64"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("step 6:"), "{}", r.stdout);

    let run_args: Vec<&str> = runs.iter().map(|p| p.to_str().unwrap()).collect();
    let mut args = vec!["export", "--x", "flops_cumulative", "--y", "eval_error", "--median", "--run"];
    args.extend(&run_args);
    let r = strattn(d, &args);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let mut lines = r.stdout.lines();
    assert_eq!(lines.next().unwrap(), "x,y,series,median");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 9);
    for name in &names {
        let xs: Vec<u128> = rows.iter().filter(|r| &r[2] == name).map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(xs.len(), 3);
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }
    // Median recomputed from the per-series values.
    for row in &rows {
        let mut ys: Vec<f64> = rows.iter().filter(|r| r[0] == row[0]).map(|r| r[1].parse().unwrap()).collect();
        ys.sort_by(f64::total_cmp);
        let m: f64 = row[3].parse().unwrap();
        assert_eq!(m, ys[1]);
    }
}

#[test]
fn export_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("empty")).unwrap();
    let r = strattn(d, &["export", "--run", "empty"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("no metrics found"));
    std::fs::create_dir(d.join("odd")).unwrap();
    write(&d.join("odd"), "metrics.csv", "step,loss\n0,1.0\n");
    let r = strattn(d, &["export", "--run", "odd", "--y", "eval_error"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("missing metric column"));
}

#[test]
fn invalid_configs_exit_one_with_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bad.json", &ICL.replace("\"batch_size\"", "\"batchsize\""));
    let r = strattn(d, &["train-icl", "--config", "bad.json"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("train.batchsize"), "{}", r.stderr);
    write(d, "heads.json", &ICL.replace("\"heads\": 2", "\"heads\": 3"));
    let r = strattn(d, &["train-icl", "--config", "heads.json"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("model:"), "{}", r.stderr);
    write(d, "ok.json", ICL);
    assert_eq!(strattn(d, &["train-icl", "--config", "ok.json", "--precision", "f32"]).code, 1);
    assert_eq!(strattn(d, &["train-icl", "--config", "ok.json", "--precision", "f16"]).code, 1);
    assert!(!d.join("runs").exists());
}

#[test]
fn divergence_exits_two_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "div.json", &ICL.replace("\"base_lr\": 0.001", "\"base_lr\": 1e6"));
    let r = strattn(d, &["train-icl", "--config", "div.json", "--seed", "0"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("diverged"));
    let run = &run_dirs(d)[0];
    assert!(run.join("checkpoint/weights.bin").is_file());
    assert!(run.join("metrics.csv").is_file());
}
