//! Plot data from metrics files: rows `x,y,series`, optionally with the
//! median of `y` across series at the same `x`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::{CliResult, Failure};

const X_AXES: [&str; 2] = ["step", "flops_cumulative"];
const Y_AXES: [&str; 2] = ["loss", "eval_error"];

pub struct Series {
    pub name: String,
    /// `(x text, x, y)` in file order.
    pub points: Vec<(String, f64, f64)>,
}

fn metrics_files(run: &Path) -> Vec<PathBuf> {
    let direct = run.join("metrics.csv");
    if direct.is_file() {
        return vec![direct];
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(run)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path().join("metrics.csv"))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    found
}

fn series_name(file: &Path) -> String {
    file.parent()
        .and_then(Path::file_name)
        .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn read_series(file: &Path, x: &str, y: &str) -> CliResult<Series> {
    let mut r = csv::Reader::from_path(file)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Invalid(format!("{}: missing metric column {name:?}", file.display())))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut points = vec![];
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> CliResult<f64> {
            rec[i]
                .parse()
                .map_err(|_| Failure::Invalid(format!("{}: bad number {:?}", file.display(), &rec[i])))
        };
        points.push((rec[xi].to_string(), parse(xi)?, parse(yi)?));
    }
    Ok(Series {
        name: series_name(file),
        points,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median of `y` at each `x` present in every series.
pub fn medians(series: &[Series]) -> BTreeMap<String, f64> {
    let mut by_x: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in series {
        for (xt, _, y) in &s.points {
            by_x.entry(xt.clone()).or_default().push(*y);
        }
    }
    by_x.into_iter()
        .filter(|(_, ys)| ys.len() == series.len())
        .map(|(x, ys)| (x, median(ys)))
        .collect()
}

pub fn write_plot_data<W: Write>(series: &[Series], with_median: bool, out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    let med = with_median.then(|| medians(series));
    let mut header = vec!["x", "y", "series"];
    if with_median {
        header.push("median");
    }
    w.write_record(&header)?;
    for s in series {
        for (xt, _, y) in &s.points {
            let mut row = vec![xt.clone(), format!("{y:e}"), s.name.clone()];
            if let Some(m) = &med {
                row.push(m.get(xt).map_or_else(String::new, |v| format!("{v:e}")));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(runs: &[PathBuf], x: &str, y: &str, with_median: bool) -> CliResult<()> {
    if !X_AXES.contains(&x) {
        return Err(Failure::Invalid(format!("--x must be one of {X_AXES:?}, got {x:?}")));
    }
    if !Y_AXES.contains(&y) {
        return Err(Failure::Invalid(format!("--y must be one of {Y_AXES:?}, got {y:?}")));
    }
    let files: Vec<PathBuf> = runs.iter().flat_map(|r| metrics_files(r)).collect();
    if files.is_empty() {
        return Err(Failure::Invalid("no metrics found".into()));
    }
    let series = files.iter().map(|f| read_series(f, x, y)).collect::<CliResult<Vec<_>>>()?;
    write_plot_data(&series, with_median, std::io::stdout().lock())
}
