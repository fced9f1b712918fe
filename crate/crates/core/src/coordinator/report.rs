//! CSV and SVG comparison reports over one or more run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{compute_run_metrics, speedup, speedup_bound, RunMetrics};
use super::svg::{line_chart, Series};
use super::{io_err, CoordinatorError, Mode};

/// Header of the per-mode curve files.
pub const CURVE_COLUMNS: [&str; 7] = [
    "iteration",
    "wall_clock_s",
    "mean_val_acc",
    "mean_test_acc",
    "std_test_acc",
    "mean_acc_params",
    "mean_flops",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub iteration: u64,
    pub wall_clock_s: f64,
    pub mean_val_acc: f64,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_acc_params: f64,
    pub mean_flops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub curves: BTreeMap<Mode, Vec<CurveRow>>,
    /// Mean speedup and its analytic bound when both modes were given.
    pub speedup: Option<(f64, f64)>,
}

/// Run directories under `dir`: itself if it holds a record, otherwise its
/// `rep-*` children in name order.
pub fn expand_run_dirs(dir: &Path) -> Result<Vec<PathBuf>, CoordinatorError> {
    if dir.join("record.json").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("rep-") && entry.path().join("record.json").exists() {
            out.push(entry.path());
        }
    }
    out.sort_by_key(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n[4..].parse::<u64>().ok())
            .unwrap_or(u64::MAX)
    });
    if out.is_empty() {
        return Err(CoordinatorError::Report(format!(
            "{} holds no finished runs",
            dir.display()
        )));
    }
    Ok(out)
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Curves across repetitions of one mode. Runs must agree on iteration
/// count and task set.
pub fn aggregate_curves(runs: &[RunMetrics]) -> Result<Vec<CurveRow>, CoordinatorError> {
    let first = runs
        .first()
        .ok_or_else(|| CoordinatorError::Report("no runs to aggregate".into()))?;
    for r in runs {
        if r.record.iterations != first.record.iterations
            || r.iterations.len() != first.iterations.len()
        {
            return Err(CoordinatorError::Report(
                "runs disagree on the number of iterations".into(),
            ));
        }
        let (mut a, mut b) = (r.record.tasks.clone(), first.record.tasks.clone());
        a.sort();
        b.sort();
        if a != b {
            return Err(CoordinatorError::Report(
                "runs disagree on the task set".into(),
            ));
        }
    }
    let mut rows = Vec::new();
    for i in 0..first.iterations.len() {
        let at = |f: fn(&super::metrics::IterationMetrics) -> f64| {
            runs.iter().map(move |r| f(&r.iterations[i]))
        };
        let tests: Vec<f64> = at(|m| m.mean_test_acc).collect();
        rows.push(CurveRow {
            iteration: first.iterations[i].iteration,
            wall_clock_s: mean(at(|m| m.wall_clock_s)),
            mean_val_acc: mean(at(|m| m.mean_val_acc)),
            mean_test_acc: mean(tests.iter().copied()),
            std_test_acc: sample_std(&tests),
            mean_acc_params: mean(at(|m| m.mean_acc_params)),
            mean_flops: mean(at(|m| m.mean_flops)),
        });
    }
    Ok(rows)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CoordinatorError + '_ {
    move |e| CoordinatorError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CoordinatorError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CoordinatorError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn curve_csv_rows(rows: &[CurveRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                r.wall_clock_s.to_string(),
                r.mean_val_acc.to_string(),
                r.mean_test_acc.to_string(),
                r.std_test_acc.to_string(),
                r.mean_acc_params.to_string(),
                r.mean_flops.to_string(),
            ]
        })
        .collect()
}

/// Write CSV data and SVG plots for the given run directories into `out`.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary, CoordinatorError> {
    let mut by_mode: BTreeMap<Mode, Vec<RunMetrics>> = BTreeMap::new();
    for d in run_dirs {
        for run in expand_run_dirs(d)? {
            let m = compute_run_metrics(&run)?;
            by_mode.entry(m.record.mode).or_default().push(m);
        }
    }
    if by_mode.is_empty() {
        return Err(CoordinatorError::Report("no runs given".into()));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut files = Vec::new();
    let mut curves = BTreeMap::new();

    for (mode, runs) in &by_mode {
        let name = mode.name();
        let rows = aggregate_curves(runs)?;
        let path = out.join(format!("{name}_curves.csv"));
        write_csv(&path, &CURVE_COLUMNS, &curve_csv_rows(&rows))?;
        files.push(path);

        let mut mu: BTreeMap<(u64, usize), (f64, usize)> = BTreeMap::new();
        for r in runs {
            for m in &r.mu_by_depth {
                let e = mu.entry((m.iteration, m.depth)).or_insert((0.0, 0));
                e.0 += m.mean_clone_prob * m.paths as f64;
                e.1 += m.paths;
            }
        }
        let mu_rows: Vec<Vec<String>> = mu
            .iter()
            .map(|((n, d), (sum, k))| {
                vec![
                    n.to_string(),
                    d.to_string(),
                    (sum / *k as f64).to_string(),
                    k.to_string(),
                ]
            })
            .collect();
        let path = out.join(format!("{name}_mu_by_depth.csv"));
        write_csv(
            &path,
            &["iteration", "depth", "mean_clone_prob", "paths"],
            &mu_rows,
        )?;
        files.push(path);

        let mut hp: BTreeMap<(u64, String, String), usize> = BTreeMap::new();
        for r in runs {
            for h in &r.hyperparams {
                *hp.entry((h.iteration, h.field.clone(), h.value.clone()))
                    .or_insert(0) += h.count;
            }
        }
        let hp_rows: Vec<Vec<String>> = hp
            .into_iter()
            .map(|((n, f, v), c)| vec![n.to_string(), f, v, c.to_string()])
            .collect();
        let path = out.join(format!("{name}_hyperparams.csv"));
        write_csv(&path, &["iteration", "field", "value", "count"], &hp_rows)?;
        files.push(path);

        if let Some(last) = mu.keys().map(|k| k.0).max() {
            let pts: Vec<(f64, f64)> = mu
                .iter()
                .filter(|(k, _)| k.0 == last)
                .map(|(k, (s, c))| (k.1 as f64, s / *c as f64))
                .collect();
            let svg = line_chart(
                &format!("{name}: clone probability by depth (final iteration)"),
                "depth",
                "mean clone probability",
                &[Series {
                    name: name.into(),
                    points: pts,
                    band: None,
                }],
            );
            let path = out.join(format!("{name}_mu_by_depth.svg"));
            write_text(&path, &svg)?;
            files.push(path);
        }
        curves.insert(*mode, rows);
    }

    let series = |x: fn(&CurveRow) -> f64, y: fn(&CurveRow) -> f64, band: bool| -> Vec<Series> {
        curves
            .iter()
            .map(|(m, rows)| Series {
                name: m.name().into(),
                points: rows.iter().map(|r| (x(r), y(r))).collect(),
                band: band.then(|| rows.iter().map(|r| r.std_test_acc).collect()),
            })
            .collect()
    };
    let iter_x = |r: &CurveRow| (r.iteration + 1) as f64;
    let charts = [
        (
            "accuracy_vs_iteration.svg",
            "Mean test accuracy",
            "task-set iteration",
            "test accuracy",
            series(iter_x, |r| r.mean_test_acc, true),
        ),
        (
            "accuracy_vs_wallclock.svg",
            "Mean test accuracy",
            "wall clock (s)",
            "test accuracy",
            series(|r| r.wall_clock_s, |r| r.mean_test_acc, true),
        ),
        (
            "params.svg",
            "Mean accounted parameters",
            "task-set iteration",
            "parameters",
            series(iter_x, |r| r.mean_acc_params, false),
        ),
        (
            "flops.svg",
            "Mean inference flops",
            "task-set iteration",
            "flops per sample",
            series(iter_x, |r| r.mean_flops, false),
        ),
    ];
    for (file, title, xl, yl, s) in charts {
        let path = out.join(file);
        write_text(&path, &line_chart(title, xl, yl, &s))?;
        files.push(path);
    }

    let mut speedup_summary = None;
    if let (Some(seq), Some(multi)) = (
        by_mode.get(&Mode::Sequential),
        by_mode.get(&Mode::Multiagent),
    ) {
        let pairs = seq.len().min(multi.len());
        let mut per_iter: Vec<Vec<f64>> = Vec::new();
        let mut seq_times: Vec<Vec<f64>> = Vec::new();
        let mut slow_times: Vec<Vec<f64>> = Vec::new();
        for k in 0..pairs {
            let (_, s) = speedup(&seq[k], &multi[k])?;
            for (i, v) in s.iter().enumerate() {
                if per_iter.len() <= i {
                    per_iter.push(Vec::new());
                    seq_times.push(Vec::new());
                    slow_times.push(Vec::new());
                }
                per_iter[i].push(*v);
                seq_times[i].push(
                    seq[k]
                        .agent_times
                        .values()
                        .map(|t| t.get(i).copied().unwrap_or(0.0))
                        .sum(),
                );
                slow_times[i].push(
                    multi[k]
                        .agent_times
                        .values()
                        .map(|t| t.get(i).copied().unwrap_or(0.0))
                        .fold(0.0, f64::max),
                );
            }
        }
        let bound = speedup_bound(&multi[0].record);
        let mut rows = Vec::new();
        for i in 0..per_iter.len() {
            rows.push(vec![
                i.to_string(),
                mean(seq_times[i].iter().copied()).to_string(),
                mean(slow_times[i].iter().copied()).to_string(),
                mean(per_iter[i].iter().copied()).to_string(),
                bound.to_string(),
            ]);
        }
        let overall = mean(per_iter.iter().map(|v| mean(v.iter().copied())));
        rows.push(vec![
            "mean".into(),
            String::new(),
            String::new(),
            overall.to_string(),
            bound.to_string(),
        ]);
        let path = out.join("speedup.csv");
        write_csv(
            &path,
            &[
                "iteration",
                "sequential_s",
                "slowest_agent_s",
                "speedup",
                "bound",
            ],
            &rows,
        )?;
        files.push(path);
        speedup_summary = Some((overall, bound));
    }
    Ok(ReportSummary {
        files,
        curves,
        speedup: speedup_summary,
    })
}
