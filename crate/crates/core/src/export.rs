//! Plot-ready artifacts: trajectory polylines from traces, and learning
//! curves aggregated across seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{DoneCause, TargetSpec, TraceRecord};
use crate::error::{Error, Result};

fn malformed(kind: &'static str, path: &Path, msg: impl Into<String>) -> Error {
    Error::Malformed {
        kind,
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parse a JSON-lines trace file. Blank lines are skipped.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed("trace", path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Path of one drone during one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub source: String,
    pub episode: u64,
    pub target: TargetSpec,
    pub outcome: Option<DoneCause>,
    /// Per agent, the visited positions in order.
    pub agents: Vec<Vec<[f64; 3]>>,
}

/// Group records by episode into polylines. A crashed agent's polyline
/// stops at the crash point.
pub fn trajectories(source: &str, records: &[TraceRecord]) -> Vec<EpisodeTrajectory> {
    let mut by_episode: BTreeMap<u64, EpisodeTrajectory> = BTreeMap::new();
    for r in records {
        let e = by_episode.entry(r.episode).or_insert_with(|| EpisodeTrajectory {
            source: source.to_string(),
            episode: r.episode,
            target: r.target,
            outcome: None,
            agents: vec![Vec::new(); r.positions.len()],
        });
        for (i, p) in r.positions.iter().enumerate() {
            let line = &mut e.agents[i];
            let point = [p.x, p.y, p.z];
            if line.last() != Some(&point) {
                line.push(point);
            }
        }
        if r.done {
            e.outcome = r.done_cause;
        }
    }
    by_episode.into_values().collect()
}

fn files_with_extension(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            files_with_extension(&path, ext, out)?;
        } else if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    Ok(())
}

/// A metrics CSV as numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed("metrics", path, e.to_string()))?;
    let columns: Vec<String> = r
        .headers()
        .map_err(|e| malformed("metrics", path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.first().map(String::as_str) != Some("iteration") {
        return Err(malformed("metrics", path, "first column must be 'iteration'"));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed("metrics", path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed("metrics", path, format!("row {}: {e}", i + 1)))?;
        if row.len() != columns.len() {
            return Err(malformed("metrics", path, format!("row {} has {} fields", i + 1, row.len())));
        }
        rows.push(row);
    }
    Ok(MetricsTable { columns, rows })
}

/// Mean and population standard deviation of every column across runs,
/// per iteration. Iterations missing from some runs use the runs that have
/// them; the `runs` column records how many. NaN entries are ignored.
pub fn aggregate_curves(runs: &[MetricsTable]) -> Result<MetricsTable> {
    let first = runs.first().ok_or_else(|| Error::EmptyInput("no metrics runs to aggregate".into()))?;
    if runs.iter().any(|r| r.columns != first.columns) {
        return Err(Error::Shape("metrics runs have different columns".into()));
    }
    let metrics = &first.columns[1..];
    let mut columns = vec!["iteration".to_string(), "runs".to_string()];
    for m in metrics {
        columns.push(format!("{m}_mean"));
        columns.push(format!("{m}_std"));
    }
    let mut by_iter: BTreeMap<i64, Vec<&Vec<f64>>> = BTreeMap::new();
    for run in runs {
        for row in &run.rows {
            by_iter.entry(row[0] as i64).or_default().push(row);
        }
    }
    let rows = by_iter
        .into_iter()
        .map(|(it, rows)| {
            let mut out = vec![it as f64, rows.len() as f64];
            for j in 1..first.columns.len() {
                let xs: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
                if xs.is_empty() {
                    out.extend([f64::NAN, f64::NAN]);
                    continue;
                }
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                out.extend([mean, var.sqrt()]);
            }
            out
        })
        .collect();
    Ok(MetricsTable { columns, rows })
}

pub fn write_table(table: &MetricsTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    w.write_record(&table.columns).map_err(|e| Error::Checkpoint(e.to_string()))?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Files produced by [`export_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub trajectories: Option<PathBuf>,
    pub curves: Option<PathBuf>,
    pub episodes: usize,
    pub runs: usize,
}

/// Scan `input` recursively for `*.jsonl` traces and `metrics.csv` files;
/// write `trajectories.json` and `curves.csv` into `out_dir`.
pub fn export_run(input: &Path, out_dir: &Path) -> Result<ExportSummary> {
    let mut traces = Vec::new();
    let mut csvs = Vec::new();
    if input.is_file() {
        traces.push(input.to_path_buf());
    } else {
        files_with_extension(input, "jsonl", &mut traces)?;
        files_with_extension(input, "csv", &mut csvs)?;
    }
    traces.sort();
    csvs.retain(|p| p.file_name().is_some_and(|n| n == "metrics.csv"));
    csvs.sort();
    if traces.is_empty() && csvs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no trace (*.jsonl) or metrics.csv files under {}",
            input.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = ExportSummary {
        trajectories: None,
        curves: None,
        episodes: 0,
        runs: csvs.len(),
    };
    if !traces.is_empty() {
        let mut all = Vec::new();
        for t in &traces {
            let records = read_trace(t)?;
            all.extend(trajectories(&t.display().to_string(), &records));
        }
        if all.is_empty() {
            return Err(Error::EmptyInput("trace files contain no records".into()));
        }
        summary.episodes = all.len();
        let path = out_dir.join("trajectories.json");
        let json = serde_json::to_string_pretty(&all).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        summary.trajectories = Some(path);
    }
    if !csvs.is_empty() {
        let tables = csvs.iter().map(|p| read_metrics(p)).collect::<Result<Vec<_>>>()?;
        let curves = aggregate_curves(&tables)?;
        let path = out_dir.join("curves.csv");
        write_table(&curves, &path)?;
        summary.curves = Some(path);
    }
    Ok(summary)
}
