//! File formats.
//!
//! * datasets: CSV with header `x1,..,xd,label`, labels 1-based;
//! * fairness targets, costs and plans: header-less CSV matrices;
//! * plan reports: a JSON sidecar next to the plan CSV;
//! * GCG traces and cost-learning histories: CSV with a header row.
//!
//! Floats are written in their shortest round-trip form, so reading a file
//! back reproduces the values bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::costlearn::HistoryRow;
use crate::domain::{GroupLabels, LabeledDataset};
use crate::error::{Error, Result};
use crate::fairness::FairnessTarget;
use crate::penalized::TraceRow;
use crate::sinkhorn::SolverReport;

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Parse(format!(
            "{}:{line}: not a number: {field:?}",
            path.display()
        ))
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?))
}

fn csv_reader(path: &Path, headers: bool) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(headers)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn flush<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    flush(w, path)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in csv_reader(path, false)?.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| parse_f64(f, path, k + 1))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!(
                    "{}:{}: expected {} columns, found {}",
                    path.display(),
                    k + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: empty matrix", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| {
        rows[i][j]
    }))
}

pub fn write_dataset(path: &Path, data: &LabeledDataset) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = (1..=data.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (i, row) in data.points().row_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        rec.push((data.labels().get(i) + 1).to_string());
        w.write_record(&rec)?;
    }
    flush(w, path)
}

/// Reads a dataset; the group count is the largest label present unless
/// `groups` asks for more.
pub fn read_dataset(path: &Path, groups: Option<usize>) -> Result<LabeledDataset> {
    let mut reader = csv_reader(path, true)?;
    let header = reader.headers()?.clone();
    let d = header
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| {
            Error::Parse(format!("{}: expected columns x1..xd,label", path.display()))
        })?;
    let expected = (1..=d)
        .map(|k| format!("x{k}"))
        .chain(["label".to_string()]);
    if !header.iter().eq(expected) {
        return Err(Error::Parse(format!(
            "{}: header must be x1..x{d},label, found {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() != d + 1 {
            return Err(Error::Parse(format!(
                "{}:{line}: expected {} fields",
                path.display(),
                d + 1
            )));
        }
        rows.push(
            rec.iter()
                .take(d)
                .map(|f| parse_f64(f, path, line))
                .collect::<Result<Vec<_>>>()?,
        );
        let label: usize = rec[d].parse().ok().filter(|&l| l >= 1).ok_or_else(|| {
            Error::Parse(format!(
                "{}:{line}: label must be an integer >= 1",
                path.display()
            ))
        })?;
        labels.push(label - 1);
    }
    let present = labels.iter().max().map_or(0, |m| m + 1);
    let labels = GroupLabels::new(labels, groups.unwrap_or(0).max(present))?;
    LabeledDataset::from_rows(&rows, labels)
}

pub fn write_target(path: &Path, target: &FairnessTarget) -> Result<()> {
    write_matrix(path, target.values())
}

pub fn read_target(path: &Path) -> Result<FairnessTarget> {
    FairnessTarget::new(read_matrix(path)?)
}

/// `<plan>.json` next to `<plan>.csv`.
pub fn sidecar_path(plan_path: &Path) -> PathBuf {
    plan_path.with_extension("json")
}

/// Writes the plan matrix and its report sidecar.
pub fn write_plan(path: &Path, plan: &DMatrix<f64>, report: &SolverReport) -> Result<()> {
    write_matrix(path, plan)?;
    write_json(&sidecar_path(path), report)
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "iter",
        "objective",
        "transport_cost",
        "fairness_loss",
        "alpha",
    ])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            fmt_f64(r.objective),
            fmt_f64(r.transport_cost),
            fmt_f64(r.fairness_loss),
            fmt_f64(r.alpha),
        ])?;
    }
    flush(w, path)
}

pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "fairness_loss", "discrepancy", "objective"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            fmt_f64(r.fairness_loss),
            fmt_f64(r.discrepancy),
            fmt_f64(r.objective),
        ])?;
    }
    flush(w, path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
