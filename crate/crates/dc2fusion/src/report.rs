//! CSV telemetry: metric reports and per-step loss logs.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! written file reads back to bit-identical values.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use dc2fusion_core::metrics::{FusionReport, Metric};
use dc2fusion_core::objectives::LossValues;

use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 6] = ["sample", "mode", "metric", "vs_mri", "vs_pet", "mean"];
pub const LOSS_HEADER: [&str; 11] = [
    "step", "epoch", "sample", "ssim_mri", "ssim_pet", "ncc_mri", "ncc_pet", "l1_mri", "l1_pet", "pair", "total",
];

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub sample: String,
    pub mode: String,
    pub metric: Metric,
    pub vs_mri: f64,
    pub vs_pet: f64,
    pub mean: f64,
}

pub fn report_rows(reports: &[FusionReport]) -> Vec<ReportRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.scores.iter().map(move |s| ReportRow {
                sample: r.sample.clone(),
                mode: r.mode.label().to_string(),
                metric: s.metric,
                vs_mri: s.vs_mri,
                vs_pet: s.vs_pet,
                mean: s.mean,
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.into(),
        detail: e.to_string(),
    }
}

pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.sample.clone(),
            r.mode.clone(),
            r.metric.name().to_string(),
            r.vs_mri.to_string(),
            r.vs_pet.to_string(),
            r.mean.to_string(),
        ])?;
    }
    w.flush()
}

pub fn save_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(f, rows).map_err(|e| Error::io(path, e))
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if got.iter().ne(want.iter().copied()) {
        return Err(csv_err(
            path,
            format!("header {:?}, expected {want:?}", got.iter().collect::<Vec<_>>()),
        ));
    }
    Ok(())
}

fn number(path: &Path, line: u64, field: &str, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| csv_err(path, format!("line {line}: {field} `{s}` is not a number")))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, r.headers().map_err(|e| csv_err(path, e))?, &REPORT_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i as u64 + 2;
        let metric = Metric::parse(&rec[2])
            .ok_or_else(|| csv_err(path, format!("line {line}: unknown metric `{}`", &rec[2])))?;
        rows.push(ReportRow {
            sample: rec[0].to_string(),
            mode: rec[1].to_string(),
            metric,
            vs_mri: number(path, line, "vs_mri", &rec[3])?,
            vs_pet: number(path, line, "vs_pet", &rec[4])?,
            mean: number(path, line, "mean", &rec[5])?,
        });
    }
    Ok(rows)
}

/// One line of the training loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub epoch: u64,
    pub sample: String,
    pub loss: LossValues,
}

/// Appending writer for the loss log; flushes after every row so the log
/// survives an aborted run.
pub struct LossLog {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl LossLog {
    /// Starts a new log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.into(),
            w: csv::Writer::from_writer(f),
        };
        log.w.write_record(LOSS_HEADER).map_err(|e| csv_err(path, e))?;
        log.w.flush().map_err(|e| Error::io(path, e))?;
        Ok(log)
    }

    /// Continues an existing log after dropping rows with `step >= from_step`,
    /// which a resumed run is about to write again.
    pub fn resume(path: &Path, from_step: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let kept: Vec<LossRow> = read_loss_log(path)?
            .into_iter()
            .filter(|r| r.step < from_step)
            .collect();
        let mut log = Self::create(path)?;
        for r in &kept {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, row: &LossRow) -> Result<()> {
        let mut rec = vec![row.step.to_string(), row.epoch.to_string(), row.sample.clone()];
        rec.extend(row.loss.as_array().iter().map(f64::to_string));
        self.w.write_record(&rec).map_err(|e| csv_err(&self.path, e))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let f = OpenOptions::new()
        .read(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    check_header(path, r.headers().map_err(|e| csv_err(path, e))?, &LOSS_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i as u64 + 2;
        let int = |k: usize| -> Result<u64> {
            rec[k].parse().map_err(|_| {
                csv_err(
                    path,
                    format!("line {line}: {} `{}` is not an integer", LOSS_HEADER[k], &rec[k]),
                )
            })
        };
        let mut vals = [0.0; 8];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = number(path, line, LOSS_HEADER[3 + k], &rec[3 + k])?;
        }
        rows.push(LossRow {
            step: int(0)?,
            epoch: int(1)?,
            sample: rec[2].to_string(),
            loss: LossValues::from_array(vals),
        });
    }
    Ok(rows)
}
