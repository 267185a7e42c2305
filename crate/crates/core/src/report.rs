//! Report files: PSNR/SSIM matrices and per-epoch traces as CSV, plus a
//! JSON-lines event log whose only wall-clock value sits in the header line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::SequenceReport;

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn matrix_csv(names: &[String], cells: &[Vec<Option<f64>>]) -> Result<String> {
    let mut rows = Vec::with_capacity(names.len() + 1);
    let mut header = vec!["task".to_string()];
    header.extend(names.iter().map(|n| format!("after_{n}")));
    rows.push(header);
    for (name, row) in names.iter().zip(cells) {
        let mut r = vec![name.clone()];
        r.extend(row.iter().map(|v| v.map_or_else(String::new, |v| format!("{v:.6}"))));
        rows.push(r);
    }
    csv_string(rows)
}

/// Task × after-task PSNR matrix; cells before a task is trained are empty.
pub fn psnr_matrix_csv(report: &SequenceReport) -> Result<String> {
    matrix_csv(&report.names, &report.psnr)
}

pub fn ssim_matrix_csv(report: &SequenceReport) -> Result<String> {
    matrix_csv(&report.names, &report.ssim)
}

pub fn epochs_csv(report: &SequenceReport) -> Result<String> {
    let mut rows = vec![["task_id", "task", "epoch", "mean_loss", "psnr", "ssim", "input_psnr"]
        .map(String::from)
        .to_vec()];
    for t in &report.traces {
        for e in 0..t.epoch_psnr.len() {
            rows.push(vec![
                t.task_id.to_string(),
                t.name.clone(),
                (e + 1).to_string(),
                format!("{:.8}", t.epoch_loss[e]),
                format!("{:.6}", t.epoch_psnr[e]),
                format!("{:.6}", t.epoch_ssim[e]),
                format!("{:.6}", t.input_psnr),
            ]);
        }
    }
    csv_string(rows)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `ssim.csv` and `epochs.csv` into `dir`.
pub fn write_reports(dir: &Path, report: &SequenceReport) -> Result<()> {
    write_file(&dir.join("report.csv"), &psnr_matrix_csv(report)?)?;
    write_file(&dir.join("ssim.csv"), &ssim_matrix_csv(report)?)?;
    write_file(&dir.join("epochs.csv"), &epochs_csv(report)?)
}

#[derive(Serialize)]
struct Line<'a, R: Serialize> {
    event: &'a str,
    #[serde(flatten)]
    record: &'a R,
}

/// JSON-lines event log.
pub struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlLog {
    /// Creates the log and writes the header line, which is the only line
    /// carrying a timestamp.
    pub fn create(path: &Path, header: &impl Serialize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut value = serde_json::to_value(header)?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("event".into(), "header".into());
            map.insert("started_unix".into(), started.into());
        }
        log.write_value(&value)?;
        Ok(log)
    }

    fn write_value(&mut self, v: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, v)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn record(&mut self, event: &str, record: &impl Serialize) -> Result<()> {
        let v = serde_json::to_value(Line { event, record })?;
        self.write_value(&v)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
