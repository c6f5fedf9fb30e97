use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::{ConvergenceRow, HarnessError, TrialRecord};

pub const METRICS_HEADER: [&str; 16] = [
    "scheduler",
    "snr_db",
    "trial",
    "seed",
    "checksum",
    "regenerated",
    "window_start",
    "diverged",
    "stop",
    "iterations",
    "iters_to_tol",
    "updates_total",
    "nmse",
    "missed_rate",
    "false_alarm_rate",
    "aer",
];

pub const TRACE_HEADER: [&str; 10] = [
    "scheduler",
    "snr_db",
    "trial",
    "iter",
    "set_origin",
    "set_size",
    "updates",
    "updates_total",
    "tol",
    "nmse",
];

pub const CONVERGENCE_HEADER: [&str; 6] = ["scheduler", "snr_db", "iter", "mean_nmse", "mean_tol", "mean_set_size"];

/// Nine significant digits; undefined values become empty fields.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        String::new()
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// `results.csv` becomes `results.trace.csv`.
pub fn trace_path_for(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.trace.csv"))
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>, HarnessError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    Ok(w)
}

pub struct TraceWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            inner: writer(path, &TRACE_HEADER)?,
        })
    }

    pub fn write_batch(&mut self, batch: &[TrialRecord]) -> Result<(), HarnessError> {
        for rec in batch {
            for it in &rec.trace {
                self.inner.write_record([
                    rec.scheduler.as_str().to_string(),
                    format_float(rec.snr_db),
                    rec.trial.to_string(),
                    it.iter.to_string(),
                    it.set_origin.as_str().to_string(),
                    it.set_size.to_string(),
                    it.updates.to_string(),
                    it.updates_total.to_string(),
                    format_opt(it.tol),
                    format_opt(it.nmse),
                ])?;
            }
        }
        self.inner.flush()?;
        Ok(())
    }
}

/// Metrics and trace files written side by side, flushed after every batch
/// so an interrupted sweep keeps its completed trials.
pub struct CsvSink {
    metrics: csv::Writer<BufWriter<File>>,
    trace: TraceWriter,
}

impl CsvSink {
    pub fn create(metrics_path: &Path, trace_path: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            metrics: writer(metrics_path, &METRICS_HEADER)?,
            trace: TraceWriter::create(trace_path)?,
        })
    }

    pub fn write_batch(&mut self, batch: &[TrialRecord]) -> Result<(), HarnessError> {
        for rec in batch {
            let m = &rec.metrics;
            self.metrics.write_record([
                rec.scheduler.as_str().to_string(),
                format_float(rec.snr_db),
                rec.trial.to_string(),
                rec.seed.to_string(),
                rec.checksum.clone(),
                rec.regenerated.to_string(),
                rec.window_start.to_string(),
                u8::from(m.diverged).to_string(),
                rec.stop.as_str().to_string(),
                rec.iterations.to_string(),
                m.iters_to_tol.map(|i| i.to_string()).unwrap_or_default(),
                m.updates_total.to_string(),
                format_opt(m.nmse),
                format_float(m.missed_rate),
                format_float(m.false_alarm_rate),
                format_float(m.aer),
            ])?;
        }
        self.metrics.flush()?;
        self.trace.write_batch(batch)
    }
}

pub fn write_convergence(path: &Path, rows: &[ConvergenceRow]) -> Result<(), HarnessError> {
    let mut w = writer(path, &CONVERGENCE_HEADER)?;
    for r in rows {
        w.write_record([
            r.scheduler.as_str().to_string(),
            format_float(r.snr_db),
            r.iter.to_string(),
            format_float(r.mean_nmse),
            format_opt(r.mean_tol),
            format_float(r.mean_set_size),
        ])?;
    }
    w.flush()?;
    Ok(())
}
