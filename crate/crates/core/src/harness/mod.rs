//! Seeded Monte Carlo experiments.
//!
//! Every trial draws one realization from a stream keyed by
//! `(master seed, trial)`. All schedulers and all SNR points of a trial
//! reuse that realization; the SNR only rescales the unit-variance noise.

pub mod config;
mod output;

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{self, ActivityPrior, EngineConfig, EngineError, IterationRecord, StopReason, Truth};
use crate::metrics::{self, Summary, TrialMetrics};
use crate::rng::{Purpose, RandomStream};
use crate::scheduling::SchedulerKind;
use crate::system_model::{self, ChannelRealization, FrameType, PilotMatrix, SystemConfig};
use crate::ConfigError;

pub use config::{parse_config, resolve, ExperimentSpec, Settings};
pub use output::{format_float, trace_path_for, CsvSink};

/// Realizations regenerated before a trial is declared impossible.
pub const MAX_REGENERATIONS: usize = 10_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("trial {trial}: no window with an active frame after {attempts} draws")]
    NoActiveRealization { trial: u64, attempts: usize },
}

pub fn snr_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// One trial's ground truth and noise, shared by every scheduler and SNR.
#[derive(Debug, Clone)]
pub struct Realization {
    pub trial: u64,
    pub seed: u64,
    pub pilots: PilotMatrix,
    pub channels: ChannelRealization,
    pub rho: Vec<f64>,
    pub window_start: usize,
    /// `N × T × M` truth inside the chosen window.
    pub h_window: Array3<Complex64>,
    /// `N × T` activity inside the chosen window.
    pub xi_window: Array2<bool>,
    pub unit_noise: Array3<Complex64>,
    /// Draws discarded because no window held a type-1 frame.
    pub regenerated: usize,
    pub checksum: String,
}

impl Realization {
    pub fn observation(&self, config: &SystemConfig, noise_var: f64) -> system_model::Observation {
        system_model::observe_with_noise(
            &self.pilots,
            &self.channels,
            self.window_start,
            config.window_len,
            noise_var,
            &self.unit_noise,
        )
    }
}

/// Draws until some window holds at least one frame fully inside it, and
/// keeps the first such window.
pub fn build_realization(config: &SystemConfig, master_seed: u64, trial: u64) -> Result<Realization, HarnessError> {
    let trial_stream = RandomStream::new(master_seed).child(trial, Purpose::Other);
    let windows = system_model::window_sequence(config);
    for attempt in 0..MAX_REGENERATIONS {
        let stream = trial_stream.child(attempt as u64, Purpose::Other);
        let seed = stream.child(0, Purpose::Other).next_u64();
        let pilots = system_model::generate_pilots(config, &mut stream.child(0, Purpose::Pilots));
        let schedule = system_model::sample_activity(config, &mut stream.child(0, Purpose::Activity));
        let chosen = windows.iter().copied().find(|&tx| {
            system_model::classify_frames(&schedule, tx, config)
                .values()
                .any(|&k| k == FrameType::Type1)
        });
        let Some(window_start) = chosen else {
            continue;
        };
        let channels = system_model::generate_channels(&schedule, config, &mut stream.child(0, Purpose::Channels));
        let span = window_start..window_start + config.window_len;
        let h_window = channels.h.slice(s![.., span.clone(), ..]).to_owned();
        let xi_window = schedule.xi.slice(s![.., span]).to_owned();
        let unit_noise = system_model::unit_noise(
            config.pilot_len,
            config.window_len,
            config.n_antennas,
            &mut stream.child(0, Purpose::Noise),
        );
        let checksum = checksum(&pilots, &h_window, &xi_window, &unit_noise);
        return Ok(Realization {
            trial,
            seed,
            pilots,
            rho: schedule.rho,
            channels,
            window_start,
            h_window,
            xi_window,
            unit_noise,
            regenerated: attempt,
            checksum,
        });
    }
    Err(HarnessError::NoActiveRealization {
        trial,
        attempts: MAX_REGENERATIONS,
    })
}

/// SHA-256 over `(Φ, H, ξ, W)`, first 16 hex digits.
pub fn checksum(
    pilots: &PilotMatrix,
    h: &Array3<Complex64>,
    xi: &Array2<bool>,
    noise: &Array3<Complex64>,
) -> String {
    let mut hasher = Sha256::new();
    let mut feed = |values: &mut dyn Iterator<Item = &Complex64>| {
        for v in values {
            hasher.update(v.re.to_le_bytes());
            hasher.update(v.im.to_le_bytes());
        }
    };
    feed(&mut pilots.entries.iter());
    feed(&mut h.iter());
    feed(&mut noise.iter());
    let bits: Vec<u8> = xi.iter().map(|&b| u8::from(b)).collect();
    hasher.update(&bits);
    hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything recorded about one `(scheduler, snr, trial)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub scheduler: SchedulerKind,
    pub snr_db: f64,
    pub trial: u64,
    pub seed: u64,
    pub checksum: String,
    pub regenerated: usize,
    pub window_start: usize,
    pub iterations: usize,
    pub initial_set_size: usize,
    pub stop: StopReason,
    pub metrics: TrialMetrics,
    pub trace: Vec<IterationRecord>,
}

pub fn run_trial(
    realization: &Realization,
    config: &SystemConfig,
    engine_cfg: &EngineConfig,
    kind: SchedulerKind,
    snr_db: f64,
) -> Result<TrialRecord, HarnessError> {
    let obs = realization.observation(config, snr_to_noise_var(snr_db));
    let prior = if kind.is_oracle() {
        ActivityPrior::Known(realization.xi_window.clone())
    } else {
        ActivityPrior::PerDevice(realization.rho.clone())
    };
    let mut scheduler = kind.build(engine_cfg.activity_threshold, &realization.xi_window);
    let initial_set_size = if kind.is_oracle() {
        realization
            .xi_window
            .rows()
            .into_iter()
            .filter(|row| row.iter().any(|&x| x))
            .count()
    } else {
        config.n_devices
    };
    let truth = Truth {
        h: realization.h_window.view(),
        active: realization.xi_window.view(),
    };
    let est = engine::run(
        &obs,
        &realization.pilots,
        &prior,
        &realization.channels.beta,
        engine_cfg,
        scheduler.as_mut(),
        Some(truth),
    )?;
    let diverged = est.stop == StopReason::Diverged;
    let nmse = metrics::nmse(est.h_hat.view(), truth.h, truth.active);
    let rates = metrics::detection_rates(
        est.rho_refined.view(),
        engine_cfg.activity_threshold,
        realization.xi_window.view(),
    );
    let iters_to_tol = est.iters_to_tol(engine_cfg, config.n_antennas);
    let per_iter_nmse = est.trace.iter().map(|r| r.nmse).collect();
    Ok(TrialRecord {
        scheduler: kind,
        snr_db,
        trial: realization.trial,
        seed: realization.seed,
        checksum: realization.checksum.clone(),
        regenerated: realization.regenerated,
        window_start: realization.window_start,
        iterations: est.iterations,
        initial_set_size,
        stop: est.stop,
        metrics: TrialMetrics::new(nmse, rates, iters_to_tol, est.updates_total, per_iter_nmse, diverged),
        trace: est.trace,
    })
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

/// Runs every `(scheduler, snr, trial)` of `spec`, handing each completed
/// batch to `sink` in `(scheduler, snr, trial)` order.
pub fn simulate(
    spec: &ExperimentSpec,
    mut sink: impl FnMut(&[TrialRecord]) -> Result<(), HarnessError>,
) -> Result<Vec<TrialRecord>, HarnessError> {
    spec.validate()?;
    let pool = pool(spec.parallelism)?;
    let batch = (spec.parallelism * 4).max(8) as u64;
    let mut all = Vec::new();
    for &kind in &spec.schedulers {
        for &snr_db in &spec.snr_db_list {
            let mut start = 0u64;
            while start < spec.n_trials as u64 {
                let end = (start + batch).min(spec.n_trials as u64);
                let records: Vec<TrialRecord> = pool.install(|| {
                    (start..end)
                        .into_par_iter()
                        .map(|trial| {
                            let real = build_realization(&spec.base, spec.base.rng_seed, trial)?;
                            run_trial(&real, &spec.base, &spec.engine, kind, snr_db)
                        })
                        .collect::<Result<_, _>>()
                })?;
                sink(&records)?;
                all.extend(records);
                start = end;
            }
        }
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheduler: SchedulerKind,
    pub snr_db: f64,
    pub summary: Summary,
}

pub fn summarize(spec: &ExperimentSpec, records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &kind in &spec.schedulers {
        for &snr_db in &spec.snr_db_list {
            let trials: Vec<TrialMetrics> = records
                .iter()
                .filter(|r| r.scheduler == kind && r.snr_db == snr_db)
                .map(|r| r.metrics.clone())
                .collect();
            if let Ok(summary) = metrics::aggregate(&trials) {
                rows.push(SummaryRow {
                    scheduler: kind,
                    snr_db,
                    summary,
                });
            }
        }
    }
    rows
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<12} {:>7} {:>7} {:>12} {:>12} {:>10} {:>10} {:>10} {:>8} {:>5}\n",
        "scheduler", "snr_db", "trials", "nmse_mean", "nmse_median", "aer_mean", "missed", "false_al", "iters", "div"
    );
    for row in rows {
        let s = &row.summary;
        out.push_str(&format!(
            "{:<12} {:>7.2} {:>7} {:>12.4e} {:>12.4e} {:>10.4} {:>10.4} {:>10.4} {:>8} {:>5}\n",
            row.scheduler.as_str(),
            row.snr_db,
            s.trials,
            s.nmse.mean,
            s.nmse.median,
            s.aer.mean,
            s.missed_rate.mean,
            s.false_alarm_rate.mean,
            if s.median_iters_to_tol.is_finite() {
                format!("{}", s.median_iters_to_tol)
            } else {
                "-".to_string()
            },
            s.diverged,
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<SummaryRow>,
    pub metrics_path: PathBuf,
    pub trace_path: PathBuf,
}

/// NMSE/AER sweep: one metrics row per `(scheduler, snr, trial)` and the
/// per-iteration trace in a companion file.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, HarnessError> {
    spec.validate()?;
    let metrics_path = spec.output_path.clone();
    let trace_path = trace_path_for(&metrics_path);
    let mut sink = CsvSink::create(&metrics_path, &trace_path)?;
    let records = simulate(spec, |batch| sink.write_batch(batch))?;
    let summary = summarize(spec, &records);
    Ok(ExperimentOutcome {
        records,
        summary,
        metrics_path,
        trace_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub scheduler: SchedulerKind,
    pub snr_db: f64,
    pub iter: usize,
    pub mean_nmse: f64,
    pub mean_tol: Option<f64>,
    pub mean_set_size: f64,
}

/// Per-iteration means over non-diverged trials. Iteration 0 is the
/// initial state (`ĥ = 0`, NMSE 1).
pub fn convergence_rows(spec: &ExperimentSpec, records: &[TrialRecord]) -> Vec<ConvergenceRow> {
    let mut rows = Vec::new();
    for &kind in &spec.schedulers {
        for &snr_db in &spec.snr_db_list {
            let group: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.scheduler == kind && r.snr_db == snr_db && !r.metrics.diverged)
                .collect();
            if group.is_empty() {
                continue;
            }
            let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            rows.push(ConvergenceRow {
                scheduler: kind,
                snr_db,
                iter: 0,
                mean_nmse: 1.0,
                mean_tol: None,
                mean_set_size: mean(group.iter().map(|r| r.initial_set_size as f64).collect()).unwrap_or(0.0),
            });
            for iter in 1..=spec.engine.max_iters {
                let at: Vec<&IterationRecord> = group.iter().filter_map(|r| r.trace.get(iter - 1)).collect();
                if at.is_empty() {
                    break;
                }
                rows.push(ConvergenceRow {
                    scheduler: kind,
                    snr_db,
                    iter,
                    mean_nmse: mean(at.iter().filter_map(|r| r.nmse).collect()).unwrap_or(f64::NAN),
                    mean_tol: mean(at.iter().filter_map(|r| r.tol).collect()),
                    mean_set_size: mean(at.iter().map(|r| r.set_size as f64).collect()).unwrap_or(0.0),
                });
            }
        }
    }
    rows
}

#[derive(Debug, Clone)]
pub struct ConvergenceOutcome {
    pub rows: Vec<ConvergenceRow>,
    pub records: Vec<TrialRecord>,
    pub path: PathBuf,
    pub trace_path: PathBuf,
}

/// Convergence protocol: every trial runs the full iteration budget so each
/// iteration averages over the same trials.
pub fn convergence_experiment(spec: &ExperimentSpec) -> Result<ConvergenceOutcome, HarnessError> {
    let mut spec = spec.clone();
    spec.engine.early_stop = false;
    spec.validate()?;
    let path = spec.output_path.clone();
    let trace_path = trace_path_for(&path);
    let mut trace = output::TraceWriter::create(&trace_path)?;
    let records = simulate(&spec, |batch| trace.write_batch(batch))?;
    let rows = convergence_rows(&spec, &records);
    output::write_convergence(&path, &rows)?;
    Ok(ConvergenceOutcome {
        rows,
        records,
        path,
        trace_path,
    })
}

/// One trial for each configured scheduler at the first SNR point.
pub fn run_single(spec: &ExperimentSpec, trial: u64) -> Result<Vec<TrialRecord>, HarnessError> {
    spec.validate()?;
    let real = build_realization(&spec.base, spec.base.rng_seed, trial)?;
    let snr_db = spec.snr_db_list[0];
    spec.schedulers
        .iter()
        .map(|&kind| run_trial(&real, &spec.base, &spec.engine, kind, snr_db))
        .collect()
}

/// Readable per-iteration dump of one trial.
pub fn output_lines(rec: &TrialRecord) -> Vec<String> {
    let m = &rec.metrics;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
    let mut lines = vec![format!(
        "{} snr={} dB trial={} checksum={} window_start={} stop={} iterations={} nmse={} missed={:.4} false_alarm={:.4}",
        rec.scheduler,
        rec.snr_db,
        rec.trial,
        rec.checksum,
        rec.window_start,
        rec.stop.as_str(),
        rec.iterations,
        opt(m.nmse),
        m.missed_rate,
        m.false_alarm_rate,
    )];
    lines.push(format!("{:>5} {:>8} {:>6} {:>9} {:>12} {:>12}", "iter", "origin", "size", "updates", "tol", "nmse"));
    for it in &rec.trace {
        lines.push(format!(
            "{:>5} {:>8} {:>6} {:>9} {:>12} {:>12}",
            it.iter,
            it.set_origin.as_str(),
            it.set_size,
            it.updates_total,
            opt(it.tol),
            opt(it.nmse),
        ));
    }
    lines
}

/// Refuses to start when the output location cannot be written.
pub fn check_writable(path: &Path) -> Result<(), HarnessError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(HarnessError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", parent.display()),
        )));
    }
    Ok(())
}
