//! `key = value` experiment files and flag overrides.
//!
//! Values are collected into one ordered map (file first, flags after, so
//! later entries win) and converted to an [`ExperimentSpec`] in a single
//! validation pass.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::engine::{EngineConfig, Onsager, StopSet};
use crate::scheduling::SchedulerKind;
use crate::system_model::{ActivityModel, Fading, PathLoss, SystemConfig};
use crate::ConfigError;

pub const SEED_ENV: &str = "MSGAMP_SEED";

/// Every key accepted in a config file or as a flag override.
pub const VALID_KEYS: &[&str] = &[
    "activity_high",
    "activity_low",
    "activity_model",
    "antennas",
    "damping",
    "devices",
    "fading",
    "guard_period",
    "horizon",
    "max_iters",
    "onsager",
    "out",
    "parallelism",
    "pathloss",
    "pilot_len",
    "schedulers",
    "seed",
    "snr",
    "start",
    "stop_set",
    "threshold",
    "tol",
    "trials",
    "window_len",
    "window_step",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub base: SystemConfig,
    pub engine: EngineConfig,
    pub snr_db_list: Vec<f64>,
    pub schedulers: Vec<SchedulerKind>,
    pub n_trials: usize,
    pub output_path: PathBuf,
    pub parallelism: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        resolve(&Settings::default(), None).expect("defaults are valid")
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.base.validate()?;
        self.engine.validate()?;
        if self.n_trials == 0 {
            return Err(out_of_range("trials", "trials >= 1"));
        }
        if self.snr_db_list.is_empty() || self.snr_db_list.iter().any(|s| !s.is_finite()) {
            return Err(out_of_range("snr", "non-empty list of finite dB values"));
        }
        if self.schedulers.is_empty() {
            return Err(out_of_range("schedulers", "at least one scheduler"));
        }
        if self.parallelism == 0 {
            return Err(out_of_range("parallelism", "parallelism >= 1"));
        }
        Ok(())
    }
}

/// Raw settings in the order they were supplied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        if !VALID_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                key,
                valid: VALID_KEYS.join(", "),
            });
        }
        self.values.insert(key, value.into().trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_file_contents(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }
}

fn out_of_range(key: &'static str, constraint: &str) -> ConfigError {
    ConfigError::OutOfRange {
        key,
        constraint: constraint.to_string(),
    }
}

fn static_key(key: &str) -> &'static str {
    VALID_KEYS.iter().copied().find(|k| *k == key).unwrap_or("unknown")
}

struct Reader<'a> {
    settings: &'a Settings,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.settings.get(key)
    }

    fn parse_err(key: &str, value: &str, expected: &'static str) -> ConfigError {
        ConfigError::Parse {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        }
    }

    /// Integer with a lower bound; negative input reports the constraint.
    fn count(&self, key: &str, min: i64, default: usize) -> Result<usize, ConfigError> {
        let Some(v) = self.raw(key) else {
            return Ok(default);
        };
        let parsed: i64 = v.parse().map_err(|_| Self::parse_err(key, v, "integer"))?;
        if parsed < min {
            return Err(out_of_range(static_key(key), &format!("{key} >= {min}")));
        }
        Ok(parsed as usize)
    }

    fn real(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Self::parse_err(key, v, "real number")),
        }
    }
}

/// Builds a validated spec. `env_seed` is consulted only when `seed` was not
/// given in the settings.
pub fn resolve(settings: &Settings, env_seed: Option<&str>) -> Result<ExperimentSpec, ConfigError> {
    let r = Reader { settings };
    let n_devices = r.count("devices", 1, 128)?;
    let n_antennas = r.count("antennas", 1, 2)?;
    let pilot_len = r.count("pilot_len", 1, 32)?;
    let window_len = r.count("window_len", 1, 3 * pilot_len)?;
    let window_step = r.count("window_step", 1, window_len.saturating_sub(pilot_len).max(1))?;
    let horizon = r.count("horizon", 1, 2 * window_len)?;
    let guard_period = r.count("guard_period", 0, 0)?;
    let activity_low = r.real("activity_low", 0.01)?;
    let activity_high = r.real("activity_high", 0.05)?;

    let pathloss = match r.raw("pathloss") {
        None | Some("unit") => PathLoss::Unit,
        Some(v) => {
            let sigma = v
                .strip_prefix("lognormal:")
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Reader::parse_err("pathloss", v, "`unit` or `lognormal:<sigma_db>`"))?;
            PathLoss::LogNormal { sigma_db: sigma }
        }
    };
    let fading = match r.raw("fading") {
        None | Some("fast") => Fading::Fast,
        Some("block") => Fading::Block,
        Some(v) => return Err(Reader::parse_err("fading", v, "`fast` or `block`")),
    };

    let activity_model = match r.raw("activity_model") {
        None | Some("marginal") => ActivityModel::Marginal,
        Some("start") => ActivityModel::StartRate,
        Some(v) => return Err(Reader::parse_err("activity_model", v, "`marginal` or `start`")),
    };

    let seed = match (r.raw("seed"), env_seed) {
        (Some(v), _) => v.parse().map_err(|_| Reader::parse_err("seed", v, "unsigned integer"))?,
        (None, Some(v)) => v
            .trim()
            .parse()
            .map_err(|_| Reader::parse_err(SEED_ENV, v, "unsigned integer"))?,
        (None, None) => 1,
    };

    let snr_db_list = match r.raw("snr") {
        None => vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Reader::parse_err("snr", v, "comma-separated dB values")))
            .collect::<Result<_, _>>()?,
    };
    let schedulers = match r.raw("schedulers") {
        None => SchedulerKind::ALL.to_vec(),
        Some(v) => v.split(',').map(str::parse).collect::<Result<_, _>>()?,
    };
    let onsager = match r.raw("onsager") {
        None | Some("cached") => Onsager::Cached,
        Some("latest") => Onsager::Latest,
        Some(v) => return Err(Reader::parse_err("onsager", v, "`cached` or `latest`")),
    };
    let start_from_prior = match r.raw("start") {
        None | Some("prior") => true,
        Some("literal") => false,
        Some(v) => return Err(Reader::parse_err("start", v, "`prior` or `literal`")),
    };
    let stop_set = match r.raw("stop_set") {
        None | Some("swept") => StopSet::Swept,
        Some("next") => StopSet::Next,
        Some(v) => return Err(Reader::parse_err("stop_set", v, "`swept` or `next`")),
    };

    let base = SystemConfig {
        n_devices,
        n_antennas,
        pilot_len,
        window_len,
        window_step,
        horizon,
        // Replaced per SNR point by the harness.
        noise_var: 1.0,
        activity_prob_range: (activity_low, activity_high),
        guard_period,
        pathloss,
        fading,
        activity_model,
        rng_seed: seed,
    };
    let engine = EngineConfig {
        max_iters: r.count("max_iters", 1, 10)?,
        tol_threshold: r.real("tol", 1e-4)?,
        activity_threshold: r.real("threshold", 0.9)?,
        damping: r.real("damping", 1.0)?,
        onsager,
        start_from_prior,
        stop_set,
        early_stop: true,
    };
    let spec = ExperimentSpec {
        base,
        engine,
        snr_db_list,
        schedulers,
        n_trials: r.count("trials", 1, 200)?,
        output_path: PathBuf::from(r.raw("out").unwrap_or("msgamp_results.csv")),
        parallelism: r.count("parallelism", 1, 1)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Reads an optional config file, applies `overrides` on top and resolves,
/// falling back to `MSGAMP_SEED` for the seed.
pub fn parse_config(
    path: Option<&std::path::Path>,
    overrides: &[(&str, String)],
) -> Result<ExperimentSpec, super::HarnessError> {
    let mut settings = Settings::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        settings.parse_file_contents(&text)?;
    }
    for (key, value) in overrides {
        settings.set(key, value.clone())?;
    }
    let env = std::env::var(SEED_ENV).ok();
    Ok(resolve(&settings, env.as_deref())?)
}
