//! Asynchronous grant-free uplink: pilots, bursty activity, fading channels,
//! sliding observation windows and the received signal `Y_m = Φ H_m + W_m`.
//!
//! Index conventions: devices, symbols, antennas and pilot rows are all
//! zero-based. Channel tensors are laid out `(device, symbol, antenna)` and
//! observations `(pilot row, symbol, antenna)`.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView3};
use num_complex::Complex64;

use crate::rng::RandomStream;
use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathLoss {
    /// `β_n = 1` for every device.
    Unit,
    /// `β_n = 10^(X/10)`, `X ~ N(0, σ_dB²)`.
    LogNormal { sigma_db: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fading {
    /// A fresh CN(0,1) coefficient for every symbol of a frame.
    Fast,
    /// One CN(0,1) coefficient held for the whole frame.
    Block,
}

/// How `ρ_n` drives frame starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivityModel {
    /// `ρ_n` is the long-run fraction of symbols in which device `n` is
    /// active; the per-symbol start probability is solved from it.
    Marginal,
    /// `ρ_n` is the start probability at each eligible symbol.
    StartRate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n_devices: usize,
    pub n_antennas: usize,
    pub pilot_len: usize,
    pub window_len: usize,
    pub window_step: usize,
    pub horizon: usize,
    pub noise_var: f64,
    pub activity_prob_range: (f64, f64),
    pub guard_period: usize,
    pub pathloss: PathLoss,
    pub fading: Fading,
    pub activity_model: ActivityModel,
    pub rng_seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let pilot_len = 32;
        let window_len = 3 * pilot_len;
        Self {
            n_devices: 128,
            n_antennas: 2,
            pilot_len,
            window_len,
            window_step: window_len - pilot_len,
            horizon: 2 * window_len,
            noise_var: 0.1,
            activity_prob_range: (0.01, 0.05),
            guard_period: 0,
            pathloss: PathLoss::Unit,
            fading: Fading::Fast,
            activity_model: ActivityModel::Marginal,
            rng_seed: 1,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &'static str, constraint: &str| {
            Err(ConfigError::OutOfRange {
                key,
                constraint: constraint.to_string(),
            })
        };
        if self.n_devices == 0 {
            return bad("devices", "devices >= 1");
        }
        if self.n_antennas == 0 {
            return bad("antennas", "antennas >= 1");
        }
        if self.pilot_len == 0 {
            return bad("pilot_len", "pilot_len >= 1");
        }
        if self.window_len <= self.pilot_len {
            return bad("window_len", "window_len > pilot_len");
        }
        if self.window_len >= self.n_devices {
            return bad("window_len", "window_len < devices (overloaded system)");
        }
        if self.window_step == 0 || self.window_step > self.window_len - self.pilot_len {
            return bad("window_step", "1 <= window_step <= window_len - pilot_len");
        }
        if self.horizon < self.window_len {
            return bad("horizon", "horizon >= window_len");
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return bad("noise_var", "finite noise_var >= 0");
        }
        let (lo, hi) = self.activity_prob_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("activity", "0 <= low <= high <= 1");
        }
        if let PathLoss::LogNormal { sigma_db } = self.pathloss {
            if !(sigma_db >= 0.0 && sigma_db.is_finite()) {
                return bad("pathloss", "lognormal sigma_db >= 0");
            }
        }
        Ok(())
    }
}

/// The `L × N` pilot dictionary; column `n` is device `n`'s pilot sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub entries: Array2<Complex64>,
}

impl PilotMatrix {
    pub fn new(entries: Array2<Complex64>) -> Self {
        Self { entries }
    }

    pub fn pilot_len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_devices(&self) -> usize {
        self.entries.ncols()
    }
}

/// Pilot entries `exp(jπα)` with `α ~ Uniform[-1, 1]`, drawn column by column.
pub fn generate_pilots(config: &SystemConfig, rng: &mut RandomStream) -> PilotMatrix {
    pilots_from_phases(config.pilot_len, config.n_devices, || rng.uniform(-1.0, 1.0))
}

fn pilots_from_phases(
    pilot_len: usize,
    n_devices: usize,
    mut alpha: impl FnMut() -> f64,
) -> PilotMatrix {
    let mut entries = Array2::zeros((pilot_len, n_devices));
    for n in 0..n_devices {
        for l in 0..pilot_len {
            entries[[l, n]] = Complex64::from_polar(1.0, std::f64::consts::PI * alpha());
        }
    }
    PilotMatrix { entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivitySchedule {
    pub rho: Vec<f64>,
    pub frame_starts: Vec<Vec<usize>>,
    /// `N × horizon` activity indicators.
    pub xi: Array2<bool>,
    /// Number of symbols at which each device was idle and allowed to start.
    pub eligible: Vec<usize>,
}

/// Draws `ρ_n` and walks every device through the horizon: an eligible
/// device starts a frame with probability `ρ_n`, the frame occupies `L`
/// symbols and the device then waits `guard_period` more symbols.
/// Frames starting near the end of the horizon are truncated in `xi`.
pub fn sample_activity(config: &SystemConfig, rng: &mut RandomStream) -> ActivitySchedule {
    let (lo, hi) = config.activity_prob_range;
    let rho: Vec<f64> = (0..config.n_devices).map(|_| rng.uniform(lo, hi)).collect();
    sample_activity_with_rho(config, rho, rng)
}

/// Per-eligible-symbol start probability. Under [`ActivityModel::Marginal`]
/// a renewal cycle is `L + guard` busy symbols plus a geometric idle wait of
/// mean `(1 − q)/q`, so a duty cycle of `ρ` needs `q = 1/(1 + L/ρ − L − guard)`.
pub fn start_probability(config: &SystemConfig, rho: f64) -> f64 {
    match config.activity_model {
        ActivityModel::StartRate => rho,
        ActivityModel::Marginal => {
            if rho <= 0.0 {
                return 0.0;
            }
            let l = config.pilot_len as f64;
            let idle = l / rho - l - config.guard_period as f64;
            if idle <= 0.0 {
                1.0
            } else {
                1.0 / (1.0 + idle)
            }
        }
    }
}

pub fn sample_activity_with_rho(
    config: &SystemConfig,
    rho: Vec<f64>,
    rng: &mut RandomStream,
) -> ActivitySchedule {
    let n_devices = rho.len();
    let horizon = config.horizon;
    let busy = config.pilot_len + config.guard_period;
    let mut xi = Array2::from_elem((n_devices, horizon), false);
    let mut frame_starts = vec![Vec::new(); n_devices];
    let mut eligible = vec![0usize; n_devices];
    for (n, &r) in rho.iter().enumerate() {
        let p = start_probability(config, r);
        let mut t = 0;
        while t < horizon {
            eligible[n] += 1;
            if rng.bernoulli(p) {
                frame_starts[n].push(t);
                let end = (t + config.pilot_len).min(horizon);
                xi.slice_mut(s![n, t..end]).fill(true);
                t += busy;
            } else {
                t += 1;
            }
        }
    }
    ActivitySchedule {
        rho,
        frame_starts,
        xi,
        eligible,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `N × horizon × M`, zero outside frames.
    pub h: Array3<Complex64>,
    pub beta: Vec<f64>,
}

pub fn draw_beta(config: &SystemConfig, rng: &mut RandomStream) -> Vec<f64> {
    (0..config.n_devices)
        .map(|_| match config.pathloss {
            PathLoss::Unit => 1.0,
            PathLoss::LogNormal { sigma_db } => {
                10f64.powf(sigma_db * rng.standard_normal() / 10.0)
            }
        })
        .collect()
}

pub fn generate_channels(
    schedule: &ActivitySchedule,
    config: &SystemConfig,
    rng: &mut RandomStream,
) -> ChannelRealization {
    let beta = draw_beta(config, rng);
    generate_channels_with_beta(schedule, config, beta, rng)
}

pub fn generate_channels_with_beta(
    schedule: &ActivitySchedule,
    config: &SystemConfig,
    beta: Vec<f64>,
    rng: &mut RandomStream,
) -> ChannelRealization {
    let n_devices = schedule.frame_starts.len();
    let (horizon, m_ant, pilot_len) = (config.horizon, config.n_antennas, config.pilot_len);
    let mut h = Array3::zeros((n_devices, horizon, m_ant));
    for (n, starts) in schedule.frame_starts.iter().enumerate() {
        let amp = beta[n].sqrt();
        for &start in starts {
            for m in 0..m_ant {
                // The full length-L sequence is drawn even when the frame is
                // truncated so stream consumption does not depend on horizon.
                let mut block = rng.complex_normal();
                for k in 0..pilot_len {
                    let a = match config.fading {
                        Fading::Fast => {
                            if k > 0 {
                                block = rng.complex_normal();
                            }
                            block
                        }
                        Fading::Block => block,
                    };
                    let t = start + k;
                    if t < horizon {
                        h[[n, t, m]] = a * amp;
                    }
                }
            }
        }
    }
    ChannelRealization { h, beta }
}

/// Window start indices `0, Δt, 2Δt, …` with `t_x + T <= horizon`.
pub fn window_sequence(config: &SystemConfig) -> Vec<usize> {
    let (t_len, step) = (config.window_len, config.window_step.max(1));
    if config.horizon < t_len {
        return Vec::new();
    }
    (0..=config.horizon - t_len).step_by(step).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    /// Fully inside the window.
    Type1,
    /// Starts before the window.
    Type2,
    /// Ends after the window.
    Type3,
}

pub fn frame_type(
    frame_start: usize,
    window_start: usize,
    pilot_len: usize,
    window_len: usize,
) -> Option<FrameType> {
    let (tn, tx) = (frame_start, window_start);
    let (frame_end, window_end) = (tn + pilot_len, tx + window_len);
    if tx <= tn && frame_end <= window_end {
        Some(FrameType::Type1)
    } else if tn < tx && tx < frame_end {
        Some(FrameType::Type2)
    } else if tn < window_end && window_end < frame_end {
        Some(FrameType::Type3)
    } else {
        None
    }
}

/// Frames overlapping the window, keyed by `(device, frame start)`.
pub fn classify_frames(
    schedule: &ActivitySchedule,
    window_start: usize,
    config: &SystemConfig,
) -> BTreeMap<(usize, usize), FrameType> {
    let mut out = BTreeMap::new();
    for (n, starts) in schedule.frame_starts.iter().enumerate() {
        for &tn in starts {
            if let Some(kind) = frame_type(tn, window_start, config.pilot_len, config.window_len) {
                out.insert((n, tn), kind);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `L × T × M` received samples.
    pub y: Array3<Complex64>,
    pub window_start: usize,
    pub noise_var: f64,
}

impl Observation {
    pub fn pilot_len(&self) -> usize {
        self.y.dim().0
    }

    pub fn window_len(&self) -> usize {
        self.y.dim().1
    }

    pub fn n_antennas(&self) -> usize {
        self.y.dim().2
    }
}

/// `Φ · H_window` for every antenna, without noise.
pub fn noiseless_observation(
    pilots: &PilotMatrix,
    h_window: ArrayView3<'_, Complex64>,
) -> Array3<Complex64> {
    let (n_devices, t_len, m_ant) = h_window.dim();
    let phi = &pilots.entries;
    let l_len = phi.nrows();
    let mut y = Array3::zeros((l_len, t_len, m_ant));
    for l in 0..l_len {
        for n in 0..n_devices {
            let p = phi[[l, n]];
            for t in 0..t_len {
                for m in 0..m_ant {
                    let h = h_window[[n, t, m]];
                    if h != Complex64::new(0.0, 0.0) {
                        y[[l, t, m]] += p * h;
                    }
                }
            }
        }
    }
    y
}

/// Unit-variance noise tensor; scaled by `σ_w` at observation time so the
/// same draws can be reused across SNR points.
pub fn unit_noise(
    pilot_len: usize,
    window_len: usize,
    n_antennas: usize,
    rng: &mut RandomStream,
) -> Array3<Complex64> {
    let mut w = Array3::zeros((pilot_len, window_len, n_antennas));
    for m in 0..n_antennas {
        for l in 0..pilot_len {
            for t in 0..window_len {
                w[[l, t, m]] = rng.complex_normal();
            }
        }
    }
    w
}

pub fn observe_with_noise(
    pilots: &PilotMatrix,
    channels: &ChannelRealization,
    window_start: usize,
    window_len: usize,
    noise_var: f64,
    unit_noise: &Array3<Complex64>,
) -> Observation {
    let h_window = channels
        .h
        .slice(s![.., window_start..window_start + window_len, ..]);
    let mut y = noiseless_observation(pilots, h_window);
    let sigma = noise_var.sqrt();
    if sigma > 0.0 {
        y.zip_mut_with(unit_noise, |y, w| *y += w * sigma);
    }
    Observation {
        y,
        window_start,
        noise_var,
    }
}

pub fn observe(
    pilots: &PilotMatrix,
    channels: &ChannelRealization,
    window_start: usize,
    config: &SystemConfig,
    rng: &mut RandomStream,
) -> Observation {
    let w = unit_noise(config.pilot_len, config.window_len, config.n_antennas, rng);
    observe_with_noise(
        pilots,
        channels,
        window_start,
        config.window_len,
        config.noise_var,
        &w,
    )
}
