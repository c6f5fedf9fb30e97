//! Dynamic message-scheduling policies.
//!
//! Every policy is a small state machine fed with the estimator state after
//! each iteration. AUD, RBP and ARBP share the same epoch shape: a refresh
//! computes an ordered set, each following iteration drops the front
//! member, and once the set is exhausted one full iteration over all
//! devices is run before the next refresh.
//!
//! Device indices are zero-based.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::engine::EstimatorState;
use crate::ConfigError;

/// Fraction of devices kept by the residual policy at each refresh.
pub const RBP_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetOrigin {
    Initial,
    Full,
    Aud,
    Rbp,
    Arbp,
    Oracle,
}

impl SetOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            SetOrigin::Initial => "initial",
            SetOrigin::Full => "full",
            SetOrigin::Aud => "aud",
            SetOrigin::Rbp => "rbp",
            SetOrigin::Arbp => "arbp",
            SetOrigin::Oracle => "oracle",
        }
    }

    fn is_full_pass(self) -> bool {
        matches!(self, SetOrigin::Initial | SetOrigin::Full | SetOrigin::Oracle)
    }
}

/// Ordered set of devices whose messages are updated in one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleSet {
    pub members: Vec<usize>,
    pub origin: SetOrigin,
    /// Number of completed refresh cycles.
    pub epoch: usize,
}

impl ScheduleSet {
    pub fn full(n_devices: usize, origin: SetOrigin, epoch: usize) -> Self {
        Self {
            members: (0..n_devices).collect(),
            origin,
            epoch,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub trait Scheduler: Send {
    fn name(&self) -> &'static str;

    fn initial_set(&mut self, state: &EstimatorState) -> ScheduleSet {
        ScheduleSet::full(state.dims.n_devices, SetOrigin::Initial, 0)
    }

    /// The set for the next iteration, given the set just swept.
    fn next_set(&mut self, state: &EstimatorState, prev: &ScheduleSet) -> ScheduleSet;
}

/// Per-device belief residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals(pub Vec<f64>);

impl Residuals {
    /// Device indices sorted by descending residual, ties by ascending index.
    pub fn ranked(&self, candidates: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut order: Vec<usize> = candidates.into_iter().collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        order
    }
}

/// `Σ_{t,m} sqrt(|Δĥ_{ntm}|² + (ΔQʰ_{ntm})²)` between the current and the
/// previous iterate.
pub fn compute_residuals(state: &EstimatorState) -> Residuals {
    let n_devices = state.dims.n_devices;
    let mut out = vec![0.0; n_devices];
    for (n, slot) in out.iter_mut().enumerate() {
        let h = state.h_hat.index_axis(Axis(0), n);
        let h_prev = state.prev_h_hat.index_axis(Axis(0), n);
        let q = state.q_h.index_axis(Axis(0), n);
        let q_prev = state.prev_q_h.index_axis(Axis(0), n);
        let mut acc = 0.0;
        for (((a, b), c), d) in h.iter().zip(h_prev.iter()).zip(q.iter()).zip(q_prev.iter()) {
            let dq = c - d;
            acc += ((a - b).norm_sqr() + dq * dq).sqrt();
        }
        *slot = acc;
    }
    Residuals(out)
}

/// Devices whose antenna-averaged activity reaches `threshold` at any symbol.
pub fn detected_devices(rho_refined: &Array2<f64>, threshold: f64) -> Vec<usize> {
    rho_refined
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&r| r >= threshold))
        .map(|(n, _)| n)
        .collect()
}

pub fn rbp_set_size(n_devices: usize) -> usize {
    ((RBP_FRACTION * n_devices as f64).ceil() as usize).clamp(1, n_devices.max(1))
}

fn pop_front_or_full(prev: &ScheduleSet, n_devices: usize) -> ScheduleSet {
    if prev.members.len() > 1 {
        ScheduleSet {
            members: prev.members[1..].to_vec(),
            origin: prev.origin,
            epoch: prev.epoch,
        }
    } else {
        ScheduleSet::full(n_devices, SetOrigin::Full, prev.epoch + 1)
    }
}

/// Every device, every iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullParallel;

impl Scheduler for FullParallel {
    fn name(&self) -> &'static str {
        "full"
    }

    fn next_set(&mut self, state: &EstimatorState, prev: &ScheduleSet) -> ScheduleSet {
        ScheduleSet::full(state.dims.n_devices, SetOrigin::Full, prev.epoch + 1)
    }
}

/// Activity-detection membership, device-index order.
#[derive(Debug, Clone, Copy)]
pub struct Aud {
    pub threshold: f64,
}

impl Scheduler for Aud {
    fn name(&self) -> &'static str {
        "aud"
    }

    fn next_set(&mut self, state: &EstimatorState, prev: &ScheduleSet) -> ScheduleSet {
        let n_devices = state.dims.n_devices;
        if !prev.origin.is_full_pass() {
            return pop_front_or_full(prev, n_devices);
        }
        let members = detected_devices(&state.rho_refined, self.threshold);
        if members.is_empty() {
            return ScheduleSet::full(n_devices, SetOrigin::Full, prev.epoch + 1);
        }
        ScheduleSet {
            members,
            origin: SetOrigin::Aud,
            epoch: prev.epoch,
        }
    }
}

/// The `⌈0.05·N⌉` devices with the largest residual, largest first.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rbp;

impl Scheduler for Rbp {
    fn name(&self) -> &'static str {
        "rbp"
    }

    fn next_set(&mut self, state: &EstimatorState, prev: &ScheduleSet) -> ScheduleSet {
        let n_devices = state.dims.n_devices;
        if !prev.origin.is_full_pass() {
            return pop_front_or_full(prev, n_devices);
        }
        let mut members = compute_residuals(state).ranked(0..n_devices);
        members.truncate(rbp_set_size(n_devices));
        ScheduleSet {
            members,
            origin: SetOrigin::Rbp,
            epoch: prev.epoch,
        }
    }
}

/// AUD membership ordered by residual, one device per iteration.
#[derive(Debug, Clone, Default)]
pub struct Arbp {
    pub threshold: f64,
    queue: VecDeque<usize>,
}

impl Arbp {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            queue: VecDeque::new(),
        }
    }

    /// Devices still waiting for their singleton iteration.
    pub fn pending(&self) -> &VecDeque<usize> {
        &self.queue
    }
}

impl Scheduler for Arbp {
    fn name(&self) -> &'static str {
        "arbp"
    }

    fn next_set(&mut self, state: &EstimatorState, prev: &ScheduleSet) -> ScheduleSet {
        let n_devices = state.dims.n_devices;
        if !prev.origin.is_full_pass() {
            return match self.queue.pop_front() {
                Some(n) => ScheduleSet {
                    members: vec![n],
                    origin: SetOrigin::Arbp,
                    epoch: prev.epoch,
                },
                None => ScheduleSet::full(n_devices, SetOrigin::Full, prev.epoch + 1),
            };
        }
        let candidates = detected_devices(&state.rho_refined, self.threshold);
        if candidates.is_empty() {
            self.queue.clear();
            return ScheduleSet::full(n_devices, SetOrigin::Full, prev.epoch + 1);
        }
        self.queue = compute_residuals(state).ranked(candidates).into();
        let first = self.queue.pop_front().expect("non-empty");
        ScheduleSet {
            members: vec![first],
            origin: SetOrigin::Arbp,
            epoch: prev.epoch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Every truly active device, every iteration.
    Full,
    /// ARBP dynamics over the truly active devices.
    Arbp,
}

/// Schedules with perfect knowledge of which devices are active in the
/// window. The "full" fallback is the active set itself.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub mode: OracleMode,
    pub actives: Vec<usize>,
    queue: VecDeque<usize>,
}

impl Oracle {
    pub fn new(mode: OracleMode, true_activity: &Array2<bool>) -> Self {
        let actives = true_activity
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&x| x))
            .map(|(n, _)| n)
            .collect();
        Self {
            mode,
            actives,
            queue: VecDeque::new(),
        }
    }

    fn active_set(&self, epoch: usize) -> ScheduleSet {
        ScheduleSet {
            members: self.actives.clone(),
            origin: SetOrigin::Oracle,
            epoch,
        }
    }
}

impl Scheduler for Oracle {
    fn name(&self) -> &'static str {
        match self.mode {
            OracleMode::Full => "oracle-full",
            OracleMode::Arbp => "oracle-arbp",
        }
    }

    fn initial_set(&mut self, _state: &EstimatorState) -> ScheduleSet {
        self.active_set(0)
    }

    fn next_set(&mut self, state: &EstimatorState, prev: &ScheduleSet) -> ScheduleSet {
        match self.mode {
            OracleMode::Full => self.active_set(prev.epoch + 1),
            OracleMode::Arbp => {
                if prev.origin == SetOrigin::Arbp {
                    return match self.queue.pop_front() {
                        Some(n) => ScheduleSet {
                            members: vec![n],
                            origin: SetOrigin::Arbp,
                            epoch: prev.epoch,
                        },
                        None => self.active_set(prev.epoch + 1),
                    };
                }
                if self.actives.is_empty() {
                    return self.active_set(prev.epoch + 1);
                }
                self.queue = compute_residuals(state).ranked(self.actives.iter().copied()).into();
                let first = self.queue.pop_front().expect("non-empty");
                ScheduleSet {
                    members: vec![first],
                    origin: SetOrigin::Arbp,
                    epoch: prev.epoch,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchedulerKind {
    Full,
    Aud,
    Rbp,
    Arbp,
    OracleFull,
    OracleArbp,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 6] = [
        SchedulerKind::Full,
        SchedulerKind::Aud,
        SchedulerKind::Rbp,
        SchedulerKind::Arbp,
        SchedulerKind::OracleFull,
        SchedulerKind::OracleArbp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Full => "full",
            SchedulerKind::Aud => "aud",
            SchedulerKind::Rbp => "rbp",
            SchedulerKind::Arbp => "arbp",
            SchedulerKind::OracleFull => "oracle-full",
            SchedulerKind::OracleArbp => "oracle-arbp",
        }
    }

    pub fn is_oracle(self) -> bool {
        matches!(self, SchedulerKind::OracleFull | SchedulerKind::OracleArbp)
    }

    /// Builds the policy. Oracle kinds need the window's true activity.
    pub fn build(self, threshold: f64, true_activity: &Array2<bool>) -> Box<dyn Scheduler> {
        match self {
            SchedulerKind::Full => Box::new(FullParallel),
            SchedulerKind::Aud => Box::new(Aud { threshold }),
            SchedulerKind::Rbp => Box::new(Rbp),
            SchedulerKind::Arbp => Box::new(Arbp::new(threshold)),
            SchedulerKind::OracleFull => Box::new(Oracle::new(OracleMode::Full, true_activity)),
            SchedulerKind::OracleArbp => Box::new(Oracle::new(OracleMode::Arbp, true_activity)),
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| ConfigError::UnknownScheduler(s.trim().to_string()))
    }
}
