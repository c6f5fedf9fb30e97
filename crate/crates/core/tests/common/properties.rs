//! Scheduler and engine invariants, phrased as checks that return the first
//! violation. Shared by the proptest suite and the acceptance report.

use std::collections::VecDeque;

use msgamp::engine::{self, ActivityPrior, Dims, EngineConfig, EstimatorState};
use msgamp::rng::{Purpose, RandomStream};
use msgamp::scheduling::{rbp_set_size, ScheduleSet};
use msgamp::{SchedulerKind, SetOrigin};
use ndarray::{Array2, Axis};
use num_complex::Complex64;

use super::sparse_instance;

pub const THRESHOLD: f64 = 0.9;

/// Reference state machine written from the policy descriptions.
struct Model {
    kind: SchedulerKind,
    n: usize,
    actives: Vec<usize>,
    queue: VecDeque<usize>,
}

fn residuals(state: &EstimatorState) -> Vec<f64> {
    let mut out = vec![0.0; state.dims.n_devices];
    for ((n, t, m), h) in state.h_hat.indexed_iter() {
        let dh = (h - state.prev_h_hat[[n, t, m]]).norm_sqr();
        let dq = state.q_h[[n, t, m]] - state.prev_q_h[[n, t, m]];
        out[n] += (dh + dq * dq).sqrt();
    }
    out
}

fn by_residual(mut devices: Vec<usize>, res: &[f64]) -> Vec<usize> {
    devices.sort_by(|&a, &b| res[b].partial_cmp(&res[a]).unwrap().then(a.cmp(&b)));
    devices
}

impl Model {
    fn full(&self, prev: &ScheduleSet) -> ScheduleSet {
        ScheduleSet::full(self.n, SetOrigin::Full, prev.epoch + 1)
    }

    fn fallback(&self, prev: &ScheduleSet) -> ScheduleSet {
        if self.kind.is_oracle() {
            ScheduleSet { members: self.actives.clone(), origin: SetOrigin::Oracle, epoch: prev.epoch + 1 }
        } else {
            self.full(prev)
        }
    }

    fn next(&mut self, state: &EstimatorState, prev: &ScheduleSet) -> ScheduleSet {
        let refresh = matches!(prev.origin, SetOrigin::Initial | SetOrigin::Full | SetOrigin::Oracle);
        let same = |members: Vec<usize>, origin| ScheduleSet { members, origin, epoch: prev.epoch };
        let detected: Vec<usize> = (0..self.n)
            .filter(|&n| state.rho_refined.row(n).iter().any(|&r| r >= THRESHOLD))
            .collect();
        match self.kind {
            SchedulerKind::Full => self.full(prev),
            SchedulerKind::OracleFull => self.fallback(prev),
            SchedulerKind::Aud | SchedulerKind::Rbp if !refresh => {
                if prev.members.len() > 1 {
                    same(prev.members[1..].to_vec(), prev.origin)
                } else {
                    self.full(prev)
                }
            }
            SchedulerKind::Aud if detected.is_empty() => self.full(prev),
            SchedulerKind::Aud => same(detected, SetOrigin::Aud),
            SchedulerKind::Rbp => {
                let mut top = by_residual((0..self.n).collect(), &residuals(state));
                top.truncate((self.n as f64 * 0.05).ceil().max(1.0) as usize);
                same(top, SetOrigin::Rbp)
            }
            SchedulerKind::Arbp | SchedulerKind::OracleArbp => {
                if prev.origin == SetOrigin::Arbp {
                    return match self.queue.pop_front() {
                        Some(n) => same(vec![n], SetOrigin::Arbp),
                        None => self.fallback(prev),
                    };
                }
                let pool = if self.kind.is_oracle() { self.actives.clone() } else { detected };
                if pool.is_empty() {
                    self.queue.clear();
                    return self.fallback(prev);
                }
                self.queue = by_residual(pool, &residuals(state)).into();
                let first = self.queue.pop_front().unwrap();
                same(vec![first], SetOrigin::Arbp)
            }
        }
    }
}

/// Fills the fields a scheduler reads with fresh random values. With
/// probability `p_detect` a device's activity crosses the threshold at
/// some symbol; some devices keep their estimate so residuals can be zero.
fn randomize(state: &mut EstimatorState, rng: &mut RandomStream, p_detect: f64) {
    let t_len = state.dims.window_len;
    for mut row in state.rho_refined.axis_iter_mut(Axis(0)) {
        let hit = rng.bernoulli(p_detect);
        let at = (rng.next_u64() % t_len as u64) as usize;
        for (t, r) in row.iter_mut().enumerate() {
            *r = if hit && t == at { rng.uniform(THRESHOLD, 1.0) } else { rng.uniform(0.0, THRESHOLD * 0.999) };
        }
    }
    for n in 0..state.dims.n_devices {
        let frozen = rng.bernoulli(0.2);
        for t in 0..t_len {
            for m in 0..state.dims.n_antennas {
                let idx = [n, t, m];
                state.prev_h_hat[idx] = state.h_hat[idx];
                state.prev_q_h[idx] = state.q_h[idx];
                if !frozen {
                    state.h_hat[idx] += rng.complex_normal() * rng.uniform(0.0, 1.0);
                    state.q_h[idx] = rng.uniform(1e-3, 1.0);
                }
            }
        }
    }
}

fn structural(set: &ScheduleSet, n: usize, kind: SchedulerKind, actives: &[usize]) -> Result<(), String> {
    let mut seen = vec![false; n];
    for &d in &set.members {
        if d >= n || std::mem::replace(&mut seen[d], true) {
            return Err(format!("invalid or repeated member {d}"));
        }
    }
    match set.origin {
        SetOrigin::Arbp if set.len() != 1 => Err(format!("ARBP iteration with {} members", set.len())),
        SetOrigin::Rbp if set.len() > rbp_set_size(n) => Err("RBP set above its size".into()),
        SetOrigin::Full | SetOrigin::Initial if set.len() != n => Err("full pass misses devices".into()),
        _ if kind.is_oracle() && set.members.iter().any(|d| !actives.contains(d)) => Err("oracle schedules an inactive device".into()),
        _ => Ok(()),
    }
}

/// Drives `kind` and the model through `steps` random states and compares
/// every produced set.
pub fn scheduler_matches_model(kind: SchedulerKind, n: usize, t: usize, steps: usize, p_detect: f64, seed: u64) -> Result<(), String> {
    let dims = Dims { n_devices: n, pilot_len: 1, window_len: t, n_antennas: 2 };
    let mut rng = RandomStream::new(seed);
    let mut state = engine::init_state(dims, &ActivityPrior::PerDevice(vec![0.1; n]), &vec![1.0; n]).unwrap();
    let truth = Array2::from_shape_fn((n, t), |_| rng.bernoulli(p_detect));
    let actives: Vec<usize> = (0..n).filter(|&d| truth.row(d).iter().any(|&x| x)).collect();
    let mut sched = kind.build(THRESHOLD, &truth);
    let mut model = Model { kind, n, actives: actives.clone(), queue: VecDeque::new() };
    let mut set = sched.initial_set(&state);
    let want0 = if kind.is_oracle() {
        ScheduleSet { members: actives.clone(), origin: SetOrigin::Oracle, epoch: 0 }
    } else {
        ScheduleSet::full(n, SetOrigin::Initial, 0)
    };
    if set != want0 {
        return Err(format!("initial set {set:?}"));
    }
    for step in 0..steps {
        let mut step_rng = rng.child(step as u64, Purpose::Other);
        randomize(&mut state, &mut step_rng, p_detect);
        let got = sched.next_set(&state, &set);
        let want = model.next(&state, &set);
        if got != want {
            return Err(format!("step {step}: after {set:?} got {got:?}, expected {want:?}"));
        }
        structural(&got, n, kind, &actives).map_err(|e| format!("step {step}: {e}"))?;
        set = got;
    }
    Ok(())
}

fn random_subset(rng: &mut RandomStream, n: usize) -> Vec<usize> {
    let mut members: Vec<usize> = (0..n).filter(|_| rng.bernoulli(0.4)).collect();
    // Schedulers hand out sets in arbitrary order.
    for i in (1..members.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        members.swap(i, j);
    }
    members
}

/// Runs real sweeps over random subsets and checks that devices outside
/// the swept set keep every input-side quantity, have zero residual, and
/// do not enter the tolerance.
pub fn frozen_devices_are_untouched(seed: u64, sweeps: usize, damping: f64) -> Result<(), String> {
    let inst = sparse_instance(seed, (8, 4, 3, 2), 0.3, 0.1);
    let obs = inst.observation();
    let cfg = EngineConfig { damping, ..EngineConfig::default() };
    let dims = EstimatorState::dims_of(&obs, &inst.pilots).unwrap();
    let mut state = engine::init_state(dims, &ActivityPrior::PerDevice(inst.rho.clone()), &inst.beta).unwrap();
    let mut rng = RandomStream::new(seed ^ 0x5eed);
    for i in 1..=sweeps {
        let members = random_subset(&mut rng, dims.n_devices);
        let set = ScheduleSet { members: members.clone(), origin: SetOrigin::Aud, epoch: 0 };
        let before = state.clone();
        state.snapshot();
        engine::gamp_sweep(&mut state, &set, &obs, &inst.pilots, &cfg).map_err(|e| e.to_string())?;
        engine::sparsity_update(&mut state, &set);
        engine::refine_activity(&mut state);
        state.iter = i;
        let res = msgamp::scheduling::compute_residuals(&state);
        for n in (0..dims.n_devices).filter(|n| !members.contains(n)) {
            let same = |a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>| a.index_axis(Axis(0), n) == b.index_axis(Axis(0), n);
            if state.h_hat.index_axis(Axis(0), n) != before.h_hat.index_axis(Axis(0), n)
                || state.r_hat.index_axis(Axis(0), n) != before.r_hat.index_axis(Axis(0), n)
                || !same(&state.q_h, &before.q_h)
                || !same(&state.q_r, &before.q_r)
                || !same(&state.rho_hat, &before.rho_hat)
                || !same(&state.llr_local, &before.llr_local)
            {
                return Err(format!("sweep {i}: frozen device {n} changed"));
            }
            if res.0[n] != 0.0 {
                return Err(format!("sweep {i}: frozen device {n} has residual {}", res.0[n]));
            }
        }
        tolerance_restricted_to(&state, &members, &mut rng).map_err(|e| format!("sweep {i}: {e}"))?;
    }
    Ok(())
}

/// `check_stop` over `members` equals the direct per-antenna ratio and does
/// not move when estimates outside `members` are perturbed.
fn tolerance_restricted_to(state: &EstimatorState, members: &[usize], rng: &mut RandomStream) -> Result<(), String> {
    let Dims { window_len: t_len, n_antennas: m_len, n_devices, .. } = state.dims;
    let mut direct = 0.0;
    for m in 0..m_len {
        let (mut num, mut den) = (0.0, 0.0);
        for &n in members {
            for t in 0..t_len {
                num += (state.h_hat[[n, t, m]] - state.prev_h_hat[[n, t, m]]).norm_sqr();
                den += state.h_hat[[n, t, m]].norm_sqr();
            }
        }
        direct += if den > 0.0 { (num / den).sqrt() } else if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    let tol = engine::check_stop(state, members);
    if !(tol == direct || (tol - direct).abs() <= 1e-12 * direct.abs()) {
        return Err(format!("tol {tol} vs direct {direct}"));
    }
    let mut shaken = state.clone();
    for n in (0..n_devices).filter(|n| !members.contains(n)) {
        shaken.h_hat.index_axis_mut(Axis(0), n).mapv_inplace(|h| h + rng.complex_normal());
        shaken.prev_h_hat.index_axis_mut(Axis(0), n).fill(Complex64::new(3.0, -1.0));
    }
    let after = engine::check_stop(&shaken, members);
    if after.to_bits() != tol.to_bits() {
        return Err(format!("tol moved from {tol} to {after} with devices outside the set"));
    }
    Ok(())
}
