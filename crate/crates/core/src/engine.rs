//! The message-scheduling GAMP estimator.
//!
//! One iteration, for the set `S` chosen by the scheduler:
//!
//! 1. input side: refresh `(ĥ, Qʰ)` of every `n ∈ S` with the
//!    Bernoulli-Gaussian denoiser,
//! 2. output side: recompute `Qᵖ, p, z̃, Qᶻ, ŝ, Qˢ` for every `(l, t, m)`
//!    from the latest `ĥ` of all devices (frozen devices contribute their
//!    cached values),
//! 3. input linear step: `Qʳ, r̂` and the local activity LLRs for `n ∈ S`,
//! 4. sparsity-rate update of `ρ̂_{ntm}` for `n ∈ S`,
//!
//! followed by the antenna average of `ρ̂`, the scheduler update and the
//! stopping test.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use thiserror::Error;

use crate::denoisers::{self, BgPrior, VAR_FLOOR};
use crate::metrics;
use crate::scheduling::{ScheduleSet, Scheduler, SetOrigin};
use crate::system_model::{Observation, PilotMatrix};
use crate::DomainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_devices: usize,
    pub pilot_len: usize,
    pub window_len: usize,
    pub n_antennas: usize,
}

/// Which devices the stopping tolerance is measured over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopSet {
    /// The set whose messages were updated in the current iteration.
    #[default]
    Swept,
    /// The set the scheduler returned for the next iteration.
    Next,
}

/// Which `ŝ` the output-side Onsager correction pairs with each device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Onsager {
    /// The `ŝ` that produced the device's current `r̂`, so a frozen device
    /// keeps sending the message it last sent. Identical to `Latest` under
    /// the full-parallel schedule.
    #[default]
    Cached,
    /// The previous iteration's `ŝ` for every device.
    Latest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub max_iters: usize,
    pub tol_threshold: f64,
    pub activity_threshold: f64,
    /// Convex weight of the new `ĥ, Qʰ, ŝ, Qˢ` against the previous
    /// iterate; 1 disables damping. The first sweep is never damped.
    pub damping: f64,
    pub onsager: Onsager,
    /// Skip the input-side denoising of the first sweep, so the first
    /// output pass sees the prior `ĥ = 0, Qʰ = ρβ` instead of a posterior
    /// computed from the placeholder `r̂ = 0, Qʳ = 1`.
    pub start_from_prior: bool,
    pub stop_set: StopSet,
    /// When false the engine runs all `max_iters` iterations regardless of
    /// the tolerance (tolerances are still traced).
    pub early_stop: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            tol_threshold: 1e-4,
            activity_threshold: 0.9,
            damping: 1.0,
            onsager: Onsager::Cached,
            start_from_prior: true,
            stop_set: StopSet::Swept,
            early_stop: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), crate::ConfigError> {
        let bad = |key: &'static str, constraint: &str| {
            Err(crate::ConfigError::OutOfRange {
                key,
                constraint: constraint.to_string(),
            })
        };
        if self.max_iters == 0 {
            return bad("max_iters", "max_iters >= 1");
        }
        if !(self.tol_threshold > 0.0) {
            return bad("tol", "tol > 0");
        }
        if !(0.0..=1.0).contains(&self.activity_threshold) {
            return bad("threshold", "0 <= threshold <= 1");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping", "0 < damping <= 1");
        }
        Ok(())
    }
}

/// Initial activity belief.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivityPrior {
    /// `ρ̂⁰_{ntm} = ρ_n`, refined by the sparsity-rate update.
    PerDevice(Vec<f64>),
    /// Perfect knowledge: `ρ̂_{ntm}` pinned to the true `ξ_{nt}` and never
    /// updated.
    Known(Array2<bool>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceSite {
    Device { n: usize, t: usize, m: usize },
    Observation { l: usize, t: usize, m: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("non-finite value at iteration {iter}, {site:?}")]
pub struct Divergence {
    pub iter: usize,
    pub site: DivergenceSite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Divergence(#[from] Divergence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub set_size: usize,
    pub set_origin: SetOrigin,
    /// `|S|·T·M` input-side node updates performed this iteration.
    pub updates: u64,
    pub updates_total: u64,
    /// `None` on the first iteration, which has no previous iterate.
    pub tol: Option<f64>,
    pub nmse: Option<f64>,
    pub damped: bool,
}

/// Ground truth used only to trace NMSE per iteration.
#[derive(Debug, Clone, Copy)]
pub struct Truth<'a> {
    pub h: ArrayView3<'a, Complex64>,
    pub active: ArrayView2<'a, bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub dims: Dims,
    pub beta: Vec<f64>,
    pub prior_rho: Vec<f64>,
    pub activity_known: bool,
    /// `N × T × M` input-side quantities.
    pub h_hat: Array3<Complex64>,
    pub q_h: Array3<f64>,
    pub r_hat: Array3<Complex64>,
    pub q_r: Array3<f64>,
    pub rho_hat: Array3<f64>,
    pub llr_local: Array3<f64>,
    /// `L × T × M` output-side quantities.
    pub s_hat: Array3<Complex64>,
    pub q_s: Array3<f64>,
    /// Iteration whose `ŝ` produced each device's `r̂`, the same for the
    /// `r̂` behind its current `ĥ`, and the `ŝ` snapshots they refer to.
    pub s_source: Vec<usize>,
    pub h_source: Vec<usize>,
    pub s_history: BTreeMap<usize, Array3<Complex64>>,
    /// `N × T` antenna-averaged activity.
    pub rho_refined: Array2<f64>,
    pub prev_h_hat: Array3<Complex64>,
    pub prev_q_h: Array3<f64>,
    /// Completed iterations.
    pub iter: usize,
    pub updates_total: u64,
    pub trace: Vec<IterationRecord>,
}

impl EstimatorState {
    pub fn dims_of(obs: &Observation, pilots: &PilotMatrix) -> Result<Dims, EngineError> {
        if obs.pilot_len() != pilots.pilot_len() {
            return Err(EngineError::Dimension(format!(
                "observation has {} rows, pilots have {}",
                obs.pilot_len(),
                pilots.pilot_len()
            )));
        }
        Ok(Dims {
            n_devices: pilots.n_devices(),
            pilot_len: pilots.pilot_len(),
            window_len: obs.window_len(),
            n_antennas: obs.n_antennas(),
        })
    }
}

/// `ŝ = r̂ = 0`, `Qʳ = 1`, `ρ̂ = ρ_n` (or the known activity), `ĥ = 0` and
/// `Qʰ` at the prior variance `ρ̂·β_n`.
pub fn init_state(dims: Dims, prior: &ActivityPrior, beta: &[f64]) -> Result<EstimatorState, EngineError> {
    let Dims {
        n_devices: n,
        pilot_len: l,
        window_len: t,
        n_antennas: m,
    } = dims;
    if beta.len() != n {
        return Err(EngineError::Dimension(format!("beta has {} entries, expected {n}", beta.len())));
    }
    if let Some(&b) = beta.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(DomainError::NegativeVariance { name: "beta", value: b }.into());
    }
    let (rho_hat, prior_rho, activity_known) = match prior {
        ActivityPrior::PerDevice(rho) => {
            if rho.len() != n {
                return Err(EngineError::Dimension(format!("rho has {} entries, expected {n}", rho.len())));
            }
            if let Some(&r) = rho.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
                return Err(DomainError::Probability { name: "rho_n", value: r }.into());
            }
            let rho_hat = Array3::from_shape_fn((n, t, m), |(dev, _, _)| rho[dev]);
            (rho_hat, rho.clone(), false)
        }
        ActivityPrior::Known(xi) => {
            if xi.dim() != (n, t) {
                return Err(EngineError::Dimension(format!("activity is {:?}, expected ({n}, {t})", xi.dim())));
            }
            let rho_hat = Array3::from_shape_fn((n, t, m), |(dev, sym, _)| f64::from(u8::from(xi[[dev, sym]])));
            let prior_rho = xi
                .axis_iter(Axis(0))
                .map(|row| row.iter().filter(|&&x| x).count() as f64 / t.max(1) as f64)
                .collect();
            (rho_hat, prior_rho, true)
        }
    };
    let q_h = Array3::from_shape_fn((n, t, m), |(dev, sym, ant)| {
        (rho_hat[[dev, sym, ant]] * beta[dev]).max(VAR_FLOOR)
    });
    let rho_refined = rho_hat.mean_axis(Axis(2)).expect("at least one antenna");
    Ok(EstimatorState {
        dims,
        beta: beta.to_vec(),
        prior_rho,
        activity_known,
        h_hat: Array3::zeros((n, t, m)),
        prev_h_hat: Array3::zeros((n, t, m)),
        prev_q_h: q_h.clone(),
        q_h,
        r_hat: Array3::zeros((n, t, m)),
        q_r: Array3::ones((n, t, m)),
        rho_hat,
        llr_local: Array3::zeros((n, t, m)),
        s_hat: Array3::zeros((l, t, m)),
        q_s: Array3::zeros((l, t, m)),
        s_source: vec![0; n],
        h_source: vec![0; n],
        s_history: BTreeMap::from([(0, Array3::zeros((l, t, m)))]),
        rho_refined,
        iter: 0,
        updates_total: 0,
        trace: Vec::new(),
    })
}

impl EstimatorState {
    /// Stores `(ĥ, Qʰ)` as the previous iterate. Called once per iteration
    /// boundary, before the sweep.
    pub fn snapshot(&mut self) {
        self.prev_h_hat.assign(&self.h_hat);
        self.prev_q_h.assign(&self.q_h);
    }
}

/// One GAMP pass with input-side updates restricted to `set`.
pub fn gamp_sweep(
    state: &mut EstimatorState,
    set: &ScheduleSet,
    obs: &Observation,
    pilots: &PilotMatrix,
    cfg: &EngineConfig,
) -> Result<(), Divergence> {
    let onsager = cfg.onsager;
    let Dims {
        pilot_len: l_len,
        window_len: t_len,
        n_antennas: m_len,
        ..
    } = state.dims;
    let iter = state.iter + 1;
    let tm = t_len * m_len;
    let phi = &pilots.entries;
    let phi_abs2 = phi.mapv(|p| p.norm_sqr());
    let noise_var = obs.noise_var;
    let damping = if state.iter == 0 { 1.0 } else { cfg.damping };
    let keep = 1.0 - damping;

    // Input side.
    let denoise_members: &[usize] = if state.iter == 0 && cfg.start_from_prior {
        &[]
    } else {
        &set.members
    };
    for &n in denoise_members {
        let beta = state.beta[n];
        state.h_source[n] = state.s_source[n];
        for t in 0..t_len {
            for m in 0..m_len {
                let idx = [n, t, m];
                let prior = BgPrior {
                    rho_hat: state.rho_hat[idx],
                    beta,
                };
                let post = denoisers::prior_denoise(state.r_hat[idx], state.q_r[idx], prior)
                    .map_err(|_| Divergence {
                        iter,
                        site: DivergenceSite::Device { n, t, m },
                    })?;
                let (mean, var) = if damping < 1.0 {
                    (
                        post.estimate.mean * damping + state.h_hat[idx] * keep,
                        post.estimate.variance * damping + state.q_h[idx] * keep,
                    )
                } else {
                    (post.estimate.mean, post.estimate.variance)
                };
                if !mean.is_finite() || !var.is_finite() {
                    return Err(Divergence {
                        iter,
                        site: DivergenceSite::Device { n, t, m },
                    });
                }
                state.h_hat[idx] = mean;
                state.q_h[idx] = var.max(VAR_FLOOR);
            }
        }
    }

    // Output side over every (l, t, m) with the latest ĥ of all devices.
    // Devices are grouped by the ŝ their Onsager term pairs with.
    let (group_of, group_s): (Vec<usize>, Vec<&[Complex64]>) = match onsager {
        Onsager::Latest => (vec![0; state.dims.n_devices], vec![state.s_hat.as_slice().expect("standard layout")]),
        Onsager::Cached => {
            let keys: Vec<usize> = state.s_history.keys().copied().collect();
            let group_of = state
                .h_source
                .iter()
                .map(|src| keys.binary_search(src).expect("ŝ source kept in history"))
                .collect();
            let group_s = state.s_history.values().map(|a| a.as_slice().expect("standard layout")).collect();
            (group_of, group_s)
        }
    };
    let n_groups = group_s.len();
    let h_flat = state.h_hat.as_slice().expect("standard layout");
    let qh_flat = state.q_h.as_slice().expect("standard layout");
    let mut z_acc = vec![Complex64::new(0.0, 0.0); tm];
    let mut qp_acc = vec![0.0; tm * n_groups];
    let mut new_s = Array3::<Complex64>::zeros((l_len, t_len, m_len));
    let mut new_qs = Array3::<f64>::zeros((l_len, t_len, m_len));
    for l in 0..l_len {
        z_acc.fill(Complex64::new(0.0, 0.0));
        qp_acc.fill(0.0);
        for (n, (&p, &p2)) in phi.row(l).iter().zip(phi_abs2.row(l).iter()).enumerate() {
            let h_row = &h_flat[n * tm..(n + 1) * tm];
            let q_row = &qh_flat[n * tm..(n + 1) * tm];
            let g = group_of[n] * tm;
            for k in 0..tm {
                z_acc[k] += p * h_row[k];
                qp_acc[g + k] += p2 * q_row[k];
            }
        }
        for t in 0..t_len {
            for m in 0..m_len {
                let k = t * m_len + m;
                let mut q_p = 0.0;
                let mut correction = Complex64::new(0.0, 0.0);
                for (g, s_g) in group_s.iter().enumerate() {
                    let q_g = qp_acc[g * tm + k];
                    q_p += q_g;
                    correction += s_g[l * tm + k] * q_g;
                }
                let idx = [l, t, m];
                // A single group reproduces `ŝ·Qᵖ` with the floored Qᵖ.
                let q_p = q_p.max(VAR_FLOOR);
                if n_groups == 1 {
                    correction = group_s[0][l * tm + k] * q_p;
                }
                let p_mean = z_acc[k] - correction;
                // (z̃ − p)/Qᵖ and (1 − Qᶻ/Qᵖ)/Qᵖ of the AWGN posterior, in the
                // form that does not cancel when Qᵖ ≪ σ².
                let q_s_new = 1.0 / (q_p + noise_var);
                let s_new = (obs.y[idx] - p_mean) * q_s_new;
                let (s, q_s) = if damping < 1.0 {
                    (
                        s_new * damping + state.s_hat[idx] * keep,
                        q_s_new * damping + state.q_s[idx] * keep,
                    )
                } else {
                    (s_new, q_s_new)
                };
                let q_s = q_s.max(VAR_FLOOR);
                if !s.is_finite() || !q_s.is_finite() {
                    return Err(Divergence {
                        iter,
                        site: DivergenceSite::Observation { l, t, m },
                    });
                }
                new_s[idx] = s;
                new_qs[idx] = q_s;
            }
        }
    }
    state.s_hat = new_s;
    state.q_s = new_qs;

    // Input linear step for the scheduled devices.
    let s_flat = state.s_hat.as_slice().expect("standard layout");
    let qs_flat = state.q_s.as_slice().expect("standard layout");
    let mut corr = vec![Complex64::new(0.0, 0.0); tm];
    let mut inv_qr = vec![0.0; tm];
    for &n in &set.members {
        corr.fill(Complex64::new(0.0, 0.0));
        inv_qr.fill(0.0);
        for l in 0..l_len {
            let pc = phi[[l, n]].conj();
            let p2 = phi_abs2[[l, n]];
            let s_row = &s_flat[l * tm..(l + 1) * tm];
            let q_row = &qs_flat[l * tm..(l + 1) * tm];
            for k in 0..tm {
                corr[k] += pc * s_row[k];
                inv_qr[k] += p2 * q_row[k];
            }
        }
        let beta = state.beta[n];
        for t in 0..t_len {
            for m in 0..m_len {
                let k = t * m_len + m;
                let idx = [n, t, m];
                let q_r = 1.0 / inv_qr[k].max(VAR_FLOOR);
                let r = state.h_hat[idx] + corr[k] * q_r;
                if !r.is_finite() || !q_r.is_finite() {
                    return Err(Divergence {
                        iter,
                        site: DivergenceSite::Device { n, t, m },
                    });
                }
                state.q_r[idx] = q_r;
                state.r_hat[idx] = r;
                state.llr_local[idx] = denoisers::llr_local_unchecked(r, q_r, beta);
            }
        }
        state.s_source[n] = iter;
    }
    if onsager == Onsager::Cached {
        state.s_history.insert(iter, state.s_hat.clone());
        let live: std::collections::BTreeSet<usize> =
            state.s_source.iter().chain(&state.h_source).copied().collect();
        state.s_history.retain(|k, _| live.contains(k));
    }
    state.updates_total += set_updates(set, state.dims);
    Ok(())
}

fn set_updates(set: &ScheduleSet, dims: Dims) -> u64 {
    (set.members.len() * dims.window_len * dims.n_antennas) as u64
}

/// Extrinsic activity LLR and `ρ̂_{ntm}` for every scheduled device. A no-op
/// when the activity is known.
pub fn sparsity_update(state: &mut EstimatorState, set: &ScheduleSet) {
    if state.activity_known {
        return;
    }
    let Dims {
        window_len: t_len,
        n_antennas: m_len,
        ..
    } = state.dims;
    // prefix[t] = Σ_{k<t}, suffix[t] = Σ_{k>=t}; the exclusion sum is
    // prefix[t] + suffix[t+1], which avoids subtracting large terms.
    let mut prefix = vec![0.0; t_len + 1];
    let mut suffix = vec![0.0; t_len + 1];
    for &n in &set.members {
        let prior_logodds = denoisers::logit(state.prior_rho[n]);
        for m in 0..m_len {
            for t in 0..t_len {
                prefix[t + 1] = prefix[t] + state.llr_local[[n, t, m]];
            }
            suffix[t_len] = 0.0;
            for t in (0..t_len).rev() {
                suffix[t] = suffix[t + 1] + state.llr_local[[n, t, m]];
            }
            for t in 0..t_len {
                let extrinsic = prior_logodds + prefix[t] + suffix[t + 1];
                state.rho_hat[[n, t, m]] = denoisers::llr_to_prob(extrinsic);
            }
        }
    }
}

/// `ρ̂_{nt} = Σ_m ρ̂_{ntm} / M`.
pub fn refine_activity(state: &mut EstimatorState) {
    let m_len = state.dims.n_antennas as f64;
    Zip::from(&mut state.rho_refined)
        .and(state.rho_hat.lanes(Axis(2)))
        .for_each(|out, lane| *out = lane.sum() / m_len);
}

/// `Σ_m ‖ĥ_{S,m} − ĥ⁻_{S,m}‖ / ‖ĥ_{S,m}‖` over the devices in `members`.
/// Divide by `M` before comparing against the threshold.
pub fn check_stop(state: &EstimatorState, members: &[usize]) -> f64 {
    let Dims {
        window_len: t_len,
        n_antennas: m_len,
        ..
    } = state.dims;
    let mut tol = 0.0;
    for m in 0..m_len {
        let (mut diff, mut norm) = (0.0, 0.0);
        for &n in members {
            for t in 0..t_len {
                let cur = state.h_hat[[n, t, m]];
                diff += (cur - state.prev_h_hat[[n, t, m]]).norm_sqr();
                norm += cur.norm_sqr();
            }
        }
        tol += if norm > 0.0 {
            diff.sqrt() / norm.sqrt()
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
    }
    tol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIters,
    Diverged,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIters => "max_iters",
            Self::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub h_hat: Array3<Complex64>,
    pub rho_refined: Array2<f64>,
    pub detected: Array2<bool>,
    pub trace: Vec<IterationRecord>,
    pub iterations: usize,
    pub stop: StopReason,
    pub divergence: Option<Divergence>,
    pub updates_total: u64,
}

impl Estimate {
    /// First iteration whose tolerance fell below the threshold.
    pub fn iters_to_tol(&self, cfg: &EngineConfig, n_antennas: usize) -> Option<usize> {
        self.trace
            .iter()
            .find(|r| r.tol.is_some_and(|tol| tol / (n_antennas as f64) < cfg.tol_threshold))
            .map(|r| r.iter)
    }
}

/// Runs the estimator until the tolerance test passes or `max_iters`
/// iterations have been performed.
pub fn run(
    obs: &Observation,
    pilots: &PilotMatrix,
    prior: &ActivityPrior,
    beta: &[f64],
    cfg: &EngineConfig,
    scheduler: &mut dyn Scheduler,
    truth: Option<Truth<'_>>,
) -> Result<Estimate, EngineError> {
    let dims = EstimatorState::dims_of(obs, pilots)?;
    if let Some(truth) = truth {
        if truth.h.dim() != (dims.n_devices, dims.window_len, dims.n_antennas)
            || truth.active.dim() != (dims.n_devices, dims.window_len)
        {
            return Err(EngineError::Dimension("truth does not match observation".into()));
        }
    }
    let mut state = init_state(dims, prior, beta)?;
    let mut set = scheduler.initial_set(&state);
    let mut stop = StopReason::MaxIters;
    let mut divergence = None;
    let damped = cfg.damping < 1.0;
    let m_len = dims.n_antennas as f64;

    for i in 1..=cfg.max_iters {
        state.snapshot();
        if let Err(d) = gamp_sweep(&mut state, &set, obs, pilots, cfg) {
            divergence = Some(d);
            stop = StopReason::Diverged;
            break;
        }
        sparsity_update(&mut state, &set);
        refine_activity(&mut state);
        state.iter = i;
        let next = scheduler.next_set(&state, &set);
        let tol = (i >= 2).then(|| {
            let members = match cfg.stop_set {
                StopSet::Swept => &set.members,
                StopSet::Next => &next.members,
            };
            check_stop(&state, members)
        });
        let nmse = truth.and_then(|tr| metrics::nmse(state.h_hat.view(), tr.h, tr.active));
        state.trace.push(IterationRecord {
            iter: i,
            set_size: set.members.len(),
            set_origin: set.origin,
            updates: set_updates(&set, dims),
            updates_total: state.updates_total,
            tol,
            nmse,
            damped,
        });
        set = next;
        if cfg.early_stop && tol.is_some_and(|tol| tol / m_len < cfg.tol_threshold) {
            stop = StopReason::Converged;
            break;
        }
    }

    let detected = state.rho_refined.mapv(|r| r >= cfg.activity_threshold);
    Ok(Estimate {
        iterations: state.iter,
        updates_total: state.updates_total,
        h_hat: state.h_hat,
        rho_refined: state.rho_refined,
        detected,
        trace: state.trace,
        stop,
        divergence,
    })
}
