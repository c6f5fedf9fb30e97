//! Steps the engine and the dense reference side by side.

use super::dense::DenseReference;
use super::Instance;
use msgamp::engine::{self, ActivityPrior, EngineConfig, EstimatorState};
use msgamp::scheduling::FullParallel;
use msgamp::Scheduler;
use ndarray::{Array2, Array3};
use num_complex::Complex64;

const TOL: f64 = 1e-10;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * b.abs().max(1.0)
}

fn close_c(a: Complex64, b: Complex64) -> bool {
    (a - b).norm() <= TOL * b.norm().max(1.0)
}

fn reference_for(inst: &Instance) -> DenseReference {
    let (l, n) = inst.pilots.entries.dim();
    let phi = (0..l).map(|r| (0..n).map(|c| inst.pilots.entries[[r, c]]).collect()).collect();
    let (_, t, m) = inst.y.dim();
    let y = (0..l).map(|r| (0..t).map(|k| (0..m).map(|a| inst.y[[r, k, a]]).collect()).collect()).collect();
    DenseReference::new(phi, y, inst.noise_var, inst.rho.clone(), inst.beta.clone())
}

fn mismatch_c(name: &str, a: &Array3<Complex64>, b: &[Vec<Vec<Complex64>>]) -> Option<String> {
    a.indexed_iter()
        .find(|&((i, j, k), v)| !close_c(*v, b[i][j][k]))
        .map(|(idx, v)| format!("{name}{idx:?}: {v} vs {}", b[idx.0][idx.1][idx.2]))
}

fn mismatch_r(name: &str, a: &Array3<f64>, b: &[Vec<Vec<f64>>]) -> Option<String> {
    a.indexed_iter()
        .find(|&((i, j, k), v)| !close(*v, b[i][j][k]))
        .map(|(idx, v)| format!("{name}{idx:?}: {v} vs {}", b[idx.0][idx.1][idx.2]))
}

fn mismatch_2(name: &str, a: &Array2<f64>, b: &[Vec<f64>]) -> Option<String> {
    a.indexed_iter()
        .find(|&((i, j), v)| !close(*v, b[i][j]))
        .map(|(idx, v)| format!("{name}{idx:?}: {v} vs {}", b[idx.0][idx.1]))
}

/// First state entry that differs from the reference, if any.
pub fn compare(state: &EstimatorState, reference: &DenseReference) -> Option<String> {
    mismatch_c("h_hat", &state.h_hat, &reference.h)
        .or_else(|| mismatch_r("q_h", &state.q_h, &reference.qh))
        .or_else(|| mismatch_c("r_hat", &state.r_hat, &reference.r))
        .or_else(|| mismatch_r("q_r", &state.q_r, &reference.qr))
        .or_else(|| mismatch_r("llr_local", &state.llr_local, &reference.llr))
        .or_else(|| mismatch_r("rho_hat", &state.rho_hat, &reference.rho_hat))
        .or_else(|| mismatch_c("s_hat", &state.s_hat, &reference.s))
        .or_else(|| mismatch_r("q_s", &state.q_s, &reference.qs))
        .or_else(|| mismatch_2("rho_refined", &state.rho_refined, &reference.rho_refined))
}

/// Steps the engine and the reference side by side; returns the first
/// disagreement as `(iteration, description)`.
pub fn lockstep(inst: &Instance, iterations: usize) -> Result<EstimatorState, (usize, String)> {
    let cfg = EngineConfig::default();
    let obs = inst.observation();
    let dims = EstimatorState::dims_of(&obs, &inst.pilots).unwrap();
    let mut state = engine::init_state(dims, &ActivityPrior::PerDevice(inst.rho.clone()), &inst.beta).unwrap();
    let mut reference = reference_for(inst);
    if let Some(msg) = compare(&state, &reference) {
        return Err((0, msg));
    }
    let mut sched = FullParallel;
    let mut set = sched.initial_set(&state);
    for i in 1..=iterations {
        state.snapshot();
        engine::gamp_sweep(&mut state, &set, &obs, &inst.pilots, &cfg).unwrap();
        engine::sparsity_update(&mut state, &set);
        engine::refine_activity(&mut state);
        state.iter = i;
        set = sched.next_set(&state, &set);
        reference.step();
        if let Some(msg) = compare(&state, &reference) {
            return Err((i, msg));
        }
    }
    Ok(state)
}
