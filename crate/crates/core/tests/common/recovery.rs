//! Noiseless single-device recovery against least squares on the true
//! support.

use msgamp::engine::{self, ActivityPrior, EngineConfig};
use msgamp::metrics;
use msgamp::rng::RandomStream;
use msgamp::scheduling::FullParallel;
use msgamp::Observation;
use ndarray::{Array2, Array3};
use num_complex::Complex64;

use super::{least_squares_on_support, random_pilots};

pub const N: usize = 8;
pub const L: usize = 8;
pub const T: usize = 4;

pub struct Outcome {
    pub nmse: f64,
    /// `‖ĥ − ĥ_LS‖² / ‖ĥ_LS‖²` over the true support.
    pub ls_gap: f64,
}

/// Damping used for the recovery runs. Undamped iterations oscillate on a
/// few weak-channel draws of this square system.
pub const DAMPING: f64 = 0.8;

/// One noiseless single-device trial with 20 full-parallel iterations.
pub fn single_device_trial(seed: u64) -> Outcome {
    let mut rng = RandomStream::new(seed);
    let pilots = random_pilots(&mut rng, L, N);
    let dev = (rng.next_u64() % N as u64) as usize;
    let h = Array3::from_shape_fn((N, T, 1), |(n, _, _)| if n == dev { rng.complex_normal() } else { Complex64::new(0.0, 0.0) });
    let active = Array2::from_shape_fn((N, T), |(n, _)| n == dev);
    let y = Array3::from_shape_fn((L, T, 1), |(l, t, m)| (0..N).map(|n| pilots.entries[[l, n]] * h[[n, t, m]]).sum());
    let obs = Observation { y: y.clone(), window_start: 0, noise_var: 0.0 };
    let cfg = EngineConfig {
        max_iters: 20,
        early_stop: false,
        damping: DAMPING,
        ..EngineConfig::default()
    };
    let est = engine::run(&obs, &pilots, &ActivityPrior::PerDevice(vec![1.0 / N as f64; N]), &[1.0; N], &cfg, &mut FullParallel, None).unwrap();
    let ls = least_squares_on_support(&pilots, &y, &[dev]);
    let nmse = metrics::nmse(est.h_hat.view(), h.view(), active.view()).unwrap();
    let ls_gap = metrics::nmse(est.h_hat.view(), ls.view(), active.view()).unwrap();
    Outcome { nmse, ls_gap }
}
