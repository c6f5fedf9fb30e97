//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the estimator's numerics.

#![allow(dead_code)]

pub mod lockstep;
pub mod properties;
pub mod recovery;
pub mod stats;

use msgamp::rng::RandomStream;
use msgamp::PilotMatrix;
use ndarray::Array2;
use num_complex::Complex64;

/// Unit-modulus pilots with uniform phases.
pub fn random_pilots(rng: &mut RandomStream, l: usize, n: usize) -> PilotMatrix {
    PilotMatrix::new(Array2::from_shape_fn((l, n), |_| {
        Complex64::from_polar(1.0, std::f64::consts::PI * rng.uniform(-1.0, 1.0))
    }))
}

/// `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

pub fn rel_err_c(a: Complex64, b: Complex64, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

fn log_uniform(rng: &mut RandomStream, low: f64, high: f64) -> f64 {
    rng.uniform(low.ln(), high.ln()).exp()
}

/// Input-side case `(r̂, Qʳ, ρ̂, β)`: the pseudo-observation is drawn from
/// either mixture component so both regimes are covered.
pub fn prior_case(rng: &mut RandomStream) -> (Complex64, f64, f64, f64) {
    let q = log_uniform(rng, 1e-2, 10.0);
    let beta = log_uniform(rng, 0.1, 10.0);
    let rho = rng.uniform(0.01, 0.99);
    let spread = if rng.bernoulli(0.5) { q + beta } else { q };
    (rng.complex_normal() * spread.sqrt(), q, rho, beta)
}

/// Output-side case `(y, p, Qᵖ, σ²)`.
pub fn output_case(rng: &mut RandomStream) -> (Complex64, Complex64, f64, f64) {
    let q_p = log_uniform(rng, 1e-3, 10.0);
    let noise = log_uniform(rng, 1e-3, 10.0);
    let p = rng.complex_normal() * 2.0;
    let y = p + rng.complex_normal() * (q_p + noise).sqrt();
    (y, p, q_p, noise)
}

/// LLR case with `|r̂|²/Qʳ ≤ 50`, where both densities are representable.
pub fn llr_case(rng: &mut RandomStream) -> (Complex64, f64, f64) {
    loop {
        let (r, q, _, beta) = prior_case(rng);
        if r.norm_sqr() / q <= 50.0 {
            return (r, q, beta);
        }
    }
}

/// A small sparse uplink instance drawn without the crate's generators.
pub struct Instance {
    pub pilots: PilotMatrix,
    pub y: ndarray::Array3<Complex64>,
    pub h: ndarray::Array3<Complex64>,
    pub active: Array2<bool>,
    pub noise_var: f64,
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Instance {
    pub fn observation(&self) -> msgamp::Observation {
        msgamp::Observation {
            y: self.y.clone(),
            window_start: 0,
            noise_var: self.noise_var,
        }
    }
}

/// Devices active independently with probability `rho` over the whole
/// window, unit-modulus pilots, `y = Φh + w`.
pub fn sparse_instance(seed: u64, dims: (usize, usize, usize, usize), rho: f64, noise_var: f64) -> Instance {
    let (n, l, t, m) = dims;
    let mut rng = RandomStream::new(seed);
    let pilots = random_pilots(&mut rng, l, n);
    let beta: Vec<f64> = (0..n).map(|_| rng.uniform(0.5, 2.0)).collect();
    let on: Vec<bool> = (0..n).map(|_| rng.bernoulli(rho)).collect();
    let active = Array2::from_shape_fn((n, t), |(i, _)| on[i]);
    let h = ndarray::Array3::from_shape_fn((n, t, m), |(i, _, _)| {
        if on[i] {
            rng.complex_normal() * beta[i].sqrt()
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let y = ndarray::Array3::from_shape_fn((l, t, m), |(row, k, a)| {
        let clean: Complex64 = (0..n).map(|i| pilots.entries[[row, i]] * h[[i, k, a]]).sum();
        clean + rng.complex_normal() * noise_var.sqrt()
    });
    Instance {
        pilots,
        y,
        h,
        active,
        noise_var,
        rho: vec![rho; n],
        beta,
    }
}

/// Least squares of `y_{·tm}` on the pilot columns in `support`, solved by
/// Gaussian elimination on the normal equations. Entries off the support
/// are zero.
pub fn least_squares_on_support(pilots: &PilotMatrix, y: &ndarray::Array3<Complex64>, support: &[usize]) -> ndarray::Array3<Complex64> {
    let phi = &pilots.entries;
    let (l, n) = phi.dim();
    let (_, t_len, m_len) = y.dim();
    let k = support.len();
    let mut out = ndarray::Array3::zeros((n, t_len, m_len));
    for t in 0..t_len {
        for m in 0..m_len {
            // [ΦₛᴴΦₛ | Φₛᴴy]
            let mut a: Vec<Vec<Complex64>> = (0..k)
                .map(|i| {
                    let mut row: Vec<Complex64> = (0..k)
                        .map(|j| (0..l).map(|r| phi[[r, support[i]]].conj() * phi[[r, support[j]]]).sum())
                        .collect();
                    row.push((0..l).map(|r| phi[[r, support[i]]].conj() * y[[r, t, m]]).sum());
                    row
                })
                .collect();
            for col in 0..k {
                let piv = (col..k).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm())).unwrap();
                a.swap(col, piv);
                let pivot_row = a[col].clone();
                for (_, r) in a.iter_mut().enumerate().filter(|(row, _)| *row != col) {
                    let f = r[col] / pivot_row[col];
                    for (x, p) in r[col..].iter_mut().zip(&pivot_row[col..]) {
                        *x -= f * p;
                    }
                }
            }
            for (i, &dev) in support.iter().enumerate() {
                out[[dev, t, m]] = a[i][k] / a[i][i];
            }
        }
    }
    out
}

/// A reduced harness configuration that runs in well under a second.
pub fn small_spec(out: &std::path::Path, parallelism: usize) -> msgamp::harness::ExperimentSpec {
    let mut spec = msgamp::harness::ExperimentSpec::default();
    spec.base.n_devices = 48;
    spec.base.pilot_len = 12;
    spec.base.window_len = 36;
    spec.base.window_step = 24;
    spec.base.horizon = 72;
    spec.base.activity_prob_range = (0.02, 0.08);
    spec.base.rng_seed = 2024;
    spec.snr_db_list = vec![0.0, 10.0];
    spec.schedulers = msgamp::SchedulerKind::ALL.to_vec();
    spec.n_trials = 6;
    spec.output_path = out.to_path_buf();
    spec.parallelism = parallelism;
    spec
}
