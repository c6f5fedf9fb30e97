//! Scalar estimators used inside each GAMP iteration.
//!
//! All complex Gaussians are circularly symmetric with total variance `Q`:
//! `CN(x; μ, Q) = exp(-|x - μ|² / Q) / (π Q)`.

use num_complex::Complex64;

use crate::DomainError;

/// Floor applied to variances before they are used as divisors.
pub const VAR_FLOOR: f64 = 1e-12;

/// Bernoulli-Gaussian prior `ρ̂ · CN(0, β) + (1 - ρ̂) · δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgPrior {
    pub rho_hat: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarEstimate {
    pub mean: Complex64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorPosterior {
    pub estimate: ScalarEstimate,
    /// Posterior probability that the coefficient came from the slab.
    pub activity: f64,
}

/// Posterior mean and variance of `h` under the Bernoulli-Gaussian prior and
/// the pseudo-observation `r̂ = h + CN(0, Qʳ)`.
pub fn prior_denoise(r_hat: Complex64, q_r: f64, prior: BgPrior) -> Result<PriorPosterior, DomainError> {
    if !(q_r > 0.0) {
        return Err(DomainError::NonPositiveVariance { name: "q_r", value: q_r });
    }
    let BgPrior { rho_hat, beta } = prior;
    if !(0.0..=1.0).contains(&rho_hat) {
        return Err(DomainError::Probability { name: "rho_hat", value: rho_hat });
    }
    if !(beta >= 0.0) {
        return Err(DomainError::NegativeVariance { name: "beta", value: beta });
    }
    let activity = if rho_hat == 0.0 {
        0.0
    } else if rho_hat == 1.0 {
        1.0
    } else {
        llr_to_prob(logit(rho_hat) + llr_local_unchecked(r_hat, q_r, beta))
    };
    let gain = beta / (beta + q_r);
    let slab_mean = r_hat * gain;
    let slab_var = q_r * gain;
    let mean = slab_mean * activity;
    let variance = activity * slab_var + activity * (1.0 - activity) * slab_mean.norm_sqr();
    Ok(PriorPosterior {
        estimate: ScalarEstimate { mean, variance },
        activity,
    })
}

/// Posterior of `z` given `y = z + CN(0, σ²_w)` and the prior `CN(z; p, Qᵖ)`.
pub fn output_denoise(
    y: Complex64,
    p: Complex64,
    q_p: f64,
    noise_var: f64,
) -> Result<ScalarEstimate, DomainError> {
    if !(q_p > 0.0) {
        return Err(DomainError::NonPositiveVariance { name: "q_p", value: q_p });
    }
    if !(noise_var >= 0.0) {
        return Err(DomainError::NegativeVariance { name: "noise_var", value: noise_var });
    }
    Ok(output_denoise_unchecked(y, p, q_p, noise_var))
}

#[inline]
fn output_denoise_unchecked(y: Complex64, p: Complex64, q_p: f64, noise_var: f64) -> ScalarEstimate {
    let denom = q_p + noise_var;
    ScalarEstimate {
        mean: (y * q_p + p * noise_var) / denom,
        variance: noise_var * q_p / denom,
    }
}

/// `log CN(0 | r̂, Qʳ + β) − log CN(0 | r̂, Qʳ)`, evaluated in closed log form.
pub fn llr_local(r_hat: Complex64, q_r: f64, beta: f64) -> Result<f64, DomainError> {
    if !(q_r > 0.0) {
        return Err(DomainError::NonPositiveVariance { name: "q_r", value: q_r });
    }
    if !(beta >= 0.0) {
        return Err(DomainError::NegativeVariance { name: "beta", value: beta });
    }
    Ok(llr_local_unchecked(r_hat, q_r, beta))
}

#[inline]
pub(crate) fn llr_local_unchecked(r_hat: Complex64, q_r: f64, beta: f64) -> f64 {
    let total = q_r + beta;
    // ln(Qʳ/(Qʳ+β)) + |r̂|²·β / (Qʳ(Qʳ+β))
    -(beta / q_r).ln_1p() + r_hat.norm_sqr() * beta / (q_r * total)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Prior log-odds of `ρ_n` plus every local LLR except the one at `exclude_t`.
pub fn llr_extrinsic(rho_n: f64, local_llrs: &[f64], exclude_t: usize) -> Result<f64, DomainError> {
    if !(rho_n > 0.0 && rho_n < 1.0) {
        return Err(DomainError::Probability { name: "rho_n", value: rho_n });
    }
    let others: f64 = local_llrs
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != exclude_t)
        .map(|(_, v)| v)
        .sum();
    Ok(logit(rho_n) + others)
}

/// Logistic sigmoid, overflow-safe on both tails.
pub fn llr_to_prob(llr: f64) -> f64 {
    if llr >= 0.0 {
        1.0 / (1.0 + (-llr).exp())
    } else {
        let e = llr.exp();
        e / (1.0 + e)
    }
}
