//! Evaluation quantities: NMSE over truly active entries, per-symbol
//! activity error rates, and trial aggregation.

use ndarray::{ArrayView2, ArrayView3, Zip};
use num_complex::Complex64;

/// `‖(ĥ − h)∘mask‖² / ‖h∘mask‖²`, mask broadcast over antennas. `None` when
/// the masked truth has no energy.
pub fn nmse(
    h_hat: ArrayView3<'_, Complex64>,
    h_true: ArrayView3<'_, Complex64>,
    active: ArrayView2<'_, bool>,
) -> Option<f64> {
    assert_eq!(h_hat.dim(), h_true.dim(), "estimate and truth shapes differ");
    let (n, t, _) = h_true.dim();
    assert_eq!(active.dim(), (n, t), "mask shape differs");
    let (mut err, mut energy) = (0.0, 0.0);
    Zip::indexed(h_true).and(h_hat).for_each(|(dev, sym, _), truth, est| {
        if active[[dev, sym]] {
            err += (est - truth).norm_sqr();
            energy += truth.norm_sqr();
        }
    });
    (energy > 0.0).then(|| err / energy)
}

/// `(missed, false_alarm)` per symbol: missed over true actives, false
/// alarms over true inactives. A rate with an empty denominator is 0.
pub fn detection_rates(
    rho_refined: ArrayView2<'_, f64>,
    threshold: f64,
    xi_true: ArrayView2<'_, bool>,
) -> (f64, f64) {
    assert_eq!(rho_refined.dim(), xi_true.dim(), "shapes differ");
    let (mut actives, mut missed, mut inactives, mut false_alarms) = (0usize, 0usize, 0usize, 0usize);
    Zip::from(rho_refined).and(xi_true).for_each(|&rho, &truth| {
        let detected = rho >= threshold;
        if truth {
            actives += 1;
            missed += usize::from(!detected);
        } else {
            inactives += 1;
            false_alarms += usize::from(detected);
        }
    });
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (rate(missed, actives), rate(false_alarms, inactives))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub nmse: Option<f64>,
    pub missed_rate: f64,
    pub false_alarm_rate: f64,
    pub aer: f64,
    pub iters_to_tol: Option<usize>,
    pub updates_total: u64,
    pub per_iter_nmse: Vec<Option<f64>>,
    pub diverged: bool,
}

impl TrialMetrics {
    pub fn new(
        nmse: Option<f64>,
        (missed_rate, false_alarm_rate): (f64, f64),
        iters_to_tol: Option<usize>,
        updates_total: u64,
        per_iter_nmse: Vec<Option<f64>>,
        diverged: bool,
    ) -> Self {
        Self {
            nmse,
            missed_rate,
            false_alarm_rate,
            aer: missed_rate + false_alarm_rate,
            iters_to_tol,
            updates_total,
            per_iter_nmse,
            diverged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: f64::NAN,
                median: f64::NAN,
                std: f64::NAN,
            };
        }
        let count = values.len();
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = if count > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        Self {
            count,
            mean,
            median: median(values),
            std: var.sqrt(),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub trials: usize,
    pub nmse: Stats,
    /// Trials left out of the NMSE statistics (undefined NMSE).
    pub nmse_excluded: usize,
    pub diverged: usize,
    pub missed_rate: Stats,
    pub false_alarm_rate: Stats,
    pub aer: Stats,
    pub updates_total: Stats,
    /// Median over trials, non-converged trials counted as `+∞`.
    pub median_iters_to_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cannot aggregate an empty set of trials")]
pub struct EmptyAggregate;

/// Summary statistics. Diverged trials are excluded from every mean and
/// counted; trials with undefined NMSE are excluded from the NMSE stats only.
pub fn aggregate(trials: &[TrialMetrics]) -> Result<Summary, EmptyAggregate> {
    if trials.is_empty() {
        return Err(EmptyAggregate);
    }
    let ok: Vec<&TrialMetrics> = trials.iter().filter(|t| !t.diverged).collect();
    let nmse: Vec<f64> = ok.iter().filter_map(|t| t.nmse).collect();
    let collect = |f: fn(&TrialMetrics) -> f64| ok.iter().map(|t| f(t)).collect::<Vec<_>>();
    let iters: Vec<f64> = ok
        .iter()
        .map(|t| t.iters_to_tol.map_or(f64::INFINITY, |i| i as f64))
        .collect();
    Ok(Summary {
        trials: trials.len(),
        nmse_excluded: ok.len() - nmse.len(),
        diverged: trials.len() - ok.len(),
        nmse: Stats::of(&nmse),
        missed_rate: Stats::of(&collect(|t| t.missed_rate)),
        false_alarm_rate: Stats::of(&collect(|t| t.false_alarm_rate)),
        aer: Stats::of(&collect(|t| t.aer)),
        updates_total: Stats::of(&collect(|t| t.updates_total as f64)),
        median_iters_to_tol: median(&iters),
    })
}
