use super::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng64;

/// Below this magnitude finite differences are dominated by the rounding
/// error of the loss itself, so the error is taken relative to this floor.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// (tensor name, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare `analytic` against five-point central differences of `loss_fn` at `params`.
///
/// Every coordinate is checked when the model has at most `max_coords`
/// values; otherwise a seeded sample touching every tensor (at least
/// `max_coords.max(100)` coordinates) is used. The per-coordinate error is
/// `|a - n| / max(DENOM_FLOOR, |a| + |n|)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, analytic: &Grads, eps: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> f64,
{
    let max_coords = max_coords.max(100);
    let total = params.num_values();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if total <= max_coords {
        for (ti, t) in params.tensors().iter().enumerate() {
            coords.extend((0..t.len()).map(|i| (ti, i)));
        }
    } else {
        let mut rng = Rng64::derived(seed, "grad-check");
        for (ti, t) in params.tensors().iter().enumerate() {
            let share = (max_coords * t.len()).div_ceil(total).max(4).min(t.len());
            let mut idx: Vec<usize> = (0..t.len()).collect();
            for k in 0..share {
                let j = k + rng.below(t.len() - k);
                idx.swap(k, j);
            }
            coords.extend(idx[..share].iter().map(|&i| (ti, i)));
        }
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, worst: None };
    for (ti, i) in coords {
        let orig = probe.tensors()[ti].values[i];
        let mut at = |delta: f64| {
            probe.tensors_mut()[ti].values[i] = orig + delta;
            loss_fn(&probe)
        };
        let (up2, up, down, down2) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
        probe.tensors_mut()[ti].values[i] = orig;
        if ![up2, up, down, down2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss);
        }
        // fourth-order central difference
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps);
        let a = analytic.tensors[ti][i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOM_FLOOR);
        report.checked += 1;
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(rel);
            report.worst = Some((params.tensors()[ti].name.clone(), i, a, numeric));
        }
    }
    Ok(report)
}
