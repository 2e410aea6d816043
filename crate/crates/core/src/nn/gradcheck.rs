use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference half step `h`.
    pub step: f64,
    /// Number of coordinates checked; all of them if larger than the parameter count.
    pub coordinates: usize,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub rng: RngStream,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coordinates: 64,
            floor: 1e-6,
            rng: RngStream::new(0, 0x6C),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare `analytic` with `(f(w+h) − f(w−h)) / 2h` on a random subset of coordinates.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    loss: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!("{} params, {} gradients", params.len(), analytic.len())));
    }
    let base = loss(params);
    if !base.is_finite() {
        return Err(Error::NonfiniteLoss(format!("loss at the unperturbed point is {base}")));
    }
    let mut checked: Vec<usize> = if opts.coordinates >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(&mut opts.rng.rng(), params.len(), opts.coordinates).into_vec()
    };
    checked.sort_unstable();
    let mut w = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: checked.first().copied().unwrap_or(0),
        checked: checked.clone(),
        analytic: Vec::with_capacity(checked.len()),
        numeric: Vec::with_capacity(checked.len()),
    };
    for &i in &checked {
        let orig = w[i];
        w[i] = orig + opts.step;
        let plus = loss(&w);
        w[i] = orig - opts.step;
        let minus = loss(&w);
        w[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonfiniteLoss(format!("loss near coordinate {i} is {plus} / {minus}")));
        }
        let n = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.analytic.push(a);
        report.numeric.push(n);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = vec![0.5, -1.25, 2.0, 3.5];
        let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let r = grad_check(|p| p.iter().map(|x| x * x).sum(), &w, &g, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.checked, vec![0, 1, 2, 3]);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let w = vec![1.0, 2.0];
        let r = grad_check(|p| p[0] * p[1], &w, &[2.0, 2.0], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn nan_loss_is_reported() {
        let r = grad_check(|_| f64::NAN, &[1.0], &[0.0], &GradCheckOptions::default());
        assert!(matches!(r, Err(Error::NonfiniteLoss(_))));
    }

    #[test]
    fn subset_is_sampled_without_replacement() {
        let w = vec![0.0; 100];
        let opts = GradCheckOptions {
            coordinates: 10,
            ..Default::default()
        };
        let r = grad_check(|p| p.iter().sum(), &w, &[1.0; 100], &opts).unwrap();
        let mut c = r.checked.clone();
        c.dedup();
        assert_eq!(c.len(), 10);
    }
}
