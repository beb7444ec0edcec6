use super::kde::{kde_pdf, KdeCurve};
use super::stats::quantile;
use crate::error::{Error, Result};
use crate::fields::Field;
use crate::fluid::{condensation_rate, SUPERSATURATION};

/// Positive condensation rates of every pixel in `set`, which must carry
/// the supersaturation `q - q_s`. `q_s` holds one sample or one per sample.
pub fn positive_condensation_rates(set: &Field, q_s: &Field, tau: f64) -> Result<Vec<f64>> {
    let excess = set.select_channels(&[SUPERSATURATION])?;
    if q_s.n_channels() != 1 || q_s.n() != set.n() {
        return Err(Error::Shape(format!("q_s must be a single {}x{} channel", set.n(), set.n())));
    }
    let mut q = excess.clone();
    for s in 0..q.samples() {
        let qs = q_s.grid(if q_s.samples() == 1 { 0 } else { s }, 0);
        for (v, base) in q.grid_mut(s, 0).iter_mut().zip(qs) {
            *v += base;
        }
    }
    let rates = condensation_rate(&q, q_s, tau)?;
    let positive: Vec<f64> = rates.data().iter().copied().filter(|c| *c > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::NoPositiveRates);
    }
    Ok(positive)
}

/// KDE of positive condensation rates. Present it on a log-density axis.
pub fn condensation_distribution(set: &Field, q_s: &Field, tau: f64, n_boot: usize, ci: f64, seed: u64) -> Result<KdeCurve> {
    kde_pdf(&positive_condensation_rates(set, q_s, tau)?, n_boot, ci, seed)
}

/// Empirical percentile of positive rates, used as the tail marker.
pub fn tail_marker(rates: &[f64], percentile: f64) -> f64 {
    quantile(rates, percentile / 100.0)
}
