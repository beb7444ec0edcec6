use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Linearly interpolated quantile of sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Min, lower quartile, median, upper quartile, max.
pub fn five_number_summary(values: &[f64]) -> [f64; 5] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile_sorted(&v, q))
}

/// RNG for resample `index` of a bootstrap rooted at `seed`.
pub fn resample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Pointwise bootstrap bands. `statistic` maps a resample RNG to a curve;
/// returns the `(1 - ci)/2` and `(1 + ci)/2` quantiles at each point.
pub fn bootstrap_bands<F>(n_boot: usize, ci: f64, seed: u64, len: usize, statistic: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    if n_boot == 0 || !(0.0 < ci && ci < 1.0) {
        return Err(Error::InvalidParameter(format!("bootstrap needs n_boot >= 1 and ci in (0, 1), got {n_boot}, {ci}")));
    }
    let curves: Vec<Vec<f64>> = (0..n_boot as u64).into_par_iter().map(|b| statistic(&mut resample_rng(seed, b))).collect();
    let mut low = Vec::with_capacity(len);
    let mut high = Vec::with_capacity(len);
    let mut column = vec![0.0; n_boot];
    for i in 0..len {
        for (c, curve) in column.iter_mut().zip(&curves) {
            *c = curve[i];
        }
        column.sort_by(f64::total_cmp);
        low.push(quantile_sorted(&column, (1.0 - ci) / 2.0));
        high.push(quantile_sorted(&column, (1.0 + ci) / 2.0));
    }
    Ok((low, high))
}

/// Draws `n` indices in `0..n` with replacement.
pub fn resample_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda) })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-12 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
