use std::io::Write;

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use super::stats::{bootstrap_bands, quantile_sorted};
use crate::error::{Error, Result};

pub const DEFAULT_N_BOOT: usize = 10_000;
pub const DEFAULT_CI: f64 = 0.99;
pub const MIN_KDE_SAMPLES: usize = 30;
const MIN_GRID: usize = 256;
const MAX_GRID: usize = 8192;
/// Kernel support and grid padding, in bandwidths.
const KERNEL_REACH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub n_boot: usize,
    pub ci_level: f64,
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Linear interpolation on the grid, zero outside it.
    pub fn density_at(&self, x: f64) -> f64 {
        interpolate(&self.grid, &self.density, x)
    }

    pub fn ci_at(&self, x: f64) -> (f64, f64) {
        (interpolate(&self.grid, &self.ci_low, x), interpolate(&self.grid, &self.ci_high, x))
    }

    /// Trapezoid integral of the density.
    pub fn integral(&self) -> f64 {
        self.grid.windows(2).zip(self.density.windows(2)).map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1])).sum()
    }

    /// Natural log of the density, floored at `floor`.
    pub fn log_density(&self, floor: f64) -> Vec<f64> {
        self.density.iter().map(|d| d.max(floor).ln()).collect()
    }
}

fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    if grid.is_empty() || x < grid[0] || x > grid[grid.len() - 1] {
        return 0.0;
    }
    let i = grid.partition_point(|g| *g <= x).clamp(1, grid.len() - 1);
    let (x0, x1) = (grid[i - 1], grid[i]);
    let w = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
    values[i - 1] + w * (values[i] - values[i - 1])
}

/// Silverman's rule: `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("{n} samples")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

struct Binned {
    lo: f64,
    step: f64,
    len: usize,
    kernel: Vec<f64>,
}

impl Binned {
    fn new(min: f64, max: f64, h: f64) -> Self {
        let lo = min - KERNEL_REACH * h;
        let hi = max + KERNEL_REACH * h;
        let len = (((hi - lo) / (0.25 * h)).ceil() as usize + 1).clamp(MIN_GRID, MAX_GRID);
        let step = (hi - lo) / (len - 1) as f64;
        let reach = ((KERNEL_REACH * h / step).ceil() as usize).min(len - 1);
        let mut kernel: Vec<f64> = (0..=reach).map(|d| (-0.5 * (d as f64 * step / h).powi(2)).exp()).collect();
        // Normalise the sampled kernel so the trapezoid integral is exactly one.
        let mass = step * (kernel[0] + 2.0 * kernel[1..].iter().sum::<f64>());
        kernel.iter_mut().for_each(|k| *k /= mass);
        Self { lo, step, len, kernel }
    }

    fn grid(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.lo + i as f64 * self.step).collect()
    }

    /// Linear binning weights for each sample: (left bin, weight on right bin).
    fn positions(&self, samples: &[f64]) -> Vec<(usize, f64)> {
        samples
            .iter()
            .map(|&x| {
                let p = ((x - self.lo) / self.step).clamp(0.0, (self.len - 1) as f64);
                let i = (p.floor() as usize).min(self.len - 2);
                (i, p - i as f64)
            })
            .collect()
    }

    fn smooth(&self, counts: &[f64], total: f64) -> Vec<f64> {
        let r = self.kernel.len() - 1;
        let mut out = vec![0.0; self.len];
        for (b, &c) in counts.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let w = c / total;
            let from = b.saturating_sub(r);
            let to = (b + r).min(self.len - 1);
            for (j, o) in out[from..=to].iter_mut().enumerate() {
                *o += w * self.kernel[(from + j).abs_diff(b)];
            }
        }
        out
    }
}

/// Gaussian KDE with Silverman bandwidth and pointwise bootstrap bands.
///
/// Samples are linearly binned onto the evaluation grid; resamples draw
/// multinomial counts over the bins, one RNG stream per resample. The bands
/// are widened where needed so they always contain the point estimate.
pub fn kde_pdf(samples: &[f64], n_boot: usize, ci: f64, seed: u64) -> Result<KdeCurve> {
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(Error::Degenerate(format!("KDE needs at least {MIN_KDE_SAMPLES} samples, got {}", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite sample".into()));
    }
    let h = silverman_bandwidth(samples)?;
    let (min, max) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let binned = Binned::new(min, max, h);
    let mut counts = vec![0.0; binned.len];
    for (i, w) in binned.positions(samples) {
        counts[i] += 1.0 - w;
        counts[i + 1] += w;
    }
    let n = samples.len() as f64;
    let density = binned.smooth(&counts, n);

    let probs: Vec<f64> = counts.iter().map(|c| c / n).collect();
    let (mut ci_low, mut ci_high) = bootstrap_bands(n_boot, ci, seed, binned.len, |rng| {
        let resampled = multinomial(samples.len() as u64, &probs, rng);
        binned.smooth(&resampled, n)
    })?;
    for ((lo, hi), d) in ci_low.iter_mut().zip(ci_high.iter_mut()).zip(&density) {
        *lo = lo.min(*d);
        *hi = hi.max(*d);
    }
    Ok(KdeCurve { grid: binned.grid(), density, ci_low, ci_high, n_boot, ci_level: ci, bandwidth: h })
}

/// Multinomial counts by sequential conditional binomials.
fn multinomial(n: u64, probs: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut left = n;
    let mut mass_left = 1.0;
    let mut out = vec![0.0; probs.len()];
    for (o, &p) in out.iter_mut().zip(probs) {
        if left == 0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        let q = (p / mass_left).clamp(0.0, 1.0);
        let k = Binomial::new(left, q).map(|b| b.sample(rng)).unwrap_or(left);
        *o = k as f64;
        left -= k;
        mass_left -= p;
        if mass_left <= 0.0 {
            *o += left as f64;
            left = 0;
        }
    }
    out
}

pub fn write_kde_csv(curve: &KdeCurve, mut out: impl Write) -> Result<()> {
    writeln!(out, "x,density,ci_low,ci_high")?;
    for i in 0..curve.grid.len() {
        writeln!(out, "{:e},{:e},{:e},{:e}", curve.grid[i], curve.density[i], curve.ci_low[i], curve.ci_high[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn normal_density_at_zero() {
        let curve = kde_pdf(&normals(100_000, 1), 20, 0.99, 2).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((curve.density_at(0.0) - peak).abs() < 0.05 * peak, "{}", curve.density_at(0.0));
        assert!((curve.integral() - 1.0).abs() < 0.01);
    }

    #[test]
    fn direct_sum_agrees_with_binned() {
        let s = normals(500, 3);
        let curve = kde_pdf(&s, 10, 0.9, 4).unwrap();
        let h = curve.bandwidth;
        for &x in &[-1.5, -0.3, 0.0, 0.8, 2.0] {
            let direct: f64 = s.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>()
                / (s.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
            assert!((curve.density_at(x) - direct).abs() < 0.02 * direct.max(0.05), "{x}: {} vs {direct}", curve.density_at(x));
        }
    }

    #[test]
    fn translation_equivariance() {
        let s = normals(300, 5);
        let c = 3.25;
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let a = kde_pdf(&s, 50, 0.95, 6).unwrap();
        let b = kde_pdf(&shifted, 50, 0.95, 6).unwrap();
        assert_eq!(a.grid.len(), b.grid.len());
        for i in 0..a.grid.len() {
            assert!((a.grid[i] + c - b.grid[i]).abs() < 1e-12);
            assert!((a.density[i] - b.density[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn bands_contain_estimate_and_reproduce() {
        let s: Vec<f64> = normals(200, 7).iter().map(|v| v.exp()).collect();
        let a = kde_pdf(&s, 100, 0.99, 8).unwrap();
        for i in 0..a.grid.len() {
            assert!(a.ci_low[i] <= a.density[i] && a.density[i] <= a.ci_high[i]);
            assert!(a.density[i] >= 0.0);
        }
        assert!((a.integral() - 1.0).abs() < 0.01);
        assert_eq!(a, kde_pdf(&s, 100, 0.99, 8).unwrap());
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(matches!(kde_pdf(&[1.0; 50], 10, 0.9, 0), Err(Error::Degenerate(_))));
        assert!(kde_pdf(&normals(10, 0), 10, 0.9, 0).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let curve = kde_pdf(&normals(100, 9), 5, 0.9, 0).unwrap();
        let mut buf = Vec::new();
        write_kde_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,density,ci_low,ci_high\n"));
        assert_eq!(text.lines().count(), curve.grid.len() + 1);
    }
}
