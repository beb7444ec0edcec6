//! Fourier-space utilities: azimuthally averaged power spectra, sharp
//! low-pass filtering, anti-aliased nearest-neighbour upsampling and the
//! source/target spectral crossing used to pick the bridge time.

use std::io::Write;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::fields::Field;

/// Integer square root (floor).
fn isqrt(v: i64) -> i64 {
    let mut r = (v as f64).sqrt() as i64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Band index of mode `(ix, iy)`: band `k` holds `k <= |k| < k + 1`.
#[inline]
pub fn band_of(ix: usize, iy: usize, n: usize) -> usize {
    isqrt(fft::k_squared(ix, iy, n)) as usize
}

/// Number of bands needed to cover every DFT mode, corners included.
pub fn band_count(n: usize) -> usize {
    let half = (n / 2) as i64;
    isqrt(2 * half * half) as usize + 1
}

/// Number of DFT modes falling in each band.
pub fn modes_per_band(n: usize) -> Vec<usize> {
    let mut counts = vec![0usize; band_count(n)];
    for iy in 0..n {
        for ix in 0..n {
            counts[band_of(ix, iy, n)] += 1;
        }
    }
    counts
}

/// Azimuthally averaged power spectral density of one channel.
///
/// `values[k]` is the band average of `|I_hat|^2 / N^4`. Bands run past
/// `N/2` into the partially occupied corners of the Fourier square so that
/// every mode is counted once; [`PsdCurve::resolved`] returns the fully
/// resolved part `k < N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdCurve {
    pub channel: String,
    pub n_grid: usize,
    pub values: Vec<f64>,
    pub modes: Vec<usize>,
}

impl PsdCurve {
    pub fn from_values(channel: impl Into<String>, n_grid: usize, values: Vec<f64>) -> Result<Self> {
        let modes = modes_per_band(n_grid);
        if values.len() != modes.len() {
            return Err(Error::Shape(format!("expected {} bands, got {}", modes.len(), values.len())));
        }
        Ok(Self { channel: channel.into(), n_grid, values, modes })
    }

    pub fn resolved(&self) -> &[f64] {
        &self.values[..self.n_grid / 2]
    }

    /// `sum_k PSD(k) * modes(k)`; equals the pixel variance when the mean was removed.
    pub fn total_power(&self) -> f64 {
        self.values.iter().zip(&self.modes).map(|(v, &m)| v * m as f64).sum()
    }
}

/// Band-averaged `|I_hat|^2 / N^4` for one real grid.
pub fn grid_psd(grid: &[f64], n: usize, subtract_mean: bool) -> Vec<f64> {
    let mut spec = fft::forward_real(grid, n);
    if subtract_mean {
        spec[0] = Complex64::new(0.0, 0.0);
    }
    band_average(&spec, n)
}

/// Band-averages `|c|^2 / N^4` of an already transformed grid.
pub fn band_average(spec: &[Complex64], n: usize) -> Vec<f64> {
    let counts = modes_per_band(n);
    let mut acc = vec![0.0; counts.len()];
    for iy in 0..n {
        for ix in 0..n {
            acc[band_of(ix, iy, n)] += spec[iy * n + ix].norm_sqr();
        }
    }
    let n4 = (n as f64).powi(4);
    acc.iter().zip(&counts).map(|(a, &c)| a / (n4 * c as f64)).collect()
}

/// Mean azimuthal PSD over all samples of `field` for one channel.
///
/// Subtracting the mean is equivalent to zeroing the `(0,0)` coefficient.
pub fn azimuthal_psd(field: &Field, channel: &str, subtract_mean: bool) -> Result<PsdCurve> {
    let c = field.channel_index(channel)?;
    let n = field.n();
    if n < 4 {
        return Err(Error::InvalidGrid("PSD needs N >= 4".into()));
    }
    let mut acc = vec![0.0; band_count(n)];
    for s in 0..field.samples() {
        for (a, v) in acc.iter_mut().zip(grid_psd(field.grid(s, c), n, subtract_mean)) {
            *a += v;
        }
    }
    let inv = 1.0 / field.samples().max(1) as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    PsdCurve::from_values(channel, n, acc)
}

/// Per-sample PSDs of one channel, `[sample][band]`.
pub fn sample_psds(field: &Field, channel: &str, subtract_mean: bool) -> Result<Vec<Vec<f64>>> {
    let c = field.channel_index(channel)?;
    Ok((0..field.samples()).map(|s| grid_psd(field.grid(s, c), field.n(), subtract_mean)).collect())
}

fn lowpass_grid(grid: &[f64], n: usize, k_cut: f64) -> Vec<f64> {
    let mut spec = fft::forward_real(grid, n);
    let cut2 = k_cut * k_cut;
    for iy in 0..n {
        for ix in 0..n {
            if fft::k_squared(ix, iy, n) as f64 >= cut2 {
                spec[iy * n + ix] = Complex64::new(0.0, 0.0);
            }
        }
    }
    fft::inverse_real(spec, n)
}

/// Zeroes every Fourier mode with `|k| >= k_cut`, in every channel.
pub fn lowpass(field: &Field, k_cut: f64) -> Result<Field> {
    let n = field.n();
    if !(k_cut > 0.0 && k_cut <= (n / 2) as f64) {
        return Err(Error::InvalidParameter(format!("k_cut = {k_cut} outside (0, {}]", n / 2)));
    }
    let mut out = field.clone();
    for s in 0..field.samples() {
        for c in 0..field.n_channels() {
            let filtered = lowpass_grid(field.grid(s, c), n, k_cut);
            out.grid_mut(s, c).copy_from_slice(&filtered);
        }
    }
    Ok(out)
}

/// Cutoff applied after upsampling: the coarse grid's dealiased band.
pub fn upsample_cutoff(n_coarse: usize) -> f64 {
    n_coarse as f64 / 3.0
}

/// 1D amplitude response of `factor`-fold pixel replication at wavenumber `k`
/// on the fine grid, relative to its DC response (phase excluded).
fn replication_response(k: i64, n_coarse: usize, factor: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let n_fine = (n_coarse * factor) as f64;
    let a = std::f64::consts::PI * k as f64;
    (a / n_coarse as f64).sin() / (factor as f64 * (a / n_fine).sin())
}

/// Nearest-neighbour upsampling by `factor`, followed by a sharp low-pass at
/// `N_coarse / 3`. Inside the pass band the replication kernel's amplitude
/// roll-off is divided out, so band powers of the coarse field are preserved.
pub fn upsample_lowres(field: &Field, factor: usize) -> Result<Field> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::InvalidParameter(format!("upsampling factor {factor} must be a power of two >= 2")));
    }
    let nc = field.n();
    let nf = nc * factor;
    let cut = upsample_cutoff(nc);
    let cut2 = cut * cut;
    let gain: Vec<f64> = (0..nf).map(|i| 1.0 / replication_response(fft::wavenumber(i, nf), nc, factor)).collect();

    let mut out = Field::zeros(nf, field.channels(), field.samples())?;
    for s in 0..field.samples() {
        for c in 0..field.n_channels() {
            let coarse = field.grid(s, c);
            let mut fine = vec![0.0; nf * nf];
            for y in 0..nf {
                for x in 0..nf {
                    fine[y * nf + x] = coarse[(y / factor) * nc + x / factor];
                }
            }
            let mut spec = fft::forward_real(&fine, nf);
            for iy in 0..nf {
                for ix in 0..nf {
                    let idx = iy * nf + ix;
                    if fft::k_squared(ix, iy, nf) as f64 >= cut2 {
                        spec[idx] = Complex64::new(0.0, 0.0);
                    } else {
                        spec[idx] *= gain[ix] * gain[iy];
                    }
                }
            }
            out.grid_mut(s, c).copy_from_slice(&fft::inverse_real(spec, nf));
        }
    }
    Ok(out)
}

/// Result of the source/target spectral crossing search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KStar {
    pub k_star: usize,
    pub psd_star: f64,
    /// `false` when the curves never cross and the closest band was used.
    pub crossed: bool,
}

/// Relative tolerance under which two band powers count as equal.
pub const DEFAULT_CROSSING_RTOL: f64 = 1e-6;

pub fn find_k_star(source: &PsdCurve, target: &PsdCurve) -> Result<KStar> {
    find_k_star_with_tolerance(source, target, DEFAULT_CROSSING_RTOL)
}

/// Smallest band `k >= 1` at which `source - target` changes sign.
///
/// Bands whose relative difference is within `rtol` count as equal. A run of
/// equal bands followed by divergence is an exact crossing at the last equal
/// band (`psd_star = target[k]`); a strict sign flip between `k` and `k + 1`
/// gives `k_star = k` with `psd_star` the geometric mean of the two
/// bracketing target values. Only resolved bands `k < N/2` are searched.
pub fn find_k_star_with_tolerance(source: &PsdCurve, target: &PsdCurve, rtol: f64) -> Result<KStar> {
    if source.n_grid != target.n_grid || source.channel != target.channel {
        return Err(Error::Shape(format!(
            "curves differ: ({}, N={}) vs ({}, N={})",
            source.channel, source.n_grid, target.channel, target.n_grid
        )));
    }
    let s = source.resolved();
    let t = target.resolved();
    if s[1..].iter().all(|&v| v == 0.0) || t[1..].iter().all(|&v| v == 0.0) {
        return Err(Error::AllZeroCurve);
    }
    let sign = |k: usize| -> i8 {
        let d = s[k] - t[k];
        let scale = s[k].abs().max(t[k].abs());
        if d.abs() <= rtol * scale {
            0
        } else if d > 0.0 {
            1
        } else {
            -1
        }
    };

    let mut last_sign = 0i8;
    for k in 1..s.len() {
        let sk = sign(k);
        if sk == 0 {
            continue;
        }
        let prev_zero = k > 1 && sign(k - 1) == 0;
        if last_sign == 0 {
            if prev_zero {
                return Ok(KStar { k_star: k - 1, psd_star: t[k - 1], crossed: true });
            }
            last_sign = sk;
        } else if sk != last_sign {
            let psd_star = if prev_zero { t[k - 1] } else { (t[k - 1] * t[k]).sqrt() };
            return Ok(KStar { k_star: k - 1, psd_star, crossed: true });
        }
    }

    // No crossing: take the band where the curves are closest in log space.
    let mut best = (1usize, f64::INFINITY);
    for k in 1..s.len() {
        let d = if s[k] > 0.0 && t[k] > 0.0 {
            (s[k].ln() - t[k].ln()).abs()
        } else if s[k] == t[k] {
            0.0
        } else {
            f64::INFINITY
        };
        if d < best.1 {
            best = (k, d);
        }
    }
    let k = best.0;
    let psd_star = if t[k] > 0.0 { t[k] } else { s[k] };
    log::warn!("PSD curves for {:?} never cross; using closest band k = {k}", source.channel);
    Ok(KStar { k_star: k, psd_star, crossed: false })
}

/// Writes curves as CSV with header `k,psd_<channel>...`, one row per band.
pub fn write_psd_csv<W: Write>(curves: &[PsdCurve], mut out: W) -> Result<()> {
    let first = curves.first().ok_or(Error::EmptySet)?;
    if curves.iter().any(|c| c.n_grid != first.n_grid) {
        return Err(Error::Shape("PSD curves differ in grid size".into()));
    }
    let header: Vec<String> = curves.iter().map(|c| format!("psd_{}", c.channel)).collect();
    writeln!(out, "k,{}", header.join(","))?;
    for k in 0..first.values.len() {
        let row: Vec<String> = curves.iter().map(|c| format!("{:e}", c.values[k])).collect();
        writeln!(out, "{k},{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn noise(n: usize, samples: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(n, &["u"], samples, |_, _, _, _| StandardNormal.sample(&mut rng)).unwrap()
    }

    fn harmonic(n: usize, k: f64) -> Field {
        Field::from_fn(n, &["u"], 1, |_, _, x, _| (2.0 * PI * k * x as f64 / n as f64).sin()).unwrap()
    }

    #[test]
    fn band_bookkeeping_covers_every_mode() {
        for n in [4, 8, 32, 64] {
            assert_eq!(modes_per_band(n).iter().sum::<usize>(), n * n);
        }
        assert_eq!(band_count(64), 46);
        assert_eq!(modes_per_band(8)[0], 1);
        assert_eq!(modes_per_band(8)[1], 8);
    }

    #[test]
    fn single_harmonic_is_one_band() {
        let p = azimuthal_psd(&harmonic(32, 4.0), "u", true).unwrap();
        for (k, v) in p.values.iter().enumerate() {
            if k == 4 {
                assert!(*v > 1e-4);
            } else {
                assert!(*v <= 1e-20, "band {k} = {v}");
            }
        }
    }

    #[test]
    fn parseval_against_pixel_variance() {
        let f = noise(32, 5, 11);
        for s in 0..5 {
            let g = f.grid(s, 0);
            let m = g.iter().sum::<f64>() / g.len() as f64;
            let var = g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64;
            let curve = PsdCurve::from_values("u", 32, grid_psd(g, 32, true)).unwrap();
            assert!((curve.total_power() - var).abs() / var < 1e-10);
        }
    }

    #[test]
    fn lowpass_examples() {
        let band_limited = lowpass(&noise(32, 1, 2), 10.0).unwrap();
        let same = lowpass(&band_limited, 16.0).unwrap();
        for (a, b) in band_limited.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let gone = lowpass(&harmonic(32, 8.0), 5.0).unwrap();
        assert!(gone.data().iter().all(|v| v.abs() < 1e-12));
        assert!(lowpass(&harmonic(32, 8.0), 0.0).is_err());
        assert!(lowpass(&harmonic(32, 8.0), 17.0).is_err());
    }

    #[test]
    fn lowpass_white_noise_spectrum() {
        let f = noise(32, 200, 5);
        let before = azimuthal_psd(&f, "u", true).unwrap();
        let after = azimuthal_psd(&lowpass(&f, 8.0).unwrap(), "u", true).unwrap();
        for k in 0..after.values.len() {
            if k >= 8 {
                assert!(after.values[k] < 1e-30);
            } else {
                assert!((after.values[k] - before.values[k]).abs() <= 1e-12 * before.values[k].max(1e-30));
            }
        }
    }

    #[test]
    fn upsample_constant_field() {
        let f = Field::from_fn(2, &["u"], 1, |_, _, _, _| 3.5).unwrap();
        let up = upsample_lowres(&f, 2).unwrap();
        assert_eq!(up.n(), 4);
        assert!(up.data().iter().all(|v| (v - 3.5).abs() < 1e-12));
        assert!(upsample_lowres(&f, 3).is_err());
    }

    #[test]
    fn upsample_preserves_harmonic_power() {
        let coarse = Field::from_fn(16, &["u"], 1, |_, _, x, y| {
            (2.0 * PI * 3.0 * x as f64 / 16.0).cos() + 0.5 * (2.0 * PI * (2.0 * x as f64 + y as f64) / 16.0).sin()
        })
        .unwrap();
        let fine = upsample_lowres(&coarse, 8).unwrap();
        let pc = azimuthal_psd(&coarse, "u", true).unwrap();
        let pf = azimuthal_psd(&fine, "u", true).unwrap();
        for k in [2, 3] {
            assert!((pf.values[k] - pc.values[k]).abs() / pc.values[k] < 0.01, "band {k}");
        }
    }

    #[test]
    fn upsample_white_noise_is_band_limited() {
        let coarse = noise(16, 20, 8);
        let fine = upsample_lowres(&coarse, 8).unwrap();
        let pc = azimuthal_psd(&coarse, "u", true).unwrap();
        let pf = azimuthal_psd(&fine, "u", true).unwrap();
        let cut = upsample_cutoff(16);
        for k in 1..pf.values.len() {
            if (k as f64) >= cut {
                assert!(pf.values[k] < 1e-28, "band {k} = {}", pf.values[k]);
            } else if ((k + 1) as f64) <= cut {
                assert!((pf.values[k] - pc.values[k]).abs() / pc.values[k] < 0.01, "band {k}");
            }
        }
    }

    fn curve(values: Vec<f64>) -> PsdCurve {
        let n = 64;
        let mut v = values;
        v.resize(band_count(n), 0.0);
        PsdCurve::from_values("u", n, v).unwrap()
    }

    #[test]
    fn k_star_identical_curves_warns() {
        let t: Vec<f64> = (0..32).map(|k| if k == 0 { 0.0 } else { (k as f64).powi(-4) }).collect();
        let r = find_k_star(&curve(t.clone()), &curve(t)).unwrap();
        assert_eq!(r.k_star, 1);
        assert!(!r.crossed);
    }

    #[test]
    fn k_star_synthetic_construction() {
        let t: Vec<f64> = (0..32).map(|k| if k == 0 { 0.0 } else { (k as f64).powi(-4) }).collect();
        let s: Vec<f64> = (0..32)
            .map(|k| match k {
                0 => 0.0,
                k if k < 8 => (k as f64).powi(-4),
                k => 8f64.powi(8) * (k as f64).powi(-12),
            })
            .collect();
        let r = find_k_star(&curve(s.clone()), &curve(t.clone())).unwrap();
        assert_eq!(r.k_star, 8);
        assert!(r.crossed);
        assert!((r.psd_star - 8f64.powi(-4)).abs() < 1e-15);
        let swapped = find_k_star(&curve(t), &curve(s)).unwrap();
        assert_eq!(swapped.k_star, 8);
    }

    #[test]
    fn k_star_strict_crossing_uses_geometric_mean() {
        let t: Vec<f64> = (0..32).map(|k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect();
        let s: Vec<f64> = (0..32).map(|k| if k == 0 { 0.0 } else { 5.0 / (k * k) as f64 }).collect();
        // 5/k^2 > 1/k for k < 5, equal at 5, below after: exact crossing at 5.
        let r = find_k_star(&curve(s), &curve(t.clone())).unwrap();
        assert_eq!(r.k_star, 5);
        let s2: Vec<f64> = (0..32).map(|k| if k == 0 { 0.0 } else { 5.5 / (k * k) as f64 }).collect();
        let r2 = find_k_star(&curve(s2), &curve(t.clone())).unwrap();
        assert_eq!(r2.k_star, 5);
        assert!((r2.psd_star - (t[5] * t[6]).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn k_star_rejects_zero_curves_and_mismatch() {
        let z = curve(vec![0.0; 32]);
        let t = curve((0..32).map(|k| k as f64).collect());
        assert!(matches!(find_k_star(&z, &t), Err(Error::AllZeroCurve)));
        let other = PsdCurve::from_values("u", 32, vec![1.0; band_count(32)]).unwrap();
        assert!(find_k_star(&other, &t).is_err());
    }

    #[test]
    fn psd_csv_layout() {
        let a = PsdCurve::from_values("vorticity", 8, vec![1.0; band_count(8)]).unwrap();
        let mut b = a.clone();
        b.channel = "supersaturation".into();
        let mut buf = Vec::new();
        write_psd_csv(&[a, b], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,psd_vorticity,psd_supersaturation");
        assert_eq!(lines.len(), 1 + band_count(8));
        assert!(lines[1].starts_with("0,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn psd_invariant_under_rotation_and_shift(seed in 0u64..1000, dx in 0usize..16, dy in 0usize..16) {
            let n = 16;
            let f = noise(n, 1, seed);
            let g = f.grid(0, 0);
            let rotated = Field::from_fn(n, &["u"], 1, |_, _, x, y| g[x * n + (n - 1 - y)]).unwrap();
            let shifted = Field::from_fn(n, &["u"], 1, |_, _, x, y| g[((y + dy) % n) * n + (x + dx) % n]).unwrap();
            let p = azimuthal_psd(&f, "u", true).unwrap();
            for other in [rotated, shifted] {
                let q = azimuthal_psd(&other, "u", true).unwrap();
                for (a, b) in p.values.iter().zip(&q.values) {
                    prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
                }
            }
        }

        #[test]
        fn parseval_holds(seed in 0u64..1000) {
            let f = noise(16, 1, seed);
            let g = f.grid(0, 0);
            let m = g.iter().sum::<f64>() / g.len() as f64;
            let var = g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64;
            let p = azimuthal_psd(&f, "u", true).unwrap();
            prop_assert!((p.total_power() - var).abs() / var < 1e-10);
        }

        #[test]
        fn lowpass_is_idempotent(seed in 0u64..1000, cut in 1.0f64..8.0) {
            let f = noise(16, 1, seed);
            let once = lowpass(&f, cut).unwrap();
            let twice = lowpass(&once, cut).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn k_star_symmetric(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..32).map(|_| rng.random_range(0.1..1.0)).collect();
            let t: Vec<f64> = (0..32).map(|_| rng.random_range(0.1..1.0)).collect();
            let a = find_k_star(&curve(s.clone()), &curve(t.clone())).unwrap();
            let b = find_k_star(&curve(t), &curve(s)).unwrap();
            prop_assert_eq!(a.k_star, b.k_star);
        }
    }
}
