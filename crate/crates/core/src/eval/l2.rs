use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::stats::{five_number_summary, median, resample_indices, resample_rng};
use crate::error::{Error, Result};
use crate::fields::Field;
use crate::spectral::lowpass;

/// Pixel mean and standard deviation of one channel over a whole domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStats {
    pub mean: f64,
    pub std: f64,
}

impl DomainStats {
    pub fn of(field: &Field, channel: &str) -> Result<Self> {
        let c = field.channel_index(channel)?;
        let values: Vec<f64> = (0..field.samples()).flat_map(|s| field.grid(s, c).iter().copied()).collect();
        if values.is_empty() {
            return Err(Error::EmptySet);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
        if !(std > 0.0) {
            return Err(Error::ZeroStd(channel.to_string()));
        }
        Ok(Self { mean, std })
    }

    /// Stats for every channel of `field`, in channel order.
    pub fn per_channel(field: &Field) -> Result<Vec<Self>> {
        field.channels().iter().map(|c| Self::of(field, c)).collect()
    }
}

/// Low-passes at `k < k_star`, then normalises each channel by its domain stats.
pub fn filter_normalize(field: &Field, k_star: f64, stats: &[DomainStats]) -> Result<Field> {
    if stats.len() != field.n_channels() {
        return Err(Error::Shape(format!("{} stats for {} channels", stats.len(), field.n_channels())));
    }
    if let Some((i, _)) = stats.iter().enumerate().find(|(_, s)| !(s.std > 0.0)) {
        return Err(Error::ZeroStd(field.channels()[i].clone()));
    }
    let mut out = lowpass(field, k_star)?;
    for s in 0..out.samples() {
        for (c, st) in stats.iter().enumerate() {
            out.grid_mut(s, c).iter_mut().for_each(|v| *v = (*v - st.mean) / st.std);
        }
    }
    Ok(out)
}

/// Per-channel Euclidean distance between sample `i` of `a` and sample `j` of `b`.
pub fn l2_distance(a: &Field, i: usize, b: &Field, j: usize) -> Vec<f64> {
    (0..a.n_channels())
        .map(|c| a.grid(i, c).iter().zip(b.grid(j, c)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Filtered, normalised L2 distance between the first samples of `a` and `b`.
pub fn filtered_l2(a: &Field, b: &Field, k_star: f64, stats_a: &[DomainStats], stats_b: &[DomainStats]) -> Result<Vec<f64>> {
    if a.n() != b.n() || a.channels() != b.channels() {
        return Err(Error::Shape("filtered_l2 needs matching grids and channels".into()));
    }
    if a.samples() == 0 || b.samples() == 0 {
        return Err(Error::EmptySet);
    }
    let fa = filter_normalize(&a.sample(0), k_star, stats_a)?;
    let fb = filter_normalize(&b.sample(0), k_star, stats_b)?;
    Ok(l2_distance(&fa, 0, &fb, 0))
}

/// Distances of each output to its own source and to randomly drawn other sources.
#[derive(Debug, Clone, PartialEq)]
pub struct L2Report {
    pub channels: Vec<String>,
    /// `[channel][pair]`
    pub paired: Vec<Vec<f64>>,
    pub random: Vec<Vec<f64>>,
}

impl L2Report {
    pub fn paired_summary(&self, channel: usize) -> [f64; 5] {
        five_number_summary(&self.paired[channel])
    }

    pub fn random_summary(&self, channel: usize) -> [f64; 5] {
        five_number_summary(&self.random[channel])
    }
}

/// Sample `i` of `outputs` was generated from sample `i` of `sources`.
/// Random pairs take output `i` against a uniformly drawn source `j != i`.
pub fn l2_report(
    outputs: &Field,
    sources: &Field,
    k_star: f64,
    stats_out: &[DomainStats],
    stats_src: &[DomainStats],
    n_random: usize,
    seed: u64,
) -> Result<L2Report> {
    if outputs.n() != sources.n() || outputs.channels() != sources.channels() {
        return Err(Error::Shape("outputs and sources differ in grid or channels".into()));
    }
    if outputs.samples() != sources.samples() {
        return Err(Error::Shape(format!("{} outputs for {} sources", outputs.samples(), sources.samples())));
    }
    let n = outputs.samples();
    if n < 2 {
        return Err(Error::Degenerate("need at least two pairs".into()));
    }
    let fo = filter_normalize(outputs, k_star, stats_out)?;
    let fs = filter_normalize(sources, k_star, stats_src)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(usize, usize)> = (0..n_random)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            (i, j)
        })
        .collect();
    let paired: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| l2_distance(&fo, i, &fs, i)).collect();
    let random: Vec<Vec<f64>> = pairs.par_iter().map(|&(i, j)| l2_distance(&fo, i, &fs, j)).collect();
    let by_channel = |rows: &[Vec<f64>]| (0..outputs.n_channels()).map(|c| rows.iter().map(|r| r[c]).collect()).collect();
    Ok(L2Report { channels: outputs.channels().to_vec(), paired: by_channel(&paired), random: by_channel(&random) })
}

/// Fraction of bootstrap resamples in which `median(paired) < median(random)`.
pub fn median_gap_confidence(paired: &[f64], random: &[f64], n_boot: usize, seed: u64) -> f64 {
    let wins: usize = (0..n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = resample_rng(seed, b);
            let p: Vec<f64> = resample_indices(paired.len(), &mut rng).into_iter().map(|i| paired[i]).collect();
            let r: Vec<f64> = resample_indices(random.len(), &mut rng).into_iter().map(|i| random[i]).collect();
            usize::from(median(&p) < median(&r))
        })
        .sum();
    wins as f64 / n_boot.max(1) as f64
}

pub fn write_l2_csv(report: &L2Report, mut out: impl Write) -> Result<()> {
    writeln!(out, "pair_type,channel,distance")?;
    for (kind, rows) in [("paired", &report.paired), ("random", &report.random)] {
        for (c, values) in rows.iter().enumerate() {
            for v in values {
                writeln!(out, "{kind},{},{v:e}", report.channels[c])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand_distr::StandardNormal;

    fn random_field(samples: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(16, &["u"], samples, |_, _, _, _| rng.sample(StandardNormal)).unwrap()
    }

    const UNIT: [DomainStats; 1] = [DomainStats { mean: 0.0, std: 1.0 }];

    #[test]
    fn identical_inputs_are_at_zero_distance() {
        let a = random_field(1, 1);
        assert_eq!(filtered_l2(&a, &a, 4.0, &UNIT, &UNIT).unwrap(), vec![0.0]);
    }

    #[test]
    fn negation_doubles_the_filtered_norm() {
        let a = random_field(1, 2);
        let neg = a.axpby(-1.0, &a, 0.0).unwrap();
        let d = filtered_l2(&a, &neg, 5.0, &UNIT, &UNIT).unwrap()[0];
        let la = lowpass(&a, 5.0).unwrap();
        let norm = la.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((d - 2.0 * norm).abs() < 1e-10 * norm);
    }

    #[test]
    fn zero_std_is_rejected() {
        let flat = Field::zeros(16, &["u"], 3).unwrap();
        assert!(matches!(DomainStats::of(&flat, "u"), Err(Error::ZeroStd(_))));
        let a = random_field(1, 3);
        let bad = [DomainStats { mean: 0.0, std: 0.0 }];
        assert!(matches!(filtered_l2(&a, &a, 3.0, &bad, &UNIT), Err(Error::ZeroStd(_))));
    }

    #[test]
    fn paired_beats_random_for_near_copies() {
        let src = random_field(20, 4);
        let noise = random_field(20, 5);
        let out = src.axpby(1.0, &noise, 0.3).unwrap();
        let r = l2_report(&out, &src, 4.0, &DomainStats::per_channel(&out).unwrap(), &DomainStats::per_channel(&src).unwrap(), 100, 6).unwrap();
        assert_eq!(r.paired[0].len(), 20);
        assert_eq!(r.random[0].len(), 100);
        assert!(median(&r.paired[0]) < median(&r.random[0]));
        assert!(median_gap_confidence(&r.paired[0], &r.random[0], 200, 7) > 0.95);
        let mut buf = Vec::new();
        write_l2_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 121);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pseudometric(seed in 0u64..1000, k in 1.0f64..8.0) {
            let f = random_field(3, seed);
            let (a, b, c) = (f.sample(0), f.sample(1), f.sample(2));
            let d = |x: &Field, y: &Field| filtered_l2(x, y, k, &UNIT, &UNIT).unwrap()[0];
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }
    }
}
