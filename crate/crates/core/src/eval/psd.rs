use std::io::Write;
use std::path::Path;

use super::plot::{render_png, Axes, Series};
use super::stats::{bootstrap_bands, resample_indices};
use crate::error::{Error, Result};
use crate::fields::Field;
use crate::spectral::sample_psds;

/// Mean PSD of one channel of one labelled set, with bootstrap bands over samples.
/// Covers the resolved bands `0 <= k < N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdBands {
    pub label: String,
    pub channel: String,
    pub n_grid: usize,
    pub mean: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

pub fn psd_bands(label: &str, field: &Field, channel: &str, n_boot: usize, ci: f64, seed: u64) -> Result<PsdBands> {
    if field.samples() == 0 {
        return Err(Error::EmptySet);
    }
    if field.n() < 4 {
        return Err(Error::InvalidGrid("PSD needs N >= 4".into()));
    }
    let bands = field.n() / 2;
    let per_sample: Vec<Vec<f64>> = sample_psds(field, channel, false)?.into_iter().map(|mut p| {
        p.truncate(bands);
        p
    }).collect();
    let average = |idx: &mut dyn Iterator<Item = usize>| {
        let mut acc = vec![0.0; bands];
        let mut count = 0usize;
        for i in idx {
            for (a, v) in acc.iter_mut().zip(&per_sample[i]) {
                *a += v;
            }
            count += 1;
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        acc
    };
    let mean = average(&mut (0..per_sample.len()));
    let (mut ci_low, mut ci_high) = bootstrap_bands(n_boot, ci, seed, bands, |rng| {
        average(&mut resample_indices(per_sample.len(), rng).into_iter())
    })?;
    for ((lo, hi), m) in ci_low.iter_mut().zip(ci_high.iter_mut()).zip(&mean) {
        *lo = lo.min(*m);
        *hi = hi.max(*m);
    }
    Ok(PsdBands { label: label.to_string(), channel: channel.to_string(), n_grid: field.n(), mean, ci_low, ci_high })
}

/// Bands for every (set, channel) pair; every set must share one grid size.
pub fn compare_psd(sets: &[(&str, &Field)], channels: &[&str], n_boot: usize, ci: f64, seed: u64) -> Result<Vec<PsdBands>> {
    let first = sets.first().ok_or(Error::EmptySet)?;
    if let Some((label, f)) = sets.iter().find(|(_, f)| f.n() != first.1.n()) {
        return Err(Error::Shape(format!("set {label:?} has N = {}, expected {}", f.n(), first.1.n())));
    }
    let mut out = Vec::new();
    for (label, field) in sets {
        for ch in channels {
            out.push(psd_bands(label, field, ch, n_boot, ci, seed)?);
        }
    }
    Ok(out)
}

/// Wide CSV: `k`, then `psd_`, `ci_low_` and `ci_high_` columns per `<label>_<channel>`.
pub fn write_psd_comparison_csv(curves: &[PsdBands], mut out: impl Write) -> Result<()> {
    let first = curves.first().ok_or(Error::EmptySet)?;
    let mut header = vec!["k".to_string()];
    for c in curves {
        let tag = format!("{}_{}", c.label, c.channel);
        header.extend([format!("psd_{tag}"), format!("ci_low_{tag}"), format!("ci_high_{tag}")]);
    }
    writeln!(out, "{}", header.join(","))?;
    for k in 0..first.mean.len() {
        let mut row = vec![k.to_string()];
        for c in curves {
            row.extend([format!("{:e}", c.mean[k]), format!("{:e}", c.ci_low[k]), format!("{:e}", c.ci_high[k])]);
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Log-log plot of every curve from band 1 upwards.
pub fn plot_psd_png(curves: &[PsdBands], path: &Path) -> Result<()> {
    let series: Vec<Series> = curves
        .iter()
        .map(|c| Series {
            x: (1..c.mean.len()).map(|k| k as f64).collect(),
            y: c.mean[1..].to_vec(),
            band: Some((c.ci_low[1..].to_vec(), c.ci_high[1..].to_vec())),
        })
        .collect();
    render_png(&series, Axes { log_x: true, log_y: true, ..Axes::default() }, path)
}
