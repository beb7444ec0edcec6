use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::Field;
use crate::score::{ScoreModel, UNetScore};
use crate::sde::{NoiseSchedule, DEFAULT_T_END};

/// Mean squared residual over pixels, split into the part carried by the
/// spatial mean of each grid and the remainder. `total = mean + fluct`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub mean_component: f64,
    pub fluct_component: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct ResidualSums {
    mean_sq: f64,
    fluct_sq: f64,
    grids: usize,
}

impl ResidualSums {
    fn add_grid(&mut self, f: &[f64], eps: &[f64]) {
        let n = f.len() as f64;
        let mean = f.iter().zip(eps).map(|(a, b)| a - b).sum::<f64>() / n;
        self.mean_sq += mean * mean;
        self.fluct_sq += f.iter().zip(eps).map(|(a, b)| (a - b - mean).powi(2)).sum::<f64>() / n;
        self.grids += 1;
    }

    fn merge(mut self, other: ResidualSums) -> Self {
        self.mean_sq += other.mean_sq;
        self.fluct_sq += other.fluct_sq;
        self.grids += other.grids;
        self
    }

    fn report(&self) -> LossReport {
        let g = self.grids.max(1) as f64;
        let mean_component = self.mean_sq / g;
        let fluct_component = self.fluct_sq / g;
        LossReport { total: mean_component + fluct_component, mean_component, fluct_component }
    }
}

/// A batch noised for denoising score matching: `x_t = x0 - sigma(t) eps`
/// on the noised channels, context channels untouched.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Field,
    /// Noise on the noised channels only, in `noised` order.
    pub eps: Field,
    pub t: Vec<f64>,
}

pub fn noise_batch<S: AsRef<str>>(
    x0: &Field,
    noised: &[S],
    schedule: &NoiseSchedule,
    t_end: f64,
    rng: &mut impl RngCore,
) -> Result<NoisedBatch> {
    if x0.samples() == 0 {
        return Err(Error::EmptySet);
    }
    if !(0.0..1.0).contains(&t_end) {
        return Err(Error::InvalidParameter(format!("t_end {t_end} outside [0, 1)")));
    }
    let idx: Vec<usize> = noised.iter().map(|c| x0.channel_index(c.as_ref())).collect::<Result<_>>()?;
    let mut x_t = x0.clone();
    let mut eps = Field::zeros(x0.n(), noised, x0.samples())?;
    let mut t = Vec::with_capacity(x0.samples());
    for s in 0..x0.samples() {
        // (t_end, 1]
        let ts = 1.0 - rng.random::<f64>() * (1.0 - t_end);
        let sigma = schedule.sigma(ts)?;
        t.push(ts);
        for (k, &c) in idx.iter().enumerate() {
            let e = eps.grid_mut(s, k);
            for v in e.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let e = eps.grid(s, k).to_vec();
            for (x, e) in x_t.grid_mut(s, c).iter_mut().zip(e) {
                *x -= sigma * e;
            }
        }
    }
    Ok(NoisedBatch { x_t, eps, t })
}

/// Splits the squared residual `f - eps` into its two components.
pub fn decompose(f: &Field, eps: &Field) -> Result<LossReport> {
    if !f.same_layout(eps) {
        return Err(Error::Shape("prediction and noise differ in layout".into()));
    }
    let mut sums = ResidualSums::default();
    for s in 0..f.samples() {
        for c in 0..f.n_channels() {
            sums.add_grid(f.grid(s, c), eps.grid(s, c));
        }
    }
    Ok(sums.report())
}

/// Denoising score matching loss with an arbitrary denoiser in place of
/// the network. The denoiser sees the whole noised batch, including the
/// true noise, so oracle denoisers can be plugged in.
pub fn dsm_loss<S, F>(x0: &Field, noised: &[S], schedule: &NoiseSchedule, rng: &mut impl RngCore, mut denoiser: F) -> Result<LossReport>
where
    S: AsRef<str>,
    F: FnMut(&NoisedBatch) -> Result<Field>,
{
    let batch = noise_batch(x0, noised, schedule, DEFAULT_T_END, rng)?;
    let f = denoiser(&batch)?;
    decompose(&f, &batch.eps)
}

/// Loss of the network on a noised batch, without dropout.
pub fn model_loss(model: &UNetScore, batch: &NoisedBatch) -> Result<LossReport> {
    let sums: Vec<ResidualSums> = (0..batch.t.len())
        .into_par_iter()
        .map(|s| {
            let x = model.input_tensor(&batch.x_t, s)?;
            let f = model.forward_parts(&x, batch.t[s]).combined();
            let mut sums = ResidualSums::default();
            let p = x.h * x.w;
            for c in 0..f.c {
                sums.add_grid(&f.data[c * p..(c + 1) * p], batch.eps.grid(s, c));
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    Ok(sums.into_iter().fold(ResidualSums::default(), ResidualSums::merge).report())
}

/// Loss and its gradient over a batch. Samples run in parallel, each with
/// its own dropout stream; gradients are summed in sample order.
pub fn loss_and_gradient(model: &UNetScore, batch: &NoisedBatch, dropout_seeds: &[u64]) -> Result<(LossReport, Vec<f64>)> {
    let samples = batch.t.len();
    if dropout_seeds.len() != samples {
        return Err(Error::Shape(format!("{} dropout seeds for {samples} samples", dropout_seeds.len())));
    }
    let noised = model.noised_channels().len();
    let scale = 2.0 / (samples * noised * batch.x_t.pixels()) as f64;
    let per_sample: Vec<(ResidualSums, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let x = model.input_tensor(&batch.x_t, s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seeds[s]);
            let (mut f, cache) = model.forward_train(&x, batch.t[s], Some(&mut rng));
            let p = f.h * f.w;
            let mut sums = ResidualSums::default();
            for c in 0..f.c {
                let eps = batch.eps.grid(s, c);
                sums.add_grid(&f.data[c * p..(c + 1) * p], eps);
                for (v, e) in f.data[c * p..(c + 1) * p].iter_mut().zip(eps) {
                    *v = scale * (*v - e);
                }
            }
            let mut grad = vec![0.0; model.params().len()];
            model.backward(&cache, &f, &mut grad);
            Ok((sums, grad))
        })
        .collect::<Result<_>>()?;
    let mut total = ResidualSums::default();
    let mut grad = vec![0.0; model.params().len()];
    for (sums, g) in per_sample {
        total = total.merge(sums);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total.report(), grad))
}
