//! Variance-exploding diffusion: noise schedule, forward noising, reverse
//! Euler-Maruyama integration, bridge-time selection and the bridge itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{is_context_channel, Field};
use crate::score::ScoreModel;

/// Smallest reverse time reached by the sampler.
pub const DEFAULT_T_END: f64 = 1e-5;
/// Euler-Maruyama steps for a full `t = 1 -> t_end` integration.
pub const FULL_INTERVAL_STEPS: usize = 500;

/// Marginal noise scale `sigma(t)` and diffusion coefficient `g(t)`.
pub trait Diffusion: Sync {
    fn sigma_at(&self, t: f64) -> f64;
    fn g_at(&self, t: f64) -> f64;
}

/// `sigma^2(t) = sigma_min^2 [(sigma_max/sigma_min)^(2t) - 1]`, with
/// `sigma(0) = sigma_min`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_min: 0.01, sigma_max: 10.0 }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("diffusion time {t} outside [0, 1]")))
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        Ok(Self { sigma_min, sigma_max })
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_at(t))
    }

    pub fn g(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.g_at(t))
    }

    /// Exact inverse of `sigma` on `(0, 1]`, unclamped.
    pub fn inverse_sigma(&self, sigma: f64) -> f64 {
        let r = sigma / self.sigma_min;
        (r * r).ln_1p() / (2.0 * self.log_ratio())
    }
}

impl Diffusion for NoiseSchedule {
    fn sigma_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.sigma_min;
        }
        // sigma_min^2 (e^{2 t L} - 1), written with expm1 for small t.
        self.sigma_min * (2.0 * t * self.log_ratio()).exp_m1().sqrt()
    }

    fn g_at(&self, t: f64) -> f64 {
        let l = self.log_ratio();
        self.sigma_min * (t * l).exp() * (2.0 * l).sqrt()
    }
}

/// `x0 + sigma(t) eps` on noised channels; context channels pass through.
pub fn forward_noise<D: Diffusion + ?Sized, R: Rng + ?Sized>(
    x0: &Field,
    schedule: &D,
    t: f64,
    rng: &mut R,
) -> Result<Field> {
    check_time(t)?;
    let sigma = schedule.sigma_at(t);
    let mut out = x0.clone();
    let noised = x0.noised_channels();
    for s in 0..x0.samples() {
        for &c in &noised {
            for v in out.grid_mut(s, c) {
                let eps: f64 = rng.sample(StandardNormal);
                *v += sigma * eps;
            }
        }
    }
    Ok(out)
}

/// Bridge time from the crossing power `psd_star`: the `t` at which the
/// per-pixel noise variance `sigma^2 / N^2` in Fourier units equals it.
pub fn t_star_from_psd(schedule: &NoiseSchedule, psd_star: f64, n_grid: usize) -> f64 {
    let sigma_star = (n_grid as f64 * n_grid as f64 * psd_star).max(0.0).sqrt();
    if !(sigma_star >= schedule.sigma_min) {
        log::warn!("sigma* = {sigma_star:e} is below sigma_min; t* clamped to 0");
        return 0.0;
    }
    let t = schedule.inverse_sigma(sigma_star);
    if t > 1.0 {
        log::warn!("t* = {t} above 1; clamped");
        return 1.0;
    }
    t
}

/// One independent RNG stream per sample, drawn from the caller's RNG.
fn sample_streams<R: Rng + ?Sized>(rng: &mut R, samples: usize) -> Vec<ChaCha20Rng> {
    (0..samples)
        .map(|_| {
            let mut seed = [0u8; 32];
            rng.fill(&mut seed);
            ChaCha20Rng::from_seed(seed)
        })
        .collect()
}

/// Integrates the reverse SDE `dx = -g^2 s dt + g dW` from `t_start` down to
/// `t_end` in `n_steps` fixed steps. Context channels are held fixed.
///
/// Each sample draws its noise from its own stream, so results do not depend
/// on the number of worker threads.
pub fn reverse_em<D, S, R>(
    x_init: &Field,
    score: &S,
    schedule: &D,
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<Field>
where
    D: Diffusion + ?Sized,
    S: ScoreModel + ?Sized,
    R: Rng + ?Sized,
{
    check_time(t_start)?;
    check_time(t_end)?;
    if !(t_end < t_start) || n_steps == 0 {
        return Err(Error::InvalidParameter(format!(
            "reverse integration needs t_end < t_start and n_steps >= 1 (got {t_end}, {t_start}, {n_steps})"
        )));
    }
    let targets: Vec<usize> = score
        .noised_channels()
        .iter()
        .map(|name| x_init.channel_index(name))
        .collect::<Result<_>>()?;
    let n2 = x_init.n() * x_init.n();
    let per_sample = x_init.n_channels() * n2;
    let dt = (t_start - t_end) / n_steps as f64;
    let sqrt_dt = dt.sqrt();

    let mut x = x_init.clone();
    let mut streams = sample_streams(rng, x.samples());
    for step in 0..n_steps {
        let t = t_start - step as f64 * dt;
        let times = vec![t; x.samples()];
        let s = score.evaluate(&x, &times)?;
        if !s.is_finite() {
            return Err(Error::ScoreDivergence { step });
        }
        let g = schedule.g_at(t);
        let drift = g * g * dt;
        let diff = g * sqrt_dt;
        let score_per_sample = s.n_channels() * n2;
        x.data_mut()
            .par_chunks_mut(per_sample)
            .zip(streams.par_iter_mut())
            .enumerate()
            .for_each(|(i, (xs, stream))| {
                let ss = &s.data()[i * score_per_sample..(i + 1) * score_per_sample];
                for (j, &c) in targets.iter().enumerate() {
                    let grid = &mut xs[c * n2..(c + 1) * n2];
                    for (v, sv) in grid.iter_mut().zip(&ss[j * n2..(j + 1) * n2]) {
                        let eta: f64 = stream.sample(StandardNormal);
                        *v += drift * sv + diff * eta;
                    }
                }
            });
    }
    Ok(x)
}

/// Parameters of one source-to-target bridge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeConfig {
    pub schedule: NoiseSchedule,
    pub k_star: usize,
    pub t_star: f64,
    pub n_steps: usize,
    pub t_end: f64,
}

impl BridgeConfig {
    /// Uses the full-interval step size, pro-rated to `[t_end, t_star]`.
    pub fn new(schedule: NoiseSchedule, k_star: usize, t_star: f64) -> Result<Self> {
        let t_end = DEFAULT_T_END;
        let frac = (t_star - t_end) / (1.0 - t_end);
        let n_steps = ((FULL_INTERVAL_STEPS as f64 * frac).ceil() as usize).max(1);
        Self::with_steps(schedule, k_star, t_star, n_steps, t_end)
    }

    pub fn with_steps(schedule: NoiseSchedule, k_star: usize, t_star: f64, n_steps: usize, t_end: f64) -> Result<Self> {
        if !(t_end > 0.0 && t_end < t_star && t_star <= 1.0) || n_steps == 0 {
            return Err(Error::InvalidParameter(format!(
                "bridge needs 0 < t_end < t_star <= 1 and n_steps >= 1 (got {t_end}, {t_star}, {n_steps})"
            )));
        }
        Ok(Self { schedule, k_star, t_star, n_steps, t_end })
    }
}

/// Noises an upsampled source to `t_star`, swaps in the target context and
/// integrates back to `t_end` under the target score.
pub fn downscale<S, R>(x_source: &Field, context: Option<&Field>, score_target: &S, cfg: &BridgeConfig, rng: &mut R) -> Result<Field>
where
    S: ScoreModel + ?Sized,
    R: Rng + ?Sized,
{
    let noised_names: Vec<String> = x_source.channels().iter().filter(|c| !is_context_channel(c)).cloned().collect();
    let mut x = forward_noise(&x_source.select_channels(&noised_names)?, &cfg.schedule, cfg.t_star, rng)?;
    if let Some(ctx) = context {
        if ctx.n() != x.n() || ctx.samples() != x.samples() {
            return Err(Error::Shape(format!(
                "context is {} samples of {}^2, source is {} samples of {}^2",
                ctx.samples(),
                ctx.n(),
                x.samples(),
                x.n()
            )));
        }
        let ctx_names: Vec<String> = ctx.channels().iter().filter(|c| is_context_channel(c)).cloned().collect();
        x = x.concat_channels(&ctx.select_channels(&ctx_names)?)?;
    }
    reverse_em(&x, score_target, &cfg.schedule, cfg.t_star, cfg.t_end, cfg.n_steps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianFieldScore;
    use crate::spectral::azimuthal_psd;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn schedule_examples() {
        let s = sched();
        assert!((s.sigma(1.0).unwrap() - 0.01 * (1e6f64 - 1.0).sqrt()).abs() < 1e-12);
        assert!((s.sigma(0.5).unwrap() - (1e-4f64 * 999.0).sqrt()).abs() < 1e-12);
        assert!((s.sigma(0.5).unwrap() - 0.31607).abs() < 1e-5);
        assert_eq!(s.sigma(0.0).unwrap(), 0.01);
        assert!(s.sigma(1.1).is_err());
        assert!(s.g(-0.1).is_err());
        assert!(NoiseSchedule::new(1.0, 0.5).is_err());
    }

    #[test]
    fn g_squared_is_variance_rate() {
        let s = sched();
        let h = 1e-5;
        for t in [0.05, 0.2, 0.5, 0.8, 0.95] {
            let fd = (s.sigma_at(t + h).powi(2) - s.sigma_at(t - h).powi(2)) / (2.0 * h);
            let g2 = s.g_at(t).powi(2);
            assert!((fd - g2).abs() / g2 < 1e-6, "t = {t}");
        }
    }

    #[test]
    fn t_star_examples() {
        let s = sched();
        let n = 64usize;
        let sig = s.sigma(0.5).unwrap();
        let psd = sig * sig / (n * n) as f64;
        assert!((t_star_from_psd(&s, psd, n) - 0.5).abs() < 1e-6);
        assert_eq!(t_star_from_psd(&s, 100.0 / (n * n) as f64, n), 1.0);
        assert_eq!(t_star_from_psd(&s, 1e-6 / (n * n) as f64, n), 0.0);
        assert_eq!(t_star_from_psd(&s, 0.0, n), 0.0);
    }

    #[test]
    fn bridge_config_pro_rates_steps() {
        assert_eq!(BridgeConfig::new(sched(), 4, 1.0).unwrap().n_steps, 500);
        assert_eq!(BridgeConfig::new(sched(), 4, 0.5).unwrap().n_steps, 250);
        assert_eq!(BridgeConfig::new(sched(), 4, 2e-5).unwrap().n_steps, 1);
        assert!(BridgeConfig::new(sched(), 4, 1e-6).is_err());
    }

    struct Frozen;
    impl Diffusion for Frozen {
        fn sigma_at(&self, _: f64) -> f64 {
            1.0
        }
        fn g_at(&self, _: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let x = Field::from_fn(8, &["u", "context_q"], 2, |s, c, x, y| (s + c + x * y) as f64).unwrap();
        let score = GaussianFieldScore::white("u", 8, 1.0, sched()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let out = reverse_em(&x, &score, &Frozen, 1.0, 1e-5, 10, &mut rng).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn forward_noise_leaves_context_and_scales() {
        let x = Field::zeros(32, &["u", "context_q"], 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let y = forward_noise(&x, &sched(), 0.0, &mut rng).unwrap();
        let c = y.channel_index("context_q").unwrap();
        assert!(y.grid(0, c).iter().all(|&v| v == 0.0));
        let u: Vec<f64> = (0..4).flat_map(|s| y.grid(s, 0).to_vec()).collect();
        let var = u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.0005);
    }

    #[test]
    fn reverse_em_recovers_unit_gaussian() {
        let n = 32;
        let score = GaussianFieldScore::white("u", n, 1.0, sched()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let prior = forward_noise(&Field::zeros(n, &["u"], 10).unwrap(), &sched(), 1.0, &mut rng).unwrap();
        let out = reverse_em(&prior, &score, &sched(), 1.0, DEFAULT_T_END, 500, &mut rng).unwrap();
        let var = out.data().iter().map(|v| v * v).sum::<f64>() / out.data().len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn downscale_is_deterministic_and_vanishing_bridge_is_identity() {
        let n = 16;
        let score = GaussianFieldScore::power_law("u", n, 1.0, 3.0, sched()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let src = score.sample(3, &mut rng);
        let cfg = BridgeConfig::new(sched(), 2, 0.4).unwrap();
        let a = downscale(&src, None, &score, &cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = downscale(&src, None, &score, &cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.data(), b.data());

        let tiny = BridgeConfig::new(sched(), 2, 2e-5).unwrap();
        let c = downscale(&src, None, &score, &tiny, &mut rng).unwrap();
        let max = c.data().iter().zip(src.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 6.0 * 0.01, "max deviation {max}");
    }

    #[test]
    fn forward_noise_adds_flat_spectrum() {
        let n = 16;
        let score = GaussianFieldScore::power_law("u", n, 1.0, 3.0, sched()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x0 = score.sample(1, &mut rng);
        let base = azimuthal_psd(&x0, "u", true).unwrap();
        let t = 0.3;
        let reps: Vec<Field> = (0..1000).map(|_| forward_noise(&x0, &sched(), t, &mut rng).unwrap()).collect();
        let noisy = azimuthal_psd(&Field::concat_samples(&reps).unwrap(), "u", true).unwrap();
        let add = sched().sigma_at(t).powi(2) / (n * n) as f64;
        for k in 1..n / 2 {
            let expected = base.values[k] + add;
            assert!((noisy.values[k] - expected).abs() / expected < 0.05, "band {k}");
        }
    }
}
