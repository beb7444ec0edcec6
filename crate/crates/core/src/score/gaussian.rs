use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::fields::Field;
use crate::score::ScoreModel;
use crate::sde::{Diffusion, NoiseSchedule};
use crate::spectral::{band_average, PsdCurve};

/// Exact score of a stationary zero-mean Gaussian field noised by the schedule.
///
/// `spectrum[iy * n + ix]` is the variance of mode `(ix, iy)` of the unitary
/// DFT `F[x] / N`; a unit white field has `S = 1` everywhere. The noised
/// distribution is diagonal in Fourier space with variance `S + sigma^2(t)`.
#[derive(Debug, Clone)]
pub struct GaussianFieldScore {
    channel: [String; 1],
    n: usize,
    spectrum: Vec<f64>,
    schedule: NoiseSchedule,
}

impl GaussianFieldScore {
    pub fn from_spectrum(channel: &str, n: usize, spectrum: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        if spectrum.len() != n * n {
            return Err(Error::Shape(format!("spectrum has {} modes, grid needs {}", spectrum.len(), n * n)));
        }
        if spectrum.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("spectrum must be finite and non-negative".into()));
        }
        for iy in 0..n {
            for ix in 0..n {
                let a = spectrum[iy * n + ix];
                let b = spectrum[fft::conjugate_index(iy, n) * n + fft::conjugate_index(ix, n)];
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                    return Err(Error::InvalidParameter(format!("spectrum not conjugate-symmetric at ({ix}, {iy})")));
                }
            }
        }
        Ok(Self { channel: [channel.to_string()], n, spectrum, schedule })
    }

    /// `S = variance` everywhere: i.i.d. pixels.
    pub fn white(channel: &str, n: usize, variance: f64, schedule: NoiseSchedule) -> Result<Self> {
        Self::from_spectrum(channel, n, vec![variance; n * n], schedule)
    }

    /// `S(k) = amplitude (1 + |k|)^-exponent`.
    pub fn power_law(channel: &str, n: usize, amplitude: f64, exponent: f64, schedule: NoiseSchedule) -> Result<Self> {
        let mut spec = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let k = (fft::k_squared(ix, iy, n) as f64).sqrt();
                spec[iy * n + ix] = amplitude * (1.0 + k).powf(-exponent);
            }
        }
        Self::from_spectrum(channel, n, spec, schedule)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn channel(&self) -> &str {
        &self.channel[0]
    }

    /// Expected azimuthal PSD of fields drawn from the prior: band average of `S / N^2`.
    pub fn expected_psd(&self) -> PsdCurve {
        let spec: Vec<Complex64> = self.spectrum.iter().map(|&s| Complex64::new(s.sqrt() * self.n as f64, 0.0)).collect();
        let mut values = band_average(&spec, self.n);
        values[0] = 0.0;
        PsdCurve::from_values(self.channel(), self.n, values).expect("band layout matches grid")
    }

    /// Draws `samples` fields from the prior: `x = F^-1[sqrt(S) F[w]]` with white `w`.
    pub fn sample<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> Field {
        let n = self.n;
        let mut out = Field::zeros(n, &self.channel, samples).expect("valid layout");
        for s in 0..samples {
            let w: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
            let mut spec = fft::forward_real(&w, n);
            for (c, &v) in spec.iter_mut().zip(&self.spectrum) {
                *c *= v.sqrt();
            }
            out.grid_mut(s, 0).copy_from_slice(&fft::inverse_real(spec, n));
        }
        out
    }

    fn score_grid(&self, grid: &[f64], sigma2: f64) -> Vec<f64> {
        let mut spec = fft::forward_real(grid, self.n);
        for (c, &s) in spec.iter_mut().zip(&self.spectrum) {
            *c /= -(s + sigma2);
        }
        fft::inverse_real(spec, self.n)
    }
}

impl ScoreModel for GaussianFieldScore {
    fn noised_channels(&self) -> &[String] {
        &self.channel
    }

    fn context_channels(&self) -> &[String] {
        &[]
    }

    fn evaluate(&self, x: &Field, t: &[f64]) -> Result<Field> {
        if x.n() != self.n {
            return Err(Error::Shape(format!("score built for N = {}, field has N = {}", self.n, x.n())));
        }
        if t.len() != x.samples() {
            return Err(Error::Shape(format!("{} times for {} samples", t.len(), x.samples())));
        }
        let c = x.channel_index(self.channel())?;
        let grids: Vec<Vec<f64>> = (0..x.samples())
            .into_par_iter()
            .map(|s| {
                let sigma = self.schedule.sigma_at(t[s]);
                self.score_grid(x.grid(s, c), sigma * sigma)
            })
            .collect();
        Field::new(self.n, self.channel.to_vec(), x.samples(), grids.concat())
    }
}
