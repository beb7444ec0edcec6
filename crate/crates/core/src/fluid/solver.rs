use rand::Rng;
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

use super::{condensation, modulation_grid, SimParams};
use crate::error::{Error, Result};
use crate::fft;
use crate::fields::GridSpec;

type C = Complex64;
const ZERO: C = C::new(0.0, 0.0);

/// Spectral model state. The tracer is stored as `q - gamma y`, which is
/// periodic; [`SimState::q_grid`] adds the background gradient back.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub zeta_hat: Vec<C>,
    pub q_periodic_hat: Vec<C>,
    pub t_sim: f64,
    pub steps: usize,
}

impl SimState {
    /// `zeta = 0`, `q = q_s`.
    pub fn initial(params: &SimParams) -> Result<Self> {
        let grid = params.grid()?;
        let n = grid.n_grid;
        let modulation = modulation_grid(&grid, params.modulation_amplitude, params.modulation_wavenumber);
        Ok(Self { zeta_hat: vec![ZERO; n * n], q_periodic_hat: fft::forward_real(&modulation, n), t_sim: 0.0, steps: 0 })
    }

    pub fn n(&self) -> usize {
        (self.zeta_hat.len() as f64).sqrt().round() as usize
    }

    pub fn vorticity_grid(&self) -> Vec<f64> {
        fft::inverse_real(self.zeta_hat.clone(), self.n())
    }

    pub fn q_periodic_grid(&self) -> Vec<f64> {
        fft::inverse_real(self.q_periodic_hat.clone(), self.n())
    }

    pub fn q_grid(&self, grid: &GridSpec, gamma: f64) -> Vec<f64> {
        let n = self.n();
        let ys = grid.coords();
        let mut q = self.q_periodic_grid();
        for (i, v) in q.iter_mut().enumerate() {
            *v += gamma * ys[i / n];
        }
        q
    }

    /// Kinetic energy `1/2 <|grad psi|^2>` (domain average).
    pub fn kinetic_energy(&self, grid: &GridSpec) -> f64 {
        let n = grid.n_grid;
        let scale = 2.0 * PI / grid.domain_length;
        let n4 = (n as f64).powi(4);
        let mut e = 0.0;
        for iy in 0..n {
            for ix in 0..n {
                let k2 = fft::k_squared(ix, iy, n);
                if k2 > 0 {
                    e += self.zeta_hat[iy * n + ix].norm_sqr() / (k2 as f64 * scale * scale);
                }
            }
        }
        0.5 * e / n4
    }
}

/// Modes of the forcing ring and the per-mode amplitude that injects energy
/// at rate `epsilon` per unit time.
#[derive(Debug, Clone)]
pub struct ForcingRing {
    n: usize,
    /// `(index, conjugate index)` with `index <= conjugate index`.
    pairs: Vec<(usize, usize)>,
    amplitude: f64,
}

impl ForcingRing {
    pub fn new(grid: &GridSpec, k_f: f64, delta_k: f64, epsilon: f64) -> Result<Self> {
        let n = grid.n_grid;
        let scale = 2.0 * PI / grid.domain_length;
        let (lo, hi) = (k_f - delta_k / 2.0, k_f + delta_k / 2.0);
        let mut pairs = Vec::new();
        let mut inv_k2_sum = 0.0;
        for iy in 0..n {
            for ix in 0..n {
                let k2 = fft::k_squared(ix, iy, n) as f64 * scale * scale;
                let k = k2.sqrt();
                if k2 == 0.0 || k < lo || k > hi {
                    continue;
                }
                inv_k2_sum += 1.0 / k2;
                let idx = iy * n + ix;
                let conj = fft::conjugate_index(iy, n) * n + fft::conjugate_index(ix, n);
                if idx <= conj {
                    pairs.push((idx, conj));
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::EmptyRing { lo, hi });
        }
        let n4 = (n as f64).powi(4);
        let amplitude = (2.0 * epsilon * n4 / inv_k2_sum).sqrt();
        Ok(Self { n, pairs, amplitude })
    }

    pub fn mode_count(&self) -> usize {
        self.pairs.iter().map(|(a, b)| if a == b { 1 } else { 2 }).sum()
    }

    /// Adds one increment of uniform magnitude `amplitude sqrt(dt)` and random
    /// phase on every ring mode.
    pub fn add_increment<R: Rng + ?Sized>(&self, target: &mut [C], dt: f64, rng: &mut R) {
        let m = self.amplitude * dt.sqrt();
        for &(idx, conj) in &self.pairs {
            if idx == conj {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                target[idx] += C::new(sign * m, 0.0);
            } else {
                let phase = rng.random::<f64>() * 2.0 * PI;
                let f = C::from_polar(m, phase);
                target[idx] += f;
                target[conj] += f.conj();
            }
        }
    }
}

/// One stochastic vorticity forcing increment in spectral space.
pub fn ring_forcing_sample<R: Rng + ?Sized>(
    grid: &GridSpec,
    k_f: f64,
    delta_k: f64,
    epsilon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<C>> {
    let ring = ForcingRing::new(grid, k_f, delta_k, epsilon)?;
    let mut out = vec![ZERO; ring.n * ring.n];
    ring.add_increment(&mut out, dt, rng);
    Ok(out)
}

/// Precomputed operators for repeated stepping under fixed parameters.
pub struct Solver {
    params: SimParams,
    grid: GridSpec,
    n: usize,
    kx: Vec<f64>,
    ky: Vec<f64>,
    inv_k2: Vec<f64>,
    keep: Vec<bool>,
    zeta_half: Vec<f64>,
    q_half: Vec<f64>,
    modulation: Vec<f64>,
    ring: Option<ForcingRing>,
}

struct Tendency {
    zeta: Vec<C>,
    q: Vec<C>,
}

impl Solver {
    pub fn new(params: &SimParams) -> Result<Self> {
        params.validate()?;
        let grid = params.grid()?;
        let n = grid.n_grid;
        let scale = 2.0 * PI / grid.domain_length;
        let wav: Vec<f64> = (0..n).map(|i| fft::wavenumber(i, n) as f64 * scale).collect();
        let third = n as f64 / 3.0;
        let mut inv_k2 = vec![0.0; n * n];
        let mut keep = vec![false; n * n];
        let mut zeta_half = vec![0.0; n * n];
        let mut q_half = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                let k2 = wav[ix] * wav[ix] + wav[iy] * wav[iy];
                if k2 > 0.0 {
                    inv_k2[i] = 1.0 / k2;
                }
                keep[i] = (fft::wavenumber(ix, n).abs() as f64) <= third && (fft::wavenumber(iy, n).abs() as f64) <= third;
                let hyper = params.hyperdiffusivity * k2.powi(8);
                zeta_half[i] = (-(params.drag + hyper) * params.dt / 2.0).exp();
                q_half[i] = (-hyper * params.dt / 2.0).exp();
            }
        }
        let ring = ForcingRing::new(&grid, params.forcing_wavenumber, params.forcing_bandwidth, params.energy_input)?;
        let ring = (params.energy_input > 0.0).then_some(ring);
        Ok(Self {
            modulation: modulation_grid(&grid, params.modulation_amplitude, params.modulation_wavenumber),
            params: params.clone(),
            grid,
            n,
            kx: wav.clone(),
            ky: wav,
            inv_k2,
            keep,
            zeta_half,
            q_half,
            ring,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn modulation(&self) -> &[f64] {
        &self.modulation
    }

    fn derivatives(&self, hat: &[C]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut dx = vec![ZERO; n * n];
        let mut dy = vec![ZERO; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                dx[i] = C::new(0.0, self.kx[ix]) * hat[i];
                dy[i] = C::new(0.0, self.ky[iy]) * hat[i];
            }
        }
        fft::inverse_real_pair(&dx, &dy, n)
    }

    /// Nonlinear and source terms of both equations.
    fn tendency(&self, zeta: &[C], q: &[C]) -> Tendency {
        let n = self.n;
        let p = &self.params;
        let psi: Vec<C> = zeta.iter().zip(&self.inv_k2).map(|(z, ik)| -z * ik).collect();
        let (psi_x, psi_y) = self.derivatives(&psi);
        let (zeta_x, zeta_y) = self.derivatives(zeta);
        let (q_x, q_y) = self.derivatives(q);
        let q_grid = fft::inverse_real(q.to_vec(), n);
        let mut nz = vec![0.0; n * n];
        let mut nq = vec![0.0; n * n];
        for i in 0..n * n {
            nz[i] = -(psi_y[i] * zeta_x[i] - psi_x[i] * zeta_y[i]);
            nq[i] = -(psi_y[i] * q_x[i] - psi_x[i] * q_y[i]) + p.gamma * psi_x[i] + p.evaporation
                - condensation(q_grid[i] - self.modulation[i], p.tau);
        }
        let (mut zeta_t, mut q_t) = fft::forward_real_pair(&nz, &nq, n);
        self.dealias(&mut zeta_t);
        self.dealias(&mut q_t);
        Tendency { zeta: zeta_t, q: q_t }
    }

    fn dealias(&self, hat: &mut [C]) {
        for (v, &k) in hat.iter_mut().zip(&self.keep) {
            if !k {
                *v = ZERO;
            }
        }
    }

    /// Advances `state` by one step: integrating-factor RK4 for the
    /// deterministic terms, then one forcing increment.
    pub fn step<R: Rng + ?Sized>(&self, state: &mut SimState, rng: &mut R) -> Result<()> {
        let dt = self.params.dt;
        let (ez, eq) = (&self.zeta_half, &self.q_half);
        let z0 = &state.zeta_hat;
        let q0 = &state.q_periodic_hat;
        let len = z0.len();

        let k1 = self.tendency(z0, q0);
        let mut za = vec![ZERO; len];
        let mut qa = vec![ZERO; len];
        for i in 0..len {
            za[i] = ez[i] * (z0[i] + 0.5 * dt * k1.zeta[i]);
            qa[i] = eq[i] * (q0[i] + 0.5 * dt * k1.q[i]);
        }
        let k2 = self.tendency(&za, &qa);
        for i in 0..len {
            za[i] = ez[i] * z0[i] + 0.5 * dt * k2.zeta[i];
            qa[i] = eq[i] * q0[i] + 0.5 * dt * k2.q[i];
        }
        let k3 = self.tendency(&za, &qa);
        for i in 0..len {
            za[i] = ez[i] * (ez[i] * z0[i] + dt * k3.zeta[i]);
            qa[i] = eq[i] * (eq[i] * q0[i] + dt * k3.q[i]);
        }
        let k4 = self.tendency(&za, &qa);
        for i in 0..len {
            let (e, e2) = (ez[i], ez[i] * ez[i]);
            za[i] = e2 * z0[i] + dt / 6.0 * (e2 * k1.zeta[i] + 2.0 * e * (k2.zeta[i] + k3.zeta[i]) + k4.zeta[i]);
            let (e, e2) = (eq[i], eq[i] * eq[i]);
            qa[i] = e2 * q0[i] + dt / 6.0 * (e2 * k1.q[i] + 2.0 * e * (k2.q[i] + k3.q[i]) + k4.q[i]);
        }
        if let Some(ring) = &self.ring {
            ring.add_increment(&mut za, dt, rng);
        }
        self.dealias(&mut za);
        self.dealias(&mut qa);
        za[0] = ZERO;

        state.steps += 1;
        if za.iter().chain(&qa).any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::BlowUp { step: state.steps });
        }
        state.zeta_hat = za;
        state.q_periodic_hat = qa;
        state.t_sim += dt;
        Ok(())
    }
}

/// Single step under `params`; builds the operators on every call, so prefer
/// [`Solver::step`] in loops.
pub fn step<R: Rng + ?Sized>(state: &SimState, params: &SimParams, rng: &mut R) -> Result<SimState> {
    let solver = Solver::new(params)?;
    if state.zeta_hat.len() != params.n_grid * params.n_grid {
        return Err(Error::Shape(format!("state is not {0}x{0}", params.n_grid)));
    }
    let mut next = state.clone();
    solver.step(&mut next, rng)?;
    Ok(next)
}
