//! Doubly periodic pseudospectral model of forced 2D vorticity advecting a
//! condensing supersaturation tracer.

mod run;
mod solver;

pub use run::{run_simulation, run_with_diagnostics, EnergySample, SimOutput};
pub use solver::{ring_forcing_sample, step, ForcingRing, SimState, Solver};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fields::{Field, GridSpec};

pub const VORTICITY: &str = "vorticity";
pub const SUPERSATURATION: &str = "supersaturation";
/// Context channel holding the modulated part of the saturation field.
pub const CONTEXT: &str = "context";

/// Model and run parameters. Defaults are the desk-scale low-resolution run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub n_grid: usize,
    pub domain_length: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_spinup: usize,
    pub snapshot_stride: usize,
    /// Linear drag `a`.
    pub drag: f64,
    /// Coefficient of the `-kappa Laplacian^8` term.
    pub hyperdiffusivity: f64,
    pub gamma: f64,
    pub evaporation: f64,
    pub tau: f64,
    pub forcing_wavenumber: f64,
    pub forcing_bandwidth: f64,
    pub energy_input: f64,
    pub modulation_amplitude: f64,
    pub modulation_wavenumber: u32,
    pub rng_seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            n_grid: 64,
            domain_length: 2.0 * PI,
            dt: 1e-3,
            n_steps: 40_000,
            n_spinup: 20_000,
            snapshot_stride: 10,
            drag: 1e-2,
            hyperdiffusivity: 1e-8,
            gamma: 1.0,
            evaporation: 1.0,
            tau: 1e-2,
            forcing_wavenumber: 3.0,
            forcing_bandwidth: 2.0,
            energy_input: 0.1,
            modulation_amplitude: 0.0,
            modulation_wavenumber: 1,
            rng_seed: 0,
        }
    }
}

/// Names accepted by [`SimParams::subset`].
pub const SUBSETS: [&str; 6] = ["low-res", "high-res-1", "high-res-2", "high-res-4", "high-res-8", "high-res-16"];

impl SimParams {
    /// Desk-scale parameters for a named subset: `low-res` on 64^2 without
    /// modulation, `high-res-<k>` on 128^2 with unit modulation at wavenumber k.
    pub fn subset(name: &str) -> Result<Self> {
        if name == "low-res" {
            return Ok(Self::default());
        }
        let k: u32 = name
            .strip_prefix("high-res-")
            .and_then(|k| k.parse().ok())
            .filter(|k| [1, 2, 4, 8, 16].contains(k))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown subset {name:?}; expected one of {SUBSETS:?}")))?;
        Ok(Self {
            n_grid: 128,
            hyperdiffusivity: 1e-16,
            modulation_amplitude: 1.0,
            modulation_wavenumber: k,
            ..Self::default()
        })
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.domain_length, self.n_grid)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if grid.n_grid < 4 {
            return Err(Error::InvalidGrid("simulation needs N >= 4".into()));
        }
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.hyperdiffusivity >= 0.0) || !(self.drag >= 0.0) {
            return bad("drag and hyperdiffusivity must be non-negative");
        }
        if !(self.forcing_bandwidth > 0.0) || !(self.forcing_wavenumber > 0.0) {
            return bad("forcing wavenumber and bandwidth must be positive");
        }
        if !(self.energy_input >= 0.0) {
            return bad("energy input must be non-negative");
        }
        if self.n_spinup >= self.n_steps {
            return bad("n_spinup must be below n_steps");
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be >= 1");
        }
        Ok(())
    }

    /// Canonical `key=value` lines, one per field, in declaration order.
    pub fn to_kv_string(&self) -> String {
        let table = toml::Table::try_from(self).expect("SimParams serializes to a table");
        let mut out = String::new();
        // toml::Table is ordered by key, which keeps the text canonical.
        for (k, v) in &table {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Hex SHA-256 of [`SimParams::to_kv_string`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }
}

/// `q_s = gamma y + A sin(2 pi k x / L) sin(2 pi k y / L)` at grid points.
pub fn saturation_field(grid: &GridSpec, gamma: f64, amplitude: f64, k_xy: u32) -> Field {
    let coords = grid.coords();
    let l = grid.domain_length;
    let w = 2.0 * PI * k_xy as f64 / l;
    Field::from_fn(grid.n_grid, &["q_s"], 1, |_, _, x, y| {
        gamma * coords[y] + amplitude * (w * coords[x]).sin() * (w * coords[y]).sin()
    })
    .expect("valid grid")
}

/// The modulated part `A sin sin` of the saturation field.
pub(crate) fn modulation_grid(grid: &GridSpec, amplitude: f64, k_xy: u32) -> Vec<f64> {
    saturation_field(grid, 0.0, amplitude, k_xy).into_data()
}

/// `c = (q - q_s) / tau` where `q > q_s`, else 0.
#[inline]
pub fn condensation(excess: f64, tau: f64) -> f64 {
    if excess > 0.0 {
        excess / tau
    } else {
        0.0
    }
}

/// Pointwise condensation rate of `q` against `q_s`; both single-channel.
/// `q_s` may hold one sample shared by every sample of `q`.
pub fn condensation_rate(q: &Field, q_s: &Field, tau: f64) -> Result<Field> {
    if q.n() != q_s.n() || q.n_channels() != 1 || q_s.n_channels() != 1 {
        return Err(Error::Shape("condensation_rate needs single-channel fields on one grid".into()));
    }
    if q_s.samples() != 1 && q_s.samples() != q.samples() {
        return Err(Error::Shape(format!("{} saturation samples for {} tracer samples", q_s.samples(), q.samples())));
    }
    let mut out = Field::zeros(q.n(), &["condensation"], q.samples())?;
    for s in 0..q.samples() {
        let qs = q_s.grid(if q_s.samples() == 1 { 0 } else { s }, 0);
        for ((o, &qv), &sv) in out.grid_mut(s, 0).iter_mut().zip(q.grid(s, 0)).zip(qs) {
            *o = condensation(qv - sv, tau);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturation_examples() {
        let g = GridSpec::periodic(64).unwrap();
        let f = saturation_field(&g, 1.0, 0.0, 3);
        let ys = g.coords();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(f.grid(0, 0)[y * 64 + x], ys[y]);
            }
        }
        let g8 = GridSpec::periodic(8).unwrap();
        let f = saturation_field(&g8, 0.0, 1.0, 1);
        assert!((f.grid(0, 0)[2 * 8 + 2] - 1.0).abs() < 1e-15);

        let f = saturation_field(&g, 1.0, 1.0, 4);
        let dx = 2.0 * PI / 64.0;
        for y in 0..64 {
            for x in 0..64 {
                let (xv, yv) = (x as f64 * dx, y as f64 * dx);
                let v = yv + (4.0 * xv).sin() * (4.0 * yv).sin();
                assert!((f.grid(0, 0)[y * 64 + x] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn condensation_examples() {
        let qs = Field::from_fn(4, &["q_s"], 1, |_, _, x, y| (x + y) as f64).unwrap();
        let c = condensation_rate(&qs, &qs, 1e-2).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let q = qs.axpby(1.0, &Field::from_fn(4, &["q_s"], 1, |_, _, _, _| 0.2).unwrap(), 1.0).unwrap();
        let c = condensation_rate(&q, &qs, 1e-2).unwrap();
        assert!(c.data().iter().all(|&v| (v - 20.0).abs() < 1e-9));
        let mixed = Field::from_fn(4, &["q"], 2, |s, _, x, y| (x as f64 - 1.5) * (y as f64 - s as f64)).unwrap();
        let zero = Field::zeros(4, &["q_s"], 1).unwrap();
        let c = condensation_rate(&mixed, &zero, 0.5).unwrap();
        for (cv, qv) in c.data().iter().zip(mixed.data()) {
            assert!(*cv >= 0.0);
            if *qv <= 0.0 {
                assert_eq!(*cv, 0.0);
            }
        }
    }

    #[test]
    fn subsets_and_digest() {
        assert_eq!(SimParams::subset("low-res").unwrap().n_grid, 64);
        let h = SimParams::subset("high-res-4").unwrap();
        assert_eq!((h.n_grid, h.modulation_wavenumber, h.modulation_amplitude), (128, 4, 1.0));
        assert!(SimParams::subset("high-res-3").is_err());
        assert!(SimParams::subset("mid-res").is_err());
        let a = SimParams::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.rng_seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert!(a.to_kv_string().contains("dt=0.001\n"));
    }
}
