use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fluid::SimParams;
use crate::score::UNetConfig;
use crate::sde::{NoiseSchedule, DEFAULT_T_END};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    /// Coarse-to-fine factor used by `prepare`.
    pub upsample_factor: usize,
    /// Downscale only the first `samples` source snapshots.
    pub samples: Option<usize>,
    /// Fixed step count; otherwise pro-rated from 500 steps over `[t_end, 1]`.
    pub n_steps: Option<usize>,
    pub t_end: f64,
    /// Replaces the switchover time derived from the spectra.
    pub t_star: Option<f64>,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self { upsample_factor: 2, samples: None, n_steps: None, t_end: DEFAULT_T_END, t_star: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_boot: usize,
    pub ci: f64,
    pub n_random_pairs: usize,
    /// Low-pass cutoff for the L2 metric; falls back to the bridge cache.
    pub k_star: Option<f64>,
    /// Percentile of high-res positive condensation rates marking the tail.
    pub tail_percentile: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_boot: 10_000, ci: 0.99, n_random_pairs: 1000, k_star: None, tail_percentile: 90.0 }
    }
}

/// Everything a pipeline run reads from its config file.
///
/// `[sim]` holds overrides applied on top of the subset preset chosen on
/// the command line, so it is kept as a raw table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sim: toml::Table,
    pub schedule: NoiseSchedule,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub bridge: BridgeSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_params("low-res")?;
        NoiseSchedule::new(self.schedule.sigma_min, self.schedule.sigma_max).map_err(config_error)?;
        self.train.validate().map_err(config_error)?;
        if self.bridge.upsample_factor < 1 {
            return Err(Error::Config("bridge.upsample_factor must be >= 1".into()));
        }
        if !(self.bridge.t_end > 0.0 && self.bridge.t_end < 1.0) {
            return Err(Error::Config("bridge.t_end must lie in (0, 1)".into()));
        }
        if let Some(t) = self.bridge.t_star {
            if !(t > self.bridge.t_end && t <= 1.0) {
                return Err(Error::Config(format!("bridge.t_star {t} outside (t_end, 1]")));
            }
        }
        if self.bridge.n_steps == Some(0) || self.bridge.samples == Some(0) {
            return Err(Error::Config("bridge.n_steps and bridge.samples must be >= 1".into()));
        }
        if self.eval.n_boot == 0 || !(self.eval.ci > 0.0 && self.eval.ci < 1.0) || self.eval.n_random_pairs == 0 {
            return Err(Error::Config("eval needs n_boot >= 1, 0 < ci < 1 and n_random_pairs >= 1".into()));
        }
        if !(self.eval.tail_percentile > 0.0 && self.eval.tail_percentile < 100.0) {
            return Err(Error::Config("eval.tail_percentile must lie in (0, 100)".into()));
        }
        Ok(())
    }

    /// Subset preset with the `[sim]` overrides applied.
    pub fn sim_params(&self, subset: &str) -> Result<SimParams> {
        let preset = SimParams::subset(subset)?;
        let mut table = toml::Table::try_from(&preset).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in &self.sim {
            table.insert(k.clone(), v.clone());
        }
        let params: SimParams = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[sim]: {e}")))?;
        params.validate().map_err(config_error)?;
        Ok(params)
    }

    pub fn sim_seed_explicit(&self) -> bool {
        self.sim.contains_key("rng_seed")
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.sim_params("low-res").unwrap(), SimParams::default());
    }

    #[test]
    fn round_trips() {
        let text = r#"
seed = 7
[sim]
n_grid = 32
n_steps = 300
n_spinup = 100
[schedule]
sigma_max = 5.0
[unet]
base_channels = 8
padding = "circular"
[train]
epochs = 3
[bridge]
t_star = 0.4
[eval]
k_star = 6.0
"#;
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.sigma_max, 5.0);
        assert_eq!(cfg.bridge.t_star, Some(0.4));
        let again = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        let hr = cfg.sim_params("high-res-4").unwrap();
        assert_eq!((hr.n_grid, hr.modulation_wavenumber, hr.n_steps), (32, 4, 300));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["bogus = 1", "[train]\nlr = 1.0", "[sim]\nviscosity = 2.0", "[schedule]\nsigma = 1.0", "[extra]\na = 1"] {
            assert!(matches!(PipelineConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in ["[schedule]\nsigma_min = 20.0", "[bridge]\nt_star = 1.5", "[train]\nwarmup_steps = 0", "[sim]\nn_grid = 48"] {
            assert!(matches!(PipelineConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
