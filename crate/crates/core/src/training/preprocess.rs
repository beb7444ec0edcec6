use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{is_context_channel, Field};

/// Fitted `[min, max]` of one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn fit(values: impl Iterator<Item = f64>, channel: &str, component: &'static str) -> Result<Self> {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(max > min) {
            return Err(Error::ConstantComponent { channel: channel.to_string(), component });
        }
        Ok(Self { min, max })
    }

    fn forward(&self, v: f64) -> f64 {
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    fn inverse(&self, v: f64) -> f64 {
        (v + 1.0) * (self.max - self.min) / 2.0 + self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelScaling {
    /// Spatial mean and deviations from it scaled independently.
    Split { channel: String, mean: Range, deviation: Range },
    /// One affine map of pixel values.
    Plain { channel: String, range: Range },
}

impl ChannelScaling {
    fn channel(&self) -> &str {
        match self {
            ChannelScaling::Split { channel, .. } | ChannelScaling::Plain { channel, .. } => channel,
        }
    }
}

/// Per-channel minmax scaling into `[-1, 1]`, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub channels: Vec<ChannelScaling>,
}

fn grid_mean(g: &[f64]) -> f64 {
    crate::fields::mean(g)
}

impl Preprocessor {
    /// Noised channels get the split scaling, context channels the plain one.
    pub fn fit(data: &Field) -> Result<Self> {
        if data.samples() == 0 {
            return Err(Error::EmptySet);
        }
        let mut channels = Vec::new();
        for (c, name) in data.channels().iter().enumerate() {
            let grids = (0..data.samples()).map(|s| data.grid(s, c));
            if is_context_channel(name) {
                let range = Range::fit(grids.flat_map(|g| g.iter().copied()), name, "pixel values")?;
                channels.push(ChannelScaling::Plain { channel: name.clone(), range });
            } else {
                let means: Vec<f64> = grids.clone().map(grid_mean).collect();
                let mean = Range::fit(means.iter().copied(), name, "spatial mean")?;
                let deviation = Range::fit(
                    grids.zip(&means).flat_map(|(g, &m)| g.iter().map(move |v| v - m)),
                    name,
                    "deviation",
                )?;
                channels.push(ChannelScaling::Split { channel: name.clone(), mean, deviation });
            }
        }
        Ok(Self { channels })
    }

    fn apply(&self, data: &Field, inverse: bool) -> Result<Field> {
        let mut out = data.clone();
        for scaling in &self.channels {
            let c = data.channel_index(scaling.channel())?;
            for s in 0..data.samples() {
                let grid = out.grid_mut(s, c);
                match scaling {
                    ChannelScaling::Plain { range, .. } => {
                        for v in grid.iter_mut() {
                            *v = if inverse { range.inverse(*v) } else { range.forward(*v) };
                        }
                    }
                    ChannelScaling::Split { mean, deviation, .. } => {
                        // The deviation map is affine, so it shifts the spatial
                        // mean by `deviation.forward(0)`; undo that on the way back.
                        let shift = deviation.forward(0.0);
                        let m = grid_mean(grid);
                        let (new_mean, dev_map): (f64, Box<dyn Fn(f64) -> f64>) = if inverse {
                            let scaled_mean = m - shift;
                            (mean.inverse(scaled_mean), Box::new(move |d: f64| deviation.inverse(d + shift)))
                        } else {
                            (mean.forward(m) + shift, Box::new(move |d: f64| deviation.forward(d) - shift))
                        };
                        for v in grid.iter_mut() {
                            *v = new_mean + dev_map(*v - m);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn transform(&self, data: &Field) -> Result<Field> {
        self.apply(data, false)
    }

    pub fn inverse(&self, data: &Field) -> Result<Field> {
        self.apply(data, true)
    }

    /// Applies only the scalings of channels present in `data`.
    pub fn transform_present(&self, data: &Field) -> Result<Field> {
        self.restricted(data).transform(data)
    }

    pub fn inverse_present(&self, data: &Field) -> Result<Field> {
        self.restricted(data).inverse(data)
    }

    fn restricted(&self, data: &Field) -> Preprocessor {
        Preprocessor {
            channels: self.channels.iter().filter(|s| data.channel_index(s.channel()).is_ok()).cloned().collect(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}
