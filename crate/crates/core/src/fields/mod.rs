//! Grid fields, snapshot sets and their on-disk format.
//!
//! A [`Field`] is a batch of square, doubly periodic, multi-channel grids.
//! Values are stored as `f64` in `[sample][channel][y][x]` order.

pub(crate) mod snapshot;

pub use snapshot::{read_snapshot_set, write_snapshot_set, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use crate::error::{Error, Result};

/// Channel names with this prefix carry conditioning data and are never noised.
pub const CONTEXT_PREFIX: &str = "context";

pub fn is_context_channel(name: &str) -> bool {
    name.starts_with(CONTEXT_PREFIX)
}

/// Physical extent and resolution of a square periodic domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub domain_length: f64,
    pub n_grid: usize,
}

impl GridSpec {
    pub fn new(domain_length: f64, n_grid: usize) -> Result<Self> {
        if !(domain_length > 0.0 && domain_length.is_finite()) {
            return Err(Error::InvalidGrid(format!("domain length {domain_length} must be positive")));
        }
        check_n(n_grid)?;
        Ok(Self { domain_length, n_grid })
    }

    /// Default `2 pi` domain.
    pub fn periodic(n_grid: usize) -> Result<Self> {
        Self::new(2.0 * std::f64::consts::PI, n_grid)
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.n_grid as f64
    }

    /// Grid coordinates `0, dx, ..., L - dx`.
    pub fn coords(&self) -> Vec<f64> {
        (0..self.n_grid).map(|i| i as f64 * self.dx()).collect()
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::InvalidGrid(format!("N = {n} must be a power of two >= 2")));
    }
    Ok(())
}

/// A batch of `samples` grids of size `n x n` with named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n: usize,
    channels: Vec<String>,
    samples: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(n: usize, channels: Vec<String>, samples: usize, data: Vec<f64>) -> Result<Self> {
        check_n(n)?;
        if channels.is_empty() {
            return Err(Error::Shape("field needs at least one channel".into()));
        }
        for (i, c) in channels.iter().enumerate() {
            if channels[..i].contains(c) {
                return Err(Error::Shape(format!("duplicate channel name {c:?}")));
            }
        }
        let expected = samples * channels.len() * n * n;
        if data.len() != expected {
            return Err(Error::Shape(format!("data length {} != {expected}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { n, channels, samples, data })
    }

    pub fn zeros<S: AsRef<str>>(n: usize, channels: &[S], samples: usize) -> Result<Self> {
        let channels: Vec<String> = channels.iter().map(|c| c.as_ref().to_string()).collect();
        let len = samples * channels.len() * n * n;
        Self::new(n, channels, samples, vec![0.0; len])
    }

    /// Builds a field by evaluating `f(sample, channel, x, y)` at every pixel.
    pub fn from_fn<S, F>(n: usize, channels: &[S], samples: usize, mut f: F) -> Result<Self>
    where
        S: AsRef<str>,
        F: FnMut(usize, usize, usize, usize) -> f64,
    {
        let mut field = Self::zeros(n, channels, samples)?;
        let nc = field.n_channels();
        for s in 0..samples {
            for c in 0..nc {
                let grid = field.grid_mut(s, c);
                for y in 0..n {
                    for x in 0..n {
                        grid[y * n + x] = f(s, c, x, y);
                    }
                }
            }
        }
        Ok(field)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixels(&self) -> usize {
        self.n * self.n
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    /// Indices of channels that are diffused (everything except context).
    pub fn noised_channels(&self) -> Vec<usize> {
        (0..self.channels.len()).filter(|&c| !is_context_channel(&self.channels[c])).collect()
    }

    pub fn context_channels(&self) -> Vec<usize> {
        (0..self.channels.len()).filter(|&c| is_context_channel(&self.channels[c])).collect()
    }

    fn offset(&self, sample: usize, channel: usize) -> usize {
        assert!(sample < self.samples && channel < self.channels.len());
        (sample * self.channels.len() + channel) * self.pixels()
    }

    pub fn grid(&self, sample: usize, channel: usize) -> &[f64] {
        let o = self.offset(sample, channel);
        &self.data[o..o + self.pixels()]
    }

    pub fn grid_mut(&mut self, sample: usize, channel: usize) -> &mut [f64] {
        let o = self.offset(sample, channel);
        let p = self.pixels();
        &mut self.data[o..o + p]
    }

    /// All channels of one sample, contiguous.
    pub fn sample_data(&self, sample: usize) -> &[f64] {
        let len = self.channels.len() * self.pixels();
        &self.data[sample * len..(sample + 1) * len]
    }

    pub fn sample_data_mut(&mut self, sample: usize) -> &mut [f64] {
        let len = self.channels.len() * self.pixels();
        &mut self.data[sample * len..(sample + 1) * len]
    }

    /// Copies a subset of samples into a new field.
    pub fn select_samples(&self, indices: &[usize]) -> Field {
        let mut data = Vec::with_capacity(indices.len() * self.channels.len() * self.pixels());
        for &i in indices {
            data.extend_from_slice(self.sample_data(i));
        }
        Field { n: self.n, channels: self.channels.clone(), samples: indices.len(), data }
    }

    pub fn sample(&self, index: usize) -> Field {
        self.select_samples(&[index])
    }

    /// Copies the named channels (in the given order) into a new field.
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<Field> {
        let idx: Vec<usize> = names.iter().map(|n| self.channel_index(n.as_ref())).collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.samples * idx.len() * self.pixels());
        for s in 0..self.samples {
            for &c in &idx {
                data.extend_from_slice(self.grid(s, c));
            }
        }
        Field::new(self.n, names.iter().map(|n| n.as_ref().to_string()).collect(), self.samples, data)
    }

    /// Appends the channels of `other` sample-by-sample.
    pub fn concat_channels(&self, other: &Field) -> Result<Field> {
        if other.n != self.n || other.samples != self.samples {
            return Err(Error::Shape(format!(
                "cannot concatenate {}x{} ({} samples) with {}x{} ({} samples)",
                self.n, self.n, self.samples, other.n, other.n, other.samples
            )));
        }
        let mut channels = self.channels.clone();
        channels.extend(other.channels.iter().cloned());
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for s in 0..self.samples {
            data.extend_from_slice(self.sample_data(s));
            data.extend_from_slice(other.sample_data(s));
        }
        Field::new(self.n, channels, self.samples, data)
    }

    /// Stacks sample batches with identical layout.
    pub fn concat_samples(parts: &[Field]) -> Result<Field> {
        let first = parts.first().ok_or(Error::EmptySet)?;
        let mut data = Vec::new();
        let mut samples = 0;
        for p in parts {
            if p.n != first.n || p.channels != first.channels {
                return Err(Error::Shape("sample batches differ in grid size or channels".into()));
            }
            data.extend_from_slice(&p.data);
            samples += p.samples;
        }
        Ok(Field { n: first.n, channels: first.channels.clone(), samples, data })
    }

    pub fn rename_channels(mut self, names: Vec<String>) -> Result<Field> {
        if names.len() != self.channels.len() {
            return Err(Error::Shape("channel count mismatch in rename".into()));
        }
        self.channels = names;
        Field::new(self.n, self.channels, self.samples, self.data)
    }

    /// Arithmetic mean of one channel over its `N^2` pixels, per sample.
    pub fn channel_mean(&self, channel: &str) -> Result<Vec<f64>> {
        let c = self.channel_index(channel)?;
        Ok((0..self.samples).map(|s| mean(self.grid(s, c))).collect())
    }

    /// Returns `a * self + b * other` element-wise; layouts must agree.
    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        if other.n != self.n || other.samples != self.samples || other.channels != self.channels {
            return Err(Error::Shape("axpby operands differ in layout".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Field { n: self.n, channels: self.channels.clone(), samples: self.samples, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &Field) -> bool {
        self.n == other.n && self.channels == other.channels
    }
}

/// Mean with Neumaier-compensated summation.
pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

pub fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// A batch of simulation snapshots plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub samples: Field,
    pub subset_name: String,
    pub sim_params_digest: String,
    pub spinup_discarded: u64,
}

impl SnapshotSet {
    pub fn new(samples: Field, subset_name: impl Into<String>) -> Result<Self> {
        if samples.samples() == 0 {
            return Err(Error::EmptySet);
        }
        Ok(Self {
            samples,
            subset_name: subset_name.into(),
            sim_params_digest: String::new(),
            spinup_discarded: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.samples()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.samples() == 0
    }

    pub fn n(&self) -> usize {
        self.samples.n()
    }

    pub fn channels(&self) -> &[String] {
        self.samples.channels()
    }
}
