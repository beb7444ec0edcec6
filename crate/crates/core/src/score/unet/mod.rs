//! Convolutional U-net score model with a separate network for spatial means.
//!
//! The U branch sees the input with per-channel spatial means removed from
//! the noised channels (context channels enter raw); its output is re-centred
//! to zero mean. The bypass branch maps the per-channel means and the time
//! embedding to one value per output channel, which is added back.

mod checkpoint;
pub mod layers;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fields::{is_context_channel, Field};
use crate::score::ScoreModel;
use crate::sde::{Diffusion, NoiseSchedule};
use layers::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BypassKind {
    /// Three dense layers with normalization and swish; time enters before each norm.
    #[default]
    Mlp,
    /// A single affine map of the channel means, independent of time.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub res_blocks: usize,
    /// Group count at 32 channels; scaled in proportion to width.
    pub groups_at_32: usize,
    pub embed_dim: usize,
    pub fourier_scale: f64,
    pub dropout: f64,
    pub bypass_hidden: usize,
    pub bypass: BypassKind,
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            res_blocks: 8,
            groups_at_32: 4,
            embed_dim: 128,
            fourier_scale: 30.0,
            dropout: 0.5,
            bypass_hidden: 64,
            bypass: BypassKind::Mlp,
            padding: Padding::Zero,
        }
    }
}

impl UNetConfig {
    fn groups(&self, channels: usize) -> usize {
        let mut g = (channels * self.groups_at_32 / 32).max(1);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.embed_dim < 2 || self.embed_dim % 2 != 0 || self.bypass_hidden == 0 {
            return Err(Error::InvalidParameter("U-net widths must be positive and embed_dim even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

const LEVELS: usize = 3;

struct Stage {
    conv: Conv2d,
    temb: Dense,
    norm: GroupNorm,
}

struct StageCache {
    conv: ConvCache,
    norm: NormCache,
    normed: Tensor,
}

impl Stage {
    fn forward(&self, p: &[f64], x: &Tensor, e: &[f64]) -> (Tensor, StageCache) {
        let (mut h, conv) = self.conv.forward(p, x);
        add_channel_bias(&mut h, &self.temb.forward(p, e));
        let (normed, norm) = self.norm.forward(p, &h);
        (swish_t(&normed), StageCache { conv, norm, normed })
    }

    fn backward(&self, p: &[f64], c: &StageCache, dy: &Tensor, e: &[f64], de: &mut [f64], g: &mut [f64]) -> Tensor {
        let dn = swish_t_backward(&c.normed, dy);
        let dh = self.norm.backward(p, &c.norm, &dn, g);
        for (a, b) in de.iter_mut().zip(self.temb.backward(p, e, &channel_sums(&dh), g)) {
            *a += b;
        }
        self.conv.backward(p, &c.conv, &dh, g)
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Dense,
    norm2: GroupNorm,
    conv2: Conv2d,
}

struct ResCache {
    norm1: NormCache,
    normed1: Tensor,
    conv1: ConvCache,
    norm2: NormCache,
    normed2: Tensor,
    mask: Option<Vec<f64>>,
    conv2: ConvCache,
}

impl ResBlock {
    fn forward<R: Rng>(&self, p: &[f64], x: &Tensor, e: &[f64], dropout: f64, rng: Option<&mut R>) -> (Tensor, ResCache) {
        let (normed1, norm1) = self.norm1.forward(p, x);
        let (mut h, conv1) = self.conv1.forward(p, &swish_t(&normed1));
        add_channel_bias(&mut h, &self.temb.forward(p, e));
        let (normed2, norm2) = self.norm2.forward(p, &h);
        let mut a = swish_t(&normed2);
        let mask = rng.filter(|_| dropout > 0.0).map(|rng| {
            let keep = 1.0 / (1.0 - dropout);
            let m: Vec<f64> = (0..a.data.len()).map(|_| if rng.random::<f64>() < dropout { 0.0 } else { keep }).collect();
            a.data.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
            m
        });
        let (mut out, conv2) = self.conv2.forward(p, &a);
        out.add_assign(x);
        (out, ResCache { norm1, normed1, conv1, norm2, normed2, mask, conv2 })
    }

    fn backward(&self, p: &[f64], c: &ResCache, dy: &Tensor, e: &[f64], de: &mut [f64], g: &mut [f64]) -> Tensor {
        let mut da = self.conv2.backward(p, &c.conv2, dy, g);
        if let Some(mask) = &c.mask {
            da.data.iter_mut().zip(mask).for_each(|(v, k)| *v *= k);
        }
        let dn2 = swish_t_backward(&c.normed2, &da);
        let dh = self.norm2.backward(p, &c.norm2, &dn2, g);
        for (a, b) in de.iter_mut().zip(self.temb.backward(p, e, &channel_sums(&dh), g)) {
            *a += b;
        }
        let da1 = self.conv1.backward(p, &c.conv1, &dh, g);
        let dn1 = swish_t_backward(&c.normed1, &da1);
        let mut dx = self.norm1.backward(p, &c.norm1, &dn1, g);
        dx.add_assign(dy);
        dx
    }
}

enum Bypass {
    Mlp { l1: Dense, t1: Dense, n1: GroupNorm, l2: Dense, t2: Dense, n2: GroupNorm, l3: Dense },
    Linear { l: Dense },
}

struct MlpCache {
    n1: NormCache,
    normed1: Tensor,
    a1: Vec<f64>,
    n2: NormCache,
    normed2: Tensor,
    a2: Vec<f64>,
}

impl Bypass {
    fn forward(&self, p: &[f64], means: &[f64], e: &[f64]) -> (Vec<f64>, Option<MlpCache>) {
        match self {
            Bypass::Linear { l } => (l.forward(p, means), None),
            Bypass::Mlp { l1, t1, n1, l2, t2, n2, l3 } => {
                let h = l1.dout;
                let mut z1 = l1.forward(p, means);
                z1.iter_mut().zip(t1.forward(p, e)).for_each(|(a, b)| *a += b);
                let (normed1, c1) = n1.forward(p, &Tensor::new(h, 1, 1, z1));
                let a1 = swish(&normed1.data);
                let mut z2 = l2.forward(p, &a1);
                z2.iter_mut().zip(t2.forward(p, e)).for_each(|(a, b)| *a += b);
                let (normed2, c2) = n2.forward(p, &Tensor::new(h, 1, 1, z2));
                let a2 = swish(&normed2.data);
                let out = l3.forward(p, &a2);
                (out, Some(MlpCache { n1: c1, normed1, a1, n2: c2, normed2, a2 }))
            }
        }
    }

    fn backward(&self, p: &[f64], means: &[f64], e: &[f64], c: Option<&MlpCache>, dout: &[f64], de: &mut [f64], g: &mut [f64]) {
        match self {
            Bypass::Linear { l } => {
                l.backward(p, means, dout, g);
            }
            Bypass::Mlp { l1, t1, n1, l2, t2, n2, l3 } => {
                let c = c.expect("mlp cache");
                let h = l1.dout;
                let da2 = l3.backward(p, &c.a2, dout, g);
                let dn2 = swish_backward(&c.normed2.data, &da2);
                let dz2 = n2.backward(p, &c.n2, &Tensor::new(h, 1, 1, dn2), g);
                for (a, b) in de.iter_mut().zip(t2.backward(p, e, &dz2.data, g)) {
                    *a += b;
                }
                let da1 = l2.backward(p, &c.a1, &dz2.data, g);
                let dn1 = swish_backward(&c.normed1.data, &da1);
                let dz1 = n1.backward(p, &c.n1, &Tensor::new(h, 1, 1, dn1), g);
                for (a, b) in de.iter_mut().zip(t1.backward(p, e, &dz1.data, g)) {
                    *a += b;
                }
                l1.backward(p, means, &dz1.data, g);
            }
        }
    }
}

/// Layer layout of the network; parameters are held by [`UNetScore`].
struct Net {
    c_noised: usize,
    c_in: usize,
    embed: Dense,
    lift: Conv2d,
    down: Vec<Stage>,
    res: Vec<ResBlock>,
    up: Vec<Stage>,
    out: Conv2d,
    bypass: Bypass,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    means: Vec<f64>,
    raw_embed: Vec<f64>,
    embed_pre: Vec<f64>,
    e: Vec<f64>,
    lift: ConvCache,
    down: Vec<StageCache>,
    res: Vec<ResCache>,
    up: Vec<StageCache>,
    out: ConvCache,
    bypass: Option<MlpCache>,
    skip_channels: Vec<usize>,
}

/// Network output split into its two branches: `f = centred + bypass`.
#[derive(Debug, Clone)]
pub struct ForwardParts {
    pub centred: Tensor,
    pub bypass: Vec<f64>,
}

impl ForwardParts {
    pub fn combined(&self) -> Tensor {
        let mut f = self.centred.clone();
        add_channel_bias(&mut f, &self.bypass);
        f
    }
}

impl Net {
    fn build<R: Rng>(cfg: &UNetConfig, c_noised: usize, c_in: usize, pb: &mut ParamBuilder<R>) -> Self {
        let e = cfg.embed_dim;
        let ch: Vec<usize> = (0..=LEVELS).map(|i| cfg.base_channels << i).collect();
        let embed = Dense::new(pb, "time_embedding.dense", e, e, false);
        let lift = Conv2d::new(pb, "lift", c_in, ch[0], 1, cfg.padding, false);
        let down = (1..=LEVELS)
            .map(|i| Stage {
                conv: Conv2d::new(pb, &format!("down{i}.conv"), ch[i - 1], ch[i], 2, cfg.padding, false),
                temb: Dense::new(pb, &format!("down{i}.time"), e, ch[i], false),
                norm: GroupNorm::new(pb, &format!("down{i}.norm"), ch[i], cfg.groups(ch[i])),
            })
            .collect();
        let cb = ch[LEVELS];
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock {
                norm1: GroupNorm::new(pb, &format!("res{i}.norm1"), cb, cfg.groups(cb)),
                conv1: Conv2d::new(pb, &format!("res{i}.conv1"), cb, cb, 1, cfg.padding, false),
                temb: Dense::new(pb, &format!("res{i}.time"), e, cb, false),
                norm2: GroupNorm::new(pb, &format!("res{i}.norm2"), cb, cfg.groups(cb)),
                conv2: Conv2d::new(pb, &format!("res{i}.conv2"), cb, cb, 1, cfg.padding, false),
            })
            .collect();
        let up = (1..=LEVELS)
            .rev()
            .map(|i| Stage {
                conv: Conv2d::new(pb, &format!("up{i}.conv"), ch[i] + ch[i - 1], ch[i - 1], 1, cfg.padding, false),
                temb: Dense::new(pb, &format!("up{i}.time"), e, ch[i - 1], false),
                norm: GroupNorm::new(pb, &format!("up{i}.norm"), ch[i - 1], cfg.groups(ch[i - 1])),
            })
            .collect();
        let out = Conv2d::new(pb, "out", ch[0], c_noised, 1, cfg.padding, true);
        let hdim = cfg.bypass_hidden;
        let bypass = match cfg.bypass {
            BypassKind::Linear => Bypass::Linear { l: Dense::new(pb, "bypass.linear", c_in, c_noised, false) },
            BypassKind::Mlp => Bypass::Mlp {
                l1: Dense::new(pb, "bypass.dense1", c_in, hdim, false),
                t1: Dense::new(pb, "bypass.time1", e, hdim, false),
                n1: GroupNorm::new(pb, "bypass.norm1", hdim, 1),
                l2: Dense::new(pb, "bypass.dense2", hdim, hdim, false),
                t2: Dense::new(pb, "bypass.time2", e, hdim, false),
                n2: GroupNorm::new(pb, "bypass.norm2", hdim, 1),
                l3: Dense::new(pb, "bypass.dense3", hdim, c_noised, false),
            },
        };
        Self { c_noised, c_in, embed, lift, down, res, up, out, bypass }
    }

    fn forward<R: Rng>(&self, p: &[f64], fourier: &[f64], dropout: f64, x: &Tensor, t: f64, mut rng: Option<&mut R>) -> (ForwardParts, ForwardCache) {
        let plane = x.plane();
        let means: Vec<f64> = x.data.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        let mut xu = x.clone();
        for c in 0..self.c_noised {
            xu.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v -= means[c]);
        }
        let mut raw_embed: Vec<f64> = fourier.iter().map(|w| (2.0 * PI * w * t).sin()).collect();
        raw_embed.extend(fourier.iter().map(|w| (2.0 * PI * w * t).cos()));
        let embed_pre = self.embed.forward(p, &raw_embed);
        let e = swish(&embed_pre);

        let (s0, lift) = self.lift.forward(p, &xu);
        let mut skips = vec![s0];
        let mut down = Vec::with_capacity(LEVELS);
        for stage in &self.down {
            let (h, c) = stage.forward(p, skips.last().expect("skip"), &e);
            skips.push(h);
            down.push(c);
        }
        let mut h = skips.pop().expect("bottom");
        let mut res = Vec::with_capacity(self.res.len());
        for block in &self.res {
            let (next, c) = block.forward(p, &h, &e, dropout, rng.as_deref_mut());
            h = next;
            res.push(c);
        }
        let mut up = Vec::with_capacity(LEVELS);
        let mut skip_channels = Vec::with_capacity(LEVELS);
        for stage in &self.up {
            let skip = skips.pop().expect("skip");
            skip_channels.push(skip.c);
            let (next, c) = stage.forward(p, &upsample2(&h).concat(&skip), &e);
            h = next;
            up.push(c);
        }
        let (mut centred, out) = self.out.forward(p, &h);
        let op = centred.plane();
        for chan in centred.data.chunks_mut(op) {
            let m = chan.iter().sum::<f64>() / op as f64;
            chan.iter_mut().for_each(|v| *v -= m);
        }
        let (bypass_out, bypass) = self.bypass.forward(p, &means, &e);
        let parts = ForwardParts { centred, bypass: bypass_out };
        (parts, ForwardCache { means, raw_embed, embed_pre, e, lift, down, res, up, out, bypass, skip_channels })
    }

    fn backward(&self, p: &[f64], cache: &ForwardCache, df: &Tensor, grad: &mut [f64]) {
        let e = &cache.e;
        let mut de = vec![0.0; e.len()];
        let dbypass = channel_sums(df);
        self.bypass.backward(p, &cache.means, e, cache.bypass.as_ref(), &dbypass, &mut de, grad);

        let plane = df.plane();
        let mut dout = df.clone();
        for chan in dout.data.chunks_mut(plane) {
            let m = chan.iter().sum::<f64>() / plane as f64;
            chan.iter_mut().for_each(|v| *v -= m);
        }
        let mut dh = self.out.backward(p, &cache.out, &dout, grad);
        let mut dskips = Vec::with_capacity(LEVELS);
        for ((stage, c), &skip_c) in self.up.iter().zip(&cache.up).zip(&cache.skip_channels).rev() {
            let dcat = stage.backward(p, c, &dh, e, &mut de, grad);
            let split_at = dcat.c - skip_c;
            let (du, dskip) = dcat.split(split_at);
            dskips.push(dskip);
            dh = upsample2_backward(&du);
        }
        // dskips now runs top (s0) to the deepest skip.
        for (block, c) in self.res.iter().zip(&cache.res).rev() {
            dh = block.backward(p, c, &dh, e, &mut de, grad);
        }
        for (i, (stage, c)) in self.down.iter().zip(&cache.down).enumerate().rev() {
            dh = stage.backward(p, c, &dh, e, &mut de, grad);
            dh.add_assign(&dskips[i]);
        }
        self.lift.backward(p, &cache.lift, &dh, grad);
        let dpre = swish_backward(&cache.embed_pre, &de);
        self.embed.backward(p, &cache.raw_embed, &dpre, grad);
    }
}

/// Trained or freshly initialised U-net score model.
pub struct UNetScore {
    config: UNetConfig,
    schedule: NoiseSchedule,
    n_grid: usize,
    noised: Vec<String>,
    context: Vec<String>,
    fourier: Vec<f64>,
    params: Vec<f64>,
    specs: Vec<ParamSpec>,
    net: Net,
}

impl UNetScore {
    /// Fresh model for `channels` (context channels recognised by name).
    pub fn new(config: UNetConfig, schedule: NoiseSchedule, n_grid: usize, channels: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        if n_grid < 8 || n_grid % 8 != 0 {
            return Err(Error::InvalidGrid(format!("U-net needs N divisible by 8, got {n_grid}")));
        }
        let noised: Vec<String> = channels.iter().filter(|c| !is_context_channel(c)).cloned().collect();
        let context: Vec<String> = channels.iter().filter(|c| is_context_channel(c)).cloned().collect();
        if noised.is_empty() {
            return Err(Error::InvalidParameter("model needs at least one noised channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.fourier_scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let fourier: Vec<f64> = (0..config.embed_dim / 2).map(|_| normal.sample(&mut rng)).collect();
        let mut pb = ParamBuilder::new(&mut rng);
        let net = Net::build(&config, noised.len(), noised.len() + context.len(), &mut pb);
        let ParamBuilder { specs, data, .. } = pb;
        Ok(Self { config, schedule, n_grid, noised, context, fourier, params: data, specs, net })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn set_dropout(&mut self, dropout: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout = dropout;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn fourier_weights(&self) -> &[f64] {
        &self.fourier
    }

    /// Channels in network input order: noised, then context.
    pub fn input_channels(&self) -> Vec<String> {
        self.noised.iter().chain(&self.context).cloned().collect()
    }

    /// Gathers one sample of `x` in network input order.
    pub fn input_tensor(&self, x: &Field, sample: usize) -> Result<Tensor> {
        if x.n() != self.n_grid {
            return Err(Error::Shape(format!("model built for N = {}, field has N = {}", self.n_grid, x.n())));
        }
        let mut data = Vec::with_capacity(self.net.c_in * x.n() * x.n());
        for name in self.noised.iter().chain(&self.context) {
            data.extend_from_slice(x.grid(sample, x.channel_index(name)?));
        }
        Ok(Tensor::new(self.net.c_in, x.n(), x.n(), data))
    }

    /// Network output `f` split into branches, dropout off.
    pub fn forward_parts(&self, x: &Tensor, t: f64) -> ForwardParts {
        self.net.forward::<ChaCha8Rng>(&self.params, &self.fourier, self.config.dropout, x, t, None).0
    }

    /// Forward pass with dropout drawn from `dropout_rng` when given.
    pub fn forward_train(&self, x: &Tensor, t: f64, dropout_rng: Option<&mut ChaCha8Rng>) -> (Tensor, ForwardCache) {
        let (parts, cache) = self.net.forward(&self.params, &self.fourier, self.config.dropout, x, t, dropout_rng);
        (parts.combined(), cache)
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(f)`.
    pub fn backward(&self, cache: &ForwardCache, df: &Tensor, grad: &mut [f64]) {
        self.net.backward(&self.params, cache, df, grad);
    }

    pub(crate) fn from_parts(
        config: UNetConfig,
        schedule: NoiseSchedule,
        n_grid: usize,
        channels: &[String],
        fourier: Vec<f64>,
        named: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, schedule, n_grid, channels, 0)?;
        if fourier.len() != model.fourier.len() {
            return Err(Error::Checkpoint("time embedding size mismatch".into()));
        }
        model.fourier = fourier;
        if named.len() != model.specs.len() {
            return Err(Error::Checkpoint(format!("{} tensors stored, model has {}", named.len(), model.specs.len())));
        }
        for (spec, (name, shape, values)) in model.specs.iter().zip(named) {
            if spec.name != name || spec.shape != shape {
                return Err(Error::Checkpoint(format!("tensor {name} {shape:?} does not match {} {:?}", spec.name, spec.shape)));
            }
            model.params[spec.offset..spec.offset + spec.len()].copy_from_slice(&values);
        }
        Ok(model)
    }
}

impl ScoreModel for UNetScore {
    fn noised_channels(&self) -> &[String] {
        &self.noised
    }

    fn context_channels(&self) -> &[String] {
        &self.context
    }

    fn evaluate(&self, x: &Field, t: &[f64]) -> Result<Field> {
        if t.len() != x.samples() {
            return Err(Error::Shape(format!("{} times for {} samples", t.len(), x.samples())));
        }
        let inputs: Vec<Tensor> = (0..x.samples()).map(|s| self.input_tensor(x, s)).collect::<Result<_>>()?;
        let outs: Vec<Vec<f64>> = inputs
            .par_iter()
            .zip(t.par_iter())
            .map(|(input, &ts)| {
                let sigma = self.schedule.sigma_at(ts);
                self.forward_parts(input, ts).combined().data.into_iter().map(|v| v / sigma).collect()
            })
            .collect();
        Field::new(self.n_grid, self.noised.clone(), x.samples(), outs.concat())
    }
}

#[cfg(test)]
mod tests;
