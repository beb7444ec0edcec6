//! Building blocks with hand-written backward passes. Parameters live in one
//! flat buffer; layers hold offsets into it and accumulate gradients into a
//! buffer of the same layout.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One sample's activations, `[channel][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor shape");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor::new(self.c + other.c, self.h, self.w, data)
    }

    /// Splits channels `[0, c)` and `[c, ..)`.
    pub fn split(self, c: usize) -> (Tensor, Tensor) {
        let p = self.plane();
        let mut a = self.data;
        let b = a.split_off(c * p);
        (Tensor::new(c, self.h, self.w, a), Tensor::new(self.c - c, self.h, self.w, b))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = A B + beta C` for row-major operands; `ta`/`tb` read A/B transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides describe row-major or transposed row-major layouts of them.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

/// Named parameter tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Collects parameter tensors while a network is being laid out.
pub struct ParamBuilder<'a, R: Rng> {
    pub specs: Vec<ParamSpec>,
    pub data: Vec<f64>,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { specs: Vec::new(), data: Vec::new(), rng }
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat_n(0.0, len)),
            Init::Ones => self.data.extend(std::iter::repeat_n(1.0, len)),
            Init::FanIn(fan_in) => {
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
                for _ in 0..len {
                    self.data.push(normal.sample(self.rng));
                }
            }
        }
        self.specs.push(ParamSpec { name, shape, offset });
        offset
    }
}

/// 3x3 convolution with padding 1 and stride 1 or 2.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
    w: usize,
    b: usize,
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, cin: usize, cout: usize, stride: usize, padding: Padding, zero: bool) -> Self {
        let init = if zero { Init::Zeros } else { Init::FanIn(cin * 9) };
        let w = pb.add(format!("{name}.weight"), vec![cout, cin, 3, 3], init);
        let b = pb.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        Self { cin, cout, stride, padding, w, b }
    }

    fn out_dim(&self, d: usize) -> usize {
        (d - 1) / self.stride + 1
    }

    fn source(&self, o: usize, k: usize, d: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - 1;
        if i >= 0 && (i as usize) < d {
            Some(i as usize)
        } else {
            match self.padding {
                Padding::Zero => None,
                Padding::Circular => Some(i.rem_euclid(d as isize) as usize),
            }
        }
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (ho, wo) = (self.out_dim(x.h), self.out_dim(x.w));
        let p = ho * wo;
        let mut cols = vec![0.0; self.cin * 9 * p];
        for c in 0..self.cin {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let Some(iy) = self.source(oy, ky, x.h) else { continue };
                        for ox in 0..wo {
                            if let Some(ix) = self.source(ox, kx, x.w) {
                                row[oy * wo + ox] = plane[iy * x.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], shape: (usize, usize, usize)) -> Tensor {
        let (c_in, h, w) = shape;
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        let p = ho * wo;
        let mut dx = Tensor::zeros(c_in, h, w);
        for c in 0..c_in {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcols[((c * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let Some(iy) = self.source(oy, ky, h) else { continue };
                        for ox in 0..wo {
                            if let Some(ix) = self.source(ox, kx, w) {
                                plane[iy * w + ix] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = (self.out_dim(x.h), self.out_dim(x.w));
        let np = ho * wo;
        let cols = self.im2col(x);
        let mut out = vec![0.0; self.cout * np];
        for (o, row) in out.chunks_mut(np).enumerate() {
            row.fill(p[self.b + o]);
        }
        gemm(self.cout, self.cin * 9, np, &p[self.w..], false, &cols, false, 1.0, &mut out);
        (Tensor::new(self.cout, ho, wo, out), ConvCache { cols, in_shape: (x.c, x.h, x.w) })
    }

    pub fn backward(&self, p: &[f64], cache: &ConvCache, dy: &Tensor, grad: &mut [f64]) -> Tensor {
        let np = dy.plane();
        let k = self.cin * 9;
        gemm(self.cout, np, k, &dy.data, false, &cache.cols, true, 1.0, &mut grad[self.w..self.w + self.cout * k]);
        for (o, row) in dy.data.chunks(np).enumerate() {
            grad[self.b + o] += row.iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; k * np];
        gemm(k, self.cout, np, &p[self.w..], true, &dy.data, false, 0.0, &mut dcols);
        self.col2im(&dcols, cache.in_shape)
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub din: usize,
    pub dout: usize,
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, din: usize, dout: usize, zero: bool) -> Self {
        let init = if zero { Init::Zeros } else { Init::FanIn(din) };
        let w = pb.add(format!("{name}.weight"), vec![dout, din], init);
        let b = pb.add(format!("{name}.bias"), vec![dout], Init::Zeros);
        Self { din, dout, w, b }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.din, "dense input size");
        (0..self.dout)
            .map(|o| {
                let row = &p[self.w + o * self.din..][..self.din];
                p[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.din];
        for (o, &g) in dy.iter().enumerate() {
            grad[self.b + o] += g;
            let row = &p[self.w + o * self.din..][..self.din];
            let grow = &mut grad[self.w + o * self.din..][..self.din];
            for i in 0..self.din {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: usize,
    beta: usize,
}

pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "groups must divide channels");
        let gamma = pb.add(format!("{name}.gamma"), vec![channels], Init::Ones);
        let beta = pb.add(format!("{name}.beta"), vec![channels], Init::Zeros);
        Self { channels, groups, gamma, beta }
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> (Tensor, NormCache) {
        let plane = x.plane();
        let cg = self.channels / self.groups;
        let m = (cg * plane) as f64;
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; self.groups];
        let mut out = vec![0.0; x.data.len()];
        for g in 0..self.groups {
            let range = g * cg * plane..(g + 1) * cg * plane;
            let seg = &x.data[range.clone()];
            let mean = seg.iter().sum::<f64>() / m;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            inv_std[g] = inv;
            for (i, &v) in seg.iter().enumerate() {
                let idx = range.start + i;
                let c = idx / plane;
                let xh = (v - mean) * inv;
                xhat[idx] = xh;
                out[idx] = p[self.gamma + c] * xh + p[self.beta + c];
            }
        }
        (Tensor::new(x.c, x.h, x.w, out), NormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &NormCache, dy: &Tensor, grad: &mut [f64]) -> Tensor {
        let plane = dy.plane();
        let cg = self.channels / self.groups;
        let m = (cg * plane) as f64;
        let mut dx = vec![0.0; dy.data.len()];
        for c in 0..self.channels {
            let r = c * plane..(c + 1) * plane;
            grad[self.beta + c] += dy.data[r.clone()].iter().sum::<f64>();
            grad[self.gamma + c] += dy.data[r.clone()].iter().zip(&cache.xhat[r]).map(|(a, b)| a * b).sum::<f64>();
        }
        for g in 0..self.groups {
            let range = g * cg * plane..(g + 1) * cg * plane;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for idx in range.clone() {
                let d = dy.data[idx] * p[self.gamma + idx / plane];
                sum_d += d;
                sum_dx += d * cache.xhat[idx];
            }
            let inv = cache.inv_std[g];
            for idx in range {
                let d = dy.data[idx] * p[self.gamma + idx / plane];
                dx[idx] = inv / m * (m * d - sum_d - cache.xhat[idx] * sum_dx);
            }
        }
        Tensor::new(dy.c, dy.h, dy.w, dx)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn swish_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub fn swish_t(x: &Tensor) -> Tensor {
    Tensor::new(x.c, x.h, x.w, swish(&x.data))
}

pub fn swish_t_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::new(x.c, x.h, x.w, swish_backward(&x.data, &dy.data))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[(c * h + y / 2) * w + xx / 2] += dy.data[(c * dy.h + y) * dy.w + xx];
            }
        }
    }
    dx
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let p = x.plane();
    for (c, b) in bias.iter().enumerate() {
        x.data[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += b);
    }
}

pub fn channel_sums(dy: &Tensor) -> Vec<f64> {
    dy.data.chunks(dy.plane()).map(|c| c.iter().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks `backward` against central differences of `sum(y * r)`.
    fn check_layer<F>(params: &mut [f64], x: &Tensor, f: F, backward: impl Fn(&[f64], &Tensor, &mut [f64]) -> Tensor)
    where
        F: Fn(&[f64], &Tensor) -> Tensor,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = f(params, x);
        let r = rand_tensor(y.c, y.h, y.w, &mut rng);
        let obj = |p: &[f64], x: &Tensor| f(p, x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = vec![0.0; params.len()];
        let dx = backward(params, &r, &mut grad);
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = obj(params, x);
            params[i] = orig - h;
            let down = obj(params, x);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = obj(params, &xp);
            xp.data[i] -= 2.0 * h;
            let down = obj(params, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        for (stride, padding) in [(1, Padding::Zero), (2, Padding::Zero), (1, Padding::Circular), (2, Padding::Circular)] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut pb = ParamBuilder::new(&mut rng);
            let conv = Conv2d::new(&mut pb, "c", 2, 3, stride, padding, false);
            let mut params = pb.data;
            params.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * i as f64);
            let x = rand_tensor(2, 4, 4, &mut rng);
            check_layer(&mut params, &x, |p, x| conv.forward(p, x).0, |p, dy, g| {
                let (_, cache) = conv.forward(p, &x);
                conv.backward(p, &cache, dy, g)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pb = ParamBuilder::new(&mut rng);
        let conv = Conv2d::new(&mut pb, "c", 1, 1, 1, Padding::Zero, false);
        let p = pb.data;
        let x = rand_tensor(1, 5, 5, &mut rng);
        let (y, _) = conv.forward(&p, &x);
        for oy in 0..5 {
            for ox in 0..5 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            acc += p[ky * 3 + kx] * x.data[iy as usize * 5 + ix as usize];
                        }
                    }
                }
                assert!((y.data[oy * 5 + ox] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut rng);
        let gn = GroupNorm::new(&mut pb, "gn", 4, 2);
        let mut params = pb.data;
        params.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f64);
        let x = rand_tensor(4, 3, 3, &mut rng);
        check_layer(&mut params, &x, |p, x| gn.forward(p, x).0, |p, dy, g| {
            let (_, cache) = gn.forward(p, &x);
            gn.backward(p, &cache, dy, g)
        });

        let mut pb = ParamBuilder::new(&mut rng);
        let dense = Dense::new(&mut pb, "d", 5, 3, false);
        let mut params = pb.data;
        let x = rand_tensor(5, 1, 1, &mut rng);
        check_layer(
            &mut params,
            &x,
            |p, x| Tensor::new(3, 1, 1, dense.forward(p, &x.data)),
            |p, dy, g| Tensor::new(5, 1, 1, dense.backward(p, &x.data, &dy.data, g)),
        );
    }

    #[test]
    fn swish_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(2, 2, 2, &mut rng);
        let mut none: Vec<f64> = Vec::new();
        check_layer(&mut none, &x, |_, x| swish_t(x), |_, dy, _| swish_t_backward(&x, dy));
        check_layer(&mut none, &x, |_, x| upsample2(x), |_, dy, _| upsample2_backward(dy));
    }
}
