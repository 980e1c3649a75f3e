//! Layers with explicit forward/backward passes and inline gradient storage.

use ndarray::{linalg::general_mat_mul, Array2, Array4, ArrayD, Dimension, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn sgd_step(&mut self, lr: f32) {
        self.value.zip_mut_with(&self.grad, |v, g| *v -= lr * g);
    }

    /// value <- value - rate * (value - other). Exact no-op at rate 0 or when
    /// the values already agree, and an exact copy at rate 1.
    pub fn lerp_toward(&mut self, other: &Param, rate: f32) {
        if rate == 0.0 {
            return;
        }
        if rate == 1.0 {
            self.value.assign(&other.value);
            return;
        }
        self.value.zip_mut_with(&other.value, |v, o| *v -= rate * (*v - *o));
    }
}

fn uniform_init(rng: &mut ChaCha12Rng, shape: IxDyn, fan_in: usize) -> ArrayD<f32> {
    let bound = (1.0 / fan_in as f32).sqrt();
    ArrayD::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// 3x3/1x1 convolution, stride 1 or 2, "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub geom: ConvGeom,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha12Rng, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let geom = ConvGeom { in_ch, out_ch, kernel, stride, pad: kernel / 2 };
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(uniform_init(rng, IxDyn(&[out_ch, fan_in]), fan_in));
        let bias = Param::new(ArrayD::zeros(IxDyn(&[out_ch])));
        Conv2d { geom, weight, bias }
    }

    /// Zero the weights so the layer initially outputs zero.
    pub fn zero_out(&mut self) {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.bias.value.as_slice().unwrap();
        conv2d_forward(&x.view(), &w, b, &self.geom)
    }

    pub fn backward(&mut self, x: &Array4<f32>, gy: &Array4<f32>) -> Array4<f32> {
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut gw = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let gb = self.bias.grad.as_slice_mut().unwrap();
        let gx = conv2d_backward(&x.view(), &w, &gy.view(), &self.geom, &mut gw, gb);
        self.weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .assign(&gw);
        gx
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param)> {
        vec![(format!("{prefix}.weight"), &self.weight), (format!("{prefix}.bias"), &self.bias)]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }
}

/// Fully connected layer, y = x W^T + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize) -> Self {
        let weight = Param::new(uniform_init(rng, IxDyn(&[out_dim, in_dim]), in_dim));
        let bias = Param::new(ArrayD::zeros(IxDyn(&[out_dim])));
        Linear { weight, bias }
    }

    pub fn zero_out(&mut self) {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (bsz, _) = x.dim();
        let out = w.dim().0;
        let mut y = Array2::<f32>::zeros((bsz, out));
        general_mat_mul(1.0, &x.view(), &w.t(), 0.0, &mut y);
        let b = self.bias.value.as_slice().unwrap();
        for mut row in y.rows_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f32>, gy: &Array2<f32>) -> Array2<f32> {
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            general_mat_mul(1.0, &gy.t(), &x.view(), 1.0, &mut gw);
        }
        {
            let gb = self.bias.grad.as_slice_mut().unwrap();
            for row in gy.rows() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut gx = Array2::<f32>::zeros(x.raw_dim());
        general_mat_mul(1.0, &gy.view(), &w, 0.0, &mut gx);
        gx
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param)> {
        vec![(format!("{prefix}.weight"), &self.weight), (format!("{prefix}.bias"), &self.bias)]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }
}

/// Per-(sample, group) normalization with learned channel scale/shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
}

/// Statistics cached by the GroupNorm forward pass.
pub struct GnCache {
    mean: Array2<f32>,
    inv_std: Array2<f32>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0);
        GroupNorm {
            groups,
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, GnCache) {
        let (n, c, h, w) = x.dim();
        let gs = c / self.groups;
        let hw = h * w;
        let m = (gs * hw) as f64;
        let mut mean = Array2::<f32>::zeros((n, self.groups));
        let mut inv_std = Array2::<f32>::zeros((n, self.groups));
        let mut y = Array4::<f32>::zeros(x.raw_dim());
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let xs = x.as_slice().expect("contiguous input");
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for g in 0..self.groups {
                let base = (ni * c + g * gs) * hw;
                let chunk = &xs[base..base + gs * hw];
                let mut s = 0.0f64;
                let mut ss = 0.0f64;
                for &v in chunk {
                    let v = f64::from(v);
                    s += v;
                    ss += v * v;
                }
                let mu = s / m;
                let var = (ss / m - mu * mu).max(0.0);
                let istd = 1.0 / (var + f64::from(self.eps)).sqrt();
                mean[(ni, g)] = mu as f32;
                inv_std[(ni, g)] = istd as f32;
                let (muf, istdf) = (mu as f32, istd as f32);
                for k in 0..gs {
                    let ci = g * gs + k;
                    let ga = gamma[ci];
                    let be = beta[ci];
                    let src = &xs[base + k * hw..base + (k + 1) * hw];
                    let dst = &mut ys[base + k * hw..base + (k + 1) * hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = ga * (v - muf) * istdf + be;
                    }
                }
            }
        }
        (y, GnCache { mean, inv_std })
    }

    pub fn backward(&mut self, x: &Array4<f32>, cache: &GnCache, gy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let gs = c / self.groups;
        let hw = h * w;
        let m = (gs * hw) as f32;
        let mut gx = Array4::<f32>::zeros(x.raw_dim());
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let xs = x.as_slice().expect("contiguous input");
        let gys = gy.as_slice().expect("contiguous grad");
        let gxs = gx.as_slice_mut().unwrap();
        {
            let ggamma = self.gamma.grad.as_slice_mut().unwrap();
            let gbeta = self.beta.grad.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let g = ci / gs;
                    let mu = cache.mean[(ni, g)];
                    let istd = cache.inv_std[(ni, g)];
                    let base = (ni * c + ci) * hw;
                    let mut dg = 0.0f32;
                    let mut db = 0.0f32;
                    for (&xv, &gv) in xs[base..base + hw].iter().zip(&gys[base..base + hw]) {
                        dg += gv * (xv - mu) * istd;
                        db += gv;
                    }
                    ggamma[ci] += dg;
                    gbeta[ci] += db;
                }
            }
        }
        // input grads per (sample, group)
        for ni in 0..n {
            for g in 0..self.groups {
                let mu = cache.mean[(ni, g)];
                let istd = cache.inv_std[(ni, g)];
                let gbase = (ni * c + g * gs) * hw;
                let mut sum_dxh = 0.0f64;
                let mut sum_dxh_xh = 0.0f64;
                for k in 0..gs {
                    let ga = gamma[g * gs + k];
                    let base = gbase + k * hw;
                    for (&xv, &gv) in xs[base..base + hw].iter().zip(&gys[base..base + hw]) {
                        let xh = (xv - mu) * istd;
                        let dxh = gv * ga;
                        sum_dxh += f64::from(dxh);
                        sum_dxh_xh += f64::from(dxh * xh);
                    }
                }
                let c1 = (sum_dxh / f64::from(m)) as f32;
                let c2 = (sum_dxh_xh / f64::from(m)) as f32;
                for k in 0..gs {
                    let ga = gamma[g * gs + k];
                    let base = gbase + k * hw;
                    for ((gd, &xv), &gv) in gxs[base..base + hw]
                        .iter_mut()
                        .zip(&xs[base..base + hw])
                        .zip(&gys[base..base + hw])
                    {
                        let xh = (xv - mu) * istd;
                        *gd = (gv * ga - c1 - xh * c2) * istd;
                    }
                }
            }
        }
        gx
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param)> {
        vec![(format!("{prefix}.gamma"), &self.gamma), (format!("{prefix}.beta"), &self.beta)]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        vec![
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
        ]
    }
}

/// Lookup table of learned vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    pub fn new(rng: &mut ChaCha12Rng, entries: usize, dim: usize) -> Self {
        let scale = 0.1f32;
        let table =
            Param::new(ArrayD::from_shape_simple_fn(IxDyn(&[entries, dim]), || {
                rng.gen_range(-scale..scale)
            }));
        Embedding { table }
    }

    pub fn forward(&self, ids: &[usize]) -> Array2<f32> {
        let t = self.table.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dim = t.dim().1;
        let mut y = Array2::<f32>::zeros((ids.len(), dim));
        for (r, &id) in ids.iter().enumerate() {
            y.row_mut(r).assign(&t.row(id));
        }
        y
    }

    pub fn backward(&mut self, ids: &[usize], gy: &Array2<f32>) {
        let mut g = self.table.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (r, &id) in ids.iter().enumerate() {
            let mut row = g.row_mut(id);
            row += &gy.row(r);
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param)> {
        vec![(format!("{prefix}.table"), &self.table)]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        vec![(format!("{prefix}.table"), &mut self.table)]
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation x * sigmoid(x).
pub fn silu<D: Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of SiLU given the pre-activation input.
pub fn silu_backward<D: Dimension>(
    x: &ndarray::Array<f32, D>,
    gy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

/// Elementwise tanh.
pub fn tanh4(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(f32::tanh)
}

/// Gradient of tanh given the forward output y = tanh(x).
pub fn tanh4_backward(y: &Array4<f32>, gy: &Array4<f32>) -> Array4<f32> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &t| *g *= 1.0 - t * t);
    gx
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample2x(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, h * 2, w * 2));
    let xs = x.as_slice().expect("contiguous input");
    let ys = y.as_slice_mut().unwrap();
    for img in 0..n * c {
        let src_base = img * h * w;
        let dst_base = img * 4 * h * w;
        for hi in 0..h {
            let src = &xs[src_base + hi * w..src_base + (hi + 1) * w];
            let row0 = dst_base + (2 * hi) * 2 * w;
            let row1 = dst_base + (2 * hi + 1) * 2 * w;
            for (wi, &v) in src.iter().enumerate() {
                ys[row0 + 2 * wi] = v;
                ys[row0 + 2 * wi + 1] = v;
                ys[row1 + 2 * wi] = v;
                ys[row1 + 2 * wi + 1] = v;
            }
        }
    }
    y
}

/// Backward of nearest 2x upsampling: sum each 2x2 block.
pub fn upsample2x_backward(gy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    let gys = gy.as_slice().expect("contiguous grad");
    let gxs = gx.as_slice_mut().unwrap();
    for img in 0..n * c {
        let src_base = img * 4 * h * w;
        let dst_base = img * h * w;
        for hi in 0..h {
            let row0 = src_base + (2 * hi) * w2;
            let row1 = src_base + (2 * hi + 1) * w2;
            let dst = &mut gxs[dst_base + hi * w..dst_base + (hi + 1) * w];
            for (wi, d) in dst.iter_mut().enumerate() {
                *d = gys[row0 + 2 * wi]
                    + gys[row0 + 2 * wi + 1]
                    + gys[row1 + 2 * wi]
                    + gys[row1 + 2 * wi + 1];
            }
        }
    }
    gx
}

/// Mean over the spatial dimensions, (n, c, h, w) -> (n, c).
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::<f32>::zeros((n, c));
    let inv = 1.0 / (h * w) as f32;
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0f32;
            for hi in 0..h {
                for wi in 0..w {
                    s += x[(ni, ci, hi, wi)];
                }
            }
            y[(ni, ci)] = s * inv;
        }
    }
    y
}

/// Backward of global average pooling.
pub fn global_avg_pool_backward(gy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = gy.dim();
    let inv = 1.0 / (h * w) as f32;
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gy[(ni, ci)] * inv;
            for hi in 0..h {
                for wi in 0..w {
                    gx[(ni, ci, hi, wi)] = g;
                }
            }
        }
    }
    gx
}

/// Broadcast-add a per-(sample, channel) bias onto a feature map.
pub fn add_channel_bias(x: &mut Array4<f32>, bias: &Array2<f32>) {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_slice_mut().expect("contiguous input");
    let bs = bias.as_slice().unwrap();
    for (img, &b) in bs.iter().enumerate().map(|(i, b)| (i, b)).take(n * c) {
        for v in &mut xs[img * hw..(img + 1) * hw] {
            *v += b;
        }
    }
}

/// Reduce a feature-map gradient to the per-(sample, channel) bias gradient.
pub fn channel_bias_grad(gy: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = gy.dim();
    let hw = h * w;
    let mut gb = Array2::<f32>::zeros((n, c));
    let gys = gy.as_slice().expect("contiguous grad");
    let gbs = gb.as_slice_mut().unwrap();
    for (img, out) in gbs.iter_mut().enumerate().take(n * c) {
        *out = gys[img * hw..(img + 1) * hw].iter().sum();
    }
    gb
}

/// Sum over an arbitrary f32 array in f64 for reproducible reductions.
pub fn sum_f64<D: Dimension>(x: &ndarray::Array<f32, D>) -> f64 {
    x.iter().map(|&v| f64::from(v)).sum()
}
