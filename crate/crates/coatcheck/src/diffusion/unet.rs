//! Class-conditional encoder-decoder epsilon-prediction network.
//!
//! Stride-2 UNet with additive skip connections. Conditioning: a sinusoidal
//! timestep embedding plus a learned class embedding, passed through a small
//! MLP and injected into each residual block as a per-channel bias.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{
    add_channel_bias, channel_bias_grad, silu, silu_backward, upsample2x, upsample2x_backward,
    Conv2d, Embedding, GnCache, GroupNorm, Linear,
};
use crate::nn::{NetParams, Param};

/// Width/conditioning configuration of the network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpsNetConfig {
    pub image_channels: usize,
    /// channels at full, half, and quarter resolution
    pub base: usize,
    pub mid: usize,
    pub deep: usize,
    pub emb_dim: usize,
    pub num_classes: usize,
}

impl Default for EpsNetConfig {
    fn default() -> Self {
        EpsNetConfig { image_channels: 3, base: 16, mid: 32, deep: 64, emb_dim: 64, num_classes: 2 }
    }
}

fn groups_for(c: usize) -> usize {
    // keep at least two channels per group so per-channel conditioning
    // signals survive the normalization
    for g in [8usize, 4, 2] {
        if c % g == 0 && c / g >= 2 {
            return g;
        }
    }
    1
}

/// GroupNorm -> SiLU -> conv, embedding bias, GroupNorm -> SiLU -> conv,
/// residual add.
#[derive(Debug, Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
}

pub struct ResCache {
    x: Array4<f32>,
    gn1c: GnCache,
    a1: Array4<f32>,
    s1: Array4<f32>,
    h: Array4<f32>,
    gn2c: GnCache,
    a2: Array4<f32>,
    s2b: Array4<f32>,
}

impl ResBlock {
    fn new(rng: &mut ChaCha12Rng, c: usize, emb_dim: usize) -> Self {
        ResBlock {
            gn1: GroupNorm::new(c, groups_for(c)),
            conv1: Conv2d::new(rng, c, c, 3, 1),
            proj: Linear::new(rng, emb_dim, c),
            gn2: GroupNorm::new(c, groups_for(c)),
            conv2: Conv2d::new(rng, c, c, 3, 1),
        }
    }

    /// Returns the output and, when requested, the cache for backward.
    ///
    /// The conditioning bias lands after the second norm + activation so the
    /// normalization cannot cancel it.
    fn forward(
        &self,
        x: &Array4<f32>,
        semb: &Array2<f32>,
        want_cache: bool,
    ) -> (Array4<f32>, Option<ResCache>) {
        let (a1, gn1c) = self.gn1.forward(x);
        let s1 = silu(&a1);
        let h = self.conv1.forward(&s1);
        let (a2, gn2c) = self.gn2.forward(&h);
        let mut s2b = silu(&a2);
        let bias = self.proj.forward(semb);
        add_channel_bias(&mut s2b, &bias);
        let out = x + &self.conv2.forward(&s2b);
        let cache = want_cache.then(|| ResCache {
            x: x.clone(),
            gn1c,
            a1,
            s1,
            h,
            gn2c,
            a2,
            s2b,
        });
        (out, cache)
    }
}

/// The epsilon-prediction network.
#[derive(Debug, Clone)]
pub struct EpsNet {
    pub cfg: EpsNetConfig,
    class_emb: Embedding,
    mlp1: Linear,
    mlp2: Linear,
    stem: Conv2d,
    down1: Conv2d,
    rb2: ResBlock,
    down2: Conv2d,
    rb3: ResBlock,
    rb4: ResBlock,
    up1: Conv2d,
    rb5: ResBlock,
    up2: Conv2d,
    gn_out: GroupNorm,
    conv_out: Conv2d,
}

pub struct EpsCache {
    ts: Vec<usize>,
    labels: Vec<usize>,
    temb: Array2<f32>,
    u: Array2<f32>,
    e1: Array2<f32>,
    e2: Array2<f32>,
    emb: Array2<f32>,
    semb: Array2<f32>,
    z: Array4<f32>,
    x0: Array4<f32>,
    x1: Array4<f32>,
    rb2c: ResCache,
    x2: Array4<f32>,
    x3: Array4<f32>,
    rb3c: ResCache,
    x4: Array4<f32>,
    rb4c: ResCache,
    x5u: Array4<f32>,
    s1: Array4<f32>,
    rb5c: ResCache,
    x6: Array4<f32>,
    x6u: Array4<f32>,
    s2: Array4<f32>,
    gnoc: GnCache,
    a_out: Array4<f32>,
    h_out: Array4<f32>,
}

/// Sinusoidal timestep features.
fn sinusoid(ts: &[usize], dim: usize) -> Array2<f32> {
    let half = dim / 2;
    let mut out = Array2::<f32>::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
            let freq = (-(10_000.0f64).ln() * i as f64 / denom).exp();
            let arg = t as f64 * freq;
            out[(r, i)] = arg.sin() as f32;
            out[(r, half + i)] = arg.cos() as f32;
        }
    }
    out
}

impl EpsNet {
    pub fn new(rng: &mut ChaCha12Rng, cfg: EpsNetConfig) -> Self {
        let e = cfg.emb_dim;
        let mut net = EpsNet {
            class_emb: Embedding::new(rng, cfg.num_classes, e),
            mlp1: Linear::new(rng, e, e),
            mlp2: Linear::new(rng, e, e),
            stem: Conv2d::new(rng, cfg.image_channels, cfg.base, 3, 1),
            down1: Conv2d::new(rng, cfg.base, cfg.mid, 3, 2),
            rb2: ResBlock::new(rng, cfg.mid, e),
            down2: Conv2d::new(rng, cfg.mid, cfg.deep, 3, 2),
            rb3: ResBlock::new(rng, cfg.deep, e),
            rb4: ResBlock::new(rng, cfg.deep, e),
            up1: Conv2d::new(rng, cfg.deep, cfg.mid, 3, 1),
            rb5: ResBlock::new(rng, cfg.mid, e),
            up2: Conv2d::new(rng, cfg.mid, cfg.base, 3, 1),
            gn_out: GroupNorm::new(cfg.base, groups_for(cfg.base)),
            conv_out: Conv2d::new(rng, cfg.base, cfg.image_channels, 3, 1),
            cfg,
        };
        // start from the zero predictor
        net.conv_out.zero_out();
        net
    }

    /// Predict epsilon for a batch of noised images.
    pub fn forward(
        &self,
        z: &Array4<f32>,
        ts: &[usize],
        labels: &[usize],
        want_cache: bool,
    ) -> (Array4<f32>, Option<EpsCache>) {
        assert_eq!(z.dim().0, ts.len());
        assert_eq!(z.dim().0, labels.len());
        let temb = sinusoid(ts, self.cfg.emb_dim);
        let cemb = self.class_emb.forward(labels);
        let u = &temb + &cemb;
        let e1 = self.mlp1.forward(&u);
        let e2 = silu(&e1);
        let emb = self.mlp2.forward(&e2);
        let semb = silu(&emb);

        let x0 = self.stem.forward(z);
        let x1 = self.down1.forward(&x0);
        let (x2, rb2c) = self.rb2.forward(&x1, &semb, want_cache);
        let x3 = self.down2.forward(&x2);
        let (x4, rb3c) = self.rb3.forward(&x3, &semb, want_cache);
        let (x5, rb4c) = self.rb4.forward(&x4, &semb, want_cache);
        let x5u = upsample2x(&x5);
        let s1 = &self.up1.forward(&x5u) + &x2;
        let (x6, rb5c) = self.rb5.forward(&s1, &semb, want_cache);
        let x6u = upsample2x(&x6);
        let s2 = &self.up2.forward(&x6u) + &x0;
        let (a_out, gnoc) = self.gn_out.forward(&s2);
        let h_out = silu(&a_out);
        let out = self.conv_out.forward(&h_out);

        let cache = want_cache.then(|| EpsCache {
            ts: ts.to_vec(),
            labels: labels.to_vec(),
            temb,
            u,
            e1,
            e2,
            emb,
            semb,
            z: z.clone(),
            x0,
            x1,
            rb2c: rb2c.unwrap(),
            x2,
            x3,
            rb3c: rb3c.unwrap(),
            x4,
            rb4c: rb4c.unwrap(),
            x5u,
            s1,
            rb5c: rb5c.unwrap(),
            x6,
            x6u,
            s2,
            gnoc,
            a_out,
            h_out,
        });
        (out, cache)
    }

    /// Backpropagate; accumulates parameter grads, returns grad wrt the input.
    pub fn backward(&mut self, cache: &EpsCache, gout: &Array4<f32>) -> Array4<f32> {
        let mut g_semb_total = Array2::<f32>::zeros(cache.semb.raw_dim());

        let g_h_out = self.conv_out.backward(&cache.h_out, gout);
        let g_a_out = silu_backward(&cache.a_out, &g_h_out);
        let g_s2 = self.gn_out.backward(&cache.s2, &cache.gnoc, &g_a_out);
        // s2 = up2(x6u) + x0
        let g_x6u = self.up2.backward(&cache.x6u, &g_s2);
        let mut g_x0 = g_s2.clone();
        let g_x6 = upsample2x_backward(&g_x6u);
        let g_s1 = self.rb_backward(5, &cache.rb5c, &g_x6, &cache.semb, &mut g_semb_total);
        // s1 = up1(x5u) + x2
        let g_x5u = self.up1.backward(&cache.x5u, &g_s1);
        let mut g_x2 = g_s1.clone();
        let g_x5 = upsample2x_backward(&g_x5u);
        let g_x4 = self.rb_backward(4, &cache.rb4c, &g_x5, &cache.semb, &mut g_semb_total);
        let g_x3 = self.rb_backward(3, &cache.rb3c, &g_x4, &cache.semb, &mut g_semb_total);
        g_x2 = &g_x2 + &self.down2.backward(&cache.x2, &g_x3);
        let g_x1 = self.rb_backward(2, &cache.rb2c, &g_x2, &cache.semb, &mut g_semb_total);
        g_x0 = &g_x0 + &self.down1.backward(&cache.x0, &g_x1);
        let g_z = self.stem.backward(&cache.z, &g_x0);

        // embedding pipeline: semb = silu(mlp2(silu(mlp1(temb + cemb))))
        let g_emb = silu_backward(&cache.emb, &g_semb_total);
        let g_e2 = self.mlp2.backward(&cache.e2, &g_emb);
        let g_e1 = silu_backward(&cache.e1, &g_e2);
        let g_u = self.mlp1.backward(&cache.u, &g_e1);
        self.class_emb.backward(&cache.labels, &g_u);
        let _ = (&cache.temb, &cache.ts);
        g_z
    }

    /// Shared resblock backward that routes the embedding gradient through
    /// the right projection layer.
    fn rb_backward(
        &mut self,
        which: usize,
        cache: &ResCache,
        gy: &Array4<f32>,
        semb: &Array2<f32>,
        g_semb: &mut Array2<f32>,
    ) -> Array4<f32> {
        let rb = match which {
            2 => &mut self.rb2,
            3 => &mut self.rb3,
            4 => &mut self.rb4,
            5 => &mut self.rb5,
            _ => unreachable!(),
        };
        let g_s2b = rb.conv2.backward(&cache.s2b, gy);
        let g_bias = channel_bias_grad(&g_s2b);
        *g_semb += &rb.proj.backward(semb, &g_bias);
        let g_a2 = silu_backward(&cache.a2, &g_s2b);
        let g_h = rb.gn2.backward(&cache.h, &cache.gn2c, &g_a2);
        let g_s1 = rb.conv1.backward(&cache.s1, &g_h);
        let g_a1 = silu_backward(&cache.a1, &g_s1);
        let g_x = rb.gn1.backward(&cache.x, &cache.gn1c, &g_a1);
        gy + &g_x
    }
}

impl NetParams for EpsNet {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        v.extend(self.class_emb.named("class_emb"));
        v.extend(self.mlp1.named("mlp1"));
        v.extend(self.mlp2.named("mlp2"));
        v.extend(self.stem.named("stem"));
        v.extend(self.down1.named("down1"));
        v.extend(rb_named(&self.rb2, "rb2"));
        v.extend(self.down2.named("down2"));
        v.extend(rb_named(&self.rb3, "rb3"));
        v.extend(rb_named(&self.rb4, "rb4"));
        v.extend(self.up1.named("up1"));
        v.extend(rb_named(&self.rb5, "rb5"));
        v.extend(self.up2.named("up2"));
        v.extend(self.gn_out.named("gn_out"));
        v.extend(self.conv_out.named("conv_out"));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        v.extend(self.class_emb.named_mut("class_emb"));
        v.extend(self.mlp1.named_mut("mlp1"));
        v.extend(self.mlp2.named_mut("mlp2"));
        v.extend(self.stem.named_mut("stem"));
        v.extend(self.down1.named_mut("down1"));
        v.extend(rb_named_mut(&mut self.rb2, "rb2"));
        v.extend(self.down2.named_mut("down2"));
        v.extend(rb_named_mut(&mut self.rb3, "rb3"));
        v.extend(rb_named_mut(&mut self.rb4, "rb4"));
        v.extend(self.up1.named_mut("up1"));
        v.extend(rb_named_mut(&mut self.rb5, "rb5"));
        v.extend(self.up2.named_mut("up2"));
        v.extend(self.gn_out.named_mut("gn_out"));
        v.extend(self.conv_out.named_mut("conv_out"));
        v
    }
}

fn rb_named<'a>(rb: &'a ResBlock, prefix: &str) -> Vec<(String, &'a Param)> {
    let mut v = Vec::new();
    v.extend(rb.gn1.named(&format!("{prefix}.gn1")));
    v.extend(rb.conv1.named(&format!("{prefix}.conv1")));
    v.extend(rb.proj.named(&format!("{prefix}.proj")));
    v.extend(rb.gn2.named(&format!("{prefix}.gn2")));
    v.extend(rb.conv2.named(&format!("{prefix}.conv2")));
    v
}

fn rb_named_mut<'a>(rb: &'a mut ResBlock, prefix: &str) -> Vec<(String, &'a mut Param)> {
    let mut v = Vec::new();
    v.extend(rb.gn1.named_mut(&format!("{prefix}.gn1")));
    v.extend(rb.conv1.named_mut(&format!("{prefix}.conv1")));
    v.extend(rb.proj.named_mut(&format!("{prefix}.proj")));
    v.extend(rb.gn2.named_mut(&format!("{prefix}.gn2")));
    v.extend(rb.conv2.named_mut(&format!("{prefix}.conv2")));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::sum_f64;

    fn tiny_cfg() -> EpsNetConfig {
        EpsNetConfig { image_channels: 3, base: 4, mid: 8, deep: 8, emb_dim: 8, num_classes: 2 }
    }

    #[test]
    fn forward_shapes_and_zero_init() {
        let mut rng = crate::nn::rng::stream(1, "unet", 0);
        let net = EpsNet::new(&mut rng, tiny_cfg());
        let z = Array4::<f32>::from_elem((2, 3, 8, 8), 0.4);
        let (out, _) = net.forward(&z, &[3, 7], &[0, 1], false);
        assert_eq!(out.dim(), (2, 3, 8, 8));
        // zero-initialized output head
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(2, "unet", 1);
        let mut net = EpsNet::new(&mut rng, tiny_cfg());
        // non-trivial output head
        for (_, p) in net.conv_out.named_mut("conv_out") {
            p.value.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        }
        let z = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0f32));
        let ts = [5usize, 9];
        let labels = [1usize, 0];
        let coeff: Vec<f32> = (0..2 * 3 * 64).map(|i| ((i % 11) as f32 - 5.0) / 5.0).collect();
        let loss = |net: &EpsNet, z: &Array4<f32>| -> f64 {
            let (y, _) = net.forward(z, &ts, &labels, false);
            y.iter().zip(&coeff).map(|(v, c)| f64::from(v * c)).sum()
        };
        let (y, cache) = net.forward(&z, &ts, &labels, true);
        let mut gy = Array4::<f32>::zeros(y.raw_dim());
        for (i, g) in gy.iter_mut().enumerate() {
            *g = coeff[i];
        }
        net.zero_grad();
        let gz = net.backward(&cache.unwrap(), &gy);

        // input gradient check
        let eps = 1e-2f32;
        let mut zm = z.clone();
        let mut worst: f64 = 0.0;
        for idx in [(0, 0, 0, 0), (1, 2, 7, 7), (0, 1, 4, 3), (1, 0, 2, 6)] {
            let orig = zm[idx];
            zm[idx] = orig + eps;
            let lp = loss(&net, &zm);
            zm[idx] = orig - eps;
            let lm = loss(&net, &zm);
            zm[idx] = orig;
            let fd = (lp - lm) / f64::from(2.0 * eps);
            let g = f64::from(gz[idx]);
            if fd.abs() > 1e-3 {
                worst = worst.max((fd - g).abs() / fd.abs());
            }
        }
        assert!(worst < 0.05, "input grad rel err {worst}");

        // a few parameter gradient checks across layer kinds
        let param_checks: Vec<(String, usize)> = vec![
            ("stem.weight".into(), 3),
            ("rb3.conv1.weight".into(), 10),
            ("rb3.proj.weight".into(), 5),
            ("mlp1.weight".into(), 7),
            ("class_emb.table".into(), 4),
            ("gn_out.gamma".into(), 1),
            ("conv_out.weight".into(), 8),
        ];
        for (name, flat_idx) in param_checks {
            let analytic = {
                let found = net.named_params();
                let p = &found.iter().find(|(n, _)| *n == name).unwrap().1;
                f64::from(p.grad.as_slice().unwrap()[flat_idx])
            };
            let mut probe = |delta: f32| -> f64 {
                let mut net2 = net.clone();
                {
                    let mut found = net2.named_params_mut();
                    let p = found.iter_mut().find(|(n, _)| *n == name).unwrap();
                    p.1.value.as_slice_mut().unwrap()[flat_idx] += delta;
                }
                loss(&net2, &z)
            };
            let fd = (probe(eps) - probe(-eps)) / f64::from(2.0 * eps);
            let denom = fd.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (fd - analytic).abs() / denom < 0.08,
                "{name}[{flat_idx}]: fd {fd} vs analytic {analytic}"
            );
        }
        let _ = sum_f64(&y);
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = crate::nn::rng::stream(3, "unet", 2);
        let net = EpsNet::new(&mut rng, tiny_cfg());
        let z = Array4::<f32>::from_elem((1, 3, 8, 8), 0.3);
        let (a, _) = net.forward(&z, &[4], &[1], false);
        let (b, _) = net.forward(&z, &[4], &[1], false);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
