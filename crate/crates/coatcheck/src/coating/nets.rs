//! Coating generator and extractor networks: plain conv stacks, residual
//! output head on the generator, pooled embedding head on the extractor.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, silu, silu_backward, tanh4, tanh4_backward, Conv2d,
    GnCache, GroupNorm, Linear,
};
use crate::nn::{NetParams, Param};

/// Generator width/shape settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub image_channels: usize,
    pub channels: usize,
    /// total conv blocks including the input and output convs
    pub blocks: usize,
    /// residual output bound: delta = delta_scale * tanh(head)
    pub delta_scale: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { image_channels: 3, channels: 32, blocks: 4, delta_scale: 0.06 }
    }
}

/// Image-to-residual generator.
#[derive(Debug, Clone)]
pub struct GenNet {
    pub cfg: GenConfig,
    conv_in: Conv2d,
    gn_in: GroupNorm,
    mids: Vec<(Conv2d, GroupNorm)>,
    conv_out: Conv2d,
}

pub struct GenCache {
    x: Array4<f32>,
    h_in: Array4<f32>,
    gn_in_c: GnCache,
    a_in: Array4<f32>,
    mids: Vec<(Array4<f32>, Array4<f32>, GnCache, Array4<f32>)>, // (input, conv out, gn cache, gn out)
    pre_tanh_out: Array4<f32>,
    tanh_out: Array4<f32>,
}

fn groups_for(c: usize) -> usize {
    for g in [8usize, 4, 2] {
        if c % g == 0 && c / g >= 2 {
            return g;
        }
    }
    1
}

impl GenNet {
    pub fn new(rng: &mut ChaCha12Rng, cfg: GenConfig) -> Self {
        assert!(cfg.blocks >= 2, "generator needs at least input and output convs");
        let c = cfg.channels;
        let conv_in = Conv2d::new(rng, cfg.image_channels, c, 3, 1);
        let gn_in = GroupNorm::new(c, groups_for(c));
        let mids = (0..cfg.blocks - 2)
            .map(|_| (Conv2d::new(rng, c, c, 3, 1), GroupNorm::new(c, groups_for(c))))
            .collect();
        let mut conv_out = Conv2d::new(rng, c, cfg.image_channels, 3, 1);
        conv_out.zero_out(); // training starts from the identity coating
        GenNet { cfg, conv_in, gn_in, mids, conv_out }
    }

    /// Residual coating for a batch of images.
    pub fn forward(&self, x: &Array4<f32>, want_cache: bool) -> (Array4<f32>, Option<GenCache>) {
        let h_in = self.conv_in.forward(x);
        let (a_in, gn_in_c) = self.gn_in.forward(&h_in);
        let mut h = silu(&a_in);
        let mut mids = Vec::with_capacity(self.mids.len());
        for (conv, gn) in &self.mids {
            let input = h;
            let c_out = conv.forward(&input);
            let (g_out, gn_c) = gn.forward(&c_out);
            h = silu(&g_out);
            if want_cache {
                mids.push((input, c_out, gn_c, g_out));
            }
        }
        let pre = self.conv_out.forward(&h);
        let th = tanh4(&pre);
        let delta = th.mapv(|v| v * self.cfg.delta_scale);
        let cache = want_cache.then(|| GenCache {
            x: x.clone(),
            h_in,
            gn_in_c,
            a_in,
            mids,
            pre_tanh_out: h,
            tanh_out: th,
        });
        (delta, cache)
    }

    /// Accumulate parameter grads; returns grad wrt the input image.
    pub fn backward(&mut self, cache: &GenCache, g_delta: &Array4<f32>) -> Array4<f32> {
        let g_th = g_delta.mapv(|v| v * self.cfg.delta_scale);
        let g_pre = tanh4_backward(&cache.tanh_out, &g_th);
        let mut g_h = self.conv_out.backward(&cache.pre_tanh_out, &g_pre);
        for ((conv, gn), (input, c_out, gn_c, g_out)) in
            self.mids.iter_mut().zip(cache.mids.iter()).rev()
        {
            let g_gout = silu_backward(g_out, &g_h);
            let g_cout = gn.backward(c_out, gn_c, &g_gout);
            g_h = conv.backward(input, &g_cout);
        }
        let g_ain = silu_backward(&cache.a_in, &g_h);
        let g_hin = self.gn_in.backward(&cache.h_in, &cache.gn_in_c, &g_ain);
        self.conv_in.backward(&cache.x, &g_hin)
    }
}

impl NetParams for GenNet {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        v.extend(self.conv_in.named("conv_in"));
        v.extend(self.gn_in.named("gn_in"));
        for (i, (conv, gn)) in self.mids.iter().enumerate() {
            v.extend(conv.named(&format!("mid{i}.conv")));
            v.extend(gn.named(&format!("mid{i}.gn")));
        }
        v.extend(self.conv_out.named("conv_out"));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        v.extend(self.conv_in.named_mut("conv_in"));
        v.extend(self.gn_in.named_mut("gn_in"));
        for (i, (conv, gn)) in self.mids.iter_mut().enumerate() {
            v.extend(conv.named_mut(&format!("mid{i}.conv")));
            v.extend(gn.named_mut(&format!("mid{i}.gn")));
        }
        v.extend(self.conv_out.named_mut("conv_out"));
        v
    }
}

/// Extractor width/shape settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExtConfig {
    pub image_channels: usize,
    pub channels: usize,
    pub embedding_dim: usize,
}

impl Default for ExtConfig {
    fn default() -> Self {
        ExtConfig { image_channels: 3, channels: 32, embedding_dim: 128 }
    }
}

/// Image-to-embedding extractor.
#[derive(Debug, Clone)]
pub struct ExtNet {
    pub cfg: ExtConfig,
    conv_in: Conv2d,
    gn_in: GroupNorm,
    down1: Conv2d,
    gn1: GroupNorm,
    mid: Conv2d,
    gn_mid: GroupNorm,
    down2: Conv2d,
    gn2: GroupNorm,
    head: Linear,
}

pub struct ExtCache {
    x: Array4<f32>,
    h_in: Array4<f32>,
    gn_in_c: GnCache,
    a_in: Array4<f32>,
    s_in: Array4<f32>,
    h1: Array4<f32>,
    gn1c: GnCache,
    a1: Array4<f32>,
    s1: Array4<f32>,
    hm: Array4<f32>,
    gnmc: GnCache,
    am: Array4<f32>,
    sm: Array4<f32>,
    h2: Array4<f32>,
    gn2c: GnCache,
    a2: Array4<f32>,
    s2: Array4<f32>,
    pooled: Array2<f32>,
}

impl ExtNet {
    pub fn new(rng: &mut ChaCha12Rng, cfg: ExtConfig) -> Self {
        let c = cfg.channels;
        ExtNet {
            conv_in: Conv2d::new(rng, cfg.image_channels, c, 3, 1),
            gn_in: GroupNorm::new(c, groups_for(c)),
            down1: Conv2d::new(rng, c, 2 * c, 3, 2),
            gn1: GroupNorm::new(2 * c, groups_for(2 * c)),
            mid: Conv2d::new(rng, 2 * c, 2 * c, 3, 1),
            gn_mid: GroupNorm::new(2 * c, groups_for(2 * c)),
            down2: Conv2d::new(rng, 2 * c, 4 * c, 3, 2),
            gn2: GroupNorm::new(4 * c, groups_for(4 * c)),
            head: Linear::new(rng, 4 * c, cfg.embedding_dim),
            cfg,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    /// Embeddings (n, d) for a batch of images.
    pub fn forward(&self, x: &Array4<f32>, want_cache: bool) -> (Array2<f32>, Option<ExtCache>) {
        let h_in = self.conv_in.forward(x);
        let (a_in, gn_in_c) = self.gn_in.forward(&h_in);
        let s_in = silu(&a_in);
        let h1 = self.down1.forward(&s_in);
        let (a1, gn1c) = self.gn1.forward(&h1);
        let s1 = silu(&a1);
        let hm = self.mid.forward(&s1);
        let (am, gnmc) = self.gn_mid.forward(&hm);
        let sm = silu(&am);
        let h2 = self.down2.forward(&sm);
        let (a2, gn2c) = self.gn2.forward(&h2);
        let s2 = silu(&a2);
        let pooled = global_avg_pool(&s2);
        let emb = self.head.forward(&pooled);
        let cache = want_cache.then(|| ExtCache {
            x: x.clone(),
            h_in,
            gn_in_c,
            a_in,
            s_in,
            h1,
            gn1c,
            a1,
            s1,
            hm,
            gnmc,
            am,
            sm,
            h2,
            gn2c,
            a2,
            s2,
            pooled,
        });
        (emb, cache)
    }

    /// Accumulate parameter grads; returns grad wrt the input batch.
    pub fn backward(&mut self, cache: &ExtCache, g_emb: &Array2<f32>) -> Array4<f32> {
        let g_pooled = self.head.backward(&cache.pooled, g_emb);
        let (_, _, h, w) = cache.s2.dim();
        let g_s2 = global_avg_pool_backward(&g_pooled, h, w);
        let g_a2 = silu_backward(&cache.a2, &g_s2);
        let g_h2 = self.gn2.backward(&cache.h2, &cache.gn2c, &g_a2);
        let g_sm = self.down2.backward(&cache.sm, &g_h2);
        let g_am = silu_backward(&cache.am, &g_sm);
        let g_hm = self.gn_mid.backward(&cache.hm, &cache.gnmc, &g_am);
        let g_s1 = self.mid.backward(&cache.s1, &g_hm);
        let g_a1 = silu_backward(&cache.a1, &g_s1);
        let g_h1 = self.gn1.backward(&cache.h1, &cache.gn1c, &g_a1);
        let g_sin = self.down1.backward(&cache.s_in, &g_h1);
        let g_ain = silu_backward(&cache.a_in, &g_sin);
        let g_hin = self.gn_in.backward(&cache.h_in, &cache.gn_in_c, &g_ain);
        self.conv_in.backward(&cache.x, &g_hin)
    }
}

impl NetParams for ExtNet {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        v.extend(self.conv_in.named("conv_in"));
        v.extend(self.gn_in.named("gn_in"));
        v.extend(self.down1.named("down1"));
        v.extend(self.gn1.named("gn1"));
        v.extend(self.mid.named("mid"));
        v.extend(self.gn_mid.named("gn_mid"));
        v.extend(self.down2.named("down2"));
        v.extend(self.gn2.named("gn2"));
        v.extend(self.head.named("head"));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        v.extend(self.conv_in.named_mut("conv_in"));
        v.extend(self.gn_in.named_mut("gn_in"));
        v.extend(self.down1.named_mut("down1"));
        v.extend(self.gn1.named_mut("gn1"));
        v.extend(self.mid.named_mut("mid"));
        v.extend(self.gn_mid.named_mut("gn_mid"));
        v.extend(self.down2.named_mut("down2"));
        v.extend(self.gn2.named_mut("gn2"));
        v.extend(self.head.named_mut("head"));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_zero_init_and_determinism() {
        let mut rng = crate::nn::rng::stream(1, "gen", 0);
        let gen = GenNet::new(&mut rng, GenConfig { channels: 8, blocks: 4, ..Default::default() });
        let x = Array4::<f32>::from_elem((2, 3, 16, 16), 0.5);
        let (d1, _) = gen.forward(&x, false);
        assert!(d1.iter().all(|&v| v == 0.0), "zero-initialized head must give delta 0");
        let (d2, _) = gen.forward(&x, false);
        assert_eq!(d1, d2);
    }

    #[test]
    fn generator_backward_matches_fd() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(2, "gen", 1);
        let mut gen =
            GenNet::new(&mut rng, GenConfig { channels: 4, blocks: 3, delta_scale: 0.1, ..Default::default() });
        // non-zero head so gradients flow
        gen.conv_out.weight.value.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        let x = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.gen_range(0.1..0.9f32));
        let coeff: Vec<f32> = (0..192).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect();
        let loss = |g: &GenNet, x: &Array4<f32>| -> f64 {
            let (d, _) = g.forward(x, false);
            d.iter().zip(&coeff).map(|(v, c)| f64::from(v * c)).sum()
        };
        let (d, cache) = gen.forward(&x, true);
        let mut gd = Array4::<f32>::zeros(d.raw_dim());
        for (i, g) in gd.iter_mut().enumerate() {
            *g = coeff[i];
        }
        gen.zero_grad();
        let gx = gen.backward(&cache.unwrap(), &gd);
        let eps = 1e-3f32;
        let mut xm = x.clone();
        let mut worst: f64 = 0.0;
        for idx in [(0, 0, 0, 0), (0, 2, 5, 3), (0, 1, 7, 7)] {
            let orig = xm[idx];
            xm[idx] = orig + eps;
            let lp = loss(&gen, &xm);
            xm[idx] = orig - eps;
            let lm = loss(&gen, &xm);
            xm[idx] = orig;
            let fd = (lp - lm) / f64::from(2.0 * eps);
            if fd.abs() > 1e-5 {
                worst = worst.max((fd - f64::from(gx[idx])).abs() / fd.abs());
            }
        }
        assert!(worst < 0.02, "generator input grad rel err {worst}");

        // one weight grad check
        let analytic = {
            let ps = gen.named_params();
            let p = &ps.iter().find(|(n, _)| n == "conv_in.weight").unwrap().1;
            f64::from(p.grad.as_slice().unwrap()[5])
        };
        let mut probe = |dv: f32| {
            let mut g2 = gen.clone();
            {
                let mut ps = g2.named_params_mut();
                let p = ps.iter_mut().find(|(n, _)| n == "conv_in.weight").unwrap();
                p.1.value.as_slice_mut().unwrap()[5] += dv;
            }
            loss(&g2, &x)
        };
        let fd = (probe(eps) - probe(-eps)) / f64::from(2.0 * eps);
        let denom = fd.abs().max(analytic.abs()).max(1e-5);
        assert!((fd - analytic).abs() / denom < 0.05, "{fd} vs {analytic}");
    }

    #[test]
    fn extractor_backward_matches_fd() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(3, "ext", 0);
        let mut ext = ExtNet::new(
            &mut rng,
            ExtConfig { image_channels: 3, channels: 4, embedding_dim: 6 },
        );
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(0.1..0.9f32));
        let coeff: Vec<f32> = (0..12).map(|i| (i as f32 - 6.0) / 6.0).collect();
        let loss = |e: &ExtNet, x: &Array4<f32>| -> f64 {
            let (emb, _) = e.forward(x, false);
            emb.iter().zip(&coeff).map(|(v, c)| f64::from(v * c)).sum()
        };
        let (emb, cache) = ext.forward(&x, true);
        let mut ge = Array2::<f32>::zeros(emb.raw_dim());
        for (i, g) in ge.iter_mut().enumerate() {
            *g = coeff[i];
        }
        ext.zero_grad();
        let gx = ext.backward(&cache.unwrap(), &ge);
        let eps = 1e-2f32;
        let mut worst: f64 = 0.0;
        let mut xm = x.clone();
        for idx in [(0, 0, 1, 1), (1, 2, 6, 2), (0, 1, 3, 7)] {
            let orig = xm[idx];
            xm[idx] = orig + eps;
            let lp = loss(&ext, &xm);
            xm[idx] = orig - eps;
            let lm = loss(&ext, &xm);
            xm[idx] = orig;
            let fd = (lp - lm) / f64::from(2.0 * eps);
            if fd.abs() > 1e-4 {
                worst = worst.max((fd - f64::from(gx[idx])).abs() / fd.abs());
            }
        }
        assert!(worst < 0.05, "extractor input grad rel err {worst}");
    }

    #[test]
    fn embedding_dim_is_fixed_at_construction() {
        let mut rng = crate::nn::rng::stream(4, "ext", 1);
        let ext = ExtNet::new(&mut rng, ExtConfig::default());
        assert_eq!(ext.embedding_dim(), 128);
        let x = Array4::<f32>::from_elem((1, 3, 32, 32), 0.2);
        let (emb, _) = ext.forward(&x, false);
        assert_eq!(emb.dim(), (1, 128));
    }
}
