//! Scratch probe of embedding-path gradient magnitudes.

use coatcheck::diffusion::{DiffusionConfig, DiffusionModelState, EpsNetConfig};
use coatcheck::nn::NetParams;
use ndarray::Array4;
use rand::Rng;

fn main() {
    let cfg = DiffusionConfig {
        net: EpsNetConfig { image_channels: 3, base: 4, mid: 8, deep: 8, emb_dim: 8, num_classes: 2 },
        t_count: 50,
        beta_start: 1e-4,
        beta_end: 0.02,
        image_h: 8,
        image_w: 8,
    };
    let mut model = DiffusionModelState::new(2, cfg).unwrap();
    let mut rng = coatcheck::nn::rng::stream(2, "unet", 1);
    for (name, p) in model.net.named_params_mut() {
        if name.starts_with("conv_out") {
            p.value.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        }
    }
    let z = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0f32));
    let ts = [5usize, 9];
    let labels = [1usize, 0];
    let coeff: Vec<f32> = (0..2 * 3 * 64).map(|i| ((i % 11) as f32 - 5.0) / 5.0).collect();
    let (y, cache) = model.net.forward(&z, &ts, &labels, true);
    let mut gy = Array4::<f32>::zeros(y.raw_dim());
    for (i, g) in gy.iter_mut().enumerate() {
        *g = coeff[i];
    }
    model.net.zero_grad();
    let _ = model.net.backward(&cache.unwrap(), &gy);
    for (name, p) in model.net.named_params() {
        let norm: f64 = p.grad.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
        let max = p.grad.iter().fold(0.0f32, |m, &g| m.max(g.abs()));
        println!("{name:24} |g|={norm:.3e} max={max:.3e}");
    }

    // directional FD along the analytic gradient of the full emb path
    let loss = |m: &DiffusionModelState, z: &Array4<f32>| -> f64 {
        let (y, _) = m.net.forward(z, &ts, &labels, false);
        y.iter().zip(&coeff).map(|(v, c)| f64::from(v * c)).sum()
    };
    for layer in ["mlp1.weight", "mlp2.weight", "class_emb.table"] {
        let g: Vec<f32> = {
            let ps = model.net.named_params();
            let p = &ps.iter().find(|(n, _)| n == layer).unwrap().1;
            p.grad.iter().copied().collect()
        };
        let gnorm: f64 = g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        let eps = 0.5f32; // large step; direction normalized
        let mut probe = |s: f32| -> f64 {
            let mut m2 = model.clone();
            {
                let mut ps = m2.net.named_params_mut();
                let p = ps.iter_mut().find(|(n, _)| n == layer).unwrap();
                for (v, &gi) in p.1.value.as_slice_mut().unwrap().iter_mut().zip(&g) {
                    *v += s * gi / gnorm.max(1e-12) as f32;
                }
            }
            loss(&m2, &z)
        };
        let fd = (probe(eps) - probe(-eps)) / f64::from(2.0 * eps);
        println!("{layer}: directional fd = {fd:.4e}, |g| = {gnorm:.4e}");
    }
}
