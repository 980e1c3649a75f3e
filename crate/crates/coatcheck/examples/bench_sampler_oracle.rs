//! Sampler sanity: with an oracle epsilon predictor for a fixed x0 the
//! ancestral chain must land on x0 regardless of where z_T started.

use anyhow::Result;
use coatcheck::diffusion::NoiseSchedule;
use coatcheck::nn::rng::stream;
use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<()> {
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02)?;
    let shape = (3usize, 8usize, 8usize);
    let x0 = Array3::<f32>::from_shape_fn(shape, |(c, y, x)| {
        0.2 + 0.6 * (((c + y * x) % 5) as f32 / 5.0)
    });
    let mut rng = stream(7, "oracle-sample", 0);
    let mut z = Array3::<f32>::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal));
    let t_count = schedule.t_count();
    for t in (1..=t_count).rev() {
        let abar = schedule.alpha_bar(t);
        let beta = schedule.beta(t);
        let alpha = 1.0 - beta;
        let abar_prev = schedule.alpha_bar(t - 1);
        // oracle: eps = (z - sqrt(abar) x0) / sqrt(1 - abar)
        let sa = abar.sqrt() as f32;
        let sb = (1.0 - abar).sqrt() as f32;
        let coef = (beta / (1.0 - abar).sqrt()) as f32;
        let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
        let sigma = if t > 1 {
            (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt() as f32
        } else {
            0.0
        };
        for (zv, &xv) in z.iter_mut().zip(x0.iter()) {
            let eps_hat = (*zv - sa * xv) / sb;
            let noise: f32 = if t > 1 { rng.sample(StandardNormal) } else { 0.0 };
            *zv = inv_sqrt_alpha * (*zv - coef * eps_hat) + sigma * noise;
        }
    }
    let mse: f64 = z
        .iter()
        .zip(x0.iter())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        / z.len() as f64;
    println!("oracle-sampler reconstruction mse = {mse:.3e} (psnr {:.1} dB)", 10.0 * (1.0 / mse).log10());
    Ok(())
}
