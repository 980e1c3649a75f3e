//! Per-timestep epsilon-prediction error of an overfit model.
//! Usage: bench_eps_error [beta_end] [steps] [lr]

use anyhow::Result;
use coatcheck::data::LabeledExample;
use coatcheck::diffusion::{
    train_diffusion_opts, DiffusionConfig, DiffusionModelState, TrainOptions,
};
use coatcheck::nn::rng::stream;
use coatcheck::pipeline::dataset::{synth_dataset, SynthSpec};
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let beta_end: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0.05);
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let lr: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(2e-3);
    let size = 16usize;
    let data = synth_dataset(&SynthSpec { classes: 2, count: 2, size, family: 0 }, 11)?;
    let one = vec![LabeledExample { image: data[0].image.clone(), label: 0 }];
    let mut cfg = DiffusionConfig { beta_end, image_h: size, image_w: size, ..Default::default() };
    cfg.net.num_classes = 2;
    let mut model = DiffusionModelState::new(42, cfg)?;
    let losses = train_diffusion_opts(
        &mut model,
        &one,
        &TrainOptions { steps, lr, batch_size: 8, ..Default::default() },
        7,
    )?;
    println!(
        "tail loss {:.4}",
        losses[losses.len() - 20..].iter().sum::<f64>() / 20.0
    );
    let shape = (3usize, size, size);
    let dim = (3 * size * size) as f64;
    for t in [1usize, 3, 8, 20, 50, 100, 150, 200] {
        let reps = 16usize;
        let mut rng = stream(123, "probe", t as u64);
        let mut z = Array4::<f32>::zeros((reps, 3, size, size));
        let mut epses = Vec::new();
        for k in 0..reps {
            let eps =
                Array3::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal));
            z.index_axis_mut(Axis(0), k)
                .assign(&model.schedule.q_sample(one[0].image.data(), t, &eps));
            epses.push(eps);
        }
        let (out, _) = model.net.forward(&z, &vec![t; reps], &vec![0; reps], false);
        let mut mse = 0.0f64;
        for (k, eps) in epses.iter().enumerate() {
            let o = out.index_axis(Axis(0), k);
            for (&a, &b) in eps.iter().zip(o.iter()) {
                let d = f64::from(a) - f64::from(b);
                mse += d * d;
            }
        }
        mse /= dim * reps as f64;
        println!("  t={t:3}: eps mse {mse:.4}");
    }
    Ok(())
}
