//! Single-image overfit probe: train on one image, sample, report PSNR.
//! Usage: bench_overfit [beta_end] [steps] [size]

use anyhow::Result;
use coatcheck::data::LabeledExample;
use coatcheck::diffusion::{
    sample, train_diffusion_opts, DiffusionConfig, DiffusionModelState, TrainOptions,
};
use coatcheck::pipeline::dataset::{synth_dataset, SynthSpec};
use coatcheck::pipeline::psnr;
use std::time::Instant;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let beta_end: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0.05);
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1200);
    let size: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(16);

    let spec = SynthSpec { classes: 2, count: 2, size, family: 0 };
    let data = synth_dataset(&spec, 11)?;
    let one = vec![LabeledExample { image: data[0].image.clone(), label: 0 }];

    let mut cfg = DiffusionConfig { beta_end, image_h: size, image_w: size, ..Default::default() };
    cfg.net.num_classes = 2;
    let mut model = DiffusionModelState::new(42, cfg)?;
    let t0 = Instant::now();
    let losses = train_diffusion_opts(
        &mut model,
        &one,
        &TrainOptions { steps, lr: 2e-3, batch_size: 8, ..Default::default() },
        7,
    )?;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    println!(
        "beta_end {beta_end}: {steps} steps in {:.0}s, tail loss {tail:.4}, abar_T {:.4}",
        t0.elapsed().as_secs_f64(),
        model.schedule.alpha_bar(model.schedule.t_count())
    );
    let mut best = 0.0f64;
    let mut mean = 0.0f64;
    for s in 0..6 {
        let img = sample(&model, 0, 1000 + s)?;
        let p = psnr(&one[0].image, &img)?;
        mean += p / 6.0;
        best = best.max(p);
    }
    println!("overfit sample PSNR: mean {mean:.2} dB, best {best:.2} dB");
    Ok(())
}
