//! Where does the reverse chain lose the image? Noise a training image to
//! depth s, run the reverse chain back, and report PSNR per depth.
//! Usage: bench_chain_diag [beta_end] [steps]

use anyhow::Result;
use coatcheck::attacks::self_purify_labeled;
use coatcheck::data::LabeledExample;
use coatcheck::diffusion::{
    sample, train_diffusion_opts, DiffusionConfig, DiffusionModelState, TrainOptions,
};
use coatcheck::pipeline::dataset::{synth_dataset, SynthSpec};
use coatcheck::pipeline::psnr;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let beta_end: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0.05);
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let size = 16usize;
    let data = synth_dataset(&SynthSpec { classes: 2, count: 2, size, family: 0 }, 11)?;
    let one = vec![LabeledExample { image: data[0].image.clone(), label: 0 }];
    let mut cfg = DiffusionConfig { beta_end, image_h: size, image_w: size, ..Default::default() };
    cfg.net.num_classes = 2;
    let mut model = DiffusionModelState::new(42, cfg)?;
    let losses = train_diffusion_opts(
        &mut model,
        &one,
        &TrainOptions { steps, lr: 2e-3, batch_size: 8, ..Default::default() },
        7,
    )?;
    println!(
        "beta_end {beta_end}, {steps} steps, tail loss {:.4}",
        losses[losses.len() - 20..].iter().sum::<f64>() / 20.0
    );
    for s in [10usize, 25, 50, 100, 150, 180, 200] {
        let mut acc = 0.0;
        for rep in 0..4 {
            let out = self_purify_labeled(&model, &one[0].image, 0, s, 100 + rep)?;
            acc += psnr(&one[0].image, &out)? / 4.0;
        }
        println!("  depth {s:3}: reverse-chain psnr {acc:.2} dB");
    }
    let mut acc = 0.0;
    for rep in 0..4 {
        acc += psnr(&one[0].image, &sample(&model, 0, 500 + rep)?)? / 4.0;
    }
    println!("  full sample psnr {acc:.2} dB");
    Ok(())
}
