//! Train the toy diffusion model on a synthetic shapes corpus and sample from
//! it, reporting template correlations per class.
//!
//! Usage: cargo run --release --example train_and_sample [steps] [lr] [out_dir]

use anyhow::Result;
use coatcheck::data::LabeledExample;
use coatcheck::diffusion::{sample_pool, train_diffusion_opts, DiffusionConfig, DiffusionModelState, TrainOptions};
use coatcheck::pipeline::dataset::{class_template, save_dataset, synth_dataset, CorpusKind, SynthSpec};
use coatcheck::pipeline::normalized_cross_correlation;
use std::time::Instant;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let lr: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0.02);
    let out_dir = args.get(3).cloned().unwrap_or_else(|| "/tmp/coatcheck-demo".into());

    let spec = SynthSpec { classes: 2, count: 120, size: 32, family: 0 };
    let dataset = synth_dataset(&spec, 11)?;
    println!("corpus: {} images, {} classes", dataset.len(), spec.classes);

    let mut model = DiffusionModelState::new(42, DiffusionConfig::default())?;
    use coatcheck::nn::NetParams;
    println!("model params: {}", model.param_count());

    let t0 = Instant::now();
    let opts = TrainOptions { steps, lr, batch_size: 16, ..Default::default() };
    let losses = train_diffusion_opts(&mut model, &dataset, &opts, 7)?;
    let dt = t0.elapsed().as_secs_f64();
    let window = 50.min(losses.len());
    let head: f64 = losses[..window].iter().sum::<f64>() / window as f64;
    let tail: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    println!(
        "trained {steps} steps in {dt:.1}s ({:.2} s/step); loss {head:.4} -> {tail:.4}",
        dt / steps as f64
    );

    let t1 = Instant::now();
    let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
    let samples = sample_pool(&model, &labels, 999, 16)?;
    println!("sampled {} images in {:.1}s", samples.len(), t1.elapsed().as_secs_f64());

    let tmpl0 = class_template(&spec, 0, 64, 11);
    let tmpl1 = class_template(&spec, 1, 64, 11);
    let mut own = 0.0;
    let mut other = 0.0;
    let mut correct = 0usize;
    for (img, &label) in samples.iter().zip(&labels) {
        let c0 = normalized_cross_correlation(img, &tmpl0)?;
        let c1 = normalized_cross_correlation(img, &tmpl1)?;
        let (mine, theirs) = if label == 0 { (c0, c1) } else { (c1, c0) };
        own += mine;
        other += theirs;
        if mine > theirs {
            correct += 1;
        }
    }
    println!(
        "template NCC: own {:.3} vs other {:.3}; correct {}/{}",
        own / samples.len() as f64,
        other / samples.len() as f64,
        correct,
        samples.len()
    );

    let keep: Vec<LabeledExample> = samples
        .into_iter()
        .zip(labels)
        .take(16)
        .map(|(image, label)| LabeledExample { image, label })
        .collect();
    save_dataset(std::path::Path::new(&out_dir), &keep, CorpusKind::SyntheticShapes)?;
    println!("sample grid written to {out_dir}");
    Ok(())
}
