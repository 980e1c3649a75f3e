//! The coating generator/extractor pair: residual coatings, the
//! expectation-over-transformation layer, the learnability loss, the overall
//! objective, and the joint training loop.

pub mod eot;
pub mod nets;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eot::{eot_transform, EotKind, EotTransform, FULL_POOL};
pub use nets::{ExtConfig, ExtNet, GenConfig, GenNet};

use crate::color::perceptual_loss_grad;
use crate::data::{stack_images, Image, LabeledExample};
use crate::diffusion::{dm_loss, dm_loss_grad_image, pair_seed, DiffusionModelState};
use crate::error::{Error, Result};
use crate::hypersphere::{
    coating_score, hypersphere_losses_grad, init_geometry, update_geometry, HypersphereState,
};
use crate::nn::rng::{derive_seed, stream};
use crate::nn::NetParams;
use crate::pipeline::psnr;

/// Parameters of the coating generator.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub net: GenNet,
}

impl GeneratorState {
    pub fn new(seed: u64, cfg: GenConfig) -> Self {
        let mut rng = stream(seed, "generator-init", 0);
        GeneratorState { net: GenNet::new(&mut rng, cfg) }
    }
}

impl NetParams for GeneratorState {
    fn named_params(&self) -> Vec<(String, &crate::nn::Param)> {
        self.net.named_params()
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut crate::nn::Param)> {
        self.net.named_params_mut()
    }
}

/// Parameters of the coating extractor.
#[derive(Debug, Clone)]
pub struct ExtractorState {
    pub net: ExtNet,
}

impl ExtractorState {
    pub fn new(seed: u64, cfg: ExtConfig) -> Self {
        let mut rng = stream(seed, "extractor-init", 0);
        ExtractorState { net: ExtNet::new(&mut rng, cfg) }
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.embedding_dim()
    }

    /// Embeddings of a list of images, evaluated in chunks.
    pub fn embed(&self, images: &[&Image]) -> Array2<f32> {
        let d = self.embedding_dim();
        let mut out = Array2::<f32>::zeros((images.len(), d));
        let chunk = 64usize;
        let parts: Vec<Array2<f32>> = images
            .par_chunks(chunk)
            .map(|imgs| {
                let batch = stack_images(imgs);
                self.net.forward(&batch, false).0
            })
            .collect();
        let mut row = 0;
        for part in parts {
            for r in part.rows() {
                out.row_mut(row).assign(&r);
                row += 1;
            }
        }
        out
    }
}

impl NetParams for ExtractorState {
    fn named_params(&self) -> Vec<(String, &crate::nn::Param)> {
        self.net.named_params()
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut crate::nn::Param)> {
        self.net.named_params_mut()
    }
}

/// Coating scores of a list of images under a frozen extractor + sphere.
pub fn score_images(
    ext: &ExtractorState,
    sphere: &HypersphereState,
    images: &[&Image],
) -> Result<Vec<f64>> {
    let emb = ext.embed(images);
    emb.rows()
        .into_iter()
        .map(|r| Ok(coating_score(r.as_slice().unwrap(), sphere)?.value))
        .collect()
}

/// Weights and knobs of the overall objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoatingObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mse_weight: f64,
    pub nu: f64,
    pub eot_enabled: bool,
    pub mc_samples: usize,
}

impl Default for CoatingObjectiveConfig {
    fn default() -> Self {
        CoatingObjectiveConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            mse_weight: 1.0,
            nu: 0.5,
            eot_enabled: true,
            mc_samples: 4,
        }
    }
}

/// One coated example.
#[derive(Debug, Clone)]
pub struct CoatingPair {
    pub original: Image,
    pub coated: Image,
    pub delta: Array3<f32>,
    pub class_label: usize,
    pub psnr_db: f64,
}

/// Per-term loss values of one objective evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub learnability: f64,
    pub perceptual: f64,
    pub hypersphere_pos: f64,
    pub hypersphere_neg: f64,
    pub image_mse: f64,
    pub total: f64,
}

/// Apply the generator to one image.
pub fn generate_coating(gen: &GeneratorState, image: &Image) -> Result<CoatingPair> {
    let mut pairs = coat_images(gen, std::slice::from_ref(image), &[0])?;
    Ok(pairs.pop().unwrap())
}

fn coat_images(gen: &GeneratorState, images: &[Image], labels: &[usize]) -> Result<Vec<CoatingPair>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Image> = images.iter().collect();
    let batch = stack_images(&refs);
    let (c, h, w) = images[0].shape();
    if (c, h, w) != (gen.net.cfg.image_channels, h, w) {
        return Err(Error::shape("generator channel mismatch"));
    }
    let (delta, _) = gen.net.forward(&batch, false);
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let d = delta.index_axis(Axis(0), i).to_owned();
        let coated = Image::clamped(img.data() + &d);
        let p = psnr(img, &coated)?;
        out.push(CoatingPair {
            original: img.clone(),
            coated,
            delta: d,
            class_label: labels[i],
            psnr_db: p,
        });
    }
    Ok(out)
}

/// Coat every example, in input order.
pub fn coat_dataset(gen: &GeneratorState, dataset: &[LabeledExample]) -> Result<Vec<CoatingPair>> {
    let chunk = 64usize;
    let parts: Vec<Result<Vec<CoatingPair>>> = dataset
        .par_chunks(chunk)
        .map(|exs| {
            let images: Vec<Image> = exs.iter().map(|e| e.image.clone()).collect();
            let labels: Vec<usize> = exs.iter().map(|e| e.label).collect();
            coat_images(gen, &images, &labels)
        })
        .collect();
    let mut out = Vec::with_capacity(dataset.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// The learnability loss: negated mean diffusion-loss decrease over pairs,
/// with common random numbers per pair.
pub fn learnability_loss(
    surrogate: &DiffusionModelState,
    pairs: &[CoatingPair],
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("learnability loss of an empty batch"));
    }
    let per_pair: Vec<Result<f64>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let s = pair_seed(seed, i);
            let lx = dm_loss(surrogate, &pair.original, pair.class_label, mc_samples, s)?;
            let lc = dm_loss(surrogate, &pair.coated, pair.class_label, mc_samples, s)?;
            Ok(lc - lx)
        })
        .collect();
    let mut acc = 0.0f64;
    for v in per_pair {
        acc += v?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Evaluate the overall objective on a batch without touching gradients.
pub fn overall_objective(
    gen: &GeneratorState,
    ext: &ExtractorState,
    surrogate: &DiffusionModelState,
    sphere: &HypersphereState,
    batch: &[LabeledExample],
    config: &CoatingObjectiveConfig,
    seed: u64,
) -> Result<ObjectiveBreakdown> {
    let mut gen2 = gen.clone();
    let mut ext2 = ext.clone();
    objective_with_grads(&mut gen2, &mut ext2, surrogate, sphere, batch, config, seed)
}

/// Objective plus gradient accumulation into the generator and extractor.
///
/// Positives for the hypersphere terms are EoT-transformed coated images;
/// negatives are EoT-transformed originals. The clamp into [0,1] after the
/// residual add and after each transform backpropagates straight-through.
pub fn objective_with_grads(
    gen: &mut GeneratorState,
    ext: &mut ExtractorState,
    surrogate: &DiffusionModelState,
    sphere: &HypersphereState,
    batch: &[LabeledExample],
    config: &CoatingObjectiveConfig,
    seed: u64,
) -> Result<ObjectiveBreakdown> {
    if batch.is_empty() {
        return Err(Error::domain("objective of an empty batch"));
    }
    let b = batch.len();
    let refs: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
    let xs = stack_images(&refs);
    let (delta, gen_cache) = gen.net.forward(&xs, true);
    let coated_raw = &xs + &delta;
    let mut coated = coated_raw.clone();
    coated.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let coated_imgs: Vec<Image> =
        (0..b).map(|i| Image::clamped(coated.index_axis(Axis(0), i).to_owned())).collect();

    // transform pool
    let pool: &[EotKind] = if config.eot_enabled { &FULL_POOL } else { &[EotKind::Identity] };
    let eot_seed = derive_seed(seed, "eot", 0);
    let pos_tf: Vec<EotTransform> =
        (0..b).map(|i| eot::draw_from_pool(pool, eot_seed, 2 * i as u64)).collect();
    let neg_tf: Vec<EotTransform> =
        (0..b).map(|i| eot::draw_from_pool(pool, eot_seed, 2 * i as u64 + 1)).collect();

    let dim = {
        let (c, h, w) = batch[0].image.shape();
        (c * h * w) as f64
    };

    let mut pos_batch = Array4::<f32>::zeros(xs.raw_dim());
    let mut neg_batch = Array4::<f32>::zeros(xs.raw_dim());
    for i in 0..b {
        let mut p = pos_tf[i].apply(&coated.index_axis(Axis(0), i).to_owned());
        p.mapv_inplace(|v| v.clamp(0.0, 1.0));
        pos_batch.index_axis_mut(Axis(0), i).assign(&p);
        let mut nimg = neg_tf[i].apply(&xs.index_axis(Axis(0), i).to_owned());
        nimg.mapv_inplace(|v| v.clamp(0.0, 1.0));
        neg_batch.index_axis_mut(Axis(0), i).assign(&nimg);
    }

    let (pos_emb, pos_cache) = ext.net.forward(&pos_batch, true);
    let (neg_emb, neg_cache) = ext.net.forward(&neg_batch, true);
    let (l_pos, l_neg, g_pos_emb, g_neg_emb) =
        hypersphere_losses_grad(&pos_emb, &neg_emb, sphere)?;

    // learnability + perceptual, per pair, in parallel with ordered collect
    struct PairTerms {
        tau_term: f64, // L(coated) - L(x)
        percept: f64,
        grad: Array3<f32>, // d(learn + lambda1*percept)/d coated, unscaled by 1/B
    }
    let lambda1 = config.lambda1;
    let pair_terms: Vec<Result<PairTerms>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let s = pair_seed(seed, i);
            let lx = dm_loss(surrogate, &batch[i].image, batch[i].label, config.mc_samples, s)?;
            let (lc, g_learn) = dm_loss_grad_image(
                surrogate,
                &coated_imgs[i],
                batch[i].label,
                config.mc_samples,
                s,
            )?;
            let (pl, g_percept) = perceptual_loss_grad(&batch[i].image, &coated_imgs[i])?;
            let mut grad = g_learn;
            grad.zip_mut_with(&g_percept, |g, &p| *g += lambda1 as f32 * p);
            Ok(PairTerms { tau_term: lc - lx, percept: pl, grad })
        })
        .collect();

    let mut l_learn = 0.0f64;
    let mut l_percept = 0.0f64;
    let mut g_coated = Array4::<f32>::zeros(xs.raw_dim());
    for (i, terms) in pair_terms.into_iter().enumerate() {
        let t = terms?;
        l_learn += t.tau_term;
        l_percept += t.percept;
        let mut gslice = g_coated.index_axis_mut(Axis(0), i);
        gslice.zip_mut_with(&t.grad, |g, &v| *g += v / b as f32);
    }
    l_learn /= b as f64;
    l_percept /= b as f64;

    // image MSE between original and coated
    let mut l_mse = 0.0f64;
    for (cv, xv) in coated.iter().zip(xs.iter()) {
        let d = f64::from(*cv) - f64::from(*xv);
        l_mse += d * d;
    }
    l_mse /= dim * b as f64;
    let mse_coeff = (2.0 * config.mse_weight / (dim * b as f64)) as f32;
    g_coated
        .iter_mut()
        .zip(coated.iter().zip(xs.iter()))
        .for_each(|(g, (&cv, &xv))| *g += mse_coeff * (cv - xv));

    // extractor paths
    let scale = |m: &Array2<f32>, f: f64| m.mapv(|v| (f64::from(v) * f) as f32);
    let g_pos_in = ext.net.backward(&pos_cache.unwrap(), &scale(&g_pos_emb, config.lambda2));
    let _g_neg_in = ext.net.backward(&neg_cache.unwrap(), &scale(&g_neg_emb, config.lambda2));
    for i in 0..b {
        let g_slice = g_pos_in.index_axis(Axis(0), i).to_owned();
        let g_through_tf = pos_tf[i].backward(&g_slice);
        let mut dst = g_coated.index_axis_mut(Axis(0), i);
        dst.zip_mut_with(&g_through_tf, |g, &v| *g += v);
    }

    // straight-through clamp: g_delta = g_coated
    gen.net.backward(&gen_cache.unwrap(), &g_coated);

    let total = l_learn
        + config.lambda1 * l_percept
        + config.lambda2 * (l_pos + l_neg)
        + config.mse_weight * l_mse;
    Ok(ObjectiveBreakdown {
        learnability: l_learn,
        perceptual: l_percept,
        hypersphere_pos: l_pos,
        hypersphere_neg: l_neg,
        image_mse: l_mse,
        total,
    })
}

/// Training options for the joint loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoatTrainOptions {
    pub lr_gen: f64,
    pub lr_ext: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// smoothing window and relative tolerance of the stopping criterion
    pub smooth_window: usize,
    pub rel_tol: f64,
}

impl Default for CoatTrainOptions {
    fn default() -> Self {
        CoatTrainOptions {
            lr_gen: 1e-3,
            lr_ext: 1e-3,
            batch_size: 8,
            max_steps: 5000,
            smooth_window: 50,
            rel_tol: 1e-3,
        }
    }
}

/// Trace of one coating training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoatTrainLog {
    pub steps_run: usize,
    pub stopped_by_tolerance: bool,
    pub aborted_non_finite: bool,
    pub totals: Vec<f64>,
    pub final_breakdown: Option<ObjectiveBreakdown>,
}

/// Jointly train the generator and extractor; returns the trained triple.
///
/// On a non-finite loss the last finite-state snapshot is returned with the
/// abort flag set in the log.
pub fn train_coating_pair(
    mut gen: GeneratorState,
    mut ext: ExtractorState,
    surrogate: &DiffusionModelState,
    dataset: &[LabeledExample],
    config: &CoatingObjectiveConfig,
    opts: &CoatTrainOptions,
    seed: u64,
) -> Result<(GeneratorState, ExtractorState, HypersphereState, CoatTrainLog)> {
    if dataset.is_empty() {
        return Err(Error::domain("coating training dataset is empty"));
    }
    // initialize geometry over the full coated dataset
    let pairs = coat_dataset(&gen, dataset)?;
    let coated_refs: Vec<&Image> = pairs.iter().map(|p| &p.coated).collect();
    let emb = ext.embed(&coated_refs);
    let mut sphere = init_geometry(&emb, config.nu)?;

    let mut log = CoatTrainLog {
        steps_run: 0,
        stopped_by_tolerance: false,
        aborted_non_finite: false,
        totals: Vec::new(),
        final_breakdown: None,
    };
    let bsz = opts.batch_size.min(dataset.len());
    let mut last_good: Option<(GeneratorState, ExtractorState, HypersphereState)> = None;

    for step in 0..opts.max_steps {
        let mut rng = stream(seed, "coat-batch", step as u64);
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        for i in 0..bsz {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(bsz);
        let batch: Vec<LabeledExample> = idx.iter().map(|&i| dataset[i].clone()).collect();

        gen.zero_grad();
        ext.zero_grad();
        let step_seed = derive_seed(seed, "coat-step", step as u64);
        let breakdown =
            objective_with_grads(&mut gen, &mut ext, surrogate, &sphere, &batch, config, step_seed)?;
        if !breakdown.total.is_finite() {
            log.aborted_non_finite = true;
            if let Some((g, e, s)) = last_good {
                return Ok((g, e, s, log));
            }
            return Ok((gen, ext, sphere, log));
        }
        last_good = Some((gen.clone(), ext.clone(), sphere.clone()));

        gen.sgd_step(opts.lr_gen as f32);
        ext.sgd_step(opts.lr_ext as f32);

        // re-center on the batch with the updated nets (Algorithm lines 10-11)
        let images: Vec<Image> = batch.iter().map(|e| e.image.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let new_pairs = coat_images(&gen, &images, &labels)?;
        let batch_refs: Vec<&Image> = new_pairs.iter().map(|p| &p.coated).collect();
        let batch_emb = ext.embed(&batch_refs);
        sphere = update_geometry(&batch_emb, &sphere)?;

        log.totals.push(breakdown.total);
        log.final_breakdown = Some(breakdown);
        log.steps_run = step + 1;

        // stopping: relative change of the smoothed total
        let w = opts.smooth_window;
        if log.totals.len() >= 2 * w {
            let n = log.totals.len();
            let recent: f64 = log.totals[n - w..].iter().sum::<f64>() / w as f64;
            let prev: f64 = log.totals[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
            if (recent - prev).abs() / prev.abs().max(1e-12) < opts.rel_tol {
                log.stopped_by_tolerance = true;
                break;
            }
        }
    }

    // final full-dataset geometry refresh
    let pairs = coat_dataset(&gen, dataset)?;
    let coated_refs: Vec<&Image> = pairs.iter().map(|p| &p.coated).collect();
    let emb = ext.embed(&coated_refs);
    sphere = update_geometry(&emb, &sphere)?;
    Ok((gen, ext, sphere, log))
}
