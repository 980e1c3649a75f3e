//! Countermeasure and robustness harness: post-generation transforms,
//! training-time augmentation, loss-based filtering/unlearning, regeneration
//! purification, and the uncoat-mapping transfer attack.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coating::eot::blur3;
use crate::coating::nets::{GenConfig, GenNet};
use crate::coating::CoatingPair;
use crate::data::{Image, LabeledExample};
use crate::diffusion::{expected_loss_at_timesteps, DiffusionModelState};
use crate::error::{Error, Result};
use crate::nn::rng::{derive_seed, stream};
use crate::nn::NetParams;
use crate::pipeline::psnr;

/// Transform families of the robustness suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "strength")]
pub enum TransformSpec {
    /// keep the center region covering this fraction of the area
    Crop(f64),
    /// real JPEG round trip at this quality
    Jpeg(u8),
    /// additive Gaussian noise with this sigma
    GaussianNoise(f64),
    /// multiply pixel values
    Brightness(f64),
    /// scale around the mean luminance
    Contrast(f64),
    /// rotate hue by this fraction of a full turn
    Hue(f64),
    /// scale HSV saturation
    Saturation(f64),
    /// round to this many bits per channel
    Quantize(u8),
    /// unsharp blend; 1.0 is identity
    Sharpness(f64),
    /// Gaussian blur with odd kernel size
    Blur(u8),
    /// bicubic downscale to this fraction, then bicubic upscale back
    DownscaleUpscale(f64),
    /// rasterize a small text patch at a seeded position (<= 10% of area)
    TextOverlay,
    /// seeded subset of the standard suite, applied in sequence
    RandomCombination,
}

impl TransformSpec {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            TransformSpec::Crop(s) => *s > 0.0 && *s <= 1.0,
            TransformSpec::Jpeg(q) => (1..=100).contains(q),
            TransformSpec::GaussianNoise(s) => (0.0..=1.0).contains(s),
            TransformSpec::Brightness(b) => *b > 0.0 && *b <= 4.0,
            TransformSpec::Contrast(c) => *c > 0.0 && *c <= 4.0,
            TransformSpec::Hue(h) => (-1.0..=1.0).contains(h),
            TransformSpec::Saturation(s) => *s >= 0.0 && *s <= 4.0,
            TransformSpec::Quantize(b) => (1..=8).contains(b),
            TransformSpec::Sharpness(f) => *f >= 0.0 && *f <= 4.0,
            TransformSpec::Blur(k) => *k % 2 == 1 && (3..=15).contains(k),
            TransformSpec::DownscaleUpscale(f) => *f > 0.05 && *f <= 1.0,
            TransformSpec::TextOverlay | TransformSpec::RandomCombination => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("unsupported transform strength: {self:?}")))
        }
    }
}

/// The default robustness suite with the strengths used in reports.
pub fn standard_suite() -> Vec<TransformSpec> {
    vec![
        TransformSpec::Crop(0.1),
        TransformSpec::Jpeg(30),
        TransformSpec::GaussianNoise(0.2),
        TransformSpec::Brightness(1.5),
        TransformSpec::Contrast(2.0),
        TransformSpec::Hue(0.1),
        TransformSpec::Saturation(2.0),
        TransformSpec::Quantize(8),
        TransformSpec::Sharpness(2.0),
        TransformSpec::Blur(7),
        TransformSpec::DownscaleUpscale(0.7),
        TransformSpec::TextOverlay,
        TransformSpec::RandomCombination,
    ]
}

/// Apply one transform; bit-reproducible given the seed.
pub fn apply_transform(image: &Image, spec: &TransformSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let arr = image.data();
    let out = match spec {
        TransformSpec::Crop(area) => {
            let side = area.sqrt();
            let off = (1.0 - side) / 2.0;
            crate::coating::eot::EotTransform::CropResize { side, ox: off, oy: off }.apply(arr)
        }
        TransformSpec::Jpeg(q) => jpeg_roundtrip(image, *q)?,
        TransformSpec::GaussianNoise(sigma) => {
            let mut rng = stream(seed, "atk-noise", 0);
            let mut out = arr.clone();
            out.mapv_inplace(|v| v + *sigma as f32 * rng.sample::<f32, _>(StandardNormal));
            out
        }
        TransformSpec::Brightness(b) => arr.mapv(|v| v * *b as f32),
        TransformSpec::Contrast(c) => {
            let mean = luminance_mean(arr);
            arr.mapv(|v| (v - mean) * *c as f32 + mean)
        }
        TransformSpec::Hue(shift) => hsv_map(arr, |h, s, v| (h + shift, s, v)),
        TransformSpec::Saturation(f) => {
            let f = *f;
            hsv_map(arr, move |h, s, v| (h, (s * f).clamp(0.0, 1.0), v))
        }
        TransformSpec::Quantize(bits) => {
            let levels = ((1u32 << bits) - 1) as f32;
            arr.mapv(|v| (v * levels).round() / levels)
        }
        TransformSpec::Sharpness(f) => {
            let blurred = blur3(arr);
            let f = *f as f32;
            let mut out = arr.clone();
            out.zip_mut_with(&blurred, |v, &b| *v = b + f * (*v - b));
            out
        }
        TransformSpec::Blur(k) => gaussian_blur(arr, *k as usize),
        TransformSpec::DownscaleUpscale(f) => {
            let (_, h, w) = arr.dim();
            let dh = ((h as f64 * f).round() as usize).max(2);
            let dw = ((w as f64 * f).round() as usize).max(2);
            let small = bicubic_resize(arr, dh, dw);
            bicubic_resize(&small, h, w)
        }
        TransformSpec::TextOverlay => text_overlay(arr, seed),
        TransformSpec::RandomCombination => {
            let base = [
                TransformSpec::Crop(0.5),
                TransformSpec::Jpeg(60),
                TransformSpec::GaussianNoise(0.05),
                TransformSpec::Brightness(1.2),
                TransformSpec::Contrast(1.3),
                TransformSpec::Saturation(1.4),
                TransformSpec::Blur(3),
            ];
            let mut rng = stream(seed, "atk-comb", 0);
            let mut img = image.clone();
            let mut applied = 0;
            for (i, t) in base.iter().enumerate() {
                if rng.gen_bool(0.5) {
                    img = apply_transform(&img, t, derive_seed(seed, "comb-sub", i as u64))?;
                    applied += 1;
                }
            }
            if applied == 0 {
                img = apply_transform(&img, &base[0], derive_seed(seed, "comb-sub", 0))?;
            }
            return Ok(img);
        }
    };
    Ok(Image::clamped(out))
}

fn luminance_mean(arr: &Array3<f32>) -> f32 {
    let (_, h, w) = arr.dim();
    let mut acc = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            acc += 0.299 * f64::from(arr[(0, y, x)])
                + 0.587 * f64::from(arr[(1, y, x)])
                + 0.114 * f64::from(arr[(2, y, x)]);
        }
    }
    (acc / (h * w) as f64) as f32
}

fn hsv_map(arr: &Array3<f32>, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> Array3<f32> {
    let (_, h, w) = arr.dim();
    let mut out = arr.clone();
    for y in 0..h {
        for x in 0..w {
            let r = f64::from(arr[(0, y, x)]);
            let g = f64::from(arr[(1, y, x)]);
            let b = f64::from(arr[(2, y, x)]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let v = max;
            let s = if max > 0.0 { (max - min) / max } else { 0.0 };
            let hdeg = if max == min {
                0.0
            } else if (max - r).abs() < 1e-12 {
                ((g - b) / (max - min)).rem_euclid(6.0)
            } else if (max - g).abs() < 1e-12 {
                (b - r) / (max - min) + 2.0
            } else {
                (r - g) / (max - min) + 4.0
            } / 6.0;
            let (nh, ns, nv) = f(hdeg, s, v);
            let nh = nh.rem_euclid(1.0) * 6.0;
            let i = nh.floor();
            let frac = nh - i;
            let p = nv * (1.0 - ns);
            let q = nv * (1.0 - ns * frac);
            let t = nv * (1.0 - ns * (1.0 - frac));
            let (nr, ng, nb) = match i as u32 % 6 {
                0 => (nv, t, p),
                1 => (q, nv, p),
                2 => (p, nv, t),
                3 => (p, q, nv),
                4 => (t, p, nv),
                _ => (nv, p, q),
            };
            out[(0, y, x)] = nr as f32;
            out[(1, y, x)] = ng as f32;
            out[(2, y, x)] = nb as f32;
        }
    }
    out
}

/// Real JPEG encode/decode round trip at the given quality.
pub fn jpeg_roundtrip(image: &Image, quality: u8) -> Result<Array3<f32>> {
    let (c, h, w) = image.shape();
    if c != 3 {
        return Err(Error::domain("jpeg round trip expects 3 channels"));
    }
    let data = image.data();
    let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (data[(ch, y as usize, x as usize)] * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut bytes = Vec::new();
    {
        let mut cursor = std::io::Cursor::new(&mut bytes);
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut cursor, quality);
        image::DynamicImage::ImageRgb8(rgb).write_with_encoder(encoder)?;
    }
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)?.to_rgb8();
    Ok(Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
        f32::from(decoded.get_pixel(x as u32, y as u32)[ch]) / 255.0
    }))
}

fn cubic_kernel(t: f64) -> f64 {
    // Catmull-Rom (a = -0.5)
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn bicubic_resize(arr: &Array3<f32>, nh: usize, nw: usize) -> Array3<f32> {
    let (c, h, w) = arr.dim();
    let mut out = Array3::<f32>::zeros((c, nh, nw));
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    for oy in 0..nh {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor() as isize;
        for ox in 0..nw {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor() as isize;
            for ci in 0..c {
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for dy in -1..=2isize {
                    let yy = (y0 + dy).clamp(0, h as isize - 1) as usize;
                    let wy = cubic_kernel(fy - (y0 + dy) as f64);
                    for dx in -1..=2isize {
                        let xx = (x0 + dx).clamp(0, w as isize - 1) as usize;
                        let wx = cubic_kernel(fx - (x0 + dx) as f64);
                        acc += wy * wx * f64::from(arr[(ci, yy, xx)]);
                        wsum += wy * wx;
                    }
                }
                out[(ci, oy, ox)] = (acc / wsum) as f32;
            }
        }
    }
    out
}

fn gaussian_blur(arr: &Array3<f32>, k: usize) -> Array3<f32> {
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let half = (k / 2) as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|&v| (v / norm) as f32).collect();
    let (c, h, w) = arr.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let xi = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += kv * arr[(ci, y, xi)];
                }
                tmp[(ci, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let yi = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ci, yi, x)];
                }
                out[(ci, y, x)] = acc;
            }
        }
    }
    out
}

/// 5x7 digits/letters used by the text overlay, packed row-wise.
const GLYPH_W: [u64; 2] = [
    0b10001_10001_10001_10101_10101_11011_10001, // W
    0b10001_11011_10101_10001_10001_10001_10001, // M
];

fn text_overlay(arr: &Array3<f32>, seed: u64) -> Array3<f32> {
    let (c, h, w) = arr.dim();
    let mut out = arr.clone();
    // two 5x7 glyphs with one column spacing: 11 x 7 pixels
    let text_w = 11usize;
    let text_h = 7usize;
    if h < text_h || w < text_w {
        return out;
    }
    let mut rng = stream(seed, "overlay", 0);
    let oy = rng.gen_range(0..=h - text_h);
    let ox = rng.gen_range(0..=w - text_w);
    for (gi, glyph) in GLYPH_W.iter().enumerate() {
        for row in 0..7 {
            for col in 0..5 {
                let bit = (glyph >> ((6 - row) * 5 + (4 - col))) & 1;
                if bit == 1 {
                    for ci in 0..c {
                        out[(ci, oy + row, ox + gi * 6 + col)] = 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Training-time augmentation modes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// additive Gaussian noise, sigma 0.1
    Gaussian,
    /// JPEG compression, quality factor 40
    Jpeg,
}

/// Replace each coated training image with an augmented version.
pub fn train_time_augment(
    dataset: &[CoatingPair],
    mode: AugmentMode,
    seed: u64,
) -> Result<Vec<CoatingPair>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let spec = match mode {
                AugmentMode::Gaussian => TransformSpec::GaussianNoise(0.1),
                AugmentMode::Jpeg => TransformSpec::Jpeg(40),
            };
            let augmented =
                apply_transform(&pair.coated, &spec, derive_seed(seed, "ttaug", i as u64))?;
            let delta = augmented.data() - pair.original.data();
            let p = psnr(&pair.original, &augmented)?;
            Ok(CoatingPair {
                original: pair.original.clone(),
                coated: augmented,
                delta,
                class_label: pair.class_label,
                psnr_db: p,
            })
        })
        .collect()
}

/// Result of loss-based filtering and unlearning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblReport {
    pub per_sample_loss: Vec<f64>,
    pub filtered: Vec<usize>,
    pub filter_precision: f64,
    pub filter_recall: f64,
    pub unlearn_steps_run: usize,
    pub aborted_by_loss_cap: bool,
}

/// Loss-based filtering (lowest mean loss at fixed timesteps) followed by
/// gradient-ascent unlearning of the filtered set.
pub fn abl_filter_unlearn(
    model: &DiffusionModelState,
    dataset: &[(LabeledExample, bool)],
    filter_rate: f64,
    unlearn_steps: usize,
    train_lr: f64,
    seed: u64,
) -> Result<(DiffusionModelState, AblReport)> {
    if !(filter_rate > 0.0 && filter_rate < 1.0) {
        return Err(Error::domain("filter rate must lie in (0,1)"));
    }
    if dataset.is_empty() {
        return Err(Error::domain("ABL needs a non-empty dataset"));
    }
    let t_count = model.schedule.t_count();
    // anchors 100/400/700 on a 1000-step scale, rescaled proportionally
    let anchors: Vec<usize> = [100usize, 400, 700]
        .iter()
        .map(|&t| ((t * t_count) as f64 / 1000.0).round().max(1.0) as usize)
        .collect();
    let per_sample_loss: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, (ex, _))| {
            expected_loss_at_timesteps(
                model,
                &ex.image,
                ex.label,
                &anchors,
                4,
                derive_seed(seed, "abl", i as u64),
            )
        })
        .collect::<Result<Vec<f64>>>()?;

    let n_filter = (filter_rate * dataset.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| per_sample_loss[a].total_cmp(&per_sample_loss[b]));
    let filtered: Vec<usize> = order[..n_filter].to_vec();

    let coated_total = dataset.iter().filter(|(_, f)| *f).count();
    let coated_filtered = filtered.iter().filter(|&&i| dataset[i].1).count();
    let precision = coated_filtered as f64 / n_filter.max(1) as f64;
    let recall = if coated_total > 0 {
        coated_filtered as f64 / coated_total as f64
    } else {
        0.0
    };

    // unlearning: gradient ascent on the filtered set with a loss cap
    let mut unlearned = model.clone();
    let pre_loss = mean_filtered_loss(&unlearned, dataset, &filtered, &anchors, seed)?;
    let lr = (0.1 * train_lr) as f32;
    let mut steps_run = 0;
    let mut aborted = false;
    let shape = dataset[0].0.image.shape();
    let dim = (shape.0 * shape.1 * shape.2) as f64;
    for step in 0..unlearn_steps {
        let mut rng = stream(seed, "unlearn", step as u64);
        let bsz = filtered.len().min(8);
        let mut idx = filtered.clone();
        for i in 0..bsz {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(bsz);
        let mut z = Array4::<f32>::zeros((bsz, shape.0, shape.1, shape.2));
        let mut eps_batch = Array4::<f32>::zeros((bsz, shape.0, shape.1, shape.2));
        let mut ts = Vec::with_capacity(bsz);
        let mut labels = Vec::with_capacity(bsz);
        for (row, &di) in idx.iter().enumerate() {
            let t = rng.gen_range(1..=t_count);
            let eps =
                Array3::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal));
            z.index_axis_mut(Axis(0), row).assign(&unlearned.schedule.q_sample(
                dataset[di].0.image.data(),
                t,
                &eps,
            ));
            eps_batch.index_axis_mut(Axis(0), row).assign(&eps);
            ts.push(t);
            labels.push(dataset[di].0.label);
        }
        let (out, cache) = unlearned.net.forward(&z, &ts, &labels, true);
        let mut gout = Array4::<f32>::zeros(out.raw_dim());
        // reversed-sign diffusion loss: ascend instead of descend
        for ((gv, &ov), &ev) in gout.iter_mut().zip(out.iter()).zip(eps_batch.iter()) {
            *gv = (-2.0 * (f64::from(ov) - f64::from(ev)) / (dim * bsz as f64)) as f32;
        }
        unlearned.net.zero_grad();
        unlearned.net.backward(&cache.unwrap(), &gout);
        unlearned.net.sgd_step(lr);
        steps_run = step + 1;
        let now = mean_filtered_loss(&unlearned, dataset, &filtered, &anchors, seed)?;
        if !now.is_finite() || now > 10.0 * pre_loss.max(1e-6) {
            aborted = true;
            break;
        }
    }

    Ok((
        unlearned,
        AblReport {
            per_sample_loss,
            filtered,
            filter_precision: precision,
            filter_recall: recall,
            unlearn_steps_run: steps_run,
            aborted_by_loss_cap: aborted,
        },
    ))
}

fn mean_filtered_loss(
    model: &DiffusionModelState,
    dataset: &[(LabeledExample, bool)],
    filtered: &[usize],
    anchors: &[usize],
    seed: u64,
) -> Result<f64> {
    let losses: Vec<f64> = filtered
        .par_iter()
        .map(|&i| {
            expected_loss_at_timesteps(
                model,
                &dataset[i].0.image,
                dataset[i].0.label,
                anchors,
                2,
                derive_seed(seed, "abl-track", i as u64),
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Forward-noise an image to step `s`, then run the reverse process back.
pub fn self_purify(
    model: &DiffusionModelState,
    image: &Image,
    noise_step: usize,
    seed: u64,
) -> Result<Image> {
    let t_count = model.schedule.t_count();
    if noise_step > t_count {
        return Err(Error::domain(format!("noise step {noise_step} exceeds T = {t_count}")));
    }
    if noise_step == 0 {
        return Ok(image.clone());
    }
    let shape = image.shape();
    let mut rng = stream(seed, "purify", 0);
    let eps = Array3::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal));
    let mut z = model.schedule.q_sample(image.data(), noise_step, &eps);
    for t in (1..=noise_step).rev() {
        let zb = z.clone().insert_axis(Axis(0));
        let (eps_hat, _) = model.net.forward(&zb, &[t], &[0], false);
        let e = eps_hat.index_axis(Axis(0), 0);
        let beta = model.schedule.beta(t);
        let alpha = 1.0 - beta;
        let abar = model.schedule.alpha_bar(t);
        let abar_prev = model.schedule.alpha_bar(t - 1);
        let coef = (beta / (1.0 - abar).sqrt()) as f32;
        let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
        let sigma =
            if t > 1 { (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt() as f32 } else { 0.0 };
        z.zip_mut_with(&e, |zv, &ev| {
            *zv = inv_sqrt_alpha * (*zv - coef * ev);
        });
        if t > 1 {
            z.mapv_inplace(|v| v + sigma * rng.sample::<f32, _>(StandardNormal));
        }
    }
    Ok(Image::clamped(z))
}

/// Purification is class-unconditional here; callers that know the label can
/// purify per class by sampling with that label instead.
pub fn self_purify_labeled(
    model: &DiffusionModelState,
    image: &Image,
    label: usize,
    noise_step: usize,
    seed: u64,
) -> Result<Image> {
    let t_count = model.schedule.t_count();
    if noise_step > t_count {
        return Err(Error::domain(format!("noise step {noise_step} exceeds T = {t_count}")));
    }
    if noise_step == 0 {
        return Ok(image.clone());
    }
    let shape = image.shape();
    let mut rng = stream(seed, "purify", 0);
    let eps = Array3::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal));
    let mut z = model.schedule.q_sample(image.data(), noise_step, &eps);
    for t in (1..=noise_step).rev() {
        let zb = z.clone().insert_axis(Axis(0));
        let (eps_hat, _) = model.net.forward(&zb, &[t], &[label], false);
        let e = eps_hat.index_axis(Axis(0), 0);
        let beta = model.schedule.beta(t);
        let alpha = 1.0 - beta;
        let abar = model.schedule.alpha_bar(t);
        let abar_prev = model.schedule.alpha_bar(t - 1);
        let coef = (beta / (1.0 - abar).sqrt()) as f32;
        let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
        let sigma =
            if t > 1 { (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt() as f32 } else { 0.0 };
        z.zip_mut_with(&e, |zv, &ev| {
            *zv = inv_sqrt_alpha * (*zv - coef * ev);
        });
        if t > 1 {
            z.mapv_inplace(|v| v + sigma * rng.sample::<f32, _>(StandardNormal));
        }
    }
    Ok(Image::clamped(z))
}

/// Report of the uncoat-mapping attack training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncoatReport {
    pub train_mse: Vec<f64>,
    pub mean_psnr_vs_input: f64,
    pub diverged: bool,
}

/// Learn a coated -> clean mapping on auxiliary pairs and apply it to the
/// target mimicries.
pub fn uncoat_attack(
    aux_pairs: &[(Image, Image)],
    target_mimicries: &[Image],
    epochs: usize,
    seed: u64,
) -> Result<(Vec<Image>, UncoatReport)> {
    if aux_pairs.is_empty() {
        return Err(Error::domain("uncoat attack needs auxiliary pairs"));
    }
    let (c, _, _) = aux_pairs[0].0.shape();
    let mut rng = stream(seed, "uncoat-init", 0);
    // residual net, identity at initialization
    let mut net = GenNet::new(
        &mut rng,
        GenConfig { image_channels: c, channels: 32, blocks: 4, delta_scale: 0.5 },
    );
    let bsz = 8usize.min(aux_pairs.len());
    let mut train_mse = Vec::new();
    let mut diverged = false;
    let dim = {
        let (c, h, w) = aux_pairs[0].0.shape();
        (c * h * w) as f64
    };
    let steps_per_epoch = aux_pairs.len().div_ceil(bsz);
    let mut velocity = net.velocity_like();
    'outer: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..aux_pairs.len()).collect();
        let mut erng = stream(seed, "uncoat-epoch", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(bsz).take(steps_per_epoch) {
            let coated: Vec<&Image> = chunk.iter().map(|&i| &aux_pairs[i].0).collect();
            let clean: Vec<&Image> = chunk.iter().map(|&i| &aux_pairs[i].1).collect();
            let x = crate::data::stack_images(&coated);
            let y = crate::data::stack_images(&clean);
            let (delta, cache) = net.forward(&x, true);
            let pred = &x + &delta;
            let mut loss = 0.0f64;
            let mut gout = Array4::<f32>::zeros(pred.raw_dim());
            for ((gv, &pv), &yv) in gout.iter_mut().zip(pred.iter()).zip(y.iter()) {
                let d = f64::from(pv) - f64::from(yv);
                loss += d * d;
                *gv = (2.0 * d / (dim * chunk.len() as f64)) as f32;
            }
            loss /= dim * chunk.len() as f64;
            if !loss.is_finite() {
                diverged = true;
                break 'outer;
            }
            epoch_loss += loss;
            net.zero_grad();
            net.backward(&cache.unwrap(), &gout);
            net.sgd_momentum_step(&mut velocity, 0.05, 0.9);
        }
        train_mse.push(epoch_loss / steps_per_epoch as f64);
    }

    // apply to targets
    let purified: Vec<Image> = target_mimicries
        .par_iter()
        .map(|img| {
            let x = crate::data::stack_images(&[img]);
            let (delta, _) = net.forward(&x, false);
            Image::clamped((&x + &delta).index_axis(Axis(0), 0).to_owned())
        })
        .collect();
    let mut psnr_acc = 0.0f64;
    for (a, b) in target_mimicries.iter().zip(&purified) {
        psnr_acc += psnr(a, b)?;
    }
    let report = UncoatReport {
        train_mse,
        mean_psnr_vs_input: psnr_acc / target_mimicries.len().max(1) as f64,
        diverged,
    };
    Ok((purified, report))
}

/// Apply the trained mapping net to images (exposed for held-out checks).
pub fn apply_uncoat_net(net: &GenNet, images: &[Image]) -> Vec<Image> {
    images
        .iter()
        .map(|img| {
            let x = crate::data::stack_images(&[img]);
            let (delta, _) = net.forward(&x, false);
            Image::clamped((&x + &delta).index_axis(Axis(0), 0).to_owned())
        })
        .collect()
}
