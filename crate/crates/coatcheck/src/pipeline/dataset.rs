//! Dataset ingestion: synthetic shape corpora and PNG image folders.
//!
//! The synthetic corpus is the desk-scale personalization concept: a few
//! classes of parameterized geometric figures with per-sample jitter in
//! geometry and palette. A `family` seed selects a palette/geometry family so
//! disjoint corpora can be produced for meta-training and hold-out runs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::rng::stream;

/// Corpus provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    SyntheticShapes,
    ImageFolder,
}

/// On-disk dataset description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: CorpusKind,
    pub classes: usize,
    /// (channels, height, width) shared by every image
    pub geometry: (usize, usize, usize),
    /// (file name, class label), lexicographically ordered by file name
    pub entries: Vec<(String, usize)>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameters of the synthetic shapes corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub count: usize,
    pub size: usize,
    /// palette/geometry family; corpora with different families are disjoint
    pub family: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: 2, count: 200, size: 32, family: 0 }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Signed distances of the shape kinds used by the corpus.
fn shape_sdf(class: usize, px: f64, py: f64, cx: f64, cy: f64, r: f64, angle: f64) -> f64 {
    let dx = px - cx;
    let dy = py - cy;
    let (sa, ca) = angle.sin_cos();
    let rx = ca * dx + sa * dy;
    let ry = -sa * dx + ca * dy;
    match class % 3 {
        0 => (dx * dx + dy * dy).sqrt() - r,
        1 => {
            // box
            let qx = rx.abs() - r * 0.85;
            let qy = ry.abs() - r * 0.85;
            let ox = qx.max(0.0);
            let oy = qy.max(0.0);
            (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0)
        }
        _ => {
            // equilateral triangle
            let k = 3.0f64.sqrt();
            let mut x = rx.abs() - r;
            let mut y = ry + r / k;
            if x + k * y > 0.0 {
                let (nx, ny) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
                x = nx;
                y = ny;
            }
            x -= x.clamp(-2.0 * r, 0.0);
            -(x * x + y * y).sqrt() * y.signum()
        }
    }
}

/// Generate one sample of the given class.
fn synth_image(spec: &SynthSpec, class: usize, index: usize, seed: u64) -> Image {
    let mut rng = stream(seed, "synth", (class * spec.count + index) as u64);
    let mut fam = stream(spec.family, "synth-family", class as u64);
    let base_hue: f64 = fam.gen_range(0.0..1.0);
    let bg_hue: f64 = fam.gen_range(0.0..1.0);
    let size = spec.size as f64;

    let hue = base_hue + rng.gen_range(-0.04..0.04);
    let sat = 0.75 + rng.gen_range(-0.1..0.1);
    let val = 0.85 + rng.gen_range(-0.1..0.1);
    let fg = hsv_to_rgb(hue, sat, val);
    let bgv = 0.25 + rng.gen_range(-0.05..0.05);
    let bg = hsv_to_rgb(bg_hue + rng.gen_range(-0.03..0.03), 0.35, bgv);

    let cx = size / 2.0 + rng.gen_range(-3.0..3.0);
    let cy = size / 2.0 + rng.gen_range(-3.0..3.0);
    let r = size * 0.22 + rng.gen_range(-2.0..2.5);
    let angle: f64 = rng.gen_range(-0.3..0.3);
    let aa = 1.2f64;

    let arr = Array3::from_shape_fn((3, spec.size, spec.size), |(c, y, x)| {
        let d = shape_sdf(class, x as f64 + 0.5, y as f64 + 0.5, cx, cy, r, angle);
        let cov = (0.5 - d / (2.0 * aa)).clamp(0.0, 1.0);
        let v = bg[c] + (fg[c] - bg[c]) * cov;
        (v.clamp(0.0, 1.0)) as f32
    });
    Image::new(arr).expect("synthetic pixels are clamped")
}

/// Synthesize a labeled corpus: `count` examples over `classes` classes,
/// balanced (count must divide evenly or the remainder goes to early classes).
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<LabeledExample>> {
    if spec.classes == 0 || spec.count == 0 || spec.size < 8 {
        return Err(Error::domain("synthesis spec needs classes>0, count>0, size>=8"));
    }
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.classes;
        let index = i / spec.classes;
        out.push(LabeledExample { image: synth_image(spec, class, index, seed), label: class });
    }
    Ok(out)
}

/// Mean image of one class under a spec, for template-matching checks.
pub fn class_template(spec: &SynthSpec, class: usize, samples: usize, seed: u64) -> Image {
    let mut acc = Array3::<f64>::zeros((3, spec.size, spec.size));
    for i in 0..samples {
        let img = synth_image(spec, class, i, seed);
        acc.zip_mut_with(img.data(), |a, &v| *a += f64::from(v));
    }
    Image::clamped(acc.mapv(|v| (v / samples as f64) as f32))
}

// ---------------------------------------------------------------------------
// PNG folder I/O
// ---------------------------------------------------------------------------

fn image_to_rgb8(img: &Image) -> image::RgbImage {
    let (c, h, w) = img.shape();
    assert_eq!(c, 3);
    let data = img.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| -> u8 {
            (data[(ch, y as usize, x as usize)] * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn rgb8_to_image(img: &image::RgbImage) -> Image {
    let (w, h) = img.dimensions();
    let arr = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    Image::new(arr).expect("8-bit pixels are in range")
}

/// Write a dataset as PNGs plus a manifest.
pub fn save_dataset(
    dir: &Path,
    examples: &[LabeledExample],
    kind: CorpusKind,
) -> Result<DatasetManifest> {
    if examples.is_empty() {
        return Err(Error::domain("cannot save an empty dataset"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let geometry = examples[0].image.shape();
    let classes = examples.iter().map(|e| e.label).max().unwrap() + 1;
    let mut entries = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if ex.image.shape() != geometry {
            return Err(Error::Ingestion(format!("example {i} has mixed geometry")));
        }
        let name = format!("img_{i:05}_c{}.png", ex.label);
        let path = dir.join(&name);
        image_to_rgb8(&ex.image)
            .save_with_format(&path, image::ImageFormat::Png)?;
        entries.push((name, ex.label));
    }
    entries.sort();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        kind,
        classes,
        geometry,
        entries,
        root: dir.to_path_buf(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    Ok(manifest)
}

/// Load a dataset folder written by `save_dataset` (or hand-assembled with a
/// compatible manifest).
pub fn ingest_folder(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledExample>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(manifest_path.clone(), e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.format_version
        )));
    }
    manifest.root = dir.to_path_buf();
    let mut entries = manifest.entries.clone();
    entries.sort();
    // labels must form a contiguous 0..C-1 set
    let mut seen = vec![false; manifest.classes];
    for (_, label) in &entries {
        if *label >= manifest.classes {
            return Err(Error::Ingestion(format!(
                "label {label} outside 0..{}",
                manifest.classes
            )));
        }
        seen[*label] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Ingestion("labels are not a contiguous 0..C-1 set".into()));
    }
    let mut examples = Vec::with_capacity(entries.len());
    for (name, label) in &entries {
        let path = dir.join(name);
        let dyn_img = image::open(&path)?;
        let rgb = dyn_img.to_rgb8();
        let img = rgb8_to_image(&rgb);
        if img.shape() != manifest.geometry {
            return Err(Error::Ingestion(format!(
                "{name}: geometry {:?} differs from manifest {:?}",
                img.shape(),
                manifest.geometry
            )));
        }
        examples.push(LabeledExample { image: img, label: *label });
    }
    manifest.entries = entries;
    Ok((manifest, examples))
}

/// Quantize to 8-bit exactly as the PNG round trip would.
pub fn quantize_to_png_precision(img: &Image) -> Image {
    Image::clamped(img.data().mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_balanced_and_deterministic() {
        let spec = SynthSpec { classes: 2, count: 200, size: 32, family: 0 };
        let data = synth_dataset(&spec, 1).unwrap();
        assert_eq!(data.len(), 200);
        assert_eq!(data.iter().filter(|e| e.label == 0).count(), 100);
        assert_eq!(data.iter().filter(|e| e.label == 1).count(), 100);
        let again = synth_dataset(&spec, 1).unwrap();
        for (a, b) in data.iter().zip(&again) {
            assert_eq!(a.image.data(), b.image.data());
        }
        // distinct samples within a class
        assert_ne!(data[0].image.data(), data[2].image.data());
    }

    #[test]
    fn families_differ() {
        let a = synth_dataset(&SynthSpec { family: 0, ..Default::default() }, 1).unwrap();
        let b = synth_dataset(&SynthSpec { family: 9, ..Default::default() }, 1).unwrap();
        assert_ne!(a[0].image.data(), b[0].image.data());
    }

    #[test]
    fn folder_roundtrip_preserves_bytes() {
        let dir = std::env::temp_dir().join(format!("coatcheck-ds-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let spec = SynthSpec { classes: 2, count: 8, size: 16, family: 3 };
        let data = synth_dataset(&spec, 5).unwrap();
        let quantized: Vec<LabeledExample> = data
            .iter()
            .map(|e| LabeledExample {
                image: quantize_to_png_precision(&e.image),
                label: e.label,
            })
            .collect();
        save_dataset(&dir, &data, CorpusKind::SyntheticShapes).unwrap();
        let (manifest, loaded) = ingest_folder(&dir).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        for (orig, back) in quantized.iter().zip(&loaded) {
            assert_eq!(orig.image.data(), back.image.data());
            assert_eq!(orig.label, back.label);
        }
        // two ingestions agree bytewise
        let (_, loaded2) = ingest_folder(&dir).unwrap();
        for (a, b) in loaded.iter().zip(&loaded2) {
            assert_eq!(a.image.data(), b.image.data());
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn mis_sized_image_is_rejected_by_name() {
        let dir = std::env::temp_dir().join(format!("coatcheck-bad-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let spec = SynthSpec { classes: 2, count: 4, size: 16, family: 0 };
        let data = synth_dataset(&spec, 5).unwrap();
        save_dataset(&dir, &data, CorpusKind::SyntheticShapes).unwrap();
        // overwrite one file with a different geometry
        let bad = image::RgbImage::new(8, 8);
        bad.save_with_format(dir.join("img_00002_c0.png"), image::ImageFormat::Png).unwrap();
        let err = ingest_folder(&dir).unwrap_err();
        assert!(err.to_string().contains("img_00002_c0.png"), "{err}");
        let _ = fs::remove_dir_all(&dir);
    }
}
