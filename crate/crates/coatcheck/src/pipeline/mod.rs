//! Dataset ingestion, persistence, experiment orchestration, and reporting.

pub mod dataset;

use crate::data::Image;
use crate::error::{Error, Result};

/// Peak signal-to-noise ratio in dB with peak 1.0, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Normalized cross-correlation between two images in [-1, 1].
pub fn normalized_cross_correlation(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ncc: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.data().len() as f64;
    let mean = |img: &Image| img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let mut num = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let dx = f64::from(x) - ma;
        let dy = f64::from(y) - mb;
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (va.sqrt() * vb.sqrt()))
}
