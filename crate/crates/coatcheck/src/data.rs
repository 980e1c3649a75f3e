//! Core data types shared across modules.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// Floating-point pixel tensor, channels x height x width, values in [0, 1],
/// sRGB interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Wrap a tensor, validating the [0, 1] range.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(Image { data })
    }

    /// Wrap a tensor, clamping values into [0, 1].
    pub fn clamped(mut data: Array3<f32>) -> Self {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Image { data }
    }

    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        Image::new(Array3::from_shape_fn((c, h, w), |(ci, y, x)| f(ci, y, x)))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Mean squared difference to another image of the same shape.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!("mse: {:?} vs {:?}", self.shape(), other.shape())));
        }
        let n = self.data.len() as f64;
        let acc: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        Ok(acc / n)
    }
}

/// An image plus the class label standing in for its text prompt.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// Stack images into a batch tensor (n, c, h, w).
pub fn stack_images(images: &[&Image]) -> Array4<f32> {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].shape();
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img.data());
    }
    out
}

/// Slice one image out of a batch tensor, clamping into [0, 1].
pub fn image_from_batch(batch: &Array4<f32>, index: usize) -> Image {
    Image::clamped(batch.index_axis(ndarray::Axis(0), index).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_out_of_range() {
        let arr = Array3::from_elem((3, 2, 2), 1.5f32);
        assert!(Image::new(arr).is_err());
    }

    #[test]
    fn clamped_clamps() {
        let mut arr = Array3::from_elem((1, 1, 2), 0.5f32);
        arr[(0, 0, 0)] = -3.0;
        arr[(0, 0, 1)] = 7.0;
        let img = Image::clamped(arr);
        assert_eq!(img.data()[(0, 0, 0)], 0.0);
        assert_eq!(img.data()[(0, 0, 1)], 1.0);
    }

    #[test]
    fn stack_and_unstack_roundtrip() {
        let a = Image::from_fn(3, 2, 2, |c, y, x| (c + y + x) as f32 / 8.0).unwrap();
        let b = Image::from_fn(3, 2, 2, |c, y, x| (c * y * x) as f32 / 8.0).unwrap();
        let batch = stack_images(&[&a, &b]);
        assert_eq!(batch.dim(), (2, 3, 2, 2));
        assert_eq!(&image_from_batch(&batch, 0), &a);
        assert_eq!(&image_from_batch(&batch, 1), &b);
    }
}
