//! im2col-based 2-D convolution with explicit forward and backward passes.
//!
//! Images are unfolded in chunks so each GEMM is large enough to saturate the
//! kernel; chunks run on the rayon pool and are recombined in index order, so
//! results are bit-identical regardless of worker count.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array4, ArrayView2, ArrayView4};
use rayon::prelude::*;

/// Spatial geometry of a convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Images per unfolded GEMM; keeps the cols buffer around a few tens of MB.
const CHUNK: usize = 16;

/// Unfold images `n0..n1` into columns (ci*k*k, (n1-n0)*ho*wo).
fn im2col_chunk(x: &ArrayView4<f32>, n0: usize, n1: usize, geom: &ConvGeom) -> Array2<f32> {
    let (_, ci, h, w) = x.dim();
    let (ho, wo) = geom.out_hw(h, w);
    let k = geom.kernel;
    let st = geom.stride;
    let p = geom.pad as isize;
    let cols_per_img = ho * wo;
    let mut cols = Array2::<f32>::zeros((ci * k * k, (n1 - n0) * cols_per_img));
    for n in n0..n1 {
        let base = (n - n0) * cols_per_img;
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    if st == 1 {
                        // contiguous row segments: ox + kx - p must land in [0, w)
                        let ox0 = (p - kx as isize).max(0) as usize;
                        let ox1 = ((w as isize + p - kx as isize).min(wo as isize)).max(0) as usize;
                        if ox1 <= ox0 {
                            continue;
                        }
                        let ix0 = (ox0 as isize + kx as isize - p) as usize;
                        let len = ox1 - ox0;
                        let mut row_view = cols.row_mut(row);
                        let dst_all = row_view.as_slice_mut().unwrap();
                        for oy in 0..ho {
                            let iy = oy as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = x.slice(s![n, c, iy as usize, ix0..ix0 + len]);
                            let src = src.to_slice().unwrap();
                            let off = base + oy * wo + ox0;
                            dst_all[off..off + len].copy_from_slice(src);
                        }
                    } else {
                        for oy in 0..ho {
                            let iy = (oy * st) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue; // zeros already in place
                            }
                            let out_off = base + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * st) as isize + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    cols[(row, out_off + ox)] =
                                        x[(n, c, iy as usize, ix as usize)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns for images `n0..n1` back onto the input gradient.
fn col2im_chunk_add(
    cols: &ArrayView2<f32>,
    n0: usize,
    n1: usize,
    geom: &ConvGeom,
    gx: &mut Array4<f32>,
) {
    let (_, ci, h, w) = gx.dim();
    let (ho, wo) = geom.out_hw(h, w);
    let k = geom.kernel;
    let st = geom.stride;
    let p = geom.pad as isize;
    let cols_per_img = ho * wo;
    for n in n0..n1 {
        let base = (n - n0) * cols_per_img;
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * st) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let out_off = base + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * st) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                gx[(n, c, iy as usize, ix as usize)] += cols[(row, out_off + ox)];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// y[n] = weight (co, ci*k*k) x cols(x[n]) + bias.
pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    weight: &ArrayView2<f32>,
    bias: &[f32],
    geom: &ConvGeom,
) -> Array4<f32> {
    let (nb, _, h, w) = x.dim();
    let (ho, wo) = geom.out_hw(h, w);
    let ranges: Vec<(usize, usize)> =
        (0..nb).step_by(CHUNK).map(|n0| (n0, (n0 + CHUNK).min(nb))).collect();
    let parts: Vec<Array2<f32>> = ranges
        .par_iter()
        .map(|&(n0, n1)| {
            let cols = im2col_chunk(x, n0, n1, geom);
            let mut out = Array2::<f32>::zeros((geom.out_ch, (n1 - n0) * ho * wo));
            general_mat_mul(1.0, weight, &cols.view(), 0.0, &mut out);
            out
        })
        .collect();
    let mut y = Array4::<f32>::zeros((nb, geom.out_ch, ho, wo));
    let cols_per_img = ho * wo;
    for (&(n0, n1), out) in ranges.iter().zip(&parts) {
        for n in n0..n1 {
            let base = (n - n0) * cols_per_img;
            for co in 0..geom.out_ch {
                let b = bias[co];
                let row = out.row(co);
                let src = &row.to_slice().unwrap()[base..base + cols_per_img];
                let mut dst_view = y.slice_mut(s![n, co, .., ..]);
                let dst = dst_view.as_slice_mut().unwrap();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    y
}

/// Gradients of the convolution; returns grad wrt input and accumulates
/// weight/bias grads.
pub fn conv2d_backward(
    x: &ArrayView4<f32>,
    weight: &ArrayView2<f32>,
    gy: &ArrayView4<f32>,
    geom: &ConvGeom,
    gw: &mut Array2<f32>,
    gb: &mut [f32],
) -> Array4<f32> {
    let (nb, _, h, w) = x.dim();
    let (ho, wo) = geom.out_hw(h, w);
    let cols_per_img = ho * wo;
    let ranges: Vec<(usize, usize)> =
        (0..nb).step_by(CHUNK).map(|n0| (n0, (n0 + CHUNK).min(nb))).collect();
    struct Part {
        gx: Array4<f32>,
        gw: Array2<f32>,
        gb: Array1<f32>,
        n0: usize,
        n1: usize,
    }
    let parts: Vec<Part> = ranges
        .par_iter()
        .map(|&(n0, n1)| {
            let span = n1 - n0;
            let mut gy_mat = Array2::<f32>::zeros((geom.out_ch, span * cols_per_img));
            for n in n0..n1 {
                let base = (n - n0) * cols_per_img;
                for co in 0..geom.out_ch {
                    let src_view = gy.slice(s![n, co, .., ..]);
                    let src = src_view.to_slice().unwrap();
                    let mut row = gy_mat.row_mut(co);
                    let dst = row.as_slice_mut().unwrap();
                    dst[base..base + cols_per_img].copy_from_slice(src);
                }
            }
            let cols = im2col_chunk(x, n0, n1, geom);
            let mut gw_part = Array2::<f32>::zeros(gw.raw_dim());
            general_mat_mul(1.0, &gy_mat.view(), &cols.t(), 0.0, &mut gw_part);
            let gb_part = gy_mat.sum_axis(ndarray::Axis(1));
            let mut gcols =
                Array2::<f32>::zeros((geom.in_ch * geom.kernel * geom.kernel, span * cols_per_img));
            general_mat_mul(1.0, &weight.t(), &gy_mat.view(), 0.0, &mut gcols);
            let mut gx_part = Array4::<f32>::zeros((span, geom.in_ch, h, w));
            // scatter into a chunk-local buffer indexed from zero
            let gx_view = {
                // shift base: reuse col2im on a view starting at n0 by passing
                // local coordinates
                &mut gx_part
            };
            col2im_chunk_add(&gcols.view(), 0, span, geom, gx_view);
            Part { gx: gx_part, gw: gw_part, gb: gb_part, n0, n1 }
        })
        .collect();
    let mut gx = Array4::<f32>::zeros(x.raw_dim());
    for part in parts {
        gx.slice_mut(s![part.n0..part.n1, .., .., ..]).assign(&part.gx);
        *gw += &part.gw;
        for (acc, v) in gb.iter_mut().zip(part.gb.iter()) {
            *acc += v;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn naive_conv(
        x: &Array4<f32>,
        w: &ndarray::Array2<f32>,
        b: &[f32],
        geom: &ConvGeom,
    ) -> Array4<f32> {
        let (nb, ci, h, wd) = x.dim();
        let (ho, wo) = geom.out_hw(h, wd);
        let k = geom.kernel;
        let mut y = Array4::<f32>::zeros((nb, geom.out_ch, ho, wo));
        for n in 0..nb {
            for co in 0..geom.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[(n, c, iy as usize, ix as usize)]
                                            * w[(co, (c * k + ky) * k + kx)];
                                    }
                                }
                            }
                        }
                        y[(n, co, oy, ox)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(1, "convtest", 0);
        for &(stride, h, nb) in &[(1usize, 6usize, 2usize), (2, 6, 2), (1, 5, 3), (2, 7, 18)] {
            let geom = ConvGeom { in_ch: 3, out_ch: 4, kernel: 3, stride, pad: 1 };
            let x = Array4::from_shape_fn((nb, 3, h, h), |_| rng.gen_range(-1.0..1.0f32));
            let w = ndarray::Array2::from_shape_fn((4, 27), |_| rng.gen_range(-0.5..0.5f32));
            let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let y = conv2d_forward(&x.view(), &w.view(), &b, &geom);
            let yn = naive_conv(&x, &w, &b, &geom);
            for (a, e) in y.iter().zip(yn.iter()) {
                assert!((a - e).abs() < 1e-4, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(2, "convtest", 1);
        let geom = ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let x = Array4::from_shape_fn((1, 2, 6, 6), |_| rng.gen_range(-1.0..1.0f32));
        let w = ndarray::Array2::from_shape_fn((3, 18), |_| rng.gen_range(-0.5..0.5f32));
        let b: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        // scalar loss: weighted sum of outputs with fixed coefficients
        let coeff: Vec<f32> = {
            let y = conv2d_forward(&x.view(), &w.view(), &b, &geom);
            (0..y.len()).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect()
        };
        let loss = |x: &Array4<f32>, w: &ndarray::Array2<f32>, b: &[f32]| -> f64 {
            let y = conv2d_forward(&x.view(), &w.view(), b, &geom);
            y.iter().zip(&coeff).map(|(v, c)| f64::from(v * c)).sum()
        };
        let y = conv2d_forward(&x.view(), &w.view(), &b, &geom);
        let mut gy = Array4::<f32>::zeros(y.raw_dim());
        for (i, g) in gy.iter_mut().enumerate() {
            *g = coeff[i];
        }
        let mut gw = ndarray::Array2::<f32>::zeros(w.raw_dim());
        let mut gb = vec![0.0f32; 3];
        let gx = conv2d_backward(&x.view(), &w.view(), &gy.view(), &geom, &mut gw, &mut gb);

        let eps = 1e-3f32;
        // input grads
        let mut xm = x.clone();
        for idx in [(0, 0, 0, 0), (0, 1, 3, 2), (0, 0, 5, 5), (0, 1, 2, 4)] {
            let orig = xm[idx];
            xm[idx] = orig + eps;
            let lp = loss(&xm, &w, &b);
            xm[idx] = orig - eps;
            let lm = loss(&xm, &w, &b);
            xm[idx] = orig;
            let fd = (lp - lm) / f64::from(2.0 * eps);
            assert!((fd - f64::from(gx[idx])).abs() < 1e-2, "gx {fd} vs {}", gx[idx]);
        }
        // weight grads
        let mut wm = w.clone();
        for idx in [(0, 0), (1, 9), (2, 17)] {
            let orig = wm[idx];
            wm[idx] = orig + eps;
            let lp = loss(&x, &wm, &b);
            wm[idx] = orig - eps;
            let lm = loss(&x, &wm, &b);
            wm[idx] = orig;
            let fd = (lp - lm) / f64::from(2.0 * eps);
            assert!((fd - f64::from(gw[idx])).abs() < 1e-2, "gw {fd} vs {}", gw[idx]);
        }
    }

    #[test]
    fn bias_grad_accumulates_across_chunks() {
        let geom = ConvGeom { in_ch: 1, out_ch: 1, kernel: 3, stride: 1, pad: 1 };
        let x = Array4::<f32>::from_elem((CHUNK + 3, 1, 4, 4), 0.3);
        let w = ndarray::Array2::<f32>::from_elem((1, 9), 0.1);
        let gy = Array4::<f32>::from_elem((CHUNK + 3, 1, 4, 4), 1.0);
        let mut gw = ndarray::Array2::<f32>::zeros((1, 9));
        let mut gb = vec![0.0f32; 1];
        let _ = conv2d_backward(&x.view(), &w.view(), &gy.view(), &geom, &mut gw, &mut gb);
        let expect = ((CHUNK + 3) * 16) as f32;
        assert!((gb[0] - expect).abs() < 1e-3);
    }
}
