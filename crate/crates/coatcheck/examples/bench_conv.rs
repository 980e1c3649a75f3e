//! Rough conv throughput probe used to size the toy networks.

use std::time::Instant;

use coatcheck::nn::conv::{conv2d_forward, ConvGeom};
use ndarray::{Array2, Array4};

fn main() {
    for &(c, h, batch) in &[(32usize, 16usize, 64usize), (64, 8, 64), (32, 32, 64), (16, 32, 64)] {
        let geom = ConvGeom { in_ch: c, out_ch: c, kernel: 3, stride: 1, pad: 1 };
        let x = Array4::<f32>::from_elem((batch, c, h, h), 0.5);
        let w = Array2::<f32>::from_elem((c, c * 9), 0.01);
        let b = vec![0.0f32; c];
        let t0 = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let y = conv2d_forward(&x.view(), &w.view(), &b, &geom);
            std::hint::black_box(&y);
        }
        let dt = t0.elapsed().as_secs_f64();
        let macs = (batch * c * c * 9 * h * h * reps) as f64;
        println!(
            "c={c:3} h={h:3} batch={batch}: {:.3} s, {:.1} GFLOP/s",
            dt,
            2.0 * macs / dt / 1e9
        );
    }
}
