//! Soft-boundary one-class classification in the extractor's embedding space:
//! center/radius maintenance, the positive/negative hypersphere losses, and
//! the coating score used at verification time.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Center, radius, and trade-off of the learned hypersphere.
#[derive(Debug, Clone)]
pub struct HypersphereState {
    pub center: Array1<f64>,
    pub radius: f64,
    pub nu: f64,
}

impl HypersphereState {
    pub fn new(center: Array1<f64>, radius: f64, nu: f64) -> Result<Self> {
        if radius < 0.0 {
            return Err(Error::domain("radius must be non-negative"));
        }
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::domain("nu must lie in (0, 1]"));
        }
        Ok(HypersphereState { center, radius, nu })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

/// Squared distance of an embedding to the hypersphere center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoatingScore {
    pub value: f64,
}

/// Lower clamp for the log argument of the negative loss.
const LOG_GUARD: f64 = 1e-12;

fn sq_dist(embedding: &[f32], center: &[f64]) -> f64 {
    embedding
        .iter()
        .zip(center)
        .map(|(&e, &c)| {
            let d = f64::from(e) - c;
            d * d
        })
        .sum()
}

/// s(x) = ||embedding - o||^2.
pub fn coating_score(embedding: &[f32], state: &HypersphereState) -> Result<CoatingScore> {
    if embedding.len() != state.dim() {
        return Err(Error::shape(format!(
            "embedding dim {} != center dim {}",
            embedding.len(),
            state.dim()
        )));
    }
    Ok(CoatingScore { value: sq_dist(embedding, state.center.as_slice().unwrap()) })
}

/// Positive and negative hypersphere losses.
///
/// L+ = nu R^2 + mean_i max(0, d_i^2 - R^2) over positives;
/// L- = -mean_j log(1 - exp(-d_j^2)) over negatives (0 when empty).
pub fn hypersphere_losses(
    positive: &Array2<f32>,
    negative: &Array2<f32>,
    state: &HypersphereState,
) -> Result<(f64, f64)> {
    let (lp, ln, _, _) = losses_with_grads(positive, negative, state, false)?;
    Ok((lp, ln))
}

/// Losses plus gradients with respect to the embeddings. No gradient flows
/// into the center; it is re-estimated outside the step.
pub fn hypersphere_losses_grad(
    positive: &Array2<f32>,
    negative: &Array2<f32>,
    state: &HypersphereState,
) -> Result<(f64, f64, Array2<f32>, Array2<f32>)> {
    let (lp, ln, gp, gn) = losses_with_grads(positive, negative, state, true)?;
    Ok((lp, ln, gp.unwrap(), gn.unwrap()))
}

#[allow(clippy::type_complexity)]
fn losses_with_grads(
    positive: &Array2<f32>,
    negative: &Array2<f32>,
    state: &HypersphereState,
    want_grads: bool,
) -> Result<(f64, f64, Option<Array2<f32>>, Option<Array2<f32>>)> {
    let d = state.dim();
    if positive.nrows() == 0 {
        return Err(Error::domain("positive embedding list must be non-empty"));
    }
    if positive.ncols() != d || (negative.nrows() > 0 && negative.ncols() != d) {
        return Err(Error::shape("embedding dimension mismatch with hypersphere"));
    }
    let center = state.center.as_slice().unwrap();
    let r_sq = state.radius * state.radius;
    let np = positive.nrows() as f64;

    let mut l_pos = state.nu * r_sq;
    let mut g_pos = want_grads.then(|| Array2::<f32>::zeros(positive.raw_dim()));
    for (i, row) in positive.rows().into_iter().enumerate() {
        let dist_sq = sq_dist(row.as_slice().unwrap(), center);
        let excess = dist_sq - r_sq;
        if excess > 0.0 {
            l_pos += excess / np;
            if let Some(g) = g_pos.as_mut() {
                for (j, (&e, &c)) in row.iter().zip(center).enumerate() {
                    g[(i, j)] = (2.0 * (f64::from(e) - f64::from(c)) / np) as f32;
                }
            }
        }
    }

    let mut l_neg = 0.0f64;
    let mut g_neg = want_grads.then(|| Array2::<f32>::zeros(negative.raw_dim()));
    if negative.nrows() > 0 {
        let nn = negative.nrows() as f64;
        for (i, row) in negative.rows().into_iter().enumerate() {
            let dist_sq = sq_dist(row.as_slice().unwrap(), center);
            let arg = 1.0 - (-dist_sq).exp();
            if arg <= LOG_GUARD {
                l_neg += -(LOG_GUARD).ln() / nn;
                // clamped region: constant, zero gradient
            } else {
                l_neg += -arg.ln() / nn;
                if let Some(g) = g_neg.as_mut() {
                    let coeff = -(-dist_sq).exp() / arg / nn;
                    for (j, (&e, &c)) in row.iter().zip(center).enumerate() {
                        g[(i, j)] = (coeff * 2.0 * (f64::from(e) - c)) as f32;
                    }
                }
            }
        }
    }

    Ok((l_pos, l_neg, g_pos, g_neg))
}

/// Mean embedding and Algorithm-style radius initialization
/// R = sqrt(mean squared distance to the center).
pub fn init_geometry(positive: &Array2<f32>, nu: f64) -> Result<HypersphereState> {
    if positive.nrows() == 0 {
        return Err(Error::domain("cannot initialize geometry from an empty batch"));
    }
    let center = mean_rows(positive);
    let c = center.as_slice().unwrap();
    let mean_sq = positive
        .rows()
        .into_iter()
        .map(|r| sq_dist(r.as_slice().unwrap(), c))
        .sum::<f64>()
        / positive.nrows() as f64;
    HypersphereState::new(center, mean_sq.sqrt(), nu)
}

fn mean_rows(data: &Array2<f32>) -> Array1<f64> {
    let n = data.nrows() as f64;
    let mut acc = vec![0.0f64; data.ncols()];
    for row in data.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    Array1::from_iter(acc.into_iter().map(|v| v / n))
}

/// One-dimensional objective the radius line search minimizes, in u = R^2.
fn radius_objective(u: f64, sq_dists: &[f64], nu: f64) -> f64 {
    let hinge: f64 = sq_dists.iter().map(|&d| (d - u).max(0.0)).sum::<f64>() / sq_dists.len() as f64;
    nu * u + hinge
}

/// Golden-section minimization of a unimodal function on [lo, hi].
fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Re-center on the batch mean and line-search the radius.
///
/// The exact 1-D objective nu R^2 + mean hinge is piecewise linear in R^2
/// with its minimum at the ceil((1-nu) N)-th order statistic of squared
/// distances; the golden-section refinement is seeded with that closed form
/// and keeps whichever attains the lower objective.
pub fn update_geometry(positive: &Array2<f32>, state: &HypersphereState) -> Result<HypersphereState> {
    if positive.nrows() == 0 {
        return Err(Error::domain("cannot update geometry from an empty batch"));
    }
    if positive.ncols() != state.dim() {
        return Err(Error::shape("embedding dimension mismatch with hypersphere"));
    }
    let center = mean_rows(positive);
    let c = center.as_slice().unwrap();
    let mut sq_dists: Vec<f64> =
        positive.rows().into_iter().map(|r| sq_dist(r.as_slice().unwrap(), c)).collect();
    sq_dists.sort_by(f64::total_cmp);
    let n = sq_dists.len();
    let max_sq = *sq_dists.last().unwrap();

    let k = ((1.0 - state.nu) * n as f64).ceil() as usize;
    let u_closed = if k == 0 { 0.0 } else { sq_dists[k - 1] };

    let u_golden = golden_section_min(|u| radius_objective(u, &sq_dists, state.nu), 0.0, max_sq, 1e-6);
    let u_best = if radius_objective(u_closed, &sq_dists, state.nu)
        <= radius_objective(u_golden, &sq_dists, state.nu)
    {
        u_closed
    } else {
        u_golden
    };
    HypersphereState::new(center, u_best.max(0.0).sqrt(), state.nu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn state(center: Vec<f64>, radius: f64, nu: f64) -> HypersphereState {
        HypersphereState::new(Array1::from_vec(center), radius, nu).unwrap()
    }

    #[test]
    fn score_basics() {
        let st = state(vec![0.0, 0.0, 0.0], 1.0, 0.5);
        assert_eq!(coating_score(&[0.0, 0.0, 0.0], &st).unwrap().value, 0.0);
        assert_eq!(coating_score(&[1.0, 0.0, 0.0], &st).unwrap().value, 1.0);
        assert!(coating_score(&[1.0, 0.0], &st).is_err());
    }

    #[test]
    fn score_matches_naive_loop() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(3, "sphere", 0);
        for _ in 0..10 {
            let center: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let emb: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let st = state(center.clone(), 1.0, 0.5);
            let mut naive = 0.0f64;
            for i in 0..16 {
                let d = f64::from(emb[i]) - center[i];
                naive += d * d;
            }
            let got = coating_score(&emb, &st).unwrap().value;
            assert!((got - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn positive_loss_reduces_to_volume_term_inside() {
        let st = state(vec![0.0, 0.0], 2.0, 0.5);
        let pos = array![[0.1f32, 0.2], [-0.5, 0.5], [1.0, 0.0]];
        let (lp, ln) = hypersphere_losses(&pos, &Array2::zeros((0, 2)), &st).unwrap();
        assert!((lp - 0.5 * 4.0).abs() < 1e-12);
        assert_eq!(ln, 0.0);
    }

    #[test]
    fn positive_loss_single_violator() {
        // one positive at squared distance R^2 + mu, rest inside, N positives
        let st = state(vec![0.0, 0.0], 1.0, 0.5);
        let mu = 0.76f64;
        let outside = (1.0 + mu).sqrt() as f32;
        let pos = array![[0.1f32, 0.0], [0.0, 0.2], [outside, 0.0], [0.3, 0.3]];
        let (lp, _) = hypersphere_losses(&pos, &Array2::zeros((0, 2)), &st).unwrap();
        let expect = 0.5 + mu / 4.0;
        assert!((lp - expect).abs() < 1e-5, "{lp} vs {expect}");
    }

    #[test]
    fn negative_at_center_hits_log_guard() {
        let st = state(vec![0.0, 0.0], 1.0, 0.5);
        let pos = array![[0.1f32, 0.0]];
        let neg = array![[0.0f32, 0.0]];
        let (_, ln) = hypersphere_losses(&pos, &neg, &st).unwrap();
        assert!((ln - (-(1e-12f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn negative_loss_decreases_with_distance() {
        let st = state(vec![0.0], 1.0, 0.5);
        let pos = array![[0.0f32]];
        let mut prev = f64::INFINITY;
        for dist in [0.5f32, 1.0, 2.0, 4.0] {
            let neg = array![[dist]];
            let (_, ln) = hypersphere_losses(&pos, &neg, &st).unwrap();
            assert!(ln >= 0.0);
            assert!(ln < prev);
            prev = ln;
        }
    }

    #[test]
    fn update_geometry_single_point() {
        let st = state(vec![0.0, 0.0, 0.0], 5.0, 0.5);
        let pos = array![[1.0f32, -2.0, 0.5]];
        let new = update_geometry(&pos, &st).unwrap();
        assert_eq!(new.center.as_slice().unwrap(), &[1.0, -2.0, 0.5]);
        assert_eq!(new.radius, 0.0);
    }

    #[test]
    fn update_geometry_center_is_mean() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(8, "sphere", 1);
        let pos = Array2::from_shape_fn((9, 4), |_| rng.gen_range(-1.0..1.0f32));
        let st = state(vec![0.0; 4], 1.0, 0.5);
        let new = update_geometry(&pos, &st).unwrap();
        for j in 0..4 {
            let mean: f64 = pos.column(j).iter().map(|&v| f64::from(v)).sum::<f64>() / 9.0;
            assert!((new.center[j] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn line_search_matches_dense_grid_oracle() {
        // distances {1,2,3,4} with nu = 0.5: minimum at the (1-nu)-quantile
        // of squared distances (a plateau whose left edge is d^2 = 4)
        let center_dir: Vec<[f32; 2]> = vec![[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0], [0.0, -4.0]];
        let pos = Array2::from_shape_fn((4, 2), |(i, j)| center_dir[i][j]);
        // embeddings centered at origin already: mean = (−0.5, −0.5)... use
        // symmetric points instead so the mean is the origin
        let pos = {
            let mut p = Array2::<f32>::zeros((8, 2));
            for (i, d) in center_dir.iter().enumerate() {
                p[(2 * i, 0)] = d[0];
                p[(2 * i, 1)] = d[1];
                p[(2 * i + 1, 0)] = -d[0];
                p[(2 * i + 1, 1)] = -d[1];
            }
            let _ = pos;
            p
        };
        let st = state(vec![0.0, 0.0], 1.0, 0.5);
        let new = update_geometry(&pos, &st).unwrap();
        // dense grid oracle over u = R^2
        let sq: Vec<f64> = pos
            .rows()
            .into_iter()
            .map(|r| {
                r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>()
            })
            .collect();
        let grid_res = 1e-4;
        let steps = (16.0 / grid_res) as usize;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=steps {
            let u = i as f64 * grid_res;
            let f = radius_objective(u, &sq, 0.5);
            if f < best.0 {
                best = (f, u);
            }
        }
        let ours = radius_objective(new.radius * new.radius, &sq, 0.5);
        assert!(
            (ours - best.0).abs() <= grid_res,
            "objective {ours} vs grid best {} at u={}",
            best.0,
            best.1
        );
        // the closed form seed wins ties: exactly the 4th order statistic
        let mut sorted = sq.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((new.radius * new.radius - sorted[3]).abs() < 1e-9);
    }

    #[test]
    fn at_most_half_outside_after_update() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(9, "sphere", 2);
        for rep in 0..20 {
            let n = rng.gen_range(3..40);
            let pos = Array2::from_shape_fn((n, 6), |_| rng.gen_range(-3.0..3.0f32));
            let st = state(vec![0.0; 6], 1.0, 0.5);
            let new = update_geometry(&pos, &st).unwrap();
            let c = new.center.as_slice().unwrap();
            let outside = pos
                .rows()
                .into_iter()
                .filter(|r| sq_dist(r.as_slice().unwrap(), c) > new.radius * new.radius + 1e-12)
                .count();
            assert!(outside <= n.div_ceil(2), "rep {rep}: {outside} of {n} outside");
        }
    }

    #[test]
    fn score_invariant_under_rotation() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(10, "sphere", 3);
        let d = 8;
        let emb: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let center: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // random orthogonal rotation from a product of Givens rotations
        let mut rot_e = emb.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
        let mut rot_c = center.clone();
        for _ in 0..30 {
            let i = rng.gen_range(0..d);
            let mut j = rng.gen_range(0..d);
            if i == j {
                j = (j + 1) % d;
            }
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            for v in [&mut rot_e, &mut rot_c] {
                let (a, b) = (v[i], v[j]);
                v[i] = c * a - s * b;
                v[j] = s * a + c * b;
            }
        }
        let st1 = state(center, 1.0, 0.5);
        let s1 = coating_score(&emb, &st1).unwrap().value;
        let st2 = state(rot_c.clone(), 1.0, 0.5);
        let e2: Vec<f32> = rot_e.iter().map(|&v| v as f32).collect();
        let s2 = coating_score(&e2, &st2).unwrap().value;
        assert!((s1 - s2).abs() < 1e-4, "{s1} vs {s2}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::nn::rng::stream(12, "sphere", 4);
        let st = state(vec![0.3, -0.2, 0.5], 0.9, 0.5);
        let pos = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.5..1.5f32));
        let neg = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.5..1.5f32));
        let (_, _, gp, gn) = hypersphere_losses_grad(&pos, &neg, &st).unwrap();
        let eps = 1e-4f32;
        let mut worst: f64 = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                let mut pp = pos.clone();
                pp[(i, j)] += eps;
                let (lp1, _) = hypersphere_losses(&pp, &neg, &st).unwrap();
                pp[(i, j)] -= 2.0 * eps;
                let (lp0, _) = hypersphere_losses(&pp, &neg, &st).unwrap();
                let fd = (lp1 - lp0) / f64::from(2.0 * eps);
                let g = f64::from(gp[(i, j)]);
                // skip hinge kinks
                let d_sq = sq_dist(pos.row(i).as_slice().unwrap(), st.center.as_slice().unwrap());
                if (d_sq - st.radius * st.radius).abs() < 1e-2 {
                    continue;
                }
                if fd.abs() > 1e-5 {
                    worst = worst.max((fd - g).abs() / fd.abs());
                } else {
                    assert!(g.abs() < 1e-4);
                }
            }
        }
        for i in 0..4 {
            for j in 0..3 {
                let mut nn = neg.clone();
                nn[(i, j)] += eps;
                let (_, ln1) = hypersphere_losses(&pos, &nn, &st).unwrap();
                nn[(i, j)] -= 2.0 * eps;
                let (_, ln0) = hypersphere_losses(&pos, &nn, &st).unwrap();
                let fd = (ln1 - ln0) / f64::from(2.0 * eps);
                let g = f64::from(gn[(i, j)]);
                if fd.abs() > 1e-5 {
                    worst = worst.max((fd - g).abs() / fd.abs());
                }
            }
        }
        assert!(worst <= 1e-3, "worst rel err {worst}");
    }
}
