//! Two-sample Kolmogorov–Smirnov verification: exact statistic, quantile
//! inversion of the Kolmogorov distribution, resampled TPR estimation, and
//! the empirical FPR check.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::rng::stream;

/// Empirical distribution function of a sample.
#[derive(Debug, Clone)]
pub struct EmpiricalCdf {
    values: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut sample: Vec<f64>) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::domain("empirical CDF of an empty sample"));
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("empirical CDF requires finite values"));
        }
        sample.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { values: sample })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// F(x) = (#values <= x) / size; right-continuous and non-decreasing.
    pub fn evaluate(&self, x: f64) -> f64 {
        let count = self.values.partition_point(|&v| v <= x);
        count as f64 / self.values.len() as f64
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.values
    }
}

/// Outcome of the two-sample K-S test.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KsTestResult {
    /// sup over x of |F(x) - G(x)|, in [0, 1].
    pub statistic: f64,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    /// Quantile of the Kolmogorov distribution at this alpha.
    pub k_alpha: f64,
    /// sqrt((n+m)/(nm)) * K_alpha.
    pub threshold: f64,
    /// True iff statistic - threshold > 0.
    pub reject: bool,
}

/// Kolmogorov survival function Q(x) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 x^2),
/// truncated once a term's magnitude drops below 1e-16.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut acc = 0.0f64;
    let mut k = 1u64;
    loop {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        if term < 1e-16 || k > 100_000 {
            break;
        }
        if k % 2 == 1 {
            acc += term;
        } else {
            acc -= term;
        }
        k += 1;
    }
    (2.0 * acc).clamp(0.0, 1.0)
}

/// Invert the Kolmogorov survival function: the K_alpha with Q(K_alpha) = alpha.
pub fn kolmogorov_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha {alpha} outside (0,1)")));
    }
    // Q is strictly decreasing; bisection on a bracketing interval.
    // Q(0.04) rounds to 1.0 in f64, so the bracket covers every alpha in (0,1).
    let mut lo = 0.04f64;
    let mut hi = 10.0f64;
    debug_assert!(kolmogorov_survival(lo) > alpha && kolmogorov_survival(hi) < alpha);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Exact sup |F - G| via a sorted merge over all sample points. At a tied
/// point both CDFs jump before the difference is evaluated.
pub fn ks_statistic(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::domain("K-S statistic of an empty sample"));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::domain("K-S statistic requires finite values"));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Threshold of the asymptotic two-sample test.
pub fn ks_threshold(n: usize, m: usize, alpha: f64) -> Result<f64> {
    let k_alpha = kolmogorov_quantile(alpha)?;
    Ok(((n + m) as f64 / (n as f64 * m as f64)).sqrt() * k_alpha)
}

/// Two-sample Kolmogorov–Smirnov test at significance level alpha.
pub fn ks_two_sample_test(
    positive_scores: &[f64],
    negative_scores: &[f64],
    alpha: f64,
) -> Result<KsTestResult> {
    let statistic = ks_statistic(positive_scores, negative_scores)?;
    let k_alpha = kolmogorov_quantile(alpha)?;
    let (n, m) = (positive_scores.len(), negative_scores.len());
    let threshold = ((n + m) as f64 / (n as f64 * m as f64)).sqrt() * k_alpha;
    Ok(KsTestResult {
        statistic,
        n,
        m,
        alpha,
        k_alpha,
        threshold,
        reject: statistic - threshold > 0.0,
    })
}

/// Draw `k` distinct indices from `0..pool` by partial Fisher–Yates.
fn sample_without_replacement(
    rng: &mut rand_chacha::ChaCha12Rng,
    pool: usize,
    k: usize,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// K-S statistics of `trials` subsample pairs, one per derived substream.
fn resampled_statistics(
    positive_pool: &[f64],
    negative_pool: &[f64],
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 || m == 0 || trials == 0 {
        return Err(Error::domain("sample sizes and trial count must be positive"));
    }
    if positive_pool.len() < n || negative_pool.len() < m {
        return Err(Error::domain(format!(
            "pool sizes ({}, {}) smaller than requested samples ({n}, {m})",
            positive_pool.len(),
            negative_pool.len()
        )));
    }
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream(seed, "ks-trial", trial as u64);
            let pi = sample_without_replacement(&mut rng, positive_pool.len(), n);
            let ni = sample_without_replacement(&mut rng, negative_pool.len(), m);
            let xs: Vec<f64> = pi.iter().map(|&i| positive_pool[i]).collect();
            let ys: Vec<f64> = ni.iter().map(|&i| negative_pool[i]).collect();
            ks_statistic(&xs, &ys)
        })
        .collect()
}

/// Fraction of resampled tests that reject at level alpha. Each trial draws
/// n positives and m negatives without replacement from the pools.
pub fn resampled_tpr(
    positive_pool: &[f64],
    negative_pool: &[f64],
    n: usize,
    m: usize,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let threshold = ks_threshold(n, m, alpha)?;
    let stats = resampled_statistics(positive_pool, negative_pool, n, m, trials, seed)?;
    let rejects = stats.iter().filter(|&&d| d - threshold > 0.0).count();
    Ok(rejects as f64 / trials as f64)
}

/// TPR at several alphas over one shared set of resampled trials.
pub fn resampled_tpr_table(
    positive_pool: &[f64],
    negative_pool: &[f64],
    n: usize,
    m: usize,
    alphas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let stats = resampled_statistics(positive_pool, negative_pool, n, m, trials, seed)?;
    alphas
        .iter()
        .map(|&alpha| {
            let threshold = ks_threshold(n, m, alpha)?;
            let rejects = stats.iter().filter(|&&d| d - threshold > 0.0).count();
            Ok((alpha, rejects as f64 / trials as f64))
        })
        .collect()
}

/// Empirical false-positive rates with both pools benign.
pub fn fpr_empirical_check(
    benign_pool_a: &[f64],
    benign_pool_b: &[f64],
    alphas: &[f64],
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    resampled_tpr_table(benign_pool_a, benign_pool_b, n, m, alphas, trials, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_known_values() {
        // bisection on the truncated series, tolerance 1e-12
        let k05 = kolmogorov_quantile(0.05).unwrap();
        assert!((k05 - 1.3581).abs() < 1e-3, "{k05}");
        let k50 = kolmogorov_quantile(0.5).unwrap();
        assert!((k50 - 0.8276).abs() < 1e-3, "{k50}");
    }

    #[test]
    fn quantile_monotone_and_invertible() {
        let mut prev = f64::INFINITY;
        for &alpha in &[1e-9, 1e-4, 0.01, 0.1, 0.5, 0.9] {
            let k = kolmogorov_quantile(alpha).unwrap();
            assert!(k < prev, "K must decrease as alpha grows");
            prev = k;
            assert!((kolmogorov_survival(k) - alpha).abs() < 1e-10);
        }
        assert!(kolmogorov_quantile(0.0).is_err());
        assert!(kolmogorov_quantile(1.0).is_err());
    }

    #[test]
    fn identical_samples_never_reject() {
        let s = vec![0.3, 0.7, 0.1, 0.9, 0.5];
        for &alpha in &[0.5, 0.1, 0.01] {
            let r = ks_two_sample_test(&s, &s, alpha).unwrap();
            assert_eq!(r.statistic, 0.0);
            assert!(!r.reject);
        }
    }

    #[test]
    fn fully_separated_samples_reject_at_tiny_alpha() {
        let xs: Vec<f64> = (0..30).map(|i| f64::from(i) / 100.0).collect();
        let ys: Vec<f64> = (0..30).map(|i| 1.0 + f64::from(i) / 100.0).collect();
        let r = ks_two_sample_test(&xs, &ys, 1e-6).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.threshold < 1.0, "sqrt(60/900) K_1e-6 = {} must be < 1", r.threshold);
        assert!(r.reject);
    }

    #[test]
    fn empty_sample_is_domain_error() {
        assert!(ks_two_sample_test(&[], &[1.0], 0.05).is_err());
        assert!(ks_two_sample_test(&[1.0], &[], 0.05).is_err());
    }

    /// Exact p-value by enumerating every way to split the pooled values into
    /// the two samples.
    fn exact_permutation_p(xs: &[f64], ys: &[f64]) -> f64 {
        let observed = ks_statistic(xs, ys).unwrap();
        let mut pooled: Vec<f64> = xs.iter().chain(ys.iter()).copied().collect();
        pooled.sort_by(f64::total_cmp);
        let total = pooled.len();
        let n = xs.len();
        let mut count = 0usize;
        let mut hits = 0usize;
        // iterate over bitmasks with exactly n bits set
        for mask in 0u32..(1 << total) {
            if (mask.count_ones() as usize) != n {
                continue;
            }
            count += 1;
            let mut a = Vec::with_capacity(n);
            let mut b = Vec::with_capacity(total - n);
            for (i, &v) in pooled.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(v);
                } else {
                    b.push(v);
                }
            }
            let d = ks_statistic(&a, &b).unwrap();
            if d >= observed - 1e-12 {
                hits += 1;
            }
        }
        hits as f64 / count as f64
    }

    #[test]
    fn small_sample_decision_agrees_with_permutation_oracle() {
        // n = m = 3 across random draws and alphas
        use rand::Rng;
        let alphas = [0.2, 0.1, 0.05, 0.01];
        for rep in 0..50 {
            let mut rng = stream(99, "perm", rep);
            let xs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let shift = if rep % 2 == 0 { 0.0 } else { 0.9 };
            let ys: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0) + shift).collect();
            let p = exact_permutation_p(&xs, &ys);
            for &alpha in &alphas {
                let r = ks_two_sample_test(&xs, &ys, alpha).unwrap();
                let exact_reject = p <= alpha;
                assert_eq!(
                    r.reject, exact_reject,
                    "rep {rep} alpha {alpha}: asymptotic {} vs exact p {p}",
                    r.statistic
                );
            }
        }
    }

    #[test]
    fn resampled_tpr_null_and_separated() {
        let mut rng = stream(4, "pools", 0);
        use rand::Rng;
        let pool_a: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pool_b: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let alpha = 0.05;
        let trials = 2000;
        let tpr = resampled_tpr(&pool_a, &pool_b, 30, 30, alpha, trials, 7).unwrap();
        let sigma = (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(tpr <= alpha + 3.0 * sigma, "null TPR {tpr} too high");

        let lo: Vec<f64> = (0..100).map(|i| f64::from(i) / 1000.0).collect();
        let hi: Vec<f64> = (0..100).map(|i| 5.0 + f64::from(i) / 1000.0).collect();
        let tpr = resampled_tpr(&lo, &hi, 30, 30, 1e-4, 500, 7).unwrap();
        assert_eq!(tpr, 1.0);
    }

    #[test]
    fn resampled_tpr_is_deterministic_and_validates() {
        let pool: Vec<f64> = (0..60).map(|i| f64::from(i)).collect();
        let a = resampled_tpr(&pool, &pool, 30, 30, 0.05, 200, 3).unwrap();
        let b = resampled_tpr(&pool, &pool, 30, 30, 0.05, 200, 3).unwrap();
        assert_eq!(a, b);
        assert!(resampled_tpr(&pool[..10], &pool, 30, 30, 0.05, 10, 3).is_err());
    }

    #[test]
    fn fpr_check_is_bounded_and_monotone() {
        let mut rng = stream(5, "pools", 1);
        use rand::Rng;
        let pool_a: Vec<f64> = (0..800).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pool_b: Vec<f64> = (0..800).map(|_| rng.gen_range(0.0..1.0)).collect();
        let alphas = [0.05, 0.01, 1e-3];
        let trials = 3000;
        let table =
            fpr_empirical_check(&pool_a, &pool_b, &alphas, 30, 30, trials, 11).unwrap();
        let mut prev = f64::INFINITY;
        for (alpha, fpr) in table {
            let sigma = (alpha * (1.0 - alpha) / trials as f64).sqrt();
            assert!(fpr <= alpha + 3.0 * sigma, "alpha {alpha}: fpr {fpr}");
            assert!(fpr <= prev + 1e-12, "fpr must be non-increasing in alpha order");
            prev = fpr;
        }
    }

    #[test]
    fn empirical_cdf_contract() {
        let cdf = EmpiricalCdf::new(vec![3.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(cdf.evaluate(0.5), 0.0);
        assert_eq!(cdf.evaluate(1.0), 0.25);
        assert_eq!(cdf.evaluate(2.0), 0.75);
        assert_eq!(cdf.evaluate(10.0), 1.0);
        assert!(EmpiricalCdf::new(vec![]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn statistic_in_unit_interval_and_symmetric(
                xs in proptest::collection::vec(-50.0..50.0f64, 1..40),
                ys in proptest::collection::vec(-50.0..50.0f64, 1..40),
            ) {
                let d = ks_statistic(&xs, &ys).unwrap();
                prop_assert!((0.0..=1.0).contains(&d));
                let d_swapped = ks_statistic(&ys, &xs).unwrap();
                prop_assert!((d - d_swapped).abs() < 1e-15);
            }

            #[test]
            fn statistic_invariant_under_monotone_transform(
                xs in proptest::collection::vec(-5.0..5.0f64, 1..30),
                ys in proptest::collection::vec(-5.0..5.0f64, 1..30),
            ) {
                let d = ks_statistic(&xs, &ys).unwrap();
                let f = |v: f64| v.powi(3) + 2.0 * v; // strictly increasing
                let xt: Vec<f64> = xs.iter().map(|&v| f(v)).collect();
                let yt: Vec<f64> = ys.iter().map(|&v| f(v)).collect();
                let dt = ks_statistic(&xt, &yt).unwrap();
                prop_assert!((d - dt).abs() < 1e-12);
            }
        }
    }
}
